#pragma once

#include <cstdio>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "mtlid/adam.hpp"
#include "mtlid/data.hpp"
#include "mtlid/metrics.hpp"
#include "mtlid/model.hpp"
#include "mtlid/preprocess.hpp"

namespace mtlid {

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t batch_size = 16;
  std::size_t epochs = 5;
  std::uint64_t seed = 13;
  bool shuffle = true;
  std::size_t eval_every = 1;
  /// Restore the epoch with the best dev macro-F1 on the selection task.
  bool select_best = true;

  void validate() const {
    if (batch_size < 1) throw Error("batch_size must be >= 1");
    if (epochs < 1) throw Error("epochs must be >= 1");
    if (!(learning_rate > 0.0)) throw Error("learning_rate must be positive");
  }

  bool operator==(const TrainConfig&) const = default;
};

/// Learning rate, batch size and epoch count used with a pretrained encoder.
inline TrainConfig paper_protocol(TrainConfig base = {}) {
  base.learning_rate = 1e-5;
  base.batch_size = 16;
  base.epochs = 5;
  return base;
}

struct EncodedSet {
  std::vector<TokenSequence> sequences;
  std::vector<std::int32_t> country;
  std::vector<std::int32_t> province;

  std::size_t size() const { return sequences.size(); }
};

inline EncodedSet encode_dataset(const Dataset& ds, const Vocabulary& vocab, std::size_t max_len) {
  EncodedSet out;
  out.sequences.reserve(ds.size());
  for (const auto& e : ds.examples) {
    out.sequences.push_back(encode(clean_text(e.text), vocab, max_len));
    out.country.push_back(e.country);
    out.province.push_back(e.province);
  }
  return out;
}

struct TaskMetrics {
  std::optional<MetricsReport> country;
  std::optional<MetricsReport> province;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  std::optional<TaskMetrics> dev;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
};

namespace detail {

inline void check_label_space(const ModelConfig& cfg, const EncodedSet& set, const char* what) {
  for (std::size_t i = 0; i < set.size(); ++i) {
    if (cfg.has_country() && (set.country[i] < 0 || static_cast<std::size_t>(set.country[i]) >= cfg.num_countries)) {
      throw LabelError(std::string(what) + ": country label " + std::to_string(set.country[i]) +
                       " outside the model's " + std::to_string(cfg.num_countries) + " classes");
    }
    if (cfg.has_province() &&
        (set.province[i] < 0 || static_cast<std::size_t>(set.province[i]) >= cfg.num_provinces)) {
      throw LabelError(std::string(what) + ": province label " + std::to_string(set.province[i]) +
                       " outside the model's " + std::to_string(cfg.num_provinces) + " classes");
    }
  }
}

inline TokenBatch gather(const EncodedSet& set, std::span<const std::size_t> idx) {
  std::vector<const TokenSequence*> seqs;
  seqs.reserve(idx.size());
  for (auto i : idx) seqs.push_back(&set.sequences[i]);
  return TokenBatch::from(std::span<const TokenSequence* const>(seqs));
}

inline double selection_score(const TaskMetrics& m, Mode mode) {
  if (mode == Mode::SingleProvince) return m.province ? m.province->macro_f1 : 0.0;
  return m.country ? m.country->macro_f1 : 0.0;
}

}  // namespace detail

/// Predicted class ids per task, dropout off.
struct Predictions {
  std::vector<std::int32_t> country;
  std::vector<std::int32_t> province;
};

template <typename T>
Predictions predict_all(const MtlModel<T>& model, std::span<const TokenSequence> sequences,
                           std::size_t batch_size = 64) {
  NoGradGuard no_grad;
  Predictions out;
  for (std::size_t start = 0; start < sequences.size(); start += batch_size) {
    const std::size_t end = std::min(sequences.size(), start + batch_size);
    std::vector<const TokenSequence*> seqs;
    for (std::size_t i = start; i < end; ++i) seqs.push_back(&sequences[i]);
    auto batch = TokenBatch::from(std::span<const TokenSequence* const>(seqs));
    auto fwd = model.forward(batch);
    if (fwd.country_logits) {
      auto p = predict(*fwd.country_logits);
      out.country.insert(out.country.end(), p.begin(), p.end());
    }
    if (fwd.province_logits) {
      auto p = predict(*fwd.province_logits);
      out.province.insert(out.province.end(), p.begin(), p.end());
    }
  }
  return out;
}

template <typename T>
TaskMetrics evaluate(const MtlModel<T>& model, const EncodedSet& set) {
  if (set.size() == 0) throw Error("cannot evaluate on an empty dataset");
  detail::check_label_space(model.config(), set, "evaluation data");
  auto pred = predict_all(model, std::span<const TokenSequence>(set.sequences));
  TaskMetrics m;
  if (model.config().has_country()) {
    m.country = evaluate_predictions(set.country, pred.country, model.config().num_countries);
  }
  if (model.config().has_province()) {
    m.province = evaluate_predictions(set.province, pred.province, model.config().num_provinces);
  }
  return m;
}

/// Mean loss over a set with dropout off.
template <typename T>
LossReport mean_loss(const MtlModel<T>& model, const EncodedSet& set, std::size_t batch_size = 64) {
  NoGradGuard no_grad;
  LossReport total;
  std::vector<std::size_t> idx(set.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t start = 0; start < set.size(); start += batch_size) {
    const std::size_t end = std::min(set.size(), start + batch_size);
    std::span<const std::size_t> chunk(idx.data() + start, end - start);
    auto batch = detail::gather(set, chunk);
    std::vector<std::int32_t> yc, yp;
    for (auto i : chunk) {
      yc.push_back(set.country[i]);
      yp.push_back(set.province[i]);
    }
    auto loss = model.compute_loss(model.forward(batch), yc, yp);
    const double w = static_cast<double>(chunk.size());
    total.country += loss.report.country * w;
    total.province += loss.report.province * w;
    total.total += loss.report.total * w;
  }
  const double n = static_cast<double>(set.size());
  return {total.country / n, total.province / n, total.total / n};
}

/// Shuffled mini-batch Adam training. The last partial batch is kept. When
/// dev data is given it is scored every eval_every epochs, and with
/// select_best the parameters of the best-scoring epoch are restored.
template <typename T>
TrainResult train(MtlModel<T>& model, const EncodedSet& train_set, const EncodedSet* dev_set,
                  const TrainConfig& cfg) {
  cfg.validate();
  if (train_set.size() == 0) throw Error("training set is empty");
  if (dev_set && dev_set->size() == 0) throw Error("dev set is empty");
  detail::check_label_space(model.config(), train_set, "training data");
  if (dev_set) detail::check_label_space(model.config(), *dev_set, "dev data");

  auto& params = model.params();
  AdamState<T> adam(params, AdamOptions{cfg.learning_rate});
  Rng shuffle_rng(derive_seed(cfg.seed, "shuffle"));
  Rng dropout_rng(derive_seed(cfg.seed, "dropout"));
  ForwardContext ctx{true, &dropout_rng};

  TrainResult result;
  std::optional<std::map<std::string, std::vector<T>>> best;
  double best_score = -1.0;
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    if (cfg.shuffle) detail::fisher_yates(order, shuffle_rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::span<const std::size_t> chunk(order.data() + start, end - start);
      auto batch = detail::gather(train_set, chunk);
      std::vector<std::int32_t> yc, yp;
      for (auto i : chunk) {
        yc.push_back(train_set.country[i]);
        yp.push_back(train_set.province[i]);
      }
      auto loss = model.compute_loss(model.forward(batch, ctx), yc, yp);
      loss.total.backward();
      adam.step(params);
      params.zero_grad();
      loss_sum += loss.report.total * static_cast<double>(chunk.size());
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(order.size());
    if (dev_set && cfg.eval_every && epoch % cfg.eval_every == 0) {
      rec.dev = evaluate(model, *dev_set);
      const double score = detail::selection_score(*rec.dev, model.config().mode);
      if (score > best_score) {
        best_score = score;
        result.best_epoch = epoch;
        if (cfg.select_best) best = params.snapshot();
      }
    }
    result.history.push_back(std::move(rec));
  }
  if (best && result.best_epoch != cfg.epochs) params.restore(*best);
  if (!best) result.best_epoch = cfg.epochs;
  return result;
}

/// epoch, train_loss, dev_acc_country, dev_f1_country, dev_acc_province,
/// dev_f1_province; "-" where a value does not exist.
inline void write_history(std::ostream& os, const std::vector<EpochRecord>& history) {
  auto num = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return std::string(buf);
  };
  for (const auto& rec : history) {
    os << rec.epoch << '\t' << num(rec.train_loss);
    const MetricsReport* c = rec.dev && rec.dev->country ? &*rec.dev->country : nullptr;
    const MetricsReport* p = rec.dev && rec.dev->province ? &*rec.dev->province : nullptr;
    os << '\t' << (c ? num(c->accuracy) : "-") << '\t' << (c ? num(c->macro_f1) : "-");
    os << '\t' << (p ? num(p->accuracy) : "-") << '\t' << (p ? num(p->macro_f1) : "-");
    os << '\n';
  }
}

}  // namespace mtlid
