#pragma once

// Multi-task identification network: shared encoder, one attention pooling
// layer and one classifier per task. Each classifier reads the pooled [CLS]
// vector concatenated with its task vector v and applies
// tanh(z W1 + b1) W2 + b2.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mtlid/attnpool.hpp"
#include "mtlid/encoder.hpp"
#include "mtlid/params.hpp"
#include "mtlid/tensor.hpp"

namespace mtlid {

enum class Mode { Mtl, SingleCountry, SingleProvince };

inline std::string mode_name(Mode m) {
  switch (m) {
    case Mode::Mtl:
      return "mtl";
    case Mode::SingleCountry:
      return "country";
    case Mode::SingleProvince:
      return "province";
  }
  return "mtl";
}

inline Mode parse_mode(const std::string& s) {
  if (s == "mtl") return Mode::Mtl;
  if (s == "country") return Mode::SingleCountry;
  if (s == "province") return Mode::SingleProvince;
  throw Error("unknown mode '" + s + "' (expected mtl, country or province)");
}

struct ModelConfig {
  EncoderConfig encoder;
  std::size_t num_countries = 21;
  std::size_t num_provinces = 100;
  std::size_t hidden_size = 0;  // 0 selects d_model
  Mode mode = Mode::Mtl;
  double weight_country = 1.0;
  double weight_province = 1.0;
  std::uint64_t seed = 0;

  bool has_country() const { return mode != Mode::SingleProvince; }
  bool has_province() const { return mode != Mode::SingleCountry; }
  std::size_t hidden() const { return hidden_size ? hidden_size : encoder.d_model; }

  void validate() const {
    encoder.validate();
    if (has_country() && num_countries < 2) throw Error("country head needs at least 2 classes");
    if (has_province() && num_provinces < 2) throw Error("province head needs at least 2 classes");
    if (weight_country < 0.0 || weight_province < 0.0) throw Error("loss weights must be nonnegative");
  }

  bool operator==(const ModelConfig&) const = default;
};

template <typename T>
struct ModelOutput {
  EncoderOutput<T> encoder;
  std::optional<TaskAttentionOutput<T>> country_attention;
  std::optional<TaskAttentionOutput<T>> province_attention;
  std::optional<Tensor<T>> country_logits;   // [B x l]
  std::optional<Tensor<T>> province_logits;  // [B x k]
};

struct LossReport {
  double country = 0.0;
  double province = 0.0;
  double total = 0.0;
};

template <typename T>
struct Loss {
  Tensor<T> total;
  LossReport report;
};

template <typename T>
class MtlModel {
 public:
  explicit MtlModel(const ModelConfig& config)
      : config_(validated(config)), params_(config.seed), encoder_(config.encoder, params_) {
    const std::size_t d = config.encoder.d_model;
    const std::size_t width = config.encoder.max_len;
    if (config.has_country()) {
      country_attention_.emplace("country", d, width, params_);
      add_classifier("country", config.num_countries);
    }
    if (config.has_province()) {
      province_attention_.emplace("province", d, width, params_);
      add_classifier("province", config.num_provinces);
    }
  }

  MtlModel(const MtlModel&) = delete;
  MtlModel& operator=(const MtlModel&) = delete;
  MtlModel(MtlModel&&) noexcept = default;
  MtlModel& operator=(MtlModel&&) noexcept = default;

  const ModelConfig& config() const { return config_; }
  ParameterStore<T>& params() { return params_; }
  const ParameterStore<T>& params() const { return params_; }
  const Encoder<T>& encoder() const { return encoder_; }

  ModelOutput<T> forward(const TokenBatch& batch, const ForwardContext& ctx = {}) const {
    if (batch.width != config_.encoder.max_len) {
      throw ShapeError("batch width " + std::to_string(batch.width) + " must equal max_len " +
                       std::to_string(config_.encoder.max_len));
    }
    ModelOutput<T> out;
    out.encoder = encoder_.forward(batch, params_, ctx);
    const std::span<const std::uint8_t> mask(batch.mask);
    if (country_attention_) {
      out.country_attention = country_attention_->forward(out.encoder.hidden, mask, params_);
      out.country_logits = classify("country", out.encoder.pooled, out.country_attention->v);
    }
    if (province_attention_) {
      out.province_attention = province_attention_->forward(out.encoder.hidden, mask, params_);
      out.province_logits = classify("province", out.encoder.pooled, out.province_attention->v);
    }
    return out;
  }

  /// Weighted sum of per-task mean cross-entropies; an absent head
  /// contributes nothing.
  Loss<T> compute_loss(const ModelOutput<T>& out, std::span<const std::int32_t> country_labels,
                       std::span<const std::int32_t> province_labels) const {
    std::optional<Tensor<T>> total;
    LossReport report;
    if (out.country_logits) {
      auto lc = cross_entropy_from_logits(*out.country_logits, country_labels);
      report.country = static_cast<double>(lc.item());
      total = scale(lc, static_cast<T>(config_.weight_country));
    }
    if (out.province_logits) {
      auto lp = cross_entropy_from_logits(*out.province_logits, province_labels);
      report.province = static_cast<double>(lp.item());
      auto weighted = scale(lp, static_cast<T>(config_.weight_province));
      total = total ? add(*total, weighted) : weighted;
    }
    if (!total) throw Error("model has no classification head");
    report.total = static_cast<double>(total->item());
    return {*total, report};
  }

 private:
  static const ModelConfig& validated(const ModelConfig& c) {
    c.validate();
    return c;
  }

  void add_classifier(const std::string& task, std::size_t classes) {
    const std::size_t d = config_.encoder.d_model;
    const std::size_t hidden = config_.hidden();
    params_.create(task + ".cls.w1", {2 * d, hidden}, Init::TruncatedNormal);
    params_.create(task + ".cls.b1", {hidden}, Init::Zeros);
    params_.create(task + ".cls.w2", {hidden, classes}, Init::TruncatedNormal);
    params_.create(task + ".cls.b2", {classes}, Init::Zeros);
  }

  Tensor<T> classify(const std::string& task, const Tensor<T>& pooled, const Tensor<T>& v) const {
    auto z = concat_last(pooled, v);
    auto h = tanh_elem(add_bias(matmul(z, params_.get(task + ".cls.w1")), params_.get(task + ".cls.b1")));
    return add_bias(matmul(h, params_.get(task + ".cls.w2")), params_.get(task + ".cls.b2"));
  }

  ModelConfig config_;
  ParameterStore<T> params_;
  Encoder<T> encoder_;
  std::optional<TaskAttention<T>> country_attention_;
  std::optional<TaskAttention<T>> province_attention_;
};

/// Row-wise argmax; ties resolve to the lowest index.
template <typename T>
std::vector<std::int32_t> predict(const Tensor<T>& logits) {
  if (logits.rank() != 2 || logits.dim(1) == 0) {
    throw ShapeError("predict expects logits [B x c], got " + shape_str(logits.shape()));
  }
  const std::size_t B = logits.dim(0), c = logits.dim(1);
  std::vector<std::int32_t> out(B);
  for (std::size_t b = 0; b < B; ++b) {
    const T* row = logits.data().data() + b * c;
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j) {
      if (row[j] > row[best]) best = j;
    }
    out[b] = static_cast<std::int32_t>(best);
  }
  return out;
}

}  // namespace mtlid
