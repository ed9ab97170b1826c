// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// non-zero if any of them fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "mtlid/mtlid.hpp"
#include "support/gradcheck.hpp"

using namespace mtlid;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Verdict {
  bool pass = true;
  std::string detail;
};

int failures = 0;

void report(int n, const char* name, const Verdict& v) {
  std::printf("criterion %d %s: %s (%s)\n", n, name, v.pass ? "PASS" : "FAIL", v.detail.c_str());
  std::fflush(stdout);
  if (!v.pass) ++failures;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// d=8, one layer, one head, width 8, 3 countries, 6 provinces.
ModelConfig toy_config(Mode mode = Mode::Mtl, std::size_t vocab = 16) {
  ModelConfig c;
  c.encoder.d_model = 8;
  c.encoder.n_layers = 1;
  c.encoder.n_heads = 1;
  c.encoder.d_ff = 32;
  c.encoder.max_len = 8;
  c.encoder.vocab_size = vocab;
  c.encoder.dropout = 0.0;
  c.num_countries = 3;
  c.num_provinces = 6;
  c.mode = mode;
  c.seed = 5;
  return c;
}

TokenBatch random_batch(std::size_t B, std::size_t L, std::size_t vocab, std::mt19937_64& rng) {
  std::vector<TokenSequence> seqs;
  for (std::size_t b = 0; b < B; ++b) {
    TokenSequence s;
    s.ids.assign(L, Vocabulary::kPad);
    s.mask.assign(L, 0);
    s.true_length = 1 + rng() % L;
    s.ids[0] = Vocabulary::kCls;
    for (std::size_t i = 0; i < s.true_length; ++i) {
      if (i) s.ids[i] = static_cast<std::int32_t>(3 + rng() % (vocab - 3));
      s.mask[i] = 1;
    }
    seqs.push_back(s);
  }
  return TokenBatch::from(seqs);
}

std::vector<std::int32_t> random_labels(std::size_t n, std::size_t classes, std::mt19937_64& rng) {
  std::vector<std::int32_t> y(n);
  for (auto& v : y) v = static_cast<std::int32_t>(rng() % classes);
  return y;
}

Verdict gradient_suite() {
  const auto t0 = Clock::now();
  MtlModel<double> model(toy_config());
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-0.3, 0.3);
  for (auto& [name, p] : model.params()) {
    if (name.find("gain") != std::string::npos) continue;
    for (auto& v : p.data()) v = u(rng);
  }
  auto batch = random_batch(4, 8, 16, rng);
  auto yc = random_labels(4, 3, rng), yp = random_labels(4, 6, rng);
  double worst = 0;
  std::size_t checked = 0, params = 0;
  std::string where;
  for (auto& [name, p] : model.params()) {
    auto res = mtlid::testing::check_gradients(
        [&] { return model.compute_loss(model.forward(batch), yc, yp).total; }, {{name, p}}, 50, 1e-4,
        1 + params++);
    checked += res.checked;
    if (res.checked < std::min<std::size_t>(50, p.numel())) worst = 1e300;
    if (res.max_rel_error >= worst) {
      worst = res.max_rel_error;
      where = res.worst;
    }
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-4 && secs < 60.0,
          fmt("%zu parameters, %zu coordinates, max rel error %.3g at %s, %.1fs", params, checked, worst,
              where.c_str(), secs)};
}

Verdict attention_contract() {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-3, 3);
  double worst_sum = 0, worst_hull = 0;
  std::size_t masked_nonzero = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t B = 1 + rng() % 4, L = 2 + rng() % 10, d = 1 + rng() % 8;
    std::vector<double> h(B * L * d);
    for (auto& v : h) v = u(rng);
    Tensor<double> H({B, L, d}, h);
    std::vector<std::uint8_t> mask(B * L, 0);
    std::vector<std::size_t> len(B);
    for (std::size_t b = 0; b < B; ++b) {
      len[b] = 1 + rng() % L;
      for (std::size_t i = 0; i < len[b]; ++i) mask[b * L + i] = 1;
    }
    auto wa = mtlid::testing::random_tensor({d, 1}, rng, -2, 2);
    auto walpha = mtlid::testing::random_tensor({L, L}, rng, -2, 2);
    auto out = TaskAttention<double>::task_attention(H, mask, wa, walpha);
    for (std::size_t b = 0; b < B; ++b) {
      double total = 0;
      for (std::size_t i = 0; i < L; ++i) {
        const double a = out.alpha.data()[b * L + i];
        if (mask[b * L + i]) total += a;
        else if (a != 0.0) ++masked_nonzero;
      }
      worst_sum = std::max(worst_sum, std::abs(total - 1.0));
      for (std::size_t j = 0; j < d; ++j) {
        double lo = 1e300, hi = -1e300;
        for (std::size_t i = 0; i < len[b]; ++i) {
          lo = std::min(lo, h[(b * L + i) * d + j]);
          hi = std::max(hi, h[(b * L + i) * d + j]);
        }
        const double v = out.v.data()[b * d + j];
        worst_hull = std::max({worst_hull, lo - v, v - hi});
      }
    }
  }
  return {worst_sum <= 1e-6 && masked_nonzero == 0 && worst_hull <= 1e-6,
          fmt("max |sum-1| %.3g, nonzero masked weights %zu, max hull excess %.3g", worst_sum, masked_nonzero,
              worst_hull)};
}

Verdict loss_decomposition() {
  std::mt19937_64 rng(3);
  MtlModel<double> model(toy_config());
  double worst_sum = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t B = 1 + rng() % 8;
    auto batch = random_batch(B, 8, 16, rng);
    auto l = model.compute_loss(model.forward(batch), random_labels(B, 3, rng), random_labels(B, 6, rng));
    worst_sum = std::max(worst_sum, std::abs(l.total.item() - (l.report.country + l.report.province)));
  }
  ModelConfig cc = toy_config();
  cc.weight_province = 0.0;
  double worst_grad = 0;
  std::size_t compared = 0;
  for (int trial = 0; trial < 20; ++trial) {
    MtlModel<double> mtl(cc);
    MtlModel<double> single(toy_config(Mode::SingleCountry));
    const std::size_t B = 1 + rng() % 8;
    auto batch = random_batch(B, 8, 16, rng);
    auto yc = random_labels(B, 3, rng), yp = random_labels(B, 6, rng);
    mtl.compute_loss(mtl.forward(batch), yc, yp).total.backward();
    single.compute_loss(single.forward(batch), yc, yp).total.backward();
    for (const auto& [name, p] : single.params()) {
      const auto& q = mtl.params().get(name);
      if (p.shape() != q.shape()) return {false, "shape differs for " + name};
      for (std::size_t i = 0; i < p.numel(); ++i) {
        if (p.data()[i] != q.data()[i]) return {false, "initial value differs for " + name};
        worst_grad = std::max(worst_grad, std::abs(p.grad()[i] - q.grad()[i]));
        ++compared;
      }
    }
  }
  return {worst_sum < 1e-7 && worst_grad <= 1e-6,
          fmt("max |total-(country+province)| %.3g over 1000 batches; max gradient gap %.3g over %zu values",
              worst_sum, worst_grad, compared)};
}

Verdict metric_oracle() {
  std::mt19937_64 rng(4);
  std::size_t mismatches = 0, zero_support = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t c = 1 + rng() % 8, n = rng() % 50, used = 1 + rng() % c;
    std::vector<std::int32_t> gold(n), pred(n);
    for (auto& v : gold) v = static_cast<std::int32_t>(rng() % used);
    for (auto& v : pred) v = static_cast<std::int32_t>(rng() % c);
    auto r = evaluate_predictions(gold, pred, c);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < n; ++i) hits += gold[i] == pred[i];
    const double acc = n ? static_cast<double>(hits) / static_cast<double>(n) : 0.0;
    double f1_sum = 0;
    bool ok = r.accuracy == acc;
    for (std::size_t k = 0; k < c; ++k) {
      const auto K = static_cast<std::int32_t>(k);
      std::size_t tp = 0, fp = 0, fn = 0;
      for (std::size_t i = 0; i < n; ++i) {
        tp += gold[i] == K && pred[i] == K;
        fp += gold[i] != K && pred[i] == K;
        fn += gold[i] == K && pred[i] != K;
      }
      if (tp + fn == 0) ++zero_support;
      const double prec = tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
      const double rec = tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
      const double f1 = prec + rec > 0 ? 2.0 * prec * rec / (prec + rec) : 0.0;
      f1_sum += f1;
      ok = ok && r.per_class[k].f1 == f1 && r.per_class[k].precision == prec && r.per_class[k].recall == rec;
      for (std::size_t j = 0; j < c; ++j) {
        std::size_t cell = 0;
        for (std::size_t i = 0; i < n; ++i) cell += gold[i] == K && pred[i] == static_cast<std::int32_t>(j);
        ok = ok && r.confusion[k][j] == cell;
      }
    }
    ok = ok && r.macro_f1 == f1_sum / static_cast<double>(c);
    mismatches += !ok;
  }
  return {mismatches == 0, fmt("%zu mismatches in 10000 cases, %zu zero-support classes", mismatches, zero_support)};
}

Verdict overfit_check() {
  std::vector<std::string> lines;
  bool pass = true;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    SynthConfig sc;
    sc.n_countries = 3;
    sc.provinces_per_country = 2;
    sc.examples_per_province = 12;
    sc.shared_vocab_size = 50;
    sc.country_signal_tokens = 4;
    sc.province_signal_tokens = 4;
    sc.tokens_per_example = 7;
    sc.signal_strength = 0.5;
    sc.seed = seed;
    auto s = synth_generate(sc);
    Dataset all = s.train;
    for (const auto* part : {&s.dev, &s.test})
      all.examples.insert(all.examples.end(), part->examples.begin(), part->examples.end());
    Rng rng(seed);
    detail::fisher_yates(all.examples, rng);
    all.examples.resize(64);
    std::vector<std::string> texts;
    for (const auto& e : all.examples) texts.push_back(clean_text(e.text));
    auto vocab = build_vocab(texts, 1, 1000);
    auto set = encode_dataset(all, vocab, 8);
    ModelConfig c = toy_config(Mode::Mtl, vocab.size());
    c.seed = seed;
    MtlModel<float> model(c);
    TrainConfig t;
    t.learning_rate = 1e-3;
    t.epochs = 200;
    t.batch_size = 4;
    t.seed = seed;
    t.select_best = false;
    auto r = train(model, set, nullptr, t);
    std::size_t down = 0;
    for (std::size_t e = 1; e < r.history.size(); ++e) down += r.history[e].train_loss <= r.history[e - 1].train_loss;
    const double frac = static_cast<double>(down) / static_cast<double>(r.history.size() - 1);
    auto m = evaluate(model, set);
    pass = pass && frac >= 0.9 && m.country->accuracy == 1.0 && m.province->accuracy == 1.0;
    lines.push_back(fmt("seed %lu: acc %.3f/%.3f, loss down %zu/%zu", static_cast<unsigned long>(seed),
                        m.country->accuracy, m.province->accuracy, down, r.history.size() - 1));
  }
  std::string d;
  for (const auto& l : lines) d += (d.empty() ? "" : "; ") + l;
  return {pass, d};
}

Verdict mtl_benefit() {
  const auto t0 = Clock::now();
  double sum[2] = {0, 0};
  std::string d;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    SynthConfig sc;
    sc.n_countries = 6;
    sc.provinces_per_country = 3;
    sc.examples_per_province = 200;
    sc.signal_strength = 0.3;
    sc.seed = seed;
    auto s = synth_generate(sc);
    std::vector<std::string> texts;
    for (const auto& e : s.train.examples) texts.push_back(clean_text(e.text));
    auto vocab = build_vocab(texts, 1, 30000);
    auto tr = encode_dataset(s.train, vocab, 16);
    auto dv = encode_dataset(s.dev, vocab, 16);
    double f[2];
    for (int arm = 0; arm < 2; ++arm) {
      ModelConfig c;
      c.encoder.d_model = 32;
      c.encoder.n_layers = 1;
      c.encoder.n_heads = 2;
      c.encoder.d_ff = 64;
      c.encoder.max_len = 16;
      c.encoder.dropout = 0.1;
      c.encoder.vocab_size = vocab.size();
      c.num_countries = 6;
      c.num_provinces = 18;
      c.mode = arm ? Mode::SingleProvince : Mode::Mtl;
      c.seed = seed;
      MtlModel<float> model(c);
      TrainConfig t;
      t.learning_rate = 1e-3;
      t.batch_size = 16;
      t.epochs = 30;
      t.seed = seed;
      t.select_best = false;
      train(model, tr, nullptr, t);
      f[arm] = evaluate(model, dv).province->macro_f1;
      sum[arm] += f[arm];
    }
    d += fmt("seed %lu mtl %.4f single %.4f; ", static_cast<unsigned long>(seed), f[0], f[1]);
  }
  const double gain = 100.0 * (sum[0] - sum[1]) / 5.0;
  const double secs = seconds_since(t0);
  d += fmt("mean mtl %.4f single %.4f, gain %+.2f points (need >= +2.00), %.0fs", sum[0] / 5, sum[1] / 5, gain, secs);
  return {gain >= 2.0 && secs < 900.0, d};
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

Verdict determinism() {
  const auto dir = std::filesystem::temp_directory_path() / "mtlid_acceptance";
  std::filesystem::create_directories(dir);
  SynthConfig sc;
  sc.n_countries = 3;
  sc.provinces_per_country = 2;
  sc.examples_per_province = 30;
  sc.shared_vocab_size = 60;
  sc.country_signal_tokens = 4;
  sc.province_signal_tokens = 4;
  sc.tokens_per_example = 7;
  sc.seed = 7;
  auto s = synth_generate(sc);
  std::vector<std::string> texts;
  for (const auto& e : s.train.examples) texts.push_back(clean_text(e.text));
  auto vocab = build_vocab(texts, 1, 1000);
  auto tr = encode_dataset(s.train, vocab, 8);
  auto dv = encode_dataset(s.dev, vocab, 8);
  ModelConfig c = toy_config(Mode::Mtl, vocab.size());
  c.encoder.dropout = 0.1;
  TrainConfig t;
  t.epochs = 4;
  t.seed = 7;
  std::string hist[2];
  std::optional<MtlModel<float>> kept;
  for (int run = 0; run < 2; ++run) {
    MtlModel<float> m(c);
    auto r = train(m, tr, &dv, t);
    const auto path = dir / ("history" + std::to_string(run) + ".tsv");
    {
      std::ofstream os(path, std::ios::binary);
      write_history(os, r.history);
    }
    hist[run] = slurp(path);
    if (run == 0) kept.emplace(std::move(m));
  }
  const auto& model = *kept;
  const CheckpointMeta meta{vocab, s.train.country_labels, s.train.province_labels};
  const auto first = dir / "a.ckpt", second = dir / "b.ckpt";
  save_checkpoint(model, meta, first.string());
  auto loaded = load_checkpoint<float>(first.string());
  save_checkpoint(loaded.model, loaded.meta, second.string());
  const bool ckpt_same = slurp(first) == slurp(second);
  auto a = model.forward(TokenBatch::from(dv.sequences));
  auto b = loaded.model.forward(TokenBatch::from(dv.sequences));
  const bool logits_same =
      std::equal(a.country_logits->data().begin(), a.country_logits->data().end(), b.country_logits->data().begin()) &&
      std::equal(a.province_logits->data().begin(), a.province_logits->data().end(),
                 b.province_logits->data().begin());
  const bool preds_same = predict_all(model, dv.sequences).province == predict_all(loaded.model, dv.sequences).province;
  std::filesystem::remove_all(dir);
  const bool hist_same = !hist[0].empty() && hist[0] == hist[1];
  return {hist_same && ckpt_same && logits_same && preds_same,
          fmt("history identical %s, checkpoint identical %s, logits bitwise equal %s, predictions equal %s",
              hist_same ? "yes" : "no", ckpt_same ? "yes" : "no", logits_same ? "yes" : "no",
              preds_same ? "yes" : "no")};
}

Verdict preprocessing_fidelity() {
  auto declared = [](char32_t cp) {
    return cp == 0x0640 || cp == 0x0670 || (cp >= 0x064B && cp <= 0x065F);
  };
  std::mt19937_64 rng(8);
  std::size_t bad_removal = 0, not_idempotent = 0, removed = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    std::u32string in, expect;
    const std::size_t n = rng() % 40;
    for (std::size_t i = 0; i < n; ++i) {
      const char32_t cp = rng() % 8 == 0 ? U' ' : static_cast<char32_t>(0x0600 + rng() % 0x100);
      in.push_back(cp);
      if (declared(cp)) ++removed;
      else expect.push_back(cp);
    }
    const std::string once = clean_text(utf8::encode(in));
    bad_removal += once != utf8::encode(expect);
    not_idempotent += clean_text(once) != once;
  }
  for (char32_t cp = 0x0600; cp <= 0x06FF; ++cp) {
    const std::string one = utf8::encode(std::u32string(1, cp));
    bad_removal += clean_text(one) != (declared(cp) ? "" : one);
  }
  return {bad_removal == 0 && not_idempotent == 0,
          fmt("%zu wrong outputs, %zu non-idempotent, %zu code points removed", bad_removal, not_idempotent,
              removed)};
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Verdict()>>> checks{
      {"gradient suite", gradient_suite},           {"attention contract", attention_contract},
      {"loss decomposition", loss_decomposition},   {"metric oracle", metric_oracle},
      {"overfit check", overfit_check},             {"mtl benefit", mtl_benefit},
      {"determinism and round-trip", determinism},  {"preprocessing fidelity", preprocessing_fidelity},
  };
  for (std::size_t i = 0; i < checks.size(); ++i) {
    Verdict v;
    try {
      v = checks[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    report(static_cast<int>(i + 1), checks[i].first, v);
  }
  return failures ? 1 : 0;
}
