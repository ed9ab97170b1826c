// mtlid: train, evaluate and apply multi-task dialect classifiers.

#include <CLI11.hpp>
#include <openssl/evp.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "mtlid/mtlid.hpp"

namespace fs = std::filesystem;
using namespace mtlid;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

/// Errors that belong to the usage contract (exit 2).
class UsageError : public Error {
 public:
  using Error::Error;
};

std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot read " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr)) throw Error("sha256 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[md[i] >> 4]);
    out.push_back(hex[md[i] & 15]);
  }
  return out;
}

std::string file_digest(const std::string& path) { return "sha256:" + sha256_hex(read_file(path)); }

/// Writes via a sibling temporary file and a rename.
void write_atomic(const fs::path& path, const std::string& contents) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw Error("cannot write " + tmp.string());
    os << contents;
    if (!os.flush()) throw Error("failed writing " + tmp.string());
  }
  fs::rename(tmp, path);
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw Error("cannot create directory " + dir);
}

std::optional<std::uint64_t> env_seed() {
  const char* raw = std::getenv("MTLID_SEED");
  if (!raw || !*raw) return std::nullopt;
  char* end = nullptr;
  errno = 0;
  const unsigned long long v = std::strtoull(raw, &end, 10);
  if (errno || *end || raw[0] == '-') throw UsageError(std::string("MTLID_SEED is not an unsigned integer: ") + raw);
  return static_cast<std::uint64_t>(v);
}

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v);
  return buf;
}

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::vector<std::string> sorted_union(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::set<std::string> s(a.begin(), a.end());
  s.insert(b.begin(), b.end());
  return {s.begin(), s.end()};
}

Dataset load_labeled(const std::string& path, const std::vector<std::string>& countries,
                     const std::vector<std::string>& provinces) {
  try {
    return load_tsv(path, countries, provinces);
  } catch (const LabelError& e) {
    throw UsageError(std::string("label-space mismatch with the model: ") + e.what());
  }
}

void warn_flagged(const Dataset& ds, const std::string& path) {
  if (ds.flagged.empty()) return;
  std::cerr << "warning: " << path << ": " << ds.flagged.size() << " example(s) have no text after cleaning (first: "
            << ds.flagged.front() << ")\n";
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string train_path;
  std::string dev_path;
  std::string config_path;
  std::string out_dir;
  std::string mode;
  std::optional<std::uint64_t> seed;
  bool paper_protocol = false;
};

RunConfig resolve_config(const TrainArgs& a, std::uint64_t& seed, std::string& seed_source) {
  Json raw;
  try {
    raw = Json::parse(read_file(a.config_path));
  } catch (const Json::parse_error& e) {
    throw ConfigError("config file " + a.config_path + ": " + e.what());
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  RunConfig cfg = run_config_from_json(raw);
  if (!a.mode.empty()) {
    try {
      cfg.mode = parse_mode(a.mode);
    } catch (const Error& e) {
      throw UsageError(e.what());
    }
  }
  if (a.paper_protocol) cfg.train = paper_protocol(cfg.train);
  const bool config_seed = raw.contains("train") && raw["train"].is_object() && raw["train"].contains("seed");
  if (a.seed) {
    seed = *a.seed;
    seed_source = "flag";
  } else if (config_seed) {
    seed = cfg.train.seed;
    seed_source = "config";
  } else if (auto env = env_seed()) {
    seed = *env;
    seed_source = "env";
  } else {
    seed = cfg.train.seed;
    seed_source = "default";
  }
  cfg.train.seed = seed;
  try {
    cfg.train.validate();
    EncoderConfig probe = cfg.encoder;
    probe.vocab_size = Vocabulary::kReserved + 1;
    probe.validate();
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  if (cfg.vocab.max_size <= Vocabulary::kReserved) throw ConfigError("vocab.max_size must exceed 3");
  return cfg;
}

struct ResolvedTrain {
  RunConfig config;
  std::uint64_t seed = 0;
  std::string seed_source;
  std::string train_path;
  std::string dev_path;
  std::string out_dir;
  Json extra_inputs = Json::object();
  bool paper_protocol = false;
};

int run_training(const ResolvedTrain& a) {
  Stopwatch clock;
  const RunConfig& cfg = a.config;
  const std::uint64_t seed = a.seed;
  auto train_records = load_records(a.train_path);
  auto dev_records = load_records(a.dev_path);
  // Label lists cover both splits so dev-only labels still resolve.
  const Dataset train_probe = Dataset::from_records(train_records);
  const Dataset dev_probe = Dataset::from_records(dev_records);
  const auto countries = sorted_union(train_probe.country_labels, dev_probe.country_labels);
  const auto provinces = sorted_union(train_probe.province_labels, dev_probe.province_labels);
  const Dataset train_ds = Dataset::from_records(train_records, countries, provinces);
  const Dataset dev_ds = Dataset::from_records(dev_records, countries, provinces);
  warn_flagged(train_ds, a.train_path);
  warn_flagged(dev_ds, a.dev_path);

  std::vector<std::string> cleaned;
  for (const auto& e : train_ds.examples) cleaned.push_back(clean_text(e.text));
  Vocabulary vocab = build_vocab(cleaned, cfg.vocab.min_frequency, cfg.vocab.max_size);

  ModelConfig mc;
  mc.encoder = cfg.encoder;
  mc.encoder.vocab_size = vocab.size();
  mc.num_countries = countries.size();
  mc.num_provinces = provinces.size();
  mc.hidden_size = cfg.hidden_size;
  mc.mode = cfg.mode;
  mc.weight_country = cfg.weight_country;
  mc.weight_province = cfg.weight_province;
  mc.seed = seed;
  try {
    mc.validate();
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }

  const auto train_set = encode_dataset(train_ds, vocab, mc.encoder.max_len);
  const auto dev_set = encode_dataset(dev_ds, vocab, mc.encoder.max_len);
  MtlModel<float> model(mc);
  std::cerr << "training " << mode_name(mc.mode) << " model: " << model.params().total_elements()
            << " parameters, " << train_set.size() << " train / " << dev_set.size() << " dev examples, vocab "
            << vocab.size() << "\n";
  auto result = train(model, train_set, &dev_set, cfg.train);
  for (const auto& rec : result.history) {
    char loss[32];
    std::snprintf(loss, sizeof loss, "%.4f", rec.train_loss);
    std::cerr << "epoch " << rec.epoch << " loss=" << loss;
    if (rec.dev && rec.dev->country) std::cerr << " country_f1=" << pct(rec.dev->country->macro_f1);
    if (rec.dev && rec.dev->province) std::cerr << " province_f1=" << pct(rec.dev->province->macro_f1);
    std::cerr << "\n";
  }

  ensure_dir(a.out_dir);
  const fs::path out(a.out_dir);
  const CheckpointMeta meta{vocab, countries, provinces};
  write_atomic(out / "model.ckpt", checkpoint_bytes(model, meta));
  std::ostringstream hist;
  write_history(hist, result.history);
  write_atomic(out / "history.tsv", hist.str());
  save_vocab(vocab, (out / "vocab.txt").string());

  Json manifest;
  manifest["command"] = "train";
  manifest["config"] = to_json(cfg);
  manifest["model"] = to_json(mc);
  manifest["seed"] = seed;
  manifest["seed_source"] = a.seed_source;
  manifest["paper_protocol"] = a.paper_protocol;
  manifest["inputs"] = {{"train", {{"path", a.train_path}, {"digest", file_digest(a.train_path)}}},
                        {"dev", {{"path", a.dev_path}, {"digest", file_digest(a.dev_path)}}}};
  manifest["inputs"].update(a.extra_inputs);
  manifest["artifacts"] = {{"checkpoint", (out / "model.ckpt").string()},
                           {"history", (out / "history.tsv").string()},
                           {"vocab", (out / "vocab.txt").string()}};
  manifest["best_epoch"] = result.best_epoch;
  manifest["duration_seconds"] = clock.seconds();
  write_atomic(out / "manifest.json", manifest.dump(2) + "\n");
  std::cerr << "best epoch " << result.best_epoch << "; wrote " << out.string() << "\n";
  return kExitOk;
}

int cmd_train(const TrainArgs& a) {
  ResolvedTrain r;
  r.config = resolve_config(a, r.seed, r.seed_source);
  r.train_path = a.train_path;
  r.dev_path = a.dev_path;
  r.out_dir = a.out_dir;
  r.paper_protocol = a.paper_protocol;
  r.extra_inputs["config"] = {{"path", a.config_path}, {"digest", file_digest(a.config_path)}};
  return run_training(r);
}

// ---------------------------------------------------------------------------
// eval / predict

int cmd_eval(const std::string& model_path, const std::string& data_path, const std::string& confusion_dir) {
  auto ckpt = load_checkpoint<float>(model_path);
  const auto& meta = ckpt.meta;
  Dataset ds = load_labeled(data_path, meta.country_labels, meta.province_labels);
  warn_flagged(ds, data_path);
  const auto set = encode_dataset(ds, meta.vocab, ckpt.model.config().encoder.max_len);
  auto m = evaluate(ckpt.model, set);
  if (m.country) std::cout << "country f1=" << pct(m.country->macro_f1) << " acc=" << pct(m.country->accuracy) << "\n";
  if (m.province) {
    std::cout << "province f1=" << pct(m.province->macro_f1) << " acc=" << pct(m.province->accuracy) << "\n";
  }
  if (!confusion_dir.empty()) {
    ensure_dir(confusion_dir);
    auto dump = [&](const MetricsReport& r, const std::vector<std::string>& labels, const char* name) {
      std::ostringstream os;
      write_confusion(os, r.confusion, labels);
      write_atomic(fs::path(confusion_dir) / name, os.str());
    };
    if (m.country) dump(*m.country, meta.country_labels, "confusion_country.tsv");
    if (m.province) dump(*m.province, meta.province_labels, "confusion_province.tsv");
  }
  return kExitOk;
}

int cmd_predict(const std::string& model_path, const std::string& in_path, const std::string& out_path,
                const std::string& attention_path) {
  auto ckpt = load_checkpoint<float>(model_path);
  const auto& meta = ckpt.meta;
  const auto& model = ckpt.model;
  const auto items = load_texts(in_path);
  const std::size_t max_len = model.config().encoder.max_len;

  std::ostringstream preds, attn;
  NoGradGuard no_grad;
  constexpr std::size_t kBatch = 64;
  for (std::size_t start = 0; start < items.size(); start += kBatch) {
    const std::size_t end = std::min(items.size(), start + kBatch);
    std::vector<TokenSequence> seqs;
    for (std::size_t i = start; i < end; ++i) seqs.push_back(encode(clean_text(items[i].text), meta.vocab, max_len));
    const auto batch = TokenBatch::from(seqs);
    const auto out = model.forward(batch);
    std::vector<std::int32_t> pc, pp;
    if (out.country_logits) pc = predict(*out.country_logits);
    if (out.province_logits) pp = predict(*out.province_logits);
    for (std::size_t i = 0; i < seqs.size(); ++i) {
      preds << items[start + i].id << '\t' << (pc.empty() ? "-" : meta.country_labels.at(pc[i])) << '\t'
            << (pp.empty() ? "-" : meta.province_labels.at(pp[i])) << '\n';
    }
    if (!attention_path.empty()) {
      auto emit = [&](const std::optional<TaskAttentionOutput<float>>& a, const char* task) {
        if (!a) return;
        const auto report = attention_report(a->alpha, batch, meta.vocab);
        for (std::size_t i = 0; i < report.size(); ++i) {
          attn << items[start + i].id << '\t' << task << '\n';
          write_attention_report(attn, {report[i]});
          attn << '\n';
        }
      };
      emit(out.country_attention, "country");
      emit(out.province_attention, "province");
    }
  }
  write_atomic(out_path, preds.str());
  if (!attention_path.empty()) write_atomic(attention_path, attn.str());
  return kExitOk;
}

// ---------------------------------------------------------------------------
// distribution / synth

int cmd_distribution(const std::string& data_path) {
  const Dataset ds = load_tsv(data_path);
  const auto d = label_distribution(ds);
  std::cout << "task\tlabel\tcount\n";
  for (const auto& lc : d.country) std::cout << "country\t" << lc.label << '\t' << lc.count << '\n';
  for (const auto& lc : d.province) std::cout << "province\t" << lc.label << '\t' << lc.count << '\n';
  std::cerr << ds.size() << " examples, " << d.country.size() << " countries, " << d.province.size()
            << " provinces\n";
  return kExitOk;
}

Json to_json(const SynthConfig& c) {
  return Json{{"n_countries", c.n_countries},
              {"provinces_per_country", c.provinces_per_country},
              {"examples_per_province", c.examples_per_province},
              {"shared_vocab_size", c.shared_vocab_size},
              {"country_signal_tokens", c.country_signal_tokens},
              {"province_signal_tokens", c.province_signal_tokens},
              {"tokens_per_example", c.tokens_per_example},
              {"signal_strength", c.signal_strength},
              {"seed", c.seed}};
}

int cmd_synth(SynthConfig cfg, std::optional<std::uint64_t> seed, const std::string& out_dir) {
  Stopwatch clock;
  if (seed) {
    cfg.seed = *seed;
  } else if (auto env = env_seed()) {
    cfg.seed = *env;
  }
  try {
    cfg.validate();
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
  const auto splits = synth_generate(cfg);
  ensure_dir(out_dir);
  const fs::path out(out_dir);
  Json files = Json::object();
  for (const auto& [name, ds] : {std::pair<const char*, const Dataset*>{"train", &splits.train},
                                 {"dev", &splits.dev},
                                 {"test", &splits.test}}) {
    const auto path = out / (std::string(name) + ".tsv");
    const auto tmp = path.string() + ".tmp";
    write_tsv(*ds, tmp);
    fs::rename(tmp, path);
    files[name] = {{"path", path.string()}, {"digest", file_digest(path.string())}, {"examples", ds->size()}};
  }
  Json manifest{{"command", "synth"},
                {"config", to_json(cfg)},
                {"seed", cfg.seed},
                {"artifacts", files},
                {"duration_seconds", clock.seconds()}};
  write_atomic(out / "manifest.json", manifest.dump(2) + "\n");
  return kExitOk;
}

// ---------------------------------------------------------------------------
// replay

SynthConfig synth_from_json(const Json& j) {
  SynthConfig c;
  c.n_countries = j.at("n_countries").get<std::size_t>();
  c.provinces_per_country = j.at("provinces_per_country").get<std::size_t>();
  c.examples_per_province = j.at("examples_per_province").get<std::size_t>();
  c.shared_vocab_size = j.at("shared_vocab_size").get<std::size_t>();
  c.country_signal_tokens = j.at("country_signal_tokens").get<std::size_t>();
  c.province_signal_tokens = j.at("province_signal_tokens").get<std::size_t>();
  c.tokens_per_example = j.at("tokens_per_example").get<std::size_t>();
  c.signal_strength = j.at("signal_strength").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

void check_input(const Json& input) {
  const auto path = input.at("path").get<std::string>();
  if (file_digest(path) != input.at("digest").get<std::string>()) {
    throw UsageError(path + " differs from the file recorded in the manifest");
  }
}

int cmd_replay(const std::string& manifest_path, const std::string& out_dir) {
  Json m;
  try {
    m = Json::parse(read_file(manifest_path));
  } catch (const Json::exception& e) {
    throw UsageError("manifest " + manifest_path + ": " + e.what());
  }
  try {
    const auto command = m.at("command").get<std::string>();
    if (command == "synth") {
      const SynthConfig cfg = synth_from_json(m.at("config"));
      return cmd_synth(cfg, cfg.seed, out_dir);
    }
    if (command == "train") {
      ResolvedTrain r;
      r.config = run_config_from_json(m.at("config"));
      r.seed = m.at("seed").get<std::uint64_t>();
      r.seed_source = "manifest";
      r.config.train.seed = r.seed;
      r.paper_protocol = m.value("paper_protocol", false);
      const Json& inputs = m.at("inputs");
      check_input(inputs.at("train"));
      check_input(inputs.at("dev"));
      r.train_path = inputs.at("train").at("path").get<std::string>();
      r.dev_path = inputs.at("dev").at("path").get<std::string>();
      r.out_dir = out_dir;
      r.extra_inputs["manifest"] = {{"path", manifest_path}, {"digest", file_digest(manifest_path)}};
      return run_training(r);
    }
    throw UsageError("manifest command '" + command + "' cannot be replayed");
  } catch (const Json::exception& e) {
    throw UsageError("manifest " + manifest_path + ": " + e.what());
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-task country and province dialect identification"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "Train a model and write checkpoint, history and manifest");
  train_cmd->add_option("--train", ta.train_path, "Training TSV")->required();
  train_cmd->add_option("--dev", ta.dev_path, "Dev TSV")->required();
  train_cmd->add_option("--config", ta.config_path, "JSON run configuration")->required();
  train_cmd->add_option("--out", ta.out_dir, "Output directory")->required();
  train_cmd->add_option("--mode", ta.mode, "mtl, country or province")
      ->check(CLI::IsMember({"mtl", "country", "province"}));
  train_cmd->add_option("--seed", ta.seed, "Global seed (falls back to MTLID_SEED)");
  train_cmd->add_flag("--paper-protocol", ta.paper_protocol, "Use lr 1e-5, batch 16, 5 epochs");

  std::string model_path, data_path, confusion_dir, in_path, out_path, attention_path;
  auto* eval_cmd = app.add_subcommand("eval", "Print accuracy and macro-F1 per task");
  eval_cmd->add_option("--model", model_path, "Checkpoint")->required();
  eval_cmd->add_option("--data", data_path, "Labelled TSV")->required();
  eval_cmd->add_option("--confusion", confusion_dir, "Directory for confusion matrices");

  auto* predict_cmd = app.add_subcommand("predict", "Label texts with country and province");
  predict_cmd->add_option("--model", model_path, "Checkpoint")->required();
  predict_cmd->add_option("--in", in_path, "TSV with id and text columns")->required();
  predict_cmd->add_option("--out", out_path, "Output TSV")->required();
  predict_cmd->add_option("--attention", attention_path, "Write task attention weights here");

  auto* dist_cmd = app.add_subcommand("distribution", "Label counts per task");
  dist_cmd->add_option("--data", data_path, "Labelled TSV")->required();

  SynthConfig sc;
  std::optional<std::uint64_t> synth_seed;
  std::string synth_out;
  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic hierarchical corpus");
  synth_cmd->add_option("--countries", sc.n_countries, "Number of countries")->capture_default_str();
  synth_cmd->add_option("--provinces-per-country", sc.provinces_per_country, "Provinces per country")
      ->capture_default_str();
  synth_cmd->add_option("--examples-per-province", sc.examples_per_province, "Examples per province")
      ->capture_default_str();
  synth_cmd->add_option("--shared-vocab", sc.shared_vocab_size, "Shared pool size")->capture_default_str();
  synth_cmd->add_option("--country-tokens", sc.country_signal_tokens, "Signal tokens per country")
      ->capture_default_str();
  synth_cmd->add_option("--province-tokens", sc.province_signal_tokens, "Signal tokens per province")
      ->capture_default_str();
  synth_cmd->add_option("--tokens-per-example", sc.tokens_per_example, "Tokens per text")->capture_default_str();
  synth_cmd->add_option("--signal", sc.signal_strength, "Probability of a class-pool token")->capture_default_str();
  synth_cmd->add_option("--seed", synth_seed, "Seed (falls back to MTLID_SEED, then 7)");
  synth_cmd->add_option("--out", synth_out, "Output directory")->required();

  std::string manifest_path, replay_out;
  auto* replay_cmd = app.add_subcommand("replay", "Re-run a train or synth command from its manifest");
  replay_cmd->add_option("--manifest", manifest_path, "manifest.json of an earlier run")->required();
  replay_cmd->add_option("--out", replay_out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n";
    const CLI::App* failed = &app;
    for (auto* sub : app.get_subcommands()) failed = sub;
    std::cerr << failed->help();
    return kExitUsage;
  }

  try {
    if (*train_cmd) return cmd_train(ta);
    if (*eval_cmd) return cmd_eval(model_path, data_path, confusion_dir);
    if (*predict_cmd) return cmd_predict(model_path, in_path, out_path, attention_path);
    if (*dist_cmd) return cmd_distribution(data_path);
    if (*synth_cmd) return cmd_synth(sc, synth_seed, synth_out);
    if (*replay_cmd) return cmd_replay(manifest_path, replay_out);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const LabelError& e) {
    std::cerr << "label-space mismatch: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
