#pragma once

// JSON documents for run configuration. Objects serialize with sorted keys,
// so dumps are canonical.

#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include <json.hpp>

#include "mtlid/model.hpp"
#include "mtlid/train.hpp"

namespace mtlid {

using Json = nlohmann::json;

class ConfigError : public Error {
 public:
  using Error::Error;
};

struct VocabOptions {
  std::size_t min_frequency = 1;
  std::size_t max_size = 30000;

  bool operator==(const VocabOptions&) const = default;
};

/// Everything a training run needs besides the data.
struct RunConfig {
  EncoderConfig encoder;
  std::size_t hidden_size = 0;
  double weight_country = 1.0;
  double weight_province = 1.0;
  Mode mode = Mode::Mtl;
  TrainConfig train;
  VocabOptions vocab;
};

namespace detail {

inline void reject_unknown(const Json& obj, const std::set<std::string>& allowed, const std::string& where) {
  if (!obj.is_object()) throw ConfigError(where + " must be an object");
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (!allowed.count(it.key())) throw ConfigError("unknown key '" + it.key() + "' in " + where);
  }
}

template <typename V>
void read_opt(const Json& obj, const char* key, V& out, const std::string& where) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<V>();
  } catch (const Json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

}  // namespace detail

inline Json to_json(const EncoderConfig& c) {
  return Json{{"d_model", c.d_model}, {"n_layers", c.n_layers}, {"n_heads", c.n_heads},
              {"d_ff", c.d_ff},       {"max_len", c.max_len},   {"vocab_size", c.vocab_size},
              {"dropout", c.dropout}};
}

inline EncoderConfig encoder_from_json(const Json& j, EncoderConfig c = {}) {
  const std::string where = "encoder";
  detail::reject_unknown(j, {"d_model", "n_layers", "n_heads", "d_ff", "max_len", "vocab_size", "dropout"}, where);
  detail::read_opt(j, "d_model", c.d_model, where);
  detail::read_opt(j, "n_layers", c.n_layers, where);
  detail::read_opt(j, "n_heads", c.n_heads, where);
  detail::read_opt(j, "d_ff", c.d_ff, where);
  detail::read_opt(j, "max_len", c.max_len, where);
  detail::read_opt(j, "vocab_size", c.vocab_size, where);
  detail::read_opt(j, "dropout", c.dropout, where);
  return c;
}

inline Json to_json(const ModelConfig& c) {
  return Json{{"encoder", to_json(c.encoder)},
              {"num_countries", c.num_countries},
              {"num_provinces", c.num_provinces},
              {"hidden_size", c.hidden_size},
              {"mode", mode_name(c.mode)},
              {"weight_country", c.weight_country},
              {"weight_province", c.weight_province},
              {"seed", c.seed}};
}

inline ModelConfig model_from_json(const Json& j) {
  const std::string where = "model";
  detail::reject_unknown(j, {"encoder", "num_countries", "num_provinces", "hidden_size", "mode",
                             "weight_country", "weight_province", "seed"},
                         where);
  ModelConfig c;
  if (j.contains("encoder")) c.encoder = encoder_from_json(j.at("encoder"));
  detail::read_opt(j, "num_countries", c.num_countries, where);
  detail::read_opt(j, "num_provinces", c.num_provinces, where);
  detail::read_opt(j, "hidden_size", c.hidden_size, where);
  detail::read_opt(j, "weight_country", c.weight_country, where);
  detail::read_opt(j, "weight_province", c.weight_province, where);
  detail::read_opt(j, "seed", c.seed, where);
  std::string mode = mode_name(c.mode);
  detail::read_opt(j, "mode", mode, where);
  c.mode = parse_mode(mode);
  return c;
}

inline Json to_json(const TrainConfig& c) {
  return Json{{"learning_rate", c.learning_rate}, {"batch_size", c.batch_size}, {"epochs", c.epochs},
              {"seed", c.seed},                   {"shuffle", c.shuffle},     {"eval_every", c.eval_every},
              {"select_best", c.select_best}};
}

inline Json to_json(const RunConfig& c) {
  Json enc = to_json(c.encoder);
  enc.erase("vocab_size");
  return Json{{"encoder", enc},
              {"model",
               {{"hidden_size", c.hidden_size},
                {"weight_country", c.weight_country},
                {"weight_province", c.weight_province},
                {"mode", mode_name(c.mode)}}},
              {"train", to_json(c.train)},
              {"vocab", {{"min_frequency", c.vocab.min_frequency}, {"max_size", c.vocab.max_size}}}};
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline RunConfig run_config_from_json(const Json& j) {
  detail::reject_unknown(j, {"encoder", "model", "train", "vocab"}, "config");
  RunConfig c;
  if (j.contains("encoder")) {
    const Json& e = j.at("encoder");
    if (e.is_object() && e.contains("vocab_size")) {
      throw ConfigError("encoder.vocab_size is derived from the training corpus");
    }
    c.encoder = encoder_from_json(e, c.encoder);
  }
  if (j.contains("model")) {
    const Json& m = j.at("model");
    detail::reject_unknown(m, {"hidden_size", "weight_country", "weight_province", "mode"}, "model");
    detail::read_opt(m, "hidden_size", c.hidden_size, "model");
    detail::read_opt(m, "weight_country", c.weight_country, "model");
    detail::read_opt(m, "weight_province", c.weight_province, "model");
    std::string mode = mode_name(c.mode);
    detail::read_opt(m, "mode", mode, "model");
    try {
      c.mode = parse_mode(mode);
    } catch (const Error& e) {
      throw ConfigError(e.what());
    }
  }
  if (j.contains("train")) {
    const Json& t = j.at("train");
    const std::string where = "train";
    detail::reject_unknown(t, {"learning_rate", "batch_size", "epochs", "seed", "shuffle", "eval_every", "select_best"},
                           where);
    detail::read_opt(t, "learning_rate", c.train.learning_rate, where);
    detail::read_opt(t, "batch_size", c.train.batch_size, where);
    detail::read_opt(t, "epochs", c.train.epochs, where);
    detail::read_opt(t, "seed", c.train.seed, where);
    detail::read_opt(t, "shuffle", c.train.shuffle, where);
    detail::read_opt(t, "eval_every", c.train.eval_every, where);
    detail::read_opt(t, "select_best", c.train.select_best, where);
  }
  if (j.contains("vocab")) {
    const Json& v = j.at("vocab");
    detail::reject_unknown(v, {"min_frequency", "max_size"}, "vocab");
    detail::read_opt(v, "min_frequency", c.vocab.min_frequency, "vocab");
    detail::read_opt(v, "max_size", c.vocab.max_size, "vocab");
  }
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot read config file " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  Json j;
  try {
    j = Json::parse(ss.str());
  } catch (const Json::parse_error& e) {
    throw ConfigError("config file " + path + ": " + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace mtlid
