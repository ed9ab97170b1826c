#pragma once

// Checkpoint layout (all integers little-endian):
//   "MTLD" | u16 version = 1 | u32 length + UTF-8 JSON config document
//   then for each parameter in name order:
//   u32 length + UTF-8 name | u8 rank | rank x u32 dims | float32 data

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "mtlid/config.hpp"
#include "mtlid/model.hpp"
#include "mtlid/preprocess.hpp"

namespace mtlid {

class CheckpointError : public Error {
 public:
  using Error::Error;
};

inline constexpr char kCheckpointMagic[4] = {'M', 'T', 'L', 'D'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

/// What a checkpoint carries alongside the parameters.
struct CheckpointMeta {
  Vocabulary vocab;
  std::vector<std::string> country_labels;
  std::vector<std::string> province_labels;
};

template <typename T>
struct Checkpoint {
  MtlModel<T> model;
  CheckpointMeta meta;
};

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void bytes(std::string_view s) { buf_.append(s); }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s);
  }
  const std::string& buffer() const { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string data) : data_(std::move(data)) {}
  bool done() const { return pos_ == data_.size(); }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(data_[pos_++]);
  }
  std::uint16_t u16() {
    std::uint16_t v = 0;
    for (int i = 0; i < 2; ++i) v |= static_cast<std::uint16_t>(u8()) << (8 * i);
    return v;
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string str() { return bytes(u32()); }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw CheckpointError("checkpoint is truncated or corrupt");
  }
  std::string data_;
  std::size_t pos_ = 0;
};

inline Json checkpoint_document(const ModelConfig& cfg, const CheckpointMeta& meta) {
  return Json{{"model", to_json(cfg)},
              {"vocab", meta.vocab.regular_tokens()},
              {"country_labels", meta.country_labels},
              {"province_labels", meta.province_labels}};
}

}  // namespace detail

/// Serialized checkpoint bytes; parameters are stored as float32.
template <typename T>
std::string checkpoint_bytes(const MtlModel<T>& model, const CheckpointMeta& meta) {
  detail::ByteWriter w;
  w.bytes(std::string_view(kCheckpointMagic, 4));
  w.u16(kCheckpointVersion);
  w.str(detail::checkpoint_document(model.config(), meta).dump());
  for (const auto& [name, p] : model.params()) {
    w.str(name);
    w.u8(static_cast<std::uint8_t>(p.rank()));
    for (auto d : p.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (T v : p.data()) w.f32(static_cast<float>(v));
  }
  return w.buffer();
}

template <typename T>
void save_checkpoint(const MtlModel<T>& model, const CheckpointMeta& meta, const std::string& path) {
  const std::string bytes = checkpoint_bytes(model, meta);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("cannot write checkpoint " + path);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw CheckpointError("failed writing checkpoint " + path);
}

template <typename T>
Checkpoint<T> checkpoint_from_bytes(std::string bytes) {
  detail::ByteReader r(std::move(bytes));
  if (r.bytes(4) != std::string_view(kCheckpointMagic, 4)) throw CheckpointError("not a checkpoint (bad magic)");
  const auto version = r.u16();
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  Json doc;
  try {
    doc = Json::parse(r.str());
  } catch (const Json::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint config: ") + e.what());
  }
  ModelConfig cfg;
  CheckpointMeta meta;
  try {
    cfg = model_from_json(doc.at("model"));
    meta.vocab = Vocabulary::from_tokens(doc.at("vocab").get<std::vector<std::string>>());
    meta.country_labels = doc.at("country_labels").get<std::vector<std::string>>();
    meta.province_labels = doc.at("province_labels").get<std::vector<std::string>>();
  } catch (const Json::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint config: ") + e.what());
  }
  if (meta.vocab.size() != cfg.encoder.vocab_size) throw CheckpointError("vocabulary size disagrees with config");
  MtlModel<T> model(cfg);
  std::set<std::string> seen;
  while (!r.done()) {
    const std::string name = r.str();
    if (!model.params().contains(name)) throw CheckpointError("unexpected parameter " + name);
    if (!seen.insert(name).second) throw CheckpointError("duplicate parameter " + name);
    auto& p = model.params().get(name);
    Shape shape(r.u8());
    for (auto& d : shape) d = r.u32();
    if (shape != p.shape()) {
      throw CheckpointError("parameter " + name + " has shape " + shape_str(shape) + ", config expects " +
                            shape_str(p.shape()));
    }
    for (auto& v : p.data()) v = static_cast<T>(r.f32());
  }
  if (seen.size() != model.params().size()) throw CheckpointError("checkpoint is missing parameters");
  return {std::move(model), std::move(meta)};
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot read checkpoint " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return checkpoint_from_bytes<T>(ss.str());
}

}  // namespace mtlid
