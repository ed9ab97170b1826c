#pragma once

// Compact BERT-style transformer encoder: token + learned positional
// embeddings, post-norm blocks of masked multi-head self-attention and a GELU
// feed-forward, and a tanh pooler over position 0.

#include <cmath>
#include <string>
#include <vector>

#include "mtlid/params.hpp"
#include "mtlid/preprocess.hpp"
#include "mtlid/tensor.hpp"

namespace mtlid {

struct EncoderConfig {
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::size_t d_ff = 256;
  std::size_t max_len = 64;
  std::size_t vocab_size = 0;
  double dropout = 0.1;

  void validate() const {
    if (!d_model || !n_layers || !n_heads || !d_ff || !max_len || !vocab_size) {
      throw Error("encoder dimensions must all be positive");
    }
    if (d_model % n_heads != 0) throw Error("n_heads must divide d_model");
    if (max_len < 2) throw Error("max_len must be at least 2");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw Error("dropout must lie in [0, 1)");
  }

  bool operator==(const EncoderConfig&) const = default;
};

template <typename T>
struct EncoderOutput {
  Tensor<T> hidden;  // [B x L x d]
  Tensor<T> pooled;  // [B x d]
  std::vector<Tensor<T>> attention;  // per layer, [B*heads x L x L]
};

/// Per-call state for stochastic layers.
struct ForwardContext {
  bool train_mode = false;
  Rng* rng = nullptr;
};

template <typename T>
class Encoder {
 public:
  Encoder(const EncoderConfig& config, ParameterStore<T>& params, std::string prefix = "encoder")
      : config_(config), prefix_(std::move(prefix)) {
    config_.validate();
    const std::size_t d = config_.d_model;
    params.create(name("tok_emb"), {config_.vocab_size, d}, Init::TruncatedNormal);
    params.create(name("pos_emb"), {config_.max_len, d}, Init::TruncatedNormal);
    for (std::size_t l = 0; l < config_.n_layers; ++l) {
      for (const char* w : {"wq", "wk", "wv", "wo"}) {
        params.create(layer(l, std::string("attn.") + w), {d, d}, Init::TruncatedNormal);
        params.create(layer(l, std::string("attn.b") + (w + 1)), {d}, Init::Zeros);
      }
      params.create(layer(l, "ln1.gain"), {d}, Init::Ones);
      params.create(layer(l, "ln1.bias"), {d}, Init::Zeros);
      params.create(layer(l, "ff.w1"), {d, config_.d_ff}, Init::TruncatedNormal);
      params.create(layer(l, "ff.b1"), {config_.d_ff}, Init::Zeros);
      params.create(layer(l, "ff.w2"), {config_.d_ff, d}, Init::TruncatedNormal);
      params.create(layer(l, "ff.b2"), {d}, Init::Zeros);
      params.create(layer(l, "ln2.gain"), {d}, Init::Ones);
      params.create(layer(l, "ln2.bias"), {d}, Init::Zeros);
    }
    params.create(name("pooler.w"), {d, d}, Init::TruncatedNormal);
    params.create(name("pooler.b"), {d}, Init::Zeros);
  }

  const EncoderConfig& config() const { return config_; }

  /// Token embedding plus positional embedding: [B x L x d].
  Tensor<T> embed(const TokenBatch& batch, const ParameterStore<T>& params) const {
    check_batch(batch);
    const std::size_t B = batch.batch, L = batch.width, d = config_.d_model;
    for (auto id : batch.ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab_size) {
        throw ShapeError("token id " + std::to_string(id) + " outside vocabulary of size " +
                         std::to_string(config_.vocab_size));
      }
    }
    std::vector<std::int32_t> positions(B * L);
    for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<std::int32_t>(i % L);
    auto tok = embedding(params.get(name("tok_emb")), std::span<const std::int32_t>(batch.ids));
    auto pos = embedding(params.get(name("pos_emb")), std::span<const std::int32_t>(positions));
    return reshape(add(tok, pos), {B, L, d});
  }

  EncoderOutput<T> forward(const TokenBatch& batch, const ParameterStore<T>& params,
                           const ForwardContext& ctx) const {
    const std::size_t B = batch.batch, L = batch.width, d = config_.d_model;
    const std::size_t heads = config_.n_heads, dh = d / heads;
    EncoderOutput<T> out;
    Tensor<T> x = embed(batch, params);

    // Key mask expanded to [B*heads x L x L].
    std::vector<std::uint8_t> key_mask(B * heads * L * L);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < L; ++i)
          for (std::size_t j = 0; j < L; ++j)
            key_mask[((b * heads + h) * L + i) * L + j] = batch.mask[b * L + j];

    const T inv_sqrt_dh = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
    auto split_heads = [&](const Tensor<T>& t) {
      return reshape(permute_0213(reshape(t, {B, L, heads, dh})), {B * heads, L, dh});
    };
    for (std::size_t l = 0; l < config_.n_layers; ++l) {
      auto proj = [&](const char* w) {
        return add_bias(matmul(x, params.get(layer(l, std::string("attn.") + w))),
                        params.get(layer(l, std::string("attn.b") + (w + 1))));
      };
      auto q = split_heads(proj("wq"));
      auto k = split_heads(proj("wk"));
      auto v = split_heads(proj("wv"));
      auto scores = scale(bmm(q, transpose_last2(k)), inv_sqrt_dh);
      auto weights = softmax_masked(scores, std::span<const std::uint8_t>(key_mask));
      out.attention.push_back(weights);
      auto ctx_heads = bmm(weights, v);  // [B*heads x L x dh]
      auto merged = reshape(permute_0213(reshape(ctx_heads, {B, heads, L, dh})), {B, L, d});
      auto attn_out = maybe_dropout(proj_out(merged, params, l), ctx);
      x = layer_norm(add(x, attn_out), params.get(layer(l, "ln1.gain")),
                     params.get(layer(l, "ln1.bias")));

      auto ff = gelu(add_bias(matmul(x, params.get(layer(l, "ff.w1"))), params.get(layer(l, "ff.b1"))));
      ff = maybe_dropout(add_bias(matmul(ff, params.get(layer(l, "ff.w2"))), params.get(layer(l, "ff.b2"))),
                         ctx);
      x = layer_norm(add(x, ff), params.get(layer(l, "ln2.gain")), params.get(layer(l, "ln2.bias")));
    }
    out.hidden = x;
    out.pooled = tanh_elem(add_bias(matmul(select_position(x, 0), params.get(name("pooler.w"))),
                                    params.get(name("pooler.b"))));
    return out;
  }

 private:
  std::string name(const std::string& leaf) const { return prefix_ + "." + leaf; }
  std::string layer(std::size_t l, const std::string& leaf) const {
    return prefix_ + ".layer" + std::to_string(l) + "." + leaf;
  }

  Tensor<T> proj_out(const Tensor<T>& merged, const ParameterStore<T>& params, std::size_t l) const {
    return add_bias(matmul(merged, params.get(layer(l, "attn.wo"))), params.get(layer(l, "attn.bo")));
  }

  Tensor<T> maybe_dropout(const Tensor<T>& t, const ForwardContext& ctx) const {
    if (!ctx.train_mode || config_.dropout <= 0.0) return t;
    if (!ctx.rng) throw Error("training-mode forward pass needs an RNG");
    return dropout(t, config_.dropout, *ctx.rng);
  }

  void check_batch(const TokenBatch& batch) const {
    if (batch.batch == 0) throw ShapeError("empty batch");
    if (batch.width == 0 || batch.width > config_.max_len) {
      throw ShapeError("batch width " + std::to_string(batch.width) + " exceeds max_len " +
                       std::to_string(config_.max_len));
    }
    if (batch.ids.size() != batch.batch * batch.width || batch.mask.size() != batch.ids.size()) {
      throw ShapeError("malformed token batch");
    }
  }

  EncoderConfig config_;
  std::string prefix_;
};

}  // namespace mtlid
