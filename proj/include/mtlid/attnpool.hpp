#pragma once

// Task-specific attention pooling.
//
// For each example with hidden states H [L x d]:
//   C     = tanh(H w_a)               [L x 1], zeroed at padded positions
//   s     = C^T W_alpha               [1 x L]
//   alpha = softmax over real positions of s
//   v     = alpha H                   [d]
// W_alpha couples positions, so the layer is defined over the fixed width L.

#include <iomanip>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "mtlid/params.hpp"
#include "mtlid/preprocess.hpp"
#include "mtlid/tensor.hpp"

namespace mtlid {

template <typename T>
struct TaskAttentionOutput {
  Tensor<T> v;      // [B x d]
  Tensor<T> alpha;  // [B x L]
};

template <typename T>
class TaskAttention {
 public:
  TaskAttention(std::string prefix, std::size_t d_model, std::size_t width, ParameterStore<T>& params)
      : prefix_(std::move(prefix)), d_model_(d_model), width_(width) {
    params.create(wa_name(), {d_model, 1}, Init::TruncatedNormal);
    params.create(walpha_name(), {width, width}, Init::TruncatedNormal);
  }

  std::string wa_name() const { return prefix_ + ".attn.w_a"; }
  std::string walpha_name() const { return prefix_ + ".attn.w_alpha"; }

  TaskAttentionOutput<T> forward(const Tensor<T>& hidden, std::span<const std::uint8_t> mask,
                                 const ParameterStore<T>& params) const {
    return task_attention(hidden, mask, params.get(wa_name()), params.get(walpha_name()));
  }

  /// hidden [B x L x d], mask [B*L] (true = real token).
  static TaskAttentionOutput<T> task_attention(const Tensor<T>& hidden,
                                               std::span<const std::uint8_t> mask,
                                               const Tensor<T>& w_a, const Tensor<T>& w_alpha) {
    if (hidden.rank() != 3) throw ShapeError("task attention expects H of rank 3, got " + shape_str(hidden.shape()));
    const std::size_t B = hidden.dim(0), L = hidden.dim(1), d = hidden.dim(2);
    if (w_a.shape() != Shape{d, 1} || w_alpha.shape() != Shape{L, L}) {
      throw ShapeError("task attention parameters " + shape_str(w_a.shape()) + ", " +
                       shape_str(w_alpha.shape()) + " do not fit H " + shape_str(hidden.shape()));
    }
    if (mask.size() != B * L) throw ShapeError("task attention mask does not fit H");
    for (std::size_t b = 0; b < B; ++b) {
      bool any = false;
      for (std::size_t i = 0; i < L; ++i) any = any || mask[b * L + i];
      if (!any) throw MaskError("task attention over a fully masked example " + std::to_string(b));
    }
    auto c = mask_fill_zero(reshape(tanh_elem(matmul(hidden, w_a)), {B, L}), mask);
    auto scores = matmul(c, w_alpha);
    auto alpha = softmax_masked(scores, mask);
    auto v = reshape(bmm(reshape(alpha, {B, 1, L}), hidden), {B, d});
    return {v, alpha};
  }

 private:
  std::string prefix_;
  std::size_t d_model_;
  std::size_t width_;
};

struct TokenWeight {
  std::string token;
  double weight;
};

/// Per example, (token, alpha) for each real position in order.
template <typename T>
std::vector<std::vector<TokenWeight>> attention_report(const Tensor<T>& alpha, const TokenBatch& batch,
                                                       const Vocabulary& vocab) {
  if (alpha.rank() != 2 || alpha.dim(0) != batch.batch || alpha.dim(1) != batch.width) {
    throw ShapeError("attention weights " + shape_str(alpha.shape()) + " do not fit batch");
  }
  std::vector<std::vector<TokenWeight>> out(batch.batch);
  for (std::size_t b = 0; b < batch.batch; ++b) {
    for (std::size_t i = 0; i < batch.width; ++i) {
      const std::size_t k = b * batch.width + i;
      if (!batch.mask[k]) continue;
      out[b].push_back({vocab.token(batch.ids[k]), static_cast<double>(alpha.data()[k])});
    }
  }
  return out;
}

/// token<TAB>weight lines; examples separated by a blank line.
inline void write_attention_report(std::ostream& os, const std::vector<std::vector<TokenWeight>>& report) {
  for (std::size_t b = 0; b < report.size(); ++b) {
    if (b) os << '\n';
    for (const auto& tw : report[b]) {
      os << tw.token << '\t' << std::fixed << std::setprecision(6) << tw.weight << '\n';
    }
  }
}

}  // namespace mtlid
