#include <gtest/gtest.h>

#include <random>

#include "mtlid/encoder.hpp"
#include "support/gradcheck.hpp"

using namespace mtlid;

namespace {

EncoderConfig toy(std::size_t max_len = 8) {
  EncoderConfig c;
  c.d_model = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 16;
  c.max_len = max_len;
  c.vocab_size = 12;
  c.dropout = 0.0;
  return c;
}

TokenSequence seq(std::vector<std::int32_t> tokens, std::size_t width) {
  TokenSequence s;
  s.ids.assign(width, Vocabulary::kPad);
  s.mask.assign(width, 0);
  s.ids[0] = Vocabulary::kCls;
  s.mask[0] = 1;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    s.ids[i + 1] = tokens[i];
    s.mask[i + 1] = 1;
  }
  s.true_length = tokens.size() + 1;
  return s;
}

void randomize(ParameterStore<double>& params, std::uint64_t seed, double scale = 0.5) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-scale, scale);
  for (auto& [name, p] : params) {
    if (name.find("gain") != std::string::npos) continue;
    for (auto& v : p.data()) v = u(rng);
  }
}

}  // namespace

TEST(EncoderConfig, Validation) {
  auto c = toy();
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), Error);
  c = toy();
  c.dropout = 1.0;
  EXPECT_THROW(c.validate(), Error);
}

TEST(Embed, RowsAreFunctionsOfTokenAndPosition) {
  ParameterStore<double> params(1);
  Encoder<double> enc(toy(), params);
  auto batch = TokenBatch::from(std::vector<TokenSequence>{seq({5, 5, 7}, 8), seq({5, 5, 7}, 8)});
  auto e = enc.embed(batch, params);
  ASSERT_EQ(e.shape(), (Shape{2, 8, 8}));
  for (std::size_t i = 0; i < 64; ++i) EXPECT_EQ(e.data()[i], e.data()[64 + i]);
  bool differs = false;
  for (std::size_t j = 0; j < 8; ++j) differs = differs || e.at({0, 1, j}) != e.at({0, 2, j});
  EXPECT_TRUE(differs);

  TokenBatch bad = batch;
  bad.ids[3] = 12;
  EXPECT_THROW(enc.embed(bad, params), ShapeError);
}

TEST(Embed, TableGradientCountsOccurrences) {
  ParameterStore<double> params(2);
  Encoder<double> enc(toy(), params);
  auto batch = TokenBatch::from(std::vector<TokenSequence>{seq({5, 5, 7}, 8), seq({7, 3}, 8)});
  auto& table = params.get("encoder.tok_emb");
  auto res = mtlid::testing::check_gradients([&] { return sum(enc.embed(batch, params)); },
                                             {{"tok_emb", table}}, 1000);
  EXPECT_LT(res.max_rel_error, 1e-6) << res.worst;
  std::vector<double> counts(12, 0.0);
  for (auto id : batch.ids) counts[id] += 1.0;
  for (std::size_t r = 0; r < 12; ++r)
    for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(table.grad()[r * 8 + j], counts[r], 1e-12);
}

TEST(EncodeBatch, IdenticalSequencesGiveIdenticalOutputs) {
  ParameterStore<double> params(3);
  Encoder<double> enc(toy(), params);
  randomize(params, 3);
  auto batch = TokenBatch::from(std::vector<TokenSequence>{seq({4, 9, 6}, 8), seq({4, 9, 6}, 8)});
  auto out = enc.forward(batch, params, {});
  for (std::size_t i = 0; i < 64; ++i) EXPECT_EQ(out.hidden.data()[i], out.hidden.data()[64 + i]);
  for (std::size_t i = 0; i < 8; ++i) {
    EXPECT_EQ(out.pooled.data()[i], out.pooled.data()[8 + i]);
    EXPECT_LT(std::abs(out.pooled.data()[i]), 1.0);
  }
  auto again = enc.forward(batch, params, {});
  EXPECT_TRUE(std::equal(out.hidden.data().begin(), out.hidden.data().end(), again.hidden.data().begin()));
}

TEST(EncodeBatch, PaddingInvariance) {
  ParameterStore<double> narrow_params(4), wide_params(4);
  Encoder<double> narrow(toy(8), narrow_params);
  Encoder<double> wide(toy(12), wide_params);
  randomize(narrow_params, 4);
  // Copy values so the wide model shares every narrow weight; its extra
  // positional rows get distinct values that must not matter.
  for (auto& [name, p] : wide_params) {
    const auto& src = narrow_params.get(name);
    std::copy(src.data().begin(), src.data().end(), p.data().begin());
  }
  const std::vector<std::int32_t> tokens{3, 8, 8, 10};
  auto a = narrow.forward(TokenBatch::from(std::vector<TokenSequence>{seq(tokens, 8)}), narrow_params, {});
  auto b = wide.forward(TokenBatch::from(std::vector<TokenSequence>{seq(tokens, 12)}), wide_params, {});
  for (std::size_t pos = 0; pos <= tokens.size(); ++pos)
    for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(a.hidden.at({0, pos, j}), b.hidden.at({0, pos, j}), 1e-5);
  for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(a.pooled.data()[j], b.pooled.data()[j], 1e-5);
}

TEST(EncodeBatch, AttentionRowsSumToOne) {
  auto cfg = toy();
  cfg.d_model = 4;
  cfg.n_layers = 1;
  cfg.n_heads = 1;
  ParameterStore<double> params(5);
  Encoder<double> enc(cfg, params);
  randomize(params, 5, 1.0);
  auto batch = TokenBatch::from(std::vector<TokenSequence>{seq({1, 2, 3}, 8), seq({}, 8)});
  auto out = enc.forward(batch, params, {});
  ASSERT_EQ(out.attention.size(), 1u);
  const auto& w = out.attention[0];
  for (std::size_t r = 0; r < 2 * 8; ++r) {
    double total = 0;
    for (std::size_t j = 0; j < 8; ++j) {
      const double v = w.data()[r * 8 + j];
      if (!batch.mask[(r / 8) * 8 + j]) EXPECT_EQ(v, 0.0);
      total += v;
    }
    EXPECT_NEAR(total, 1.0, 1e-6);
  }
}

TEST(EncodeBatch, DropoutOnlyInTrainMode) {
  auto cfg = toy();
  cfg.dropout = 0.3;
  ParameterStore<double> params(6);
  Encoder<double> enc(cfg, params);
  randomize(params, 6);
  auto batch = TokenBatch::from(std::vector<TokenSequence>{seq({4, 5, 6}, 8)});
  auto eval1 = enc.forward(batch, params, {});
  auto eval2 = enc.forward(batch, params, {});
  EXPECT_TRUE(std::equal(eval1.pooled.data().begin(), eval1.pooled.data().end(), eval2.pooled.data().begin()));
  Rng rng(1);
  auto trained = enc.forward(batch, params, {true, &rng});
  EXPECT_FALSE(std::equal(eval1.pooled.data().begin(), eval1.pooled.data().end(), trained.pooled.data().begin()));
  EXPECT_THROW(enc.forward(batch, params, {true, nullptr}), Error);
}

TEST(EncodeBatch, EveryParameterReceivesGradient) {
  ParameterStore<double> params(7);
  Encoder<double> enc(toy(), params);
  randomize(params, 7);
  std::mt19937_64 rng(7);
  auto batch = TokenBatch::from(std::vector<TokenSequence>{seq({3, 4, 5, 6, 7, 8, 9}, 8), seq({10, 11, 3}, 8),
                                                           seq({3, 4, 5, 6, 7, 8, 9}, 8)});
  auto probe = mtlid::testing::random_tensor({3, 8, 8}, rng, -1, 1, false);
  auto probe2 = mtlid::testing::random_tensor({3, 8}, rng, -1, 1, false);
  auto out = enc.forward(batch, params, {});
  add(sum(mul(out.hidden, probe)), sum(mul(out.pooled, probe2))).backward();
  for (const auto& [name, p] : params) {
    ASSERT_TRUE(p.has_grad()) << name;
    double mag = 0;
    for (double g : p.grad()) mag += std::abs(g);
    EXPECT_GT(mag, 0.0) << name;
  }
}

TEST(EncodeBatch, GradientsMatchFiniteDifferences) {
  ParameterStore<double> params(8);
  auto cfg = toy();
  cfg.n_layers = 1;
  Encoder<double> enc(cfg, params);
  randomize(params, 8);
  std::mt19937_64 rng(8);
  auto batch = TokenBatch::from(std::vector<TokenSequence>{seq({3, 4, 5}, 8), seq({6, 7, 8, 9, 10}, 8)});
  auto probe = mtlid::testing::random_tensor({2, 8}, rng, -1, 1, false);
  std::vector<std::pair<std::string, Tensor<double>>> inputs;
  for (auto& [name, p] : params) inputs.emplace_back(name, p);
  auto res = mtlid::testing::check_gradients([&] { return sum(mul(enc.forward(batch, params, {}).pooled, probe)); },
                                             inputs, 20);
  EXPECT_LT(res.max_rel_error, 1e-5) << res.worst;
}
