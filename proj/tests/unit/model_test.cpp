// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "kurtq/kure.hpp"
#include "kurtq/model.hpp"
#include "kurtq/rng.hpp"

namespace kurtq::model {
namespace {

ModelConfig small_config(std::size_t blocks = 1) {
  ModelConfig c;
  c.num_blocks = blocks;
  c.d_model = 4;
  c.num_heads = 2;
  c.d_ff = 6;
  c.vocab = 5;
  c.seq_len = 3;
  c.num_classes = 3;
  return c;
}

TokenBatch random_tokens(Rng& rng, const ModelConfig& c, std::size_t batch) {
  TokenBatch out(batch, std::vector<int>(c.seq_len));
  for (auto& row : out)
    for (auto& t : row) t = static_cast<int>(rng.below(c.vocab));
  return out;
}

void set_all(ModelParams& p, float v, std::string_view suffix) {
  for (auto& e : p)
    if (e.name.ends_with(suffix))
      for (auto& x : e.value.data()) x = v;
}

TEST(Config, Validation) {
  ModelConfig c;
  c.num_heads = 3;
  EXPECT_THROW(c.validate(), ParameterError);
  c.num_heads = 0;
  EXPECT_THROW(c.validate(), ParameterError);
  EXPECT_NO_THROW(ModelConfig{}.validate());
}

TEST(Layout, SixWeightMatricesPerBlockWithStableNames) {
  ModelConfig c;
  c.num_blocks = 3;
  std::size_t matrices = 0;
  for (const auto& [name, shape] : parameter_layout(c))
    if (name.starts_with("block1.") && name.ends_with(".w")) ++matrices;
  EXPECT_EQ(matrices, 6u);
  Rng a(1), b(1);
  EXPECT_EQ(init_params(a, c, NormalDist{}).names(), init_params(b, c, NormalDist{}).names());
}

TEST(Attention, SingleKeyIdentityReturnsInput) {
  ModelConfig c = small_config();
  c.num_heads = 1;
  Rng rng(1);
  ModelParams p = init_params(rng, c, NormalDist{});
  for (const char* proj : {"query", "key", "value", "out"})
    p.at(std::string("block0.attn.") + proj + ".w") = Tensor::identity(c.d_model);
  ad::Tape tape;
  auto bnd = bind(tape, p);
  const Tensor x = Tensor::matrix({{0, 1, 0, 0}, {0, 0, 0, 1}});
  ad::Var out = attention_sublayer(tape, bnd, c, 0, tape.constant(x), 2, nullptr);
  EXPECT_EQ(tape.value(out), x);
}

TEST(Attention, ZeroWeightsLeaveLayerNormOfResidual) {
  ModelConfig c = small_config();
  Rng rng(2);
  ModelParams p = init_params(rng, c, NormalDist{});
  set_all(p, 0.0f, ".w");
  ad::Tape tape;
  auto bnd = bind(tape, p);
  const Tensor x = rand_tensor(rng, {6, 4}, NormalDist{});
  ad::Var out = attention_block(tape, bnd, c, 0, tape.constant(x), 2, nullptr);
  EXPECT_EQ(tape.value(out), layer_norm(x, Tensor::ones({4}), Tensor::zeros({4}), kLayerNormEps));
}

TEST(Attention, QatWithNonClippingScalesStaysClose) {
  ModelConfig c;
  c.num_blocks = 1;
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    ModelParams p = init_params(rng, c, NormalDist{0, 1.0 / std::sqrt(double(c.d_model))});
    const Tensor x = rand_tensor(rng, {2 * c.seq_len, c.d_model}, UniformDist{-1, 1});
    ad::Tape t1, t2;
    auto b1 = bind(t1, p), b2 = bind(t2, p);
    QatState qat(true);
    const Tensor plain = t1.value(attention_sublayer(t1, b1, c, 0, t1.constant(x), 2, nullptr));
    const Tensor quant = t2.value(attention_sublayer(t2, b2, c, 0, t2.constant(x), 2, &qat));
    double worst = 0;
    for (std::size_t i = 0; i < plain.numel(); ++i) worst = std::max(worst, double(std::abs(plain[i] - quant[i])));
    EXPECT_LE(worst, 0.05);
    EXPECT_GT(worst, 0.0);
  }
}

TEST(Ffn, IdentityWeightsDoubleNonNegativeInput) {
  ModelConfig c = small_config();
  c.d_ff = c.d_model;
  Rng rng(4);
  ModelParams p = init_params(rng, c, NormalDist{});
  p.at("block0.ffn.fc1.w") = Tensor::identity(4);
  p.at("block0.ffn.fc2.w") = Tensor::identity(4);
  ad::Tape tape;
  auto bnd = bind(tape, p);
  const Tensor x = rand_tensor(rng, {3, 4}, UniformDist{0, 2});
  ad::Var out = ffn_block(tape, bnd, c, 0, tape.constant(x), nullptr);
  const Tensor expected = layer_norm(scale(x, 2.0f), Tensor::ones({4}), Tensor::zeros({4}), kLayerNormEps);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(tape.value(out)[i], expected[i], 1e-5);
}

TEST(Ffn, ReluKillAndZeroWeights) {
  ModelConfig c = small_config();
  c.d_ff = c.d_model;
  Rng rng(5);
  ModelParams p = init_params(rng, c, NormalDist{});
  p.at("block0.ffn.fc1.w") = Tensor::identity(4);
  const Tensor neg = rand_tensor(rng, {3, 4}, UniformDist{-2, -0.1});
  const Tensor ln_neg = layer_norm(neg, Tensor::ones({4}), Tensor::zeros({4}), kLayerNormEps);
  {
    ad::Tape tape;
    auto bnd = bind(tape, p);
    EXPECT_EQ(tape.value(ffn_block(tape, bnd, c, 0, tape.constant(neg), nullptr)), ln_neg);
  }
  set_all(p, 0.0f, ".w");
  const Tensor x = rand_tensor(rng, {3, 4}, NormalDist{});
  ad::Tape tape;
  auto bnd = bind(tape, p);
  EXPECT_EQ(tape.value(ffn_block(tape, bnd, c, 0, tape.constant(x), nullptr)),
            layer_norm(x, Tensor::ones({4}), Tensor::zeros({4}), kLayerNormEps));
}

TEST(Forward, ZeroBlocksIsHeadOfMeanEmbedding) {
  ModelConfig c = small_config(0);
  Rng rng(6);
  ModelParams p = init_params(rng, c, NormalDist{});
  p.at("head.b") = Tensor::vector({0.1f, -0.2f, 0.3f});
  const TokenBatch tokens{{0, 4, 4}, {1, 2, 3}};
  const Tensor logits = predict(p, c, tokens);
  const Tensor& emb = p.at("embed.w");
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t k = 0; k < 3; ++k) {
      double acc = p.at("head.b")[k];
      for (std::size_t j = 0; j < 4; ++j) {
        double mean = 0;
        for (int t : tokens[b]) mean += emb.at(static_cast<std::size_t>(t), j);
        acc += mean / 3 * p.at("head.w").at(j, k);
      }
      EXPECT_NEAR(logits.at(b, k), acc, 1e-6);
    }
  }
}

TEST(Forward, DeterministicAndValidatesTokens) {
  ModelConfig c;
  Rng rng(7);
  ModelParams p = init_params(rng, c, NormalDist{0, 0.02});
  const TokenBatch tokens = random_tokens(rng, c, 4);
  EXPECT_EQ(predict(p, c, tokens), predict(p, c, tokens));
  EXPECT_EQ(predict(p, c, tokens).shape(), (Shape{4, c.num_classes}));
  EXPECT_THROW(predict(p, c, {{0, 99}}), InputError);
  EXPECT_THROW(predict(p, c, {{0, -1}}), InputError);
}

TEST(Forward, QatOffIsBitwisePlain) {
  ModelConfig c;
  Rng rng(8);
  ModelParams p = init_params(rng, c, NormalDist{0, 0.1});
  const TokenBatch tokens = random_tokens(rng, c, 3);
  QatState off(false);
  EXPECT_EQ(predict(p, c, tokens, &off), predict(p, c, tokens));
  EXPECT_TRUE(off.calibrators().empty());
}

TEST(Forward, FakeQuantSitesAreExactlyTheMatmulInputs) {
  for (std::size_t blocks : {0u, 1u, 2u, 3u}) {
    ModelConfig c;
    c.num_blocks = blocks;
    Rng rng(9);
    ModelParams p = init_params(rng, c, NormalDist{0, 0.1});
    QatState qat(true);
    ad::Tape tape;
    auto bnd = bind(tape, p);
    forward(tape, bnd, c, random_tokens(rng, c, 2), &qat);
    // Two operands for each of the 8 matmuls per block, plus the head.
    EXPECT_EQ(tape.count_ops("fake_quant"), 16 * blocks + 2);
    EXPECT_EQ(tape.count_ops("matmul"), 8 * blocks + 1);
    EXPECT_EQ(qat.calibrators().size(), activation_sites(c).size());
  }
}

TEST(Forward, EveryParameterReceivesGradient) {
  ModelConfig c;
  Rng rng(10);
  ModelParams p = init_params(rng, c, NormalDist{0, 0.2});
  const TokenBatch tokens = random_tokens(rng, c, 4);
  ad::Tape tape;
  auto bnd = bind(tape, p);
  ad::Var logits = forward(tape, bnd, c, tokens, nullptr);
  EXPECT_TRUE(all_finite(tape.value(logits)));
  tape.backward(ad::cross_entropy(tape, logits, {0, 1, 1, 0}));
  for (std::size_t i = 0; i < p.size(); ++i) {
    double norm = 0, ref = 0;
    for (float g : tape.grad(bnd.vars[i]).data()) norm += std::abs(g);
    for (float v : p[i].value.data()) ref += std::abs(v);
    if (p[i].name.ends_with("attn.key.b")) {
      // Softmax is shift-invariant per row, so a key bias only adds a
      // per-query constant to the scores: its exact gradient is zero.
      EXPECT_LT(norm, 1e-6) << p[i].name;
    } else {
      EXPECT_GT(norm, 0.0) << p[i].name;
    }
  }
}

// Double-precision gradient checks through the real model code.
ModelParamsD random_params_d(Rng& rng, const ModelConfig& c) {
  ModelParams p = init_params(rng, c, NormalDist{0, 0.6});
  for (auto& e : p)
    if (!e.name.ends_with(".w"))
      for (auto& v : e.value.data()) v += static_cast<float>(rng.normal() * 0.3);
  return p.cast<double>();
}

TEST(ModelGradCheck, AttentionFfnAndFullLossAcrossSeeds) {
  const ModelConfig c = small_config(2);
  for (int seed = 0; seed < 100; ++seed) {
    Rng rng(static_cast<std::uint64_t>(seed) + 77);
    const ModelParamsD p = random_params_d(rng, c);
    const TensorD x = rand_tensor(rng, {2 * c.seq_len, c.d_model}, NormalDist{}).cast<double>();
    const TensorD mix = rand_tensor(rng, {2 * c.seq_len, c.d_model}, NormalDist{}).cast<double>();

    auto attn = [&](ad::TapeD& t, ad::Var v) {
      auto b = bind(t, p, false);
      return ad::sum(t, ad::mul(t, attention_block(t, b, c, 0, v, 2, nullptr), t.constant(mix)));
    };
    EXPECT_LT(ad::grad_check<double>(attn, x, 1e-5), 1e-3) << "attention seed " << seed;

    auto ffn = [&](ad::TapeD& t, ad::Var v) {
      auto b = bind(t, p, false);
      return ad::sum(t, ad::mul(t, ffn_block(t, b, c, 1, v, nullptr), t.constant(mix)));
    };
    EXPECT_LT(ad::grad_check<double>(ffn, x, 1e-5), 1e-3) << "ffn seed " << seed;

    // Full forward + cross-entropy, differentiated w.r.t. one parameter that
    // rotates with the seed so every tensor gets covered.
    const std::size_t which = static_cast<std::size_t>(seed) % p.size();
    const TokenBatch tokens = random_tokens(rng, c, 2);
    const std::vector<int> labels{static_cast<int>(rng.below(3)), static_cast<int>(rng.below(3))};
    auto full = [&](ad::TapeD& t, ad::Var v) {
      auto b = bind(t, p, false);
      b.vars[which] = v;
      return ad::cross_entropy(t, forward(t, b, c, tokens, nullptr), labels);
    };
    if (p[which].name.ends_with("attn.key.b")) {
      // Exactly zero in theory (see EveryParameterReceivesGradient), so a
      // relative error only compares rounding noise; check magnitude instead.
      ad::TapeD t;
      ad::Var v = t.leaf(p[which].value);
      t.backward(full(t, v));
      for (double g : t.grad(v).data()) EXPECT_LT(std::abs(g), 1e-12);
    } else {
      EXPECT_LT(ad::grad_check<double>(full, p[which].value, 1e-5), 1e-3) << p[which].name << " seed " << seed;
    }
  }
}

TEST(Int8, PredictMatchesFrozenFakeQuantForward) {
  ModelConfig c;
  Rng rng(11);
  ModelParams p = init_params(rng, c, NormalDist{0, 0.2});
  QatState qat(true, 0.99f);
  for (int i = 0; i < 4; ++i) predict(p, c, random_tokens(rng, c, 8), &qat);
  EXPECT_THROW(quantize_model(p, c, QatState(true)), StateError);
  QuantizedModel qm = quantize_model(p, c, qat);
  qat.set_frozen(true);
  const TokenBatch tokens = random_tokens(rng, c, 8);
  const Tensor sim = predict(p, c, tokens, &qat);
  const Tensor real = predict_int8(qm, tokens);
  for (std::size_t i = 0; i < sim.numel(); ++i) EXPECT_NEAR(real[i], sim[i], 1e-4);
}

TEST(Planted, TwelveHeavyTensorsAtTheDesignatedSite) {
  ModelConfig c;
  c.num_blocks = 12;
  for (HeavySite site : {HeavySite::ffn_fc2, HeavySite::ffn_fc1}) {
    Rng rng(7);
    PretrainedLikeSpec spec;
    spec.heavy_site = site;
    ModelParams p = generate_pretrained_like(rng, c, spec);
    auto rep = kure::kurtosis_report(p, kure::SelectionPolicy{100.0, {}});
    ASSERT_EQ(rep.excluded_count(), 12u);
    double total = 0;
    for (const auto& e : rep.entries) {
      total += e.kurtosis;
      const bool heavy = e.name.ends_with(to_string(site) + ".w");
      if (heavy) {
        EXPECT_GT(e.kurtosis, 1e3) << e.name;
        EXPECT_FALSE(e.included);
      } else {
        EXPECT_GE(e.kurtosis, 1.0) << e.name;
        EXPECT_LE(e.kurtosis, 100.0) << e.name;
      }
    }
    EXPECT_GE(total, 1e4);
  }
}

TEST(Planted, HeavyKurtosisHoldsAcrossSeeds) {
  ModelConfig c;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    ModelParams p = generate_pretrained_like(rng, c);
    EXPECT_EQ(kure::kurtosis_report(p, {}).excluded_count(), c.num_blocks) << "seed " << seed;
  }
}

TEST(HeavySite, ParseRoundTrip) {
  EXPECT_EQ(parse_heavy_site("ffn.fc1"), HeavySite::ffn_fc1);
  EXPECT_EQ(parse_heavy_site(to_string(HeavySite::ffn_fc2)), HeavySite::ffn_fc2);
  EXPECT_FALSE(parse_heavy_site("fc3"));
}

}  // namespace
}  // namespace kurtq::model
