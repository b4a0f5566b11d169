#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "unitoken/inference/engine.hpp"

namespace unitoken {
namespace {

using RowD = Eigen::Matrix<double, 1, Eigen::Dynamic>;

ModelConfig tiny_config() {
  ModelConfig c;
  c.lm.width = 16;
  c.lm.blocks = 1;
  c.lm.heads = 2;
  c.lm.context = 64;
  c.vit.cell = 8;
  c.vit.patch = 4;
  c.vit.width = 8;
  c.vit.blocks = 1;
  return c;
}

class Engine : public ::testing::Test {
 protected:
  Engine() : model_(tiny_config(), 21), tok_(VQConfig{}, 22) {}

  GenerationConfig small(DecodeMode mode) const {
    GenerationConfig g;
    g.mode = mode;
    g.grid_height = 3;
    g.grid_width = 2;
    return g;
  }

  UnifiedLM<float> model_;
  VQTokenizer<float> tok_;
};

TEST(CfgLogits, EndpointsAndExtrapolation) {
  RowD c(3), u(3);
  c << 1.0, -2.0, 0.5;
  u << 0.25, 3.0, -1.0;
  EXPECT_EQ(cfg_logits(c, u, 1.0), c);
  EXPECT_EQ(cfg_logits(c, u, 0.0), u);
  const RowD five = cfg_logits(c, u, 5.0);
  for (Index i = 0; i < 3; ++i) EXPECT_NEAR(five(i), u(i) + 5.0 * (c(i) - u(i)), 1e-12);
  EXPECT_THROW(cfg_logits(c, RowD(RowD::Zero(2)), 1.0), UsageError);
}

TEST(GenerationConfig, Validation) {
  GenerationConfig g;
  EXPECT_NO_THROW(g.validate());
  g.temperature = 0.0;
  EXPECT_THROW(g.validate(), UsageError);
  g = {};
  g.guidance_scale = -1.0;
  EXPECT_THROW(g.validate(), UsageError);
  g = {};
  g.grid_width = 0;
  EXPECT_THROW(g.validate(), UsageError);
}

TEST(RestrictedDistribution, IgnoresNonImageLogits) {
  const JointVocabulary vocab;
  Rng rng(1);
  RowD logits(vocab.total());
  for (Index i = 0; i < logits.size(); ++i) logits(i) = rng.normal(0.0, 2.0);
  logits.head(vocab.image_base()).setConstant(500.0);
  const auto p = restricted_image_distribution(logits, vocab);
  ASSERT_EQ(p.size(), 64u);
  EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-12);
  const RowD img = logits.segment(vocab.image_base(), 64);
  const double z = (img.array() - img.maxCoeff()).exp().sum();
  for (int k = 0; k < 64; ++k) EXPECT_NEAR(p[static_cast<std::size_t>(k)], std::exp(img(k) - img.maxCoeff()) / z, 1e-12);
  EXPECT_THROW(restricted_image_distribution(RowD(RowD::Zero(10)), vocab), UsageError);
}

TEST_F(Engine, GreedyGenerationIgnoresTemperatureAndSeed) {
  auto cfg = small(DecodeMode::greedy);
  const auto a = generate_image(model_, tok_, "red circle center", cfg);
  cfg.temperature = 0.3;
  cfg.seed = 99;
  const auto b = generate_image(model_, tok_, "red circle center", cfg);
  EXPECT_EQ(a.grid.ids, b.grid.ids);
  EXPECT_EQ(a.image, b.image);
}

TEST_F(Engine, SampledGridShapeRangeAndDeterminism) {
  auto cfg = small(DecodeMode::sample);
  cfg.seed = 5;
  const auto a = generate_image(model_, tok_, "blue square top", cfg, true);
  const auto b = generate_image(model_, tok_, "blue square top", cfg, true);
  EXPECT_EQ(a.grid.height, 3);
  EXPECT_EQ(a.grid.width, 2);
  ASSERT_EQ(a.grid.ids.size(), 6u);
  for (int id : a.grid.ids) {
    EXPECT_GE(id, 0);
    EXPECT_LT(id, 64);
  }
  EXPECT_EQ(a.grid.ids, b.grid.ids);
  EXPECT_EQ(a.image.height, 12);
  EXPECT_EQ(a.image.width, 8);
  ASSERT_EQ(a.step_probs.size(), 6u);
  for (const auto& p : a.step_probs) EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-9);
}

TEST_F(Engine, GuidanceEndpointsMatchSingleBranches) {
  auto cfg = small(DecodeMode::sample);
  cfg.seed = 3;
  for (const auto& [scale, branch] : {std::pair{1.0, Branch::conditional_only}, std::pair{0.0, Branch::unconditional_only}}) {
    cfg.guidance_scale = scale;
    cfg.branch = Branch::cfg;
    const auto guided = generate_image(model_, tok_, "green triangle left", cfg, true);
    cfg.branch = branch;
    const auto single = generate_image(model_, tok_, "green triangle left", cfg, true);
    EXPECT_EQ(guided.grid.ids, single.grid.ids);
    for (std::size_t t = 0; t < guided.step_probs.size(); ++t) {
      for (std::size_t k = 0; k < 64; ++k) EXPECT_NEAR(guided.step_probs[t][k], single.step_probs[t][k], 1e-6);
    }
  }
}

TEST_F(Engine, UnconditionalBranchIgnoresPrompt) {
  auto cfg = small(DecodeMode::sample);
  cfg.branch = Branch::unconditional_only;
  cfg.seed = 8;
  const auto a = generate_image(model_, tok_, "red circle center", cfg, true);
  const auto b = generate_image(model_, tok_, "yellow square bottom right", cfg, true);
  EXPECT_EQ(a.grid.ids, b.grid.ids);
  // KL between the two traces is zero up to rounding.
  for (std::size_t t = 0; t < a.step_probs.size(); ++t) {
    double kl = 0.0;
    for (std::size_t k = 0; k < 64; ++k) {
      const double p = a.step_probs[t][k], q = b.step_probs[t][k];
      if (p > 0.0) kl += p * std::log(p / q);
    }
    EXPECT_LT(kl, 1e-6);
  }
}

TEST_F(Engine, AnswerIsGreedyAndBounded) {
  Image img(8, 8);
  img.pixels.setConstant(0.5f);
  GenerationConfig cfg;
  cfg.max_new_tokens = 5;
  const auto a = answer(model_, tok_, img, "what color?", cfg);
  cfg.temperature = 0.1;
  cfg.seed = 77;
  const auto b = answer(model_, tok_, img, "what color?", cfg);
  EXPECT_EQ(a.ids, b.ids);
  EXPECT_EQ(a.text, b.text);
  EXPECT_LE(a.ids.size(), 5u);
  if (a.truncated) {
    EXPECT_EQ(a.ids.size(), 5u);
  }
  for (int id : a.ids) EXPECT_NE(id, SpecialVocab::of(model_.vocab()).eos);
  EXPECT_THROW(answer(model_, tok_, img, "", cfg), UsageError);
  EXPECT_THROW(answer(model_, tok_, Image(), "q", cfg), UsageError);
}

TEST_F(Engine, MismatchedTokenizerIsUsageError) {
  VQConfig c;
  c.codebook_size = 32;
  VQTokenizer<float> other(c, 1);
  EXPECT_THROW(generate_image(model_, other, "x", small(DecodeMode::greedy)), UsageError);
}

TEST_F(Engine, DecodeSessionContextLimit) {
  DecodeSession s(model_);
  const int bos = SpecialVocab::of(model_.vocab()).bos;
  for (int i = 0; i < 64; ++i) s.step(bos);
  EXPECT_THROW(s.step(bos), UsageError);
  EXPECT_THROW(DecodeSession(model_).step(-1), UsageError);
}

}  // namespace
}  // namespace unitoken
