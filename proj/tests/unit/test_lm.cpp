#include <gtest/gtest.h>

#include "unitoken/inference/engine.hpp"
#include "unitoken/lm/model.hpp"

namespace unitoken {
namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.lm.width = 16;
  c.lm.blocks = 2;
  c.lm.heads = 2;
  c.lm.context = 64;
  c.vit.cell = 8;
  c.vit.patch = 4;
  c.vit.width = 8;
  c.vit.blocks = 1;
  return c;
}

TokenGrid random_grid(int h, int w, Rng& rng) {
  TokenGrid g{h, w, {}};
  for (int i = 0; i < h * w; ++i) g.ids.push_back(static_cast<int>(rng.below(64)));
  return g;
}

std::vector<int> random_text(int n, Rng& rng) {
  std::vector<int> out;
  for (int i = 0; i < n; ++i) out.push_back(static_cast<int>(rng.below(256)));
  return out;
}

MultimodalSequence understanding_example(Rng& rng, Index width) {
  Matrix<double> cont(9, width);
  for (Index i = 0; i < cont.size(); ++i) cont.data()[i] = rng.normal();
  return assemble_understanding(random_grid(4, 4, rng), cont, random_text(5, rng), random_text(3, rng),
                                JointVocabulary{});
}

TEST(LMConfig, Validation) {
  LMConfig c;
  c.heads = 3;
  EXPECT_THROW(c.validate(), UsageError);
  c = {};
  c.context = 1;
  EXPECT_THROW(c.validate(), UsageError);
  EXPECT_NO_THROW(LMConfig{}.validate());
}

TEST(UnifiedLM, EmbedAndForwardShapes) {
  UnifiedLM<double> model(tiny_config(), 1);
  Rng rng(2);
  const auto seq = understanding_example(rng, 16);
  Tape<double> tape;
  const auto x = model.embed_slots(tape, seq);
  EXPECT_EQ(x.rows(), 38);
  EXPECT_EQ(x.cols(), 16);
  // Continuous slots bypass the token table; only the position is added.
  EXPECT_LT((x.value().row(19) - model.positions().value().row(19) - seq.continuous.row(0)).cwiseAbs().maxCoeff(),
            1e-12);
  const auto logits = model.forward(tape, seq);
  EXPECT_EQ(logits.rows(), 38);
  EXPECT_EQ(logits.cols(), 327);
}

TEST(UnifiedLM, SingleSlotSequence) {
  UnifiedLM<double> model(tiny_config(), 1);
  MultimodalSequence seq;
  seq.slots.push_back(Slot{SlotKind::discrete, SpecialVocab::of(model.vocab()).bos, -1, Segment::special, false});
  Tape<double> tape;
  const auto logits = model.forward(tape, seq);
  EXPECT_EQ(logits.rows(), 1);
  EXPECT_EQ(logits.cols(), 327);
  EXPECT_THROW(model.lm_loss(tape, seq), UsageError);
}

TEST(UnifiedLM, LogitsAreCausal) {
  UnifiedLM<double> model(tiny_config(), 3);
  Rng rng(4);
  const auto vocab = model.vocab();
  for (int trial = 0; trial < 100; ++trial) {
    const auto base = assemble_generation(random_text(4, rng), random_grid(3, 3, rng), vocab);
    const Index t = static_cast<Index>(rng.below(static_cast<std::uint64_t>(base.length() - 1)));
    auto changed = base;
    for (Index j = t + 1; j < changed.length(); ++j) {
      changed.slots[static_cast<std::size_t>(j)].id = static_cast<int>(rng.below(327));
    }
    Tape<double> tape;
    const auto a = model.forward(tape, base).value();
    const auto b = model.forward(tape, changed).value();
    EXPECT_EQ(a.topRows(t + 1), b.topRows(t + 1)) << "t=" << t;
  }
}

TEST(UnifiedLM, SameSeedSameWeights) {
  UnifiedLM<double> a(tiny_config(), 9), b(tiny_config(), 9), c(tiny_config(), 10);
  Rng rng(5);
  const auto seq = assemble_generation(random_text(3, rng), random_grid(2, 2, rng), a.vocab());
  Tape<double> tape;
  const Matrix<double> la = a.forward(tape, seq).value();
  const Matrix<double> lb = b.forward(tape, seq).value();
  const Matrix<double> lc = c.forward(tape, seq).value();
  EXPECT_EQ(la, lb);
  EXPECT_NE(la, lc);
}

TEST(UnifiedLM, ContextOverflowIsUsageError) {
  UnifiedLM<double> model(tiny_config(), 1);
  Rng rng(6);
  const auto seq = assemble_generation(random_text(12, rng), random_grid(7, 7, rng), model.vocab());
  ASSERT_GT(seq.length(), 64);
  Tape<double> tape;
  EXPECT_THROW(model.forward(tape, seq), UsageError);
}

TEST(UnifiedLM, ContinuousRowMismatchIsUsageError) {
  UnifiedLM<double> model(tiny_config(), 1);
  Rng rng(7);
  auto seq = understanding_example(rng, 16);
  seq.continuous = Matrix<double>::Zero(9, 12);
  Tape<double> tape;
  EXPECT_THROW(model.forward(tape, seq), UsageError);
  seq.continuous = Matrix<double>::Zero(8, 16);
  EXPECT_THROW(model.forward(tape, seq), UsageError);
}

TEST(UnifiedLM, LossBreakdownByTargetSegment) {
  UnifiedLM<double> model(tiny_config(), 2);
  Rng rng(8);
  const auto gen = assemble_generation(random_text(4, rng), random_grid(4, 4, rng), model.vocab());
  Tape<double> tape;
  const auto report = model.lm_loss(tape, gen);
  EXPECT_EQ(report.count, 18);
  ASSERT_TRUE(report.breakdown.count(Segment::gen_image));
  EXPECT_EQ(report.breakdown.at(Segment::gen_image).count, 16);
  EXPECT_EQ(report.breakdown.at(Segment::special).count, 2);
  double total = 0.0;
  for (const auto& [_, s] : report.breakdown) total += s.sum;
  EXPECT_NEAR(total / report.count, report.value, 1e-12);
  EXPECT_NEAR(report.loss.value()(0, 0), report.value, 1e-12);

  const auto und = understanding_example(rng, 16);
  const auto r2 = model.lm_loss(tape, und);
  EXPECT_EQ(r2.count, 4);
  EXPECT_EQ(r2.breakdown.at(Segment::answer_text).count, 3);
}

TEST(UnifiedLM, BothTasksShareOneHead) {
  UnifiedLM<double> model(tiny_config(), 2);
  Rng rng(9);
  const MultimodalSequence seqs[] = {
      assemble_generation(random_text(4, rng), random_grid(2, 2, rng), model.vocab()),
      understanding_example(rng, 16)};
  for (const auto& seq : seqs) {
    model.zero_grad();
    Tape<double> tape;
    tape.backward(model.lm_loss(tape, seq).loss);
    EXPECT_GT(model.head().weight.grad().cwiseAbs().maxCoeff(), 0.0);
    EXPECT_GT(model.token_embedding().grad().cwiseAbs().maxCoeff(), 0.0);
  }
  for (const auto& [name, _] : model.named_tensors()) {
    EXPECT_EQ(name.find("und"), std::string::npos) << name;
    EXPECT_EQ(name.find("gen"), std::string::npos) << name;
  }
}

TEST(UnifiedLM, GroupsPartitionParameters) {
  UnifiedLM<double> model(tiny_config(), 2);
  Index total = 0;
  for (auto* g : model.groups()) {
    for (auto& [_, t] : g->params) total += t->size();
  }
  EXPECT_EQ(total, model.parameter_count());
  EXPECT_THROW(model.group("decoder"), UsageError);
  EXPECT_EQ(model.group("vit").name, "vit");
}

TEST(UnifiedLM, ContinuousFeaturesReachVitThroughAdapter) {
  UnifiedLM<double> model(tiny_config(), 4);
  Rng rng(10);
  Image img(8, 8);
  for (Index i = 0; i < img.pixels.size(); ++i) img.pixels.data()[i] = static_cast<float>(rng.uniform());
  Tape<double> tape;
  const auto feats = model.continuous_features(tape, img);
  EXPECT_EQ(feats.count(), 4);
  EXPECT_EQ(feats.dim(), 16);
  tape.backward(sum(mul(feats.vectors, feats.vectors)));
  EXPECT_GT(model.adapter().fc1().weight.grad().cwiseAbs().maxCoeff(), 0.0);
  Index touched = 0;
  for (auto& [_, t] : model.group("vit").params) touched += t->grad().cwiseAbs().maxCoeff() > 0.0;
  EXPECT_GT(touched, 0);
}

TEST(DecodeSession, CachedLogitsMatchFullForward) {
  UnifiedLM<float> model(tiny_config(), 11);
  Rng rng(12);
  Matrix<double> cont(9, 16);
  for (Index i = 0; i < cont.size(); ++i) cont.data()[i] = rng.normal();
  const auto seq = assemble_understanding(random_grid(4, 4, rng), cont, random_text(5, rng), random_text(3, rng),
                                          model.vocab());
  Tape<float> tape;
  const Matrix<float> full = model.forward(tape, seq).value();

  MultimodalSequence prefix = seq;
  prefix.slots.resize(30);
  DecodeSession session(model);
  auto logits = session.prefill(prefix, cont.cast<float>());
  EXPECT_LT((logits - full.row(29)).cwiseAbs().maxCoeff(), 1e-4f);
  for (Index t = 30; t < seq.length(); ++t) {
    logits = session.step(seq.slots[static_cast<std::size_t>(t)].id);
    EXPECT_LT((logits - full.row(t)).cwiseAbs().maxCoeff(), 1e-4f) << t;
  }
  EXPECT_EQ(session.length(), seq.length());
}

}  // namespace
}  // namespace unitoken
