#include <gtest/gtest.h>

#include <algorithm>
#include <limits>

#include "unitoken/vision/encoder.hpp"

namespace unitoken {
namespace {

// Independent oracle: fit a w×h image inside the canvas and measure the
// uncovered area directly.
GridConfig oracle_grid(double aspect) {
  const GridConfig order[] = {{2, 2}, {1, 2}, {1, 3}, {2, 1}, {3, 1}};
  GridConfig best{};
  double best_waste = std::numeric_limits<double>::infinity();
  for (const auto& g : order) {
    const double cw = g.cols, ch = g.rows;
    const double s = std::min(cw / aspect, ch / 1.0);
    const double waste = (cw * ch - aspect * s * s) / (cw * ch);
    if (waste < best_waste - 1e-12 || (std::abs(waste - best_waste) <= 1e-12 && g.cells() < best.cells())) {
      best = g;
      best_waste = waste;
    }
  }
  return best;
}

TEST(SelectGrid, KnownAspects) {
  EXPECT_EQ(select_grid(1.0, true), (GridConfig{2, 2}));
  EXPECT_EQ(select_grid(3.0, true), (GridConfig{1, 3}));
  EXPECT_EQ(select_grid(2.0, true), (GridConfig{1, 2}));
  EXPECT_EQ(select_grid(0.5, true), (GridConfig{2, 1}));
  EXPECT_EQ(select_grid(1.0 / 3.0, true), (GridConfig{3, 1}));
  for (double a : {0.2, 1.0, 7.0}) EXPECT_EQ(select_grid(a, false), (GridConfig{1, 1}));
}

TEST(SelectGrid, MatchesOracleOverAspectSweep) {
  for (int i = 1; i <= 2000; ++i) {
    const double aspect = 0.1 * std::pow(100.0, i / 2000.0);
    const auto g = select_grid(aspect, true);
    EXPECT_EQ(g, oracle_grid(aspect)) << aspect;
    EXPECT_TRUE(is_allowed_grid(g));
  }
}

TEST(SelectGrid, DegenerateAspectFallsBack) {
  EXPECT_EQ(select_grid(0.0, true), (GridConfig{1, 1}));
  EXPECT_EQ(select_grid(-2.0, true), (GridConfig{1, 1}));
  EXPECT_EQ(select_grid(std::numeric_limits<double>::quiet_NaN(), true), (GridConfig{1, 1}));
}

TEST(Patchify, LayoutIsRowMajorPatchesThenPixels) {
  Image img(4, 4, 1);
  for (Index i = 0; i < 16; ++i) img.pixels(i, 0) = static_cast<float>(i);
  const auto p = patchify(img, 2);
  ASSERT_EQ(p.rows(), 4);
  ASSERT_EQ(p.cols(), 4);
  EXPECT_EQ(p.row(0), (Matrix<float>(1, 4) << 0, 1, 4, 5).finished());
  EXPECT_EQ(p.row(3), (Matrix<float>(1, 4) << 10, 11, 14, 15).finished());
  EXPECT_THROW(patchify(img, 3), UsageError);
}

class Encoder : public ::testing::Test {
 protected:
  ViTConfig cfg() const {
    ViTConfig c;
    c.cell = 8;
    c.patch = 4;
    c.width = 8;
    c.blocks = 1;
    return c;
  }
  Image pattern(Index h, Index w, std::uint64_t seed) const {
    Rng rng(seed);
    Image img(h, w);
    for (Index i = 0; i < img.pixels.size(); ++i) img.pixels.data()[i] = static_cast<float>(rng.uniform());
    return img;
  }
};

TEST_F(Encoder, TokenCountPerGrid) {
  Rng rng(1);
  VisionTransformer<double> vit(cfg(), rng);
  const Image img = pattern(10, 14, 2);
  for (const GridConfig g : {GridConfig{1, 1}, GridConfig{2, 2}, GridConfig{1, 3}, GridConfig{3, 1}}) {
    Tape<double> tape;
    const auto seq = encode_continuous(tape, img, g, vit);
    EXPECT_EQ(seq.count(), 4 * g.cells());
    EXPECT_EQ(seq.dim(), 8);
    EXPECT_EQ(seq.source_grid, g);
  }
  Tape<double> tape;
  EXPECT_THROW(encode_continuous(tape, img, GridConfig{3, 3}, vit), UsageError);
  EXPECT_THROW(encode_continuous(tape, Image(), GridConfig{1, 1}, vit), UsageError);
}

TEST_F(Encoder, SwappingCellsSwapsTokenBlocks) {
  Rng rng(3);
  VisionTransformer<double> vit(cfg(), rng);
  const Image a = pattern(8, 8, 4), b = pattern(8, 8, 5);
  Image ab(8, 16), ba(8, 16);
  for (Index y = 0; y < 8; ++y) {
    for (Index x = 0; x < 8; ++x) {
      ab.at(y, x) = a.at(y, x);
      ab.at(y, x + 8) = b.at(y, x);
      ba.at(y, x) = b.at(y, x);
      ba.at(y, x + 8) = a.at(y, x);
    }
  }
  Tape<double> tape;
  const auto e1 = encode_continuous(tape, ab, GridConfig{1, 2}, vit).vectors.value();
  const auto e2 = encode_continuous(tape, ba, GridConfig{1, 2}, vit).vectors.value();
  EXPECT_EQ(e1.topRows(4), e2.bottomRows(4));
  EXPECT_EQ(e1.bottomRows(4), e2.topRows(4));
}

TEST(Adapter, ZeroWeightsGiveBiasRows) {
  Rng rng(6);
  Adapter<double> adapter(8, 5, rng);
  adapter.fc1().weight.value().setZero();
  adapter.fc1().bias.value().setZero();
  adapter.fc2().weight.value().setZero();
  adapter.fc2().bias.value() << 1, 2, 3, 4, 5;
  Tape<double> tape;
  Matrix<double> x = Matrix<double>::Random(6, 8);
  const auto out = adapt(tape, PatchEmbeddingSeq<double>{tape.constant(x), {1, 1}}, adapter);
  ASSERT_EQ(out.count(), 6);
  for (Index r = 0; r < 6; ++r) EXPECT_EQ(out.vectors.value().row(r), adapter.fc2().bias.value());
}

TEST(Adapter, GradientReachesFirstLayer) {
  Rng rng(7);
  Adapter<double> adapter(4, 3, rng);
  Tape<double> tape;
  Matrix<double> x = Matrix<double>::Random(5, 4);
  const auto out = adapt(tape, PatchEmbeddingSeq<double>{tape.constant(x), {1, 1}}, adapter);
  tape.backward(sum(mul(out.vectors, out.vectors)));
  EXPECT_GT(adapter.fc1().weight.grad().cwiseAbs().maxCoeff(), 0.0);
  EXPECT_GT(adapter.fc2().weight.grad().cwiseAbs().maxCoeff(), 0.0);
  EXPECT_THROW(adapt(tape, PatchEmbeddingSeq<double>{tape.constant(Matrix<double>::Zero(2, 5)), {1, 1}}, adapter),
               UsageError);
}

}  // namespace
}  // namespace unitoken
