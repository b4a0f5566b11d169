#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "unitoken/autodiff/grad_check.hpp"
#include "unitoken/autodiff/ops.hpp"
#include "unitoken/core/rng.hpp"
#include "unitoken/harness/grad_suite.hpp"

namespace unitoken {
namespace {

Matrix<double> row(std::initializer_list<double> v) {
  Matrix<double> m(1, static_cast<Index>(v.size()));
  Index i = 0;
  for (double x : v) m(0, i++) = x;
  return m;
}

TEST(Softmax, SpecExamples) {
  Tape<double> tape;
  auto a = softmax(tape.constant(row({0, 0})), 1).value();
  EXPECT_DOUBLE_EQ(a(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(a(0, 1), 0.5);
  auto b = softmax(tape.constant(row({std::log(2.0), 0})), 1).value();
  EXPECT_NEAR(b(0, 0), 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(b(0, 1), 1.0 / 3.0, 1e-15);
  auto c = softmax(tape.constant(row({1000, 0})), 1).value();
  EXPECT_TRUE(c.allFinite());
  EXPECT_NEAR(c(0, 0), 1.0, 1e-12);
  EXPECT_NEAR(c(0, 1), 0.0, 1e-12);
}

TEST(Softmax, InvalidAxisIsUsageError) {
  Tape<double> tape;
  EXPECT_THROW(softmax(tape.constant(row({1, 2})), 2), UsageError);
}

TEST(Softmax, ProbabilityVectorForLargeInputs) {
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    Matrix<float> x(3, 7);
    for (Index i = 0; i < x.size(); ++i) x.data()[i] = static_cast<float>(rng.uniform() * 2e4 - 1e4);
    for (int axis : {0, 1}) {
      Tape<float> tape;
      const auto p = softmax(tape.constant(x), axis).value();
      ASSERT_TRUE(p.allFinite());
      EXPECT_GE(p.minCoeff(), 0.0f);
      const Matrix<float> sums = axis == 1 ? Matrix<float>(p.rowwise().sum()) : Matrix<float>(p.colwise().sum());
      for (Index i = 0; i < sums.size(); ++i) EXPECT_NEAR(sums.data()[i], 1.0f, 1e-6f);
    }
  }
}

TEST(MaskedCrossEntropy, UniformLogits) {
  Tape<double> tape;
  const std::vector<int> targets = {0, 3, 2};
  const bool mask[] = {true, true, true};
  auto ce = masked_cross_entropy(tape.constant(Matrix<double>::Zero(3, 4)), targets, mask);
  EXPECT_NEAR(ce.loss.value()(0, 0), std::log(4.0), 1e-15);
  EXPECT_NEAR(ce.loss.value()(0, 0), 1.3863, 5e-5);
  EXPECT_EQ(ce.count, 3);
}

TEST(MaskedCrossEntropy, EmptyMaskIsZeroZero) {
  Tape<double> tape;
  const std::vector<int> targets = {1, 2};
  const bool mask[] = {false, false};
  auto ce = masked_cross_entropy(tape.constant(Matrix<double>::Random(2, 5)), targets, mask);
  EXPECT_EQ(ce.loss.value()(0, 0), 0.0);
  EXPECT_EQ(ce.count, 0);
}

TEST(MaskedCrossEntropy, SaturatedTargets) {
  Tape<double> tape;
  const std::vector<int> targets = {1, 0, 4};
  Matrix<double> logits = Matrix<double>::Zero(3, 5);
  for (Index r = 0; r < 3; ++r) logits(r, targets[static_cast<std::size_t>(r)]) = 20.0;
  const bool mask[] = {true, true, true};
  EXPECT_LT(masked_cross_entropy(tape.constant(logits), targets, mask).loss.value()(0, 0), 1e-6 * 10);
  // +20 on a 5-way softmax leaves 4·e^-20 ≈ 8.2e-9 of mass elsewhere.
  EXPECT_LT(masked_cross_entropy(tape.constant(logits), targets, mask).loss.value()(0, 0), 1e-6);
}

TEST(MaskedCrossEntropy, OutOfVocabularyTarget) {
  Tape<double> tape;
  const std::vector<int> targets = {5};
  const bool mask[] = {true};
  EXPECT_THROW(masked_cross_entropy(tape.constant(Matrix<double>::Zero(1, 5)), targets, mask), UsageError);
}

TEST(MaskedCrossEntropy, OffMaskTargetsDoNotMatter) {
  Rng rng(2);
  Matrix<double> logits(12, 9);
  for (Index i = 0; i < logits.size(); ++i) logits.data()[i] = rng.normal(0.0, 3.0);
  std::vector<int> targets(12);
  bool mask[12];
  for (int i = 0; i < 12; ++i) {
    targets[static_cast<std::size_t>(i)] = static_cast<int>(rng.below(9));
    mask[i] = i % 3 == 0;
  }
  Tape<double> tape;
  auto x = tape.constant(logits);
  const double base = masked_cross_entropy(x, targets, mask).loss.value()(0, 0);
  for (int trial = 0; trial < 20; ++trial) {
    auto changed = targets;
    for (int i = 0; i < 12; ++i) {
      if (!mask[i]) changed[static_cast<std::size_t>(i)] = static_cast<int>(rng.below(9));
    }
    EXPECT_EQ(masked_cross_entropy(x, changed, mask).loss.value()(0, 0), base);
  }
}

TEST(Tape, ValuesStayValidAsTheTapeGrows) {
  Tape<double> tape;
  const auto first = tape.constant(Matrix<double>::Constant(2, 3, 1.5));
  const Matrix<double>& held = first.value();
  for (int i = 0; i < 5000; ++i) tape.constant(Matrix<double>::Zero(1, 1));
  EXPECT_EQ(&held, &first.value());
  EXPECT_EQ(held, Matrix<double>::Constant(2, 3, 1.5));
}

TEST(Backward, SumGivesOnes) {
  Tensor<double> w({1, 3});
  w.value() << 0.3, -1.0, 2.0;
  Tape<double> tape;
  tape.backward(sum(tape.param(w)));
  EXPECT_EQ(w.grad(), Matrix<double>::Ones(1, 3));
}

TEST(Backward, HalfSquaredNormGivesW) {
  Tensor<double> w({1, 3});
  w.value() << 0.3, -1.0, 2.0;
  Tape<double> tape;
  auto p = tape.param(w);
  tape.backward(scale(sum(mul(p, p)), 0.5));
  EXPECT_TRUE(w.grad().isApprox(w.value(), 1e-15));
}

TEST(Backward, AccumulatesAcrossCalls) {
  Tensor<double> w({1, 2});
  w.value() << 1.0, 2.0;
  for (int i = 0; i < 2; ++i) {
    Tape<double> tape;
    tape.backward(sum(tape.param(w)));
  }
  EXPECT_EQ(w.grad(), Matrix<double>::Constant(1, 2, 2.0));
  w.zero_grad();
  EXPECT_EQ(w.grad(), Matrix<double>::Zero(1, 2));
}

TEST(Backward, NonScalarIsUsageError) {
  Tensor<double> w({2, 2});
  Tape<double> tape;
  EXPECT_THROW(tape.backward(tape.param(w)), UsageError);
}

TEST(Backward, FrozenTensorGetsNoGradient) {
  Tensor<double> a({1, 2}), b({1, 2});
  a.value() << 1.0, 2.0;
  b.value() << 3.0, 4.0;
  b.set_requires_grad(false);
  Tape<double> tape;
  tape.backward(sum(mul(tape.param(a), tape.param(b))));
  EXPECT_EQ(a.grad(), b.value());
  EXPECT_TRUE(b.grad().size() == 0 || b.grad().isZero(0.0));
}

TEST(FiniteDiff, SquareAtThree) {
  Tensor<double> x({1, 1});
  x.value()(0, 0) = 3.0;
  const auto report = finite_diff_check([&](Tape<double>& t) {
    auto p = t.param(x);
    return sum(mul(p, p));
  }, {{"x", &x}});
  EXPECT_TRUE(report.passed);
  EXPECT_TRUE(report.deterministic);
  ASSERT_EQ(report.entries.size(), 1u);
  EXPECT_LE(report.max_rel_error, 1e-6);
}

TEST(FiniteDiff, SignFlippedGradientFails) {
  Tensor<double> x({1, 3});
  x.value() << 0.5, -1.5, 2.0;
  // The recorded backward negates the true derivative of x².
  const auto report = finite_diff_check([&](Tape<double>& t) {
    auto p = t.param(x);
    const int id = p.id();
    Matrix<double> v = p.value().cwiseProduct(p.value());
    auto sq = t.record(std::move(v), {p}, [id](Tape<double>& tp, int self) {
      tp.grad(id) -= 2.0 * tp.value(id).cwiseProduct(tp.grad(self));
    });
    return sum(sq);
  }, {{"x", &x}});
  EXPECT_FALSE(report.passed);
  EXPECT_GT(report.max_rel_error, 1.0);
}

TEST(FiniteDiff, NonDeterministicFunctionFlagged) {
  Tensor<double> x({1, 1});
  x.value()(0, 0) = 1.0;
  int calls = 0;
  const auto report = finite_diff_check([&](Tape<double>& t) {
    ++calls;
    return scale(sum(t.param(x)), 1.0 + 1e-3 * calls);
  }, {{"x", &x}});
  EXPECT_FALSE(report.deterministic);
  EXPECT_FALSE(report.passed);
}

TEST(GradientSuite, CoversKernelsAndModels) {
  const auto names = gradient_suite_kernels();
  for (const char* k : {"matmul", "add", "layer_norm", "softmax_rows", "embedding", "attention", "attention_causal",
                        "gelu", "silu", "masked_cross_entropy", "toy_lm_loss", "vq_autoencoder"}) {
    EXPECT_NE(std::find(names.begin(), names.end(), k), names.end()) << k;
  }
  const auto checks = run_gradient_suite(3);
  for (const auto& c : checks) EXPECT_TRUE(c.passed()) << c.kernel << " " << c.max_rel_error;
  EXPECT_NE(format_gradient_table(checks).find("PASS"), std::string::npos);
}

TEST(Rng, DeterministicAndRestorable) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next(), b.next());
  const auto s = a.state();
  const auto x = a.next();
  a.next();
  a.set_state(s);
  EXPECT_EQ(a.next(), x);
  for (int i = 0; i < 1000; ++i) {
    const auto v = a.below(7);
    EXPECT_LT(v, 7u);
    const double u = a.uniform();
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
  }
}

TEST(Ops, CausalAttentionIgnoresFuture) {
  Rng rng(3);
  Matrix<double> q(5, 4), k(5, 4), v(5, 4);
  for (auto* m : {&q, &k, &v}) {
    for (Index i = 0; i < m->size(); ++i) m->data()[i] = rng.normal();
  }
  Tape<double> tape;
  const auto base = attention(tape.constant(q), tape.constant(k), tape.constant(v), 2, true).value();
  k.row(4).setConstant(9.0);
  v.row(4).setConstant(-9.0);
  const auto changed = attention(tape.constant(q), tape.constant(k), tape.constant(v), 2, true).value();
  EXPECT_EQ(base.topRows(4), changed.topRows(4));
  EXPECT_NE(base.row(4), changed.row(4));
}

}  // namespace
}  // namespace unitoken
