#include "unitoken/harness/grad_suite.hpp"

#include <cstdio>
#include <functional>
#include <memory>
#include <sstream>

#include "unitoken/lm/model.hpp"
#include "unitoken/train/trainer.hpp"
#include "unitoken/vq/tokenizer.hpp"

namespace unitoken {

namespace {

using T = Tensor<double>;
using V = Var<double>;
using Tp = Tape<double>;

/// One randomized instance: owned tensors, their names, and a loss builder.
struct Case {
  std::vector<std::unique_ptr<T>> owned;
  std::vector<std::pair<std::string, T*>> params;
  std::function<V(Tp&)> loss;
  Index max_elements = 0;
  std::shared_ptr<void> keep;  // model objects the loss refers to

  T& tensor(const std::string& name, Index rows, Index cols, Rng& rng, double sd = 1.0) {
    owned.push_back(std::make_unique<T>(Shape{rows, cols}));
    for (Index i = 0; i < owned.back()->size(); ++i) owned.back()->value().data()[i] = rng.normal(0.0, sd);
    params.emplace_back(name, owned.back().get());
    return *owned.back();
  }
};

Index dim(Rng& rng) { return 2 + static_cast<Index>(rng.below(7)); }

Matrix<double> random_matrix(Index r, Index c, Rng& rng) {
  Matrix<double> m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

/// Contracts an output with fixed random weights so every element matters.
V project(const V& out, Rng& rng) {
  auto w = out.tape().constant(random_matrix(out.rows(), out.cols(), rng));
  return sum(mul(out, w));
}

using Builder = std::function<void(Case&, Rng&)>;

struct Kernel {
  std::string name;
  Builder build;
};

std::vector<Kernel> kernels() {
  std::vector<Kernel> ks;
  auto unary = [&](const std::string& name, std::function<V(const V&)> op, double sd = 1.0) {
    ks.push_back({name, [op, sd](Case& c, Rng& rng) {
                    auto& x = c.tensor("x", dim(rng), dim(rng), rng, sd);
                    auto proj = std::make_shared<Rng>(rng.next());
                    c.loss = [&x, op, proj](Tp& t) {
                      Rng r = *proj;
                      return project(op(t.param(x)), r);
                    };
                  }});
  };
  auto binary = [&](const std::string& name, std::function<V(const V&, const V&)> op) {
    ks.push_back({name, [op](Case& c, Rng& rng) {
                    const Index r = dim(rng), k = dim(rng);
                    auto& a = c.tensor("a", r, k, rng);
                    auto& b = c.tensor("b", r, k, rng);
                    auto proj = std::make_shared<Rng>(rng.next());
                    c.loss = [&a, &b, op, proj](Tp& t) {
                      Rng rr = *proj;
                      return project(op(t.param(a), t.param(b)), rr);
                    };
                  }});
  };

  ks.push_back({"matmul", [](Case& c, Rng& rng) {
                  const Index m = dim(rng), k = dim(rng), n = dim(rng);
                  auto& a = c.tensor("a", m, k, rng);
                  auto& b = c.tensor("b", k, n, rng);
                  auto proj = std::make_shared<Rng>(rng.next());
                  c.loss = [&a, &b, proj](Tp& t) {
                    Rng r = *proj;
                    return project(matmul(t.param(a), t.param(b)), r);
                  };
                }});
  binary("add", [](const V& a, const V& b) { return add(a, b); });
  binary("sub", [](const V& a, const V& b) { return sub(a, b); });
  binary("mul", [](const V& a, const V& b) { return mul(a, b); });
  unary("scale", [](const V& x) { return scale(x, 1.7); });
  ks.push_back({"add_row", [](Case& c, Rng& rng) {
                  const Index r = dim(rng), k = dim(rng);
                  auto& a = c.tensor("a", r, k, rng);
                  auto& b = c.tensor("row", 1, k, rng);
                  auto proj = std::make_shared<Rng>(rng.next());
                  c.loss = [&a, &b, proj](Tp& t) {
                    Rng rr = *proj;
                    return project(add_row(t.param(a), t.param(b)), rr);
                  };
                }});
  unary("sum", [](const V& x) { return sum(x); });
  unary("mean", [](const V& x) { return mean(x); });
  unary("gelu", [](const V& x) { return gelu(x); });
  unary("sigmoid", [](const V& x) { return sigmoid(x); });
  unary("silu", [](const V& x) { return silu(x); });
  unary("softmax_rows", [](const V& x) { return softmax(x, 1); });
  unary("softmax_cols", [](const V& x) { return softmax(x, 0); });
  ks.push_back({"layer_norm", [](Case& c, Rng& rng) {
                  const Index r = dim(rng), k = dim(rng);
                  auto& x = c.tensor("x", r, k, rng);
                  auto& g = c.tensor("gain", 1, k, rng);
                  auto& b = c.tensor("bias", 1, k, rng);
                  auto proj = std::make_shared<Rng>(rng.next());
                  c.loss = [&x, &g, &b, proj](Tp& t) {
                    Rng rr = *proj;
                    return project(layer_norm(t.param(x), t.param(g), t.param(b)), rr);
                  };
                }});
  ks.push_back({"embedding", [](Case& c, Rng& rng) {
                  const Index vocab = dim(rng), width = dim(rng), n = dim(rng);
                  auto& table = c.tensor("table", vocab, width, rng);
                  auto ids = std::make_shared<std::vector<int>>();
                  for (Index i = 0; i < n; ++i) ids->push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab))));
                  auto proj = std::make_shared<Rng>(rng.next());
                  c.loss = [&table, ids, proj](Tp& t) {
                    Rng rr = *proj;
                    return project(embedding(t.param(table), std::span<const int>(*ids)), rr);
                  };
                }});
  ks.push_back({"slice_concat", [](Case& c, Rng& rng) {
                  const Index r = dim(rng) + 2, k = dim(rng) + 2;
                  auto& x = c.tensor("x", r, k, rng);
                  auto proj = std::make_shared<Rng>(rng.next());
                  c.loss = [&x, r, k, proj](Tp& t) {
                    Rng rr = *proj;
                    auto p = t.param(x);
                    auto top = slice_rows(p, 0, r / 2);
                    auto bottom = slice_rows(p, r / 2, r - r / 2);
                    auto joined = concat_rows(std::vector<V>{bottom, top});
                    return project(slice_cols(joined, 1, k - 2), rr);
                  };
                }});
  ks.push_back({"merge_rows", [](Case& c, Rng& rng) {
                  const Index na = dim(rng), nb = dim(rng), k = dim(rng);
                  auto& a = c.tensor("a", na, k, rng);
                  auto& b = c.tensor("b", nb, k, rng);
                  // Random interleaving of the two row sets.
                  auto a_rows = std::make_shared<std::vector<int>>();
                  auto b_rows = std::make_shared<std::vector<int>>();
                  Index ia = 0, ib = 0;
                  for (Index row = 0; row < na + nb; ++row) {
                    const bool take_a = ib == nb || (ia < na && rng.bernoulli(0.5));
                    (take_a ? a_rows : b_rows)->push_back(static_cast<int>(row));
                    (take_a ? ia : ib)++;
                  }
                  auto proj = std::make_shared<Rng>(rng.next());
                  c.loss = [&a, &b, a_rows, b_rows, na, nb, proj](Tp& t) {
                    Rng rr = *proj;
                    return project(merge_rows(t.param(a), std::span<const int>(*a_rows), t.param(b),
                                              std::span<const int>(*b_rows), na + nb),
                                   rr);
                  };
                }});
  for (const bool causal : {true, false}) {
    ks.push_back({causal ? "attention_causal" : "attention", [causal](Case& c, Rng& rng) {
                    const int heads = 1 + static_cast<int>(rng.below(2));
                    const Index d = heads * (1 + static_cast<Index>(rng.below(4)));
                    const Index tq = dim(rng), tk = causal ? tq : dim(rng);
                    auto& q = c.tensor("q", tq, d, rng);
                    auto& k = c.tensor("k", tk, d, rng);
                    auto& v = c.tensor("v", tk, d, rng);
                    auto proj = std::make_shared<Rng>(rng.next());
                    c.loss = [&q, &k, &v, heads, causal, proj](Tp& t) {
                      Rng rr = *proj;
                      return project(attention(t.param(q), t.param(k), t.param(v), heads, causal), rr);
                    };
                  }});
  }
  ks.push_back({"masked_cross_entropy", [](Case& c, Rng& rng) {
                  const Index n = dim(rng), vocab = dim(rng);
                  auto& logits = c.tensor("logits", n, vocab, rng, 2.0);
                  auto targets = std::make_shared<std::vector<int>>();
                  auto mask = std::make_shared<std::unique_ptr<bool[]>>(std::make_unique<bool[]>(static_cast<std::size_t>(n)));
                  for (Index i = 0; i < n; ++i) {
                    targets->push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab))));
                    (*mask)[static_cast<std::size_t>(i)] = i == 0 || rng.bernoulli(0.6);
                  }
                  c.loss = [&logits, targets, mask, n](Tp& t) {
                    return masked_cross_entropy(t.param(logits), std::span<const int>(*targets),
                                                std::span<const bool>(mask->get(), static_cast<std::size_t>(n)))
                        .loss;
                  };
                }});
  ks.push_back({"mse", [](Case& c, Rng& rng) {
                  const Index r = dim(rng), k = dim(rng);
                  auto& a = c.tensor("a", r, k, rng);
                  auto& b = c.tensor("b", r, k, rng);
                  c.loss = [&a, &b](Tp& t) { return mse(t.param(a), t.param(b)); };
                }});
  ks.push_back({"linear", [](Case& c, Rng& rng) {
                  const Index n = dim(rng), in = dim(rng), out = dim(rng);
                  auto& x = c.tensor("x", n, in, rng);
                  auto& w = c.tensor("weight", in, out, rng);
                  auto& b = c.tensor("bias", 1, out, rng);
                  auto proj = std::make_shared<Rng>(rng.next());
                  c.loss = [&x, &w, &b, proj](Tp& t) {
                    Rng rr = *proj;
                    return project(linear(t.param(x), t.param(w), t.param(b)), rr);
                  };
                }});
  ks.push_back({"im2col", [](Case& c, Rng& rng) {
                  const ImageLayout layout{1 + static_cast<Index>(rng.below(2)), dim(rng), dim(rng)};
                  const Index ch = 1 + static_cast<Index>(rng.below(3));
                  const Index kernel = 2 + static_cast<Index>(rng.below(2));
                  const Index stride = 1 + static_cast<Index>(rng.below(2));
                  auto& x = c.tensor("x", layout.batch * layout.height * layout.width, ch, rng);
                  auto proj = std::make_shared<Rng>(rng.next());
                  c.loss = [&x, layout, kernel, stride, proj](Tp& t) {
                    Rng rr = *proj;
                    return project(im2col(t.param(x), layout, kernel, stride, 1), rr);
                  };
                }});
  ks.push_back({"upsample2x", [](Case& c, Rng& rng) {
                  const ImageLayout layout{1 + static_cast<Index>(rng.below(2)), dim(rng), dim(rng)};
                  auto& x = c.tensor("x", layout.batch * layout.height * layout.width, dim(rng), rng);
                  auto proj = std::make_shared<Rng>(rng.next());
                  c.loss = [&x, layout, proj](Tp& t) {
                    Rng rr = *proj;
                    return project(upsample2x(t.param(x), layout), rr);
                  };
                }});
  ks.push_back({"vq_autoencoder", [](Case& c, Rng& rng) {
                  VQConfig cfg;
                  cfg.downsample = 2;
                  cfg.codebook_size = 4;
                  cfg.code_dim = 2;
                  cfg.base_width = 2;
                  auto vq = std::make_shared<VQTokenizer<double>>(cfg, rng.next());
                  const Index side = 4;
                  auto image = std::make_shared<Matrix<double>>(side * side, 3);
                  for (Index i = 0; i < image->size(); ++i) image->data()[i] = rng.uniform();
                  for (auto& [name, t] : vq->named_tensors()) {
                    if (name != "vq.codebook") c.params.emplace_back(name, t);
                  }
                  c.max_elements = 8;
                  c.keep = vq;
                  // Encoder and decoder without the (piecewise constant) quantizer.
                  c.loss = [vq, image, side](Tp& t) {
                    const ImageLayout layout{1, side, side};
                    auto x = t.constant(*image);
                    auto z = vq->encode_latents(t, x, layout);
                    auto recon = vq->decode_latents(t, z, {1, side / 2, side / 2});
                    return mse(recon, x);
                  };
                }});
  ks.push_back({"toy_lm_loss", [](Case& c, Rng& rng) {
                  ModelConfig mc;
                  mc.lm.vocab.n_image = 8;
                  mc.lm.width = 8;
                  mc.lm.blocks = 2;
                  mc.lm.heads = 2;
                  mc.lm.context = 64;
                  mc.vit.cell = 8;
                  mc.vit.patch = 4;
                  mc.vit.width = 8;
                  mc.vit.blocks = 1;
                  mc.vit.heads = 2;
                  auto model = std::make_shared<UnifiedLM<double>>(mc, rng.next());
                  // Perturb every tensor so biases and gains are not at their
                  // special initial values.
                  for (auto& [name, t] : model->named_tensors()) {
                    for (Index i = 0; i < t->size(); ++i) t->value().data()[i] += rng.normal(0.0, 0.1);
                    c.params.emplace_back(name, t);
                  }
                  auto examples = std::make_shared<std::vector<TrainingExample>>(2);
                  for (int k = 0; k < 2; ++k) {
                    auto& ex = (*examples)[static_cast<std::size_t>(k)];
                    ex.task = k == 0 ? Task::understanding : Task::generation;
                    ex.image = Image(8, 8, 3);
                    for (Index i = 0; i < ex.image.pixels.size(); ++i) ex.image.pixels.data()[i] = static_cast<float>(rng.uniform());
                    ex.grid = {2, 2, {}};
                    for (int i = 0; i < 4; ++i) ex.grid.ids.push_back(static_cast<int>(rng.below(8)));
                    ex.prompt = encode_text("ab");
                    ex.answer = encode_text("cd");
                  }
                  c.max_elements = 8;
                  c.keep = model;
                  c.loss = [model, examples](Tp& t) {
                    V total;
                    for (const auto& ex : *examples) {
                      auto built = build_sequence(t, *model, ex);
                      auto l = model->lm_loss(t, built.seq, built.continuous).loss;
                      total = total.valid() ? add(total, l) : l;
                    }
                    return total;
                  };
                }});
  return ks;
}

}  // namespace

std::vector<std::string> gradient_suite_kernels() {
  std::vector<std::string> names;
  for (const auto& k : kernels()) names.push_back(k.name);
  return names;
}

std::vector<KernelCheck> run_gradient_suite(int seeds, double tolerance) {
  if (seeds < 1) throw UsageError("run_gradient_suite: seeds must be positive");
  std::vector<KernelCheck> out;
  for (const auto& kernel : kernels()) {
    KernelCheck check;
    check.kernel = kernel.name;
    for (int seed = 0; seed < seeds; ++seed) {
      Rng rng(0x9e3779b9ULL * static_cast<std::uint64_t>(seed + 1) + std::hash<std::string>{}(kernel.name) % 1000);
      Case c;
      kernel.build(c, rng);
      GradCheckOptions opts;
      opts.tolerance = tolerance;
      opts.max_elements = c.max_elements;
      opts.seed = static_cast<std::uint64_t>(seed);
      const auto report = finite_diff_check(c.loss, c.params, opts);
      ++check.seeds;
      check.deterministic = check.deterministic && report.deterministic;
      if (report.passed) ++check.passed_seeds;
      check.max_rel_error = std::max(check.max_rel_error, report.max_rel_error);
    }
    out.push_back(check);
  }
  return out;
}

std::string format_gradient_table(const std::vector<KernelCheck>& checks) {
  std::ostringstream out;
  char line[160];
  std::snprintf(line, sizeof(line), "%-22s %8s %14s  %s\n", "kernel", "seeds", "max rel err", "result");
  out << line;
  for (const auto& c : checks) {
    std::snprintf(line, sizeof(line), "%-22s %4d/%-3d %14.3e  %s\n", c.kernel.c_str(), c.passed_seeds, c.seeds,
                  c.max_rel_error, c.passed() ? "PASS" : (c.deterministic ? "FAIL" : "FAIL (non-deterministic)"));
    out << line;
  }
  return out.str();
}

}  // namespace unitoken
