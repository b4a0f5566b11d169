#pragma once

#include <string>
#include <utility>
#include <vector>

#include "unitoken/autodiff/ops.hpp"
#include "unitoken/core/rng.hpp"

namespace unitoken {

template <typename Scalar>
using NamedTensors = std::vector<std::pair<std::string, Tensor<Scalar>*>>;

template <typename Scalar>
void fill_normal(Tensor<Scalar>& t, Rng& rng, double stddev) {
  for (Index i = 0; i < t.size(); ++i) t.value().data()[i] = static_cast<Scalar>(rng.normal(0.0, stddev));
}

template <typename Scalar>
struct LinearLayer {
  Tensor<Scalar> weight;
  Tensor<Scalar> bias;

  LinearLayer() = default;
  LinearLayer(Index in, Index out, Rng& rng, double stddev)
      : weight({in, out}), bias({1, out}) {
    fill_normal(weight, rng, stddev);
  }

  Index in() const { return weight.value().rows(); }
  Index out() const { return weight.value().cols(); }

  Var<Scalar> operator()(Tape<Scalar>& tape, const Var<Scalar>& x) {
    return linear(x, tape.param(weight), tape.param(bias));
  }

  void collect(const std::string& prefix, NamedTensors<Scalar>& out) {
    out.emplace_back(prefix + ".weight", &weight);
    out.emplace_back(prefix + ".bias", &bias);
  }
};

template <typename Scalar>
struct LayerNormLayer {
  Tensor<Scalar> gain;
  Tensor<Scalar> bias;

  LayerNormLayer() = default;
  explicit LayerNormLayer(Index width) : gain({1, width}), bias({1, width}) { gain.value().setOnes(); }

  Var<Scalar> operator()(Tape<Scalar>& tape, const Var<Scalar>& x) {
    return layer_norm(x, tape.param(gain), tape.param(bias));
  }

  void collect(const std::string& prefix, NamedTensors<Scalar>& out) {
    out.emplace_back(prefix + ".gain", &gain);
    out.emplace_back(prefix + ".bias", &bias);
  }
};

/// Pre-norm transformer block: x + Attn(LN(x)), then x + MLP(LN(x)) with GELU.
template <typename Scalar>
struct TransformerBlock {
  LayerNormLayer<Scalar> ln1;
  LinearLayer<Scalar> qkv;
  LinearLayer<Scalar> proj;
  LayerNormLayer<Scalar> ln2;
  LinearLayer<Scalar> fc1;
  LinearLayer<Scalar> fc2;

  TransformerBlock() = default;
  TransformerBlock(Index width, Index mlp_width, int depth, Rng& rng)
      : ln1(width),
        qkv(width, 3 * width, rng, 0.02),
        proj(width, width, rng, 0.02 / std::sqrt(2.0 * depth)),
        ln2(width),
        fc1(width, mlp_width, rng, 0.02),
        fc2(mlp_width, width, rng, 0.02 / std::sqrt(2.0 * depth)) {}

  Var<Scalar> operator()(Tape<Scalar>& tape, const Var<Scalar>& x, int heads, bool causal) {
    const Index d = x.cols();
    auto h = ln1(tape, x);
    auto qkv_out = qkv(tape, h);
    auto attn = attention(slice_cols(qkv_out, 0, d), slice_cols(qkv_out, d, d),
                          slice_cols(qkv_out, 2 * d, d), heads, causal);
    auto y = add(x, proj(tape, attn));
    auto m = fc2(tape, gelu(fc1(tape, ln2(tape, y))));
    return add(y, m);
  }

  void collect(const std::string& prefix, NamedTensors<Scalar>& out) {
    ln1.collect(prefix + ".ln1", out);
    qkv.collect(prefix + ".attn.qkv", out);
    proj.collect(prefix + ".attn.proj", out);
    ln2.collect(prefix + ".ln2", out);
    fc1.collect(prefix + ".mlp.fc1", out);
    fc2.collect(prefix + ".mlp.fc2", out);
  }
};

}  // namespace unitoken
