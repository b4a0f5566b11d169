#pragma once

#include <cmath>
#include <functional>
#include <numbers>
#include <span>
#include <unordered_map>

#include "unitoken/autodiff/tensor.hpp"

namespace unitoken {

/// Half-cosine decay from lr_max at `step` 0 to zero at `total_steps`, after
/// an optional linear warmup over the first `warmup_steps` (the cosine clock
/// starts once warmup ends).
inline double cosine_lr(long step, long total_steps, double lr_max, long warmup_steps = 0) {
  if (total_steps <= 0) throw UsageError("cosine_lr: total_steps must be positive");
  if (step < 0 || step > total_steps) throw UsageError("cosine_lr: step outside [0, total_steps]");
  if (warmup_steps < 0 || (warmup_steps > 0 && warmup_steps >= total_steps)) {
    throw UsageError("cosine_lr: warmup must be shorter than the run");
  }
  if (step < warmup_steps) {
    return lr_max * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  }
  const double progress = static_cast<double>(step - warmup_steps) /
                          static_cast<double>(total_steps - warmup_steps);
  return 0.5 * lr_max * (1.0 + std::cos(std::numbers::pi * progress));
}

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// Bias-corrected AdamW with decoupled weight decay. Moments are kept per
/// tensor and start at zero; frozen tensors (requires_grad false) and groups
/// whose learning rate is zero are left bit-unchanged.
template <typename Scalar>
class AdamW {
 public:
  explicit AdamW(AdamWConfig config = {}) : config_(config) {}

  const AdamWConfig& config() const { return config_; }

  void step(std::span<ParamGroup<Scalar>* const> groups,
            const std::function<double(const ParamGroup<Scalar>&)>& group_lr) {
    for (auto* group : groups) {
      for (auto& [name, t] : group->params) {
        if (t->requires_grad() && !t->grad().allFinite()) {
          throw InternalError("AdamW: non-finite gradient in " + group->name + "/" + name);
        }
      }
    }
    for (auto* group : groups) {
      const double lr = group_lr(*group) * group->lr_scale;
      if (lr == 0.0) continue;
      for (auto& [name, t] : group->params) {
        if (t->requires_grad()) update(*t, lr);
      }
    }
  }

  void step(ParamGroup<Scalar>& group, double lr) {
    ParamGroup<Scalar>* g = &group;
    step(std::span<ParamGroup<Scalar>* const>(&g, 1), [lr](const ParamGroup<Scalar>&) { return lr; });
  }

  void reset() { state_.clear(); }

 private:
  struct Moments {
    Matrix<Scalar> m;
    Matrix<Scalar> v;
    long step = 0;
  };

  void update(Tensor<Scalar>& t, double lr) {
    auto& s = state_[&t];
    if (s.step == 0) {
      s.m = Matrix<Scalar>::Zero(t.value().rows(), t.value().cols());
      s.v = Matrix<Scalar>::Zero(t.value().rows(), t.value().cols());
    }
    ++s.step;
    const Scalar b1 = static_cast<Scalar>(config_.beta1);
    const Scalar b2 = static_cast<Scalar>(config_.beta2);
    const auto& g = t.grad();
    s.m = b1 * s.m + (Scalar(1) - b1) * g;
    s.v = b2 * s.v + (Scalar(1) - b2) * g.cwiseProduct(g);
    const Scalar c1 = Scalar(1) - static_cast<Scalar>(std::pow(config_.beta1, s.step));
    const Scalar c2 = Scalar(1) - static_cast<Scalar>(std::pow(config_.beta2, s.step));
    const Scalar step = static_cast<Scalar>(lr);
    const Scalar eps = static_cast<Scalar>(config_.eps);
    if (config_.weight_decay != 0.0) {
      t.value() *= Scalar(1) - step * static_cast<Scalar>(config_.weight_decay);
    }
    t.value().array() -= step * (s.m.array() / c1) / ((s.v.array() / c2).sqrt() + eps);
  }

  AdamWConfig config_;
  std::unordered_map<const Tensor<Scalar>*, Moments> state_;
};

/// Scales gradients of trainable tensors so their global L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
template <typename Scalar>
double clip_grad_norm(std::span<ParamGroup<Scalar>* const> groups, double max_norm) {
  double sq = 0.0;
  for (auto* group : groups) {
    for (auto& [_, t] : group->params) {
      if (t->requires_grad()) sq += static_cast<double>(t->grad().squaredNorm());
    }
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const Scalar factor = static_cast<Scalar>(max_norm / (norm + 1e-12));
    for (auto* group : groups) {
      for (auto& [_, t] : group->params) {
        if (t->requires_grad()) t->grad() *= factor;
      }
    }
  }
  return norm;
}

}  // namespace unitoken
