#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "taseg/config.hpp"
#include "taseg/error.hpp"
#include "taseg/params.hpp"

namespace taseg {

struct AdamWConfig {
  Scalar lr = Scalar{5e-4};
  Scalar weight_decay = Scalar{0.01};
  Scalar beta1 = Scalar{0.9};
  Scalar beta2 = Scalar{0.999};
  Scalar eps = Scalar{1e-8};

  static AdamWConfig from(const TrainConfig& t) {
    return {t.lr, t.weight_decay, t.beta1, t.beta2, t.adam_eps};
  }
};

/// AdamW with decoupled weight decay: p <- p (1 - lr wd), then the
/// bias-corrected Adam update. Moment buffers exist only for trainable
/// parameters.
class AdamW {
 public:
  struct Slot {
    Parameter* param;
    Tensor m;
    Tensor v;
  };

  AdamW(ParamRegistry& reg, AdamWConfig cfg) : reg_(&reg), cfg_(cfg) {
    for (std::size_t i = 0; i < reg.size(); ++i) {
      Parameter& p = reg[i];
      if (p.frozen) continue;
      slots_.push_back({&p, Tensor(p.value.shape(), Scalar{0}), Tensor(p.value.shape(), Scalar{0})});
    }
  }

  /// One update from the gradients currently held by the registry. `lr`
  /// overrides the configured rate (schedules pass it in).
  void step(Scalar lr) {
    for (std::size_t i = 0; i < reg_->size(); ++i) {
      const Parameter& p = (*reg_)[i];
      if (p.frozen && p.grad.size() != 0) {
        throw FreezeViolation("frozen parameter '" + p.name + "' carries a gradient");
      }
    }
    ++t_;
    const Scalar b1 = cfg_.beta1, b2 = cfg_.beta2;
    const Scalar c1 = 1 - std::pow(b1, static_cast<Scalar>(t_));
    const Scalar c2 = 1 - std::pow(b2, static_cast<Scalar>(t_));
    const Scalar decay = 1 - lr * cfg_.weight_decay;
    for (Slot& s : slots_) {
      Parameter& p = *s.param;
      if (p.grad.shape() != p.value.shape()) {
        throw ShapeError("gradient of '" + p.name + "' has shape " + to_string(p.grad.shape()));
      }
      for (std::size_t j = 0; j < p.value.size(); ++j) {
        const Scalar g = p.grad[j];
        s.m[j] = b1 * s.m[j] + (1 - b1) * g;
        s.v[j] = b2 * s.v[j] + (1 - b2) * g * g;
        const Scalar mhat = s.m[j] / c1;
        const Scalar vhat = s.v[j] / c2;
        p.value[j] = p.value[j] * decay - lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
  }

  void step() { step(cfg_.lr); }

  std::size_t steps() const noexcept { return t_; }
  const std::vector<Slot>& slots() const noexcept { return slots_; }
  const AdamWConfig& config() const noexcept { return cfg_; }

 private:
  ParamRegistry* reg_;
  AdamWConfig cfg_;
  std::vector<Slot> slots_;
  std::size_t t_ = 0;
};

inline Scalar scheduled_lr(const TrainConfig& cfg, std::size_t step) {
  if (cfg.schedule == LrSchedule::Constant || cfg.steps <= 1) return cfg.lr;
  const Scalar progress = static_cast<Scalar>(step) / static_cast<Scalar>(cfg.steps - 1);
  return cfg.lr * Scalar{0.5} * (1 + std::cos(std::acos(Scalar{-1}) * progress));
}

}  // namespace taseg
