#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>

#include "taseg/error.hpp"
#include "taseg/layers.hpp"
#include "taseg/ops.hpp"
#include "taseg/params.hpp"

namespace taseg {

/// Adapter hyperparameters. The low-rank update is scaled by alpha / rank;
/// alpha defaults to the rank, which makes the scale 1.
struct LoraConfig {
  std::size_t rank = 4;
  Scalar alpha = 0;  // 0 means "same as rank"

  Scalar scale() const {
    return (alpha > 0 ? alpha : static_cast<Scalar>(rank)) / static_cast<Scalar>(rank);
  }
};

/// y = x W0 + b0 + scale * (x A^T) B^T
///
/// `base` is the frozen affine output x W0 + b0. A is [r x d_in], B is
/// [d_out x r]. The rank-r path is two thin matmuls; BA is never formed.
inline Var lora_apply(Var base, Var x, Var a, Var b, Scalar scale) {
  const Shape& s = x.shape();
  const auto [rows, d_in] = as_rows(s);
  if (a.shape().size() != 2 || a.shape()[1] != d_in || b.shape().size() != 2 ||
      b.shape()[1] != a.shape()[0]) {
    throw ShapeError("lora_apply: input " + to_string(s) + " does not conform to A " +
                     to_string(a.shape()) + " and B " + to_string(b.shape()));
  }
  Var x2 = s.size() == 2 ? x : ops::reshape(x, {rows, d_in});
  Var low = ops::matmul(ops::matmul(x2, ops::transpose(a)), ops::transpose(b));
  if (low.value().size() != base.value().size()) {
    throw ShapeError("lora_apply: adapter output does not match base output " +
                     to_string(base.shape()));
  }
  if (s.size() != 2) low = ops::reshape(low, base.shape());
  return ops::add(base, ops::scale(low, scale));
}

/// Trainable parameters added by `sites` adapted d x d projections of rank r.
inline std::size_t lora_param_count(std::size_t d, std::size_t rank, std::size_t sites) {
  if (rank == 0) throw ConfigError("LoRA rank must be at least 1");
  return sites * (rank * d + d * rank);
}

/// Frozen linear projection with an optional trainable low-rank adapter.
/// Without an adapter it is exactly the frozen layer.
class LoraLinear {
 public:
  LoraLinear() = default;

  LoraLinear(ParamRegistry& reg, const std::string& name, std::size_t d_in, std::size_t d_out,
             bool frozen_base, const Seeder& seed, std::optional<LoraConfig> adapter)
      : base_(reg, name, d_in, d_out, frozen_base, seed) {
    if (!adapter) return;
    const std::size_t r = adapter->rank;
    const std::size_t d = std::min(d_in, d_out);
    if (r == 0 || r >= d) {
      throw ConfigError("LoRA rank " + std::to_string(r) + " must satisfy 1 <= r < " +
                        std::to_string(d));
    }
    scale_ = adapter->scale();
    // A ~ N(0, 1/r), B = 0: the adapter contributes exactly zero at init.
    Rng rng = seed.for_param(name + ".lora_a");
    a_ = &reg.add(name + ".lora_a",
                  normal_tensor({r, d_in}, Scalar{1} / std::sqrt(static_cast<Scalar>(r)), rng),
                  false);
    b_ = &reg.add(name + ".lora_b", Tensor({d_out, r}, Scalar{0}), false);
  }

  Var operator()(Tape& tape, Var x) const {
    Var y = base_(tape, x);
    if (!has_adapter()) return y;
    return lora_apply(y, x, bind(tape, *a_), bind(tape, *b_), scale_);
  }

  /// Dense merged weight W0 + scale * (B A)^T in the input-major layout.
  Tensor merged_weight() const {
    Tensor w = base_.weight().value;
    if (!has_adapter()) return w;
    const Tensor& a = a_->value;
    const Tensor& b = b_->value;
    const std::size_t r = a.dim(0), d_in = a.dim(1), d_out = b.dim(0);
    for (std::size_t i = 0; i < d_in; ++i)
      for (std::size_t j = 0; j < d_out; ++j) {
        Scalar s = 0;
        for (std::size_t k = 0; k < r; ++k) s += b[j * r + k] * a[k * d_in + i];
        w[i * d_out + j] += scale_ * s;
      }
    return w;
  }

  bool has_adapter() const noexcept { return a_ != nullptr; }
  const Linear& base() const { return base_; }
  Parameter& lora_a() const { return *a_; }
  Parameter& lora_b() const { return *b_; }
  Scalar scale() const noexcept { return scale_; }

 private:
  Linear base_;
  Parameter* a_ = nullptr;
  Parameter* b_ = nullptr;
  Scalar scale_ = 1;
};

/// Dense inference-time weight of an adapted layer.
inline Tensor lora_merge(const LoraLinear& layer) { return layer.merged_weight(); }

}  // namespace taseg
