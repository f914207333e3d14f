#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "taseg/error.hpp"
#include "taseg/layers.hpp"
#include "taseg/lora.hpp"
#include "taseg/ops.hpp"

namespace taseg {

/// Scaled dot-product attention over already projected queries [n x d],
/// keys [m x d] and values [m x d], split into `heads` column blocks. Each
/// head uses scale 1/sqrt(d/heads); head outputs are concatenated.
inline Var scaled_dot_product_attention(Var q, Var k, Var v, std::size_t heads) {
  const std::size_t d = q.shape().at(1);
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("attention: width " + std::to_string(d) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  if (k.shape().at(1) != d || v.shape().at(1) != d || k.shape()[0] != v.shape()[0]) {
    throw ShapeError("attention: q " + to_string(q.shape()) + ", k " + to_string(k.shape()) +
                     ", v " + to_string(v.shape()) + " do not conform");
  }
  const std::size_t dh = d / heads;
  const Scalar scale = Scalar{1} / std::sqrt(static_cast<Scalar>(dh));
  if (heads == 1) {
    Var w = ops::softmax(ops::scale(ops::matmul(q, ops::transpose(k)), scale));
    return ops::matmul(w, v);
  }
  std::vector<Var> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Var qh = ops::slice_cols(q, h * dh, dh);
    Var kh = ops::slice_cols(k, h * dh, dh);
    Var vh = ops::slice_cols(v, h * dh, dh);
    Var w = ops::softmax(ops::scale(ops::matmul(qh, ops::transpose(kh)), scale));
    outs.push_back(ops::matmul(w, vh));
  }
  return ops::concat_cols(outs);
}

/// Multi-head attention with Q/K/V/output projections. The Q and V
/// projections optionally carry low-rank adapters.
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(ParamRegistry& reg, const std::string& name, std::size_t d,
                     std::size_t heads, bool frozen, const Seeder& seed,
                     std::optional<LoraConfig> lora = std::nullopt)
      : heads_(heads) {
    if (heads == 0 || d % heads != 0) {
      throw ConfigError(name + ": width " + std::to_string(d) + " not divisible by " +
                        std::to_string(heads) + " heads");
    }
    q_ = LoraLinear(reg, name + ".q", d, d, frozen, seed, lora);
    k_ = Linear(reg, name + ".k", d, d, frozen, seed);
    v_ = LoraLinear(reg, name + ".v", d, d, frozen, seed, lora);
    o_ = Linear(reg, name + ".o", d, d, frozen, seed);
  }

  Var operator()(Tape& tape, Var q, Var k, Var v) const {
    return o_(tape, scaled_dot_product_attention(q_(tape, q), k_(tape, k), v_(tape, v), heads_));
  }

  std::size_t heads() const noexcept { return heads_; }
  const LoraLinear& q() const { return q_; }
  const Linear& k() const { return k_; }
  const LoraLinear& v() const { return v_; }
  const Linear& o() const { return o_; }

 private:
  std::size_t heads_ = 1;
  LoraLinear q_;
  Linear k_;
  LoraLinear v_;
  Linear o_;
};

/// Pre-norm residual block: x + MHA(LN(x)), then + MLP(LN(.)).
class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(ParamRegistry& reg, const std::string& name, std::size_t d, std::size_t heads,
                   bool frozen, const Seeder& seed, std::optional<LoraConfig> lora = std::nullopt)
      : norm1_(reg, name + ".norm1", d, frozen),
        attn_(reg, name + ".attn", d, heads, frozen, seed, lora),
        norm2_(reg, name + ".norm2", d, frozen),
        mlp_(reg, name + ".mlp", d, 4 * d, frozen, seed) {}

  Var operator()(Tape& tape, Var x) const {
    Var h = norm1_(tape, x);
    x = ops::add(x, attn_(tape, h, h, h));
    return ops::add(x, mlp_(tape, norm2_(tape, x)));
  }

  FeatureMap operator()(Tape& tape, const FeatureMap& x) const {
    return {(*this)(tape, x.tokens), x.h, x.w};
  }

  const LayerNorm& norm1() const { return norm1_; }
  const MultiHeadAttention& attn() const { return attn_; }
  const LayerNorm& norm2() const { return norm2_; }
  const Mlp& mlp() const { return mlp_; }

 private:
  LayerNorm norm1_;
  MultiHeadAttention attn_;
  LayerNorm norm2_;
  Mlp mlp_;
};

}  // namespace taseg
