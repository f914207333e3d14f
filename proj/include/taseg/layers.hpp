#pragma once

#include <cmath>
#include <cstddef>
#include <string>

#include "taseg/autograd.hpp"
#include "taseg/error.hpp"
#include "taseg/ops.hpp"
#include "taseg/params.hpp"
#include "taseg/random.hpp"
#include "taseg/tensor.hpp"

namespace taseg {

/// Patch-grid features. Stored as a token matrix [(h*w) x d] in row-major
/// grid order; grid() views the same data as [h x w x d].
struct FeatureMap {
  Var tokens;
  std::size_t h = 0;
  std::size_t w = 0;

  std::size_t channels() const { return tokens.shape().at(1); }
  Var grid() const { return ops::reshape(tokens, {h, w, channels()}); }

  static FeatureMap from_grid(Var grid) {
    const Shape& s = grid.shape();
    if (s.size() != 3) throw ShapeError("feature grid must be [h x w x d], got " + to_string(s));
    return {ops::reshape(grid, {s[0] * s[1], s[2]}), s[0], s[1]};
  }
};

/// x W + b over the last axis of x, for any number of leading axes.
inline Var linear(Var x, Var weight, Var bias) {
  const Shape& s = x.shape();
  if (s.empty() || weight.shape().size() != 2 || weight.shape()[0] != s.back()) {
    throw ShapeError("linear: input " + to_string(s) + " does not conform to weight " +
                     to_string(weight.shape()));
  }
  const auto [rows, d_in] = as_rows(s);
  Var y = ops::matmul(s.size() == 2 ? x : ops::reshape(x, {rows, d_in}), weight);
  y = ops::add_row(y, bias);
  if (s.size() == 2) return y;
  Shape out = s;
  out.back() = weight.shape()[1];
  return ops::reshape(y, out);
}

enum class Init { Random, Zero };

/// Dense layer, weight stored input-major as [d_in x d_out].
class Linear {
 public:
  Linear() = default;

  /// Random init draws weights from N(0, 1/d_in) and biases from N(0, 0.02^2).
  Linear(ParamRegistry& reg, const std::string& name, std::size_t d_in, std::size_t d_out,
         bool frozen, const Seeder& seed, Init init = Init::Random) {
    Tensor w({d_in, d_out}, Scalar{0});
    Tensor b({d_out}, Scalar{0});
    if (init == Init::Random) {
      Rng rng = seed.for_param(name);
      w = normal_tensor({d_in, d_out}, Scalar{1} / std::sqrt(static_cast<Scalar>(d_in)), rng);
      b = normal_tensor({d_out}, Scalar{0.02}, rng);
    }
    weight_ = &reg.add(name + ".weight", std::move(w), frozen);
    bias_ = &reg.add(name + ".bias", std::move(b), frozen);
  }

  Var operator()(Tape& tape, Var x) const {
    return linear(x, bind(tape, *weight_), bind(tape, *bias_));
  }

  Parameter& weight() const { return *weight_; }
  Parameter& bias() const { return *bias_; }
  std::size_t in_features() const { return weight_->value.dim(0); }
  std::size_t out_features() const { return weight_->value.dim(1); }

 private:
  Parameter* weight_ = nullptr;
  Parameter* bias_ = nullptr;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParamRegistry& reg, const std::string& name, std::size_t d, bool frozen,
            Scalar eps = Scalar{1e-5})
      : eps_(eps) {
    gamma_ = &reg.add(name + ".gamma", Tensor({d}, Scalar{1}), frozen);
    beta_ = &reg.add(name + ".beta", Tensor({d}, Scalar{0}), frozen);
  }

  Var operator()(Tape& tape, Var x) const {
    return ops::layer_norm(x, bind(tape, *gamma_), bind(tape, *beta_), eps_);
  }

  Parameter& gamma() const { return *gamma_; }
  Parameter& beta() const { return *beta_; }

 private:
  Parameter* gamma_ = nullptr;
  Parameter* beta_ = nullptr;
  Scalar eps_ = Scalar{1e-5};
};

/// Non-overlapping p x p patchify followed by a linear projection; the
/// learned equivalent of a stride-p, kernel-p convolution. The weight's row
/// index is the (row, col, channel) position inside the patch.
inline FeatureMap patch_embed(Var img, std::size_t patch, Var weight, Var bias) {
  const Shape& s = img.shape();
  if (s.size() != 3) throw ShapeError("patch_embed: expected [H x W x c], got " + to_string(s));
  if (patch == 0 || s[0] % patch != 0 || s[1] % patch != 0) {
    throw ShapeError("patch_embed: H=" + std::to_string(s[0]) + ", W=" + std::to_string(s[1]) +
                     " not divisible by patch size p=" + std::to_string(patch));
  }
  Var tokens = linear(ops::patchify(img, patch), weight, bias);
  return {tokens, s[0] / patch, s[1] / patch};
}

class PatchEmbed {
 public:
  PatchEmbed() = default;
  PatchEmbed(ParamRegistry& reg, const std::string& name, std::size_t patch,
             std::size_t channels, std::size_t d, bool frozen, const Seeder& seed)
      : patch_(patch), proj_(reg, name, patch * patch * channels, d, frozen, seed) {}

  FeatureMap operator()(Tape& tape, Var img) const {
    return patch_embed(img, patch_, bind(tape, proj_.weight()), bind(tape, proj_.bias()));
  }

  const Linear& proj() const { return proj_; }
  std::size_t patch() const { return patch_; }

 private:
  std::size_t patch_ = 0;
  Linear proj_;
};

/// Squeeze-and-excitation channel gate: global average pool, bottleneck
/// MLP (d -> d/s -> d, ReLU between), sigmoid, per-channel rescale.
class SeBlock {
 public:
  SeBlock() = default;
  SeBlock(ParamRegistry& reg, const std::string& name, std::size_t d, std::size_t reduction,
          bool frozen, const Seeder& seed) {
    if (reduction == 0 || d % reduction != 0) {
      throw ConfigError("SEBlock: channels " + std::to_string(d) +
                        " not divisible by reduction " + std::to_string(reduction));
    }
    squeeze_ = Linear(reg, name + ".fc1", d, d / reduction, frozen, seed);
    excite_ = Linear(reg, name + ".fc2", d / reduction, d, frozen, seed);
  }

  /// Channel gate in (0, 1), shape [1 x d].
  Var gate(Tape& tape, Var tokens) const {
    Var z = ops::mean_rows(tokens);
    return ops::sigmoid(excite_(tape, ops::relu(squeeze_(tape, z))));
  }

  Var operator()(Tape& tape, Var tokens) const { return ops::mul_row(tokens, gate(tape, tokens)); }

  FeatureMap operator()(Tape& tape, const FeatureMap& x) const {
    return {(*this)(tape, x.tokens), x.h, x.w};
  }

  const Linear& fc1() const { return squeeze_; }
  const Linear& fc2() const { return excite_; }

 private:
  Linear squeeze_;
  Linear excite_;
};

/// linear(d -> 4d) -> GELU -> linear(4d -> d)
class Mlp {
 public:
  Mlp() = default;
  Mlp(ParamRegistry& reg, const std::string& name, std::size_t d, std::size_t hidden, bool frozen,
      const Seeder& seed)
      : fc1_(reg, name + ".fc1", d, hidden, frozen, seed),
        fc2_(reg, name + ".fc2", hidden, d, frozen, seed) {}

  Var operator()(Tape& tape, Var x) const { return fc2_(tape, ops::gelu(fc1_(tape, x))); }

  const Linear& fc1() const { return fc1_; }
  const Linear& fc2() const { return fc2_; }

 private:
  Linear fc1_;
  Linear fc2_;
};

}  // namespace taseg
