#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "taseg/autograd.hpp"
#include "taseg/error.hpp"
#include "taseg/tensor.hpp"

namespace taseg {

struct GradcheckReport {
  Scalar max_rel_err = 0;
  Scalar max_abs_err = 0;
  std::size_t coords_checked = 0;
  std::string worst;  // "<target>[<index>]" of the worst coordinate
  bool pass = true;
};

/// Relative error with a floor on the denominator so that coordinates whose
/// true derivative is ~0 are judged on an absolute scale of `floor`.
inline Scalar relative_error(Scalar analytic, Scalar numeric, Scalar floor = Scalar{1e-6}) {
  const Scalar denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

/// A tensor whose entries the check perturbs, and the buffer receiving its
/// analytic gradient from backward().
struct GradTarget {
  std::string name;
  Tensor* value;
  Tensor* grad;
};

struct GradcheckOptions {
  Scalar eps = Scalar{1e-5};
  Scalar tol = Scalar{1e-4};
  /// 0 checks every coordinate; otherwise at most this many per target,
  /// chosen by a seeded generator.
  std::size_t max_coords_per_target = 0;
  std::uint64_t seed = 0;
};

/// Checks backward() against central differences for every target.
/// `loss_fn` must build a fresh scalar loss on the given tape, reading the
/// targets' current values and routing their gradients to the targets' grad
/// buffers.
inline GradcheckReport gradcheck_targets(const std::function<Var(Tape&)>& loss_fn,
                                         const std::vector<GradTarget>& targets,
                                         const GradcheckOptions& opt = {}) {
  if (!(opt.eps > 0)) throw ConfigError("gradcheck: eps must be positive");
  if (!(opt.tol > 0)) throw ConfigError("gradcheck: tol must be positive");

  auto eval = [&]() {
    Tape tape;
    Var y = loss_fn(tape);
    if (y.value().size() != 1) throw ShapeError("gradcheck: function is not scalar-valued");
    return y.value()[0];
  };

  for (const auto& t : targets) t.grad->fill(0);
  Scalar base = 0;
  {
    Tape tape;
    Var y = loss_fn(tape);
    base = y.value().size() == 1 ? y.value()[0] : Scalar{0};
    tape.backward(y);
  }
  const Scalar again = eval();
  if (std::memcmp(&base, &again, sizeof(Scalar)) != 0) {
    throw Error("gradcheck: function is not deterministic (two evaluations differ)");
  }

  GradcheckReport report;
  std::mt19937_64 rng(opt.seed);
  for (const auto& t : targets) {
    const Tensor analytic = *t.grad;
    std::vector<std::size_t> coords(t.value->size());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (opt.max_coords_per_target && coords.size() > opt.max_coords_per_target) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opt.max_coords_per_target);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t i : coords) {
      Scalar& v = (*t.value)[i];
      const Scalar orig = v;
      v = orig + opt.eps;
      const Scalar up = eval();
      v = orig - opt.eps;
      const Scalar down = eval();
      v = orig;
      const Scalar numeric = (up - down) / (2 * opt.eps);
      const Scalar rel = relative_error(analytic[i], numeric);
      report.max_abs_err = std::max(report.max_abs_err, std::abs(analytic[i] - numeric));
      if (rel >= report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst = t.name + "[" + std::to_string(i) + "]";
      }
      ++report.coords_checked;
    }
  }
  report.pass = report.max_rel_err <= opt.tol;
  return report;
}

/// Single-input form: f maps a differentiable input to a scalar.
inline GradcheckReport gradcheck(const std::function<Var(Tape&, Var)>& f, const Tensor& x,
                                 Scalar eps = Scalar{1e-5}, Scalar tol = Scalar{1e-4}) {
  Tensor value = x;
  Tensor grad(x.shape(), Scalar{0});
  GradcheckOptions opt;
  opt.eps = eps;
  opt.tol = tol;
  return gradcheck_targets([&](Tape& tape) { return f(tape, tape.parameter(value, grad)); },
                           {GradTarget{"x", &value, &grad}}, opt);
}

}  // namespace taseg
