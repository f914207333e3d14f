#pragma once

// Gradient verification suite shared by the CLI and the tests: every
// differentiable op on three shapes, and the whole model under total_loss.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "taseg/data.hpp"
#include "taseg/gradcheck.hpp"
#include "taseg/losses.hpp"
#include "taseg/model.hpp"
#include "taseg/ops.hpp"

namespace taseg {

struct OpCheck {
  std::string op;
  Shape shape;
  GradcheckReport report;
};

namespace detail {

struct OpCase {
  std::string name;
  std::vector<Shape> shapes;
  std::function<Var(Tape&, Var)> op;
};

// Non-scalar outputs are reduced through a fixed random weighting so that no
// gradient is trivially zero.
inline Var weighted_sum(Tape& tape, Var y, std::uint64_t seed) {
  Rng rng(seed);
  return ops::sum(ops::mul(y, tape.constant(normal_tensor(y.shape(), 1, rng))));
}

inline std::vector<OpCase> op_cases() {
  static const std::vector<std::int32_t> labels9 = {0, 2, 1, 1, 0, 2, 255, 1, 0};
  return {
      {"add", {{3}, {2, 3}, {2, 2, 2}}, [](Tape&, Var x) { return ops::add(x, ops::mul(x, x)); }},
      {"sub", {{3}, {2, 3}, {2, 2, 2}}, [](Tape&, Var x) { return ops::sub(ops::mul(x, x), x); }},
      {"mul", {{3}, {2, 3}, {2, 2, 2}}, [](Tape&, Var x) { return ops::mul(x, ops::sigmoid(x)); }},
      {"scale", {{3}, {2, 3}, {4, 1}}, [](Tape&, Var x) { return ops::scale(x, -1.7); }},
      {"add_row", {{2, 3}, {4, 3}, {2, 2, 3}},
       [](Tape&, Var x) {
         Var row = ops::reshape(x, {numel(x.shape()) / 3, 3});
         return ops::add_row(x, ops::mean_rows(row));
       }},
      {"mul_row", {{2, 3}, {4, 3}, {2, 2, 3}},
       [](Tape&, Var x) {
         Var flat = ops::reshape(x, {numel(x.shape()) / 3, 3});
         return ops::mul_row(x, ops::mean_rows(flat));
       }},
      {"matmul", {{2, 3}, {3, 3}, {1, 3}},
       [](Tape&, Var x) { return ops::matmul(x, ops::transpose(ops::mul(x, x))); }},
      {"transpose", {{2, 3}, {3, 1}, {4, 4}}, [](Tape&, Var x) { return ops::transpose(x); }},
      {"reshape", {{6}, {2, 3}, {2, 1, 3}}, [](Tape&, Var x) { return ops::reshape(x, {3, 2}); }},
      {"softmax_last", {{4}, {2, 3}, {2, 2, 3}}, [](Tape&, Var x) { return ops::softmax(x); }},
      {"softmax_axis0", {{4}, {2, 3}, {2, 2, 3}}, [](Tape&, Var x) { return ops::softmax(x, 0); }},
      {"sum", {{4}, {2, 3}, {2, 2, 3}}, [](Tape&, Var x) { return ops::sum(ops::mul(x, x)); }},
      {"mean", {{4}, {2, 3}, {2, 2, 3}}, [](Tape&, Var x) { return ops::mean(ops::mul(x, x)); }},
      {"mean_rows", {{2, 3}, {5, 2}, {2, 2, 3}}, [](Tape&, Var x) { return ops::mean_rows(x); }},
      {"gelu", {{4}, {2, 3}, {2, 2, 3}}, [](Tape&, Var x) { return ops::gelu(x); }},
      {"relu", {{4}, {2, 3}, {2, 2, 3}}, [](Tape&, Var x) { return ops::relu(x); }},
      {"sigmoid", {{4}, {2, 3}, {2, 2, 3}}, [](Tape&, Var x) { return ops::sigmoid(x); }},
      {"layer_norm", {{2, 4}, {3, 5}, {2, 2, 3}},
       [](Tape& t, Var x) {
         Rng r(3);
         const std::size_t d = x.shape().back();
         Var g = t.constant(normal_tensor({d}, 1, r));
         Var b = t.constant(normal_tensor({d}, 1, r));
         return ops::layer_norm(x, g, b, 1e-5);
       }},
      {"slice_cols", {{2, 4}, {3, 5}, {1, 3}}, [](Tape&, Var x) { return ops::slice_cols(x, 1, 2); }},
      {"slice_rows", {{3, 2}, {4, 5}, {2, 1}}, [](Tape&, Var x) { return ops::slice_rows(x, 1, 1); }},
      {"concat_cols", {{2, 2}, {3, 1}, {1, 4}},
       [](Tape&, Var x) { return ops::concat_cols({x, ops::mul(x, x), x}); }},
      {"select_cols", {{2, 3}, {1, 4}, {3, 2}},
       [](Tape&, Var x) {
         const std::size_t c = x.shape()[1];
         return ops::select_cols(x, {c - 1, 0, c - 1});
       }},
      {"concat_rows", {{2, 2}, {1, 3}, {3, 1}},
       [](Tape&, Var x) { return ops::concat_rows({ops::mul(x, x), x}); }},
      {"patchify", {{4, 4, 1}, {4, 6, 2}, {2, 2, 3}}, [](Tape&, Var x) { return ops::patchify(x, 2); }},
      {"depth_to_space2", {{1, 1, 4}, {2, 3, 8}, {2, 2, 4}}, [](Tape&, Var x) { return ops::depth_to_space2(x); }},
      {"bilinear_resize", {{2, 2, 1}, {3, 4, 2}, {4, 4, 3}},
       [](Tape&, Var x) { return ops::bilinear_resize(x, 5, 7); }},
      {"cross_entropy", {{9, 3}, {9, 4}, {9, 5}},
       [](Tape&, Var x) { return ops::cross_entropy(x, labels9, 255); }},
      {"dice_loss", {{9, 3}, {9, 4}, {9, 5}},
       [](Tape&, Var x) { return ops::dice_from_probs(ops::softmax(x), labels9, 1.0, 255); }},
  };
}

}  // namespace detail

/// Central differences against backward() for every op, three shapes each.
inline std::vector<OpCheck> gradcheck_ops(Scalar eps = Scalar{1e-5}, Scalar tol = Scalar{1e-4},
                                          std::uint64_t seed = 99) {
  Rng rng(seed);
  std::vector<OpCheck> out;
  for (const auto& c : detail::op_cases()) {
    for (const auto& shape : c.shapes) {
      const Tensor x = normal_tensor(shape, 1, rng);
      auto f = [&](Tape& tape, Var v) {
        Var y = c.op(tape, v);
        return y.value().size() == 1 ? y : detail::weighted_sum(tape, y, 1234);
      };
      out.push_back({c.name, shape, gradcheck(f, x, eps, tol)});
    }
  }
  return out;
}

struct ModelGradcheckOptions {
  std::size_t coords_per_target = 4;
  Scalar perturb = Scalar{0.05};  // moves zero-initialised branches off their init point
  std::uint64_t seed = 0;
  Scalar eps = Scalar{1e-5};
  Scalar tol = Scalar{1e-4};
};

/// Gradient of total_loss with respect to every trainable parameter of the
/// full model on one synthetic sample, at subsampled coordinates.
inline GradcheckReport gradcheck_model(const ModelConfig& cfg, const ModelGradcheckOptions& opt = {}) {
  TasegModel m(cfg);
  Rng rng(mix_seed(opt.seed, 1));
  for (std::size_t i = 0; i < m.registry().size(); ++i) {
    Parameter& p = m.registry()[i];
    if (p.frozen) continue;
    const Tensor noise = normal_tensor(p.value.shape(), opt.perturb, rng);
    for (std::size_t j = 0; j < noise.size(); ++j) p.value[j] += noise[j];
  }
  RgbtSample s = gen_synthetic({1, cfg.image_size, cfg.patch, mix_seed(opt.seed, 2)})[0];
  if (!cfg.enable_text) {
    for (auto& l : s.labels.ids) l %= static_cast<std::int32_t>(cfg.num_classes);
  }
  const ClassVocabulary vocab = toy_vocabulary(synthetic_class_names(), cfg.d_t, opt.seed);
  const ClassVocabulary* v = cfg.enable_text ? &vocab : nullptr;
  std::vector<GradTarget> targets;
  for (std::size_t i = 0; i < m.registry().size(); ++i) {
    Parameter& p = m.registry()[i];
    if (!p.frozen) targets.push_back({p.name, &p.value, &p.grad});
  }
  GradcheckOptions go;
  go.eps = opt.eps;
  go.tol = opt.tol;
  go.max_coords_per_target = opt.coords_per_target;
  go.seed = mix_seed(opt.seed, 3);
  return gradcheck_targets(
      [&](Tape& tape) { return total_loss(m.forward(tape, s.rgb, s.thermal, v).logits(), s.labels.ids, {}); },
      targets, go);
}

}  // namespace taseg
