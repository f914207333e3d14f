#pragma once

#include <cstdint>
#include <iostream>
#include <span>

#include "taseg/autograd.hpp"
#include "taseg/config.hpp"
#include "taseg/error.hpp"
#include "taseg/ops.hpp"

namespace taseg {

struct LossConfig {
  Scalar lambda_dice = 1;
  Scalar dice_smooth = 1;
  std::int32_t ignore_label = 255;

  static LossConfig from(const TrainConfig& t) { return {t.lambda_dice, t.dice_smooth, t.ignore_label}; }
};

namespace detail {

inline Var pixels_by_class(Var logits, std::span<const std::int32_t> labels) {
  const Shape& s = logits.shape();
  if (s.size() != 3 || s[0] * s[1] != labels.size()) {
    throw ShapeError("loss: logits " + to_string(s) + " do not match " +
                     std::to_string(labels.size()) + " labels");
  }
  return ops::reshape(logits, {s[0] * s[1], s[2]});
}

inline bool all_ignored(std::span<const std::int32_t> labels, std::int32_t ignore) {
  for (std::int32_t l : labels) {
    if (l != ignore) return false;
  }
  return true;
}

}  // namespace detail

/// Mean pixel cross-entropy of logits [H x W x C]. A map with every pixel
/// ignored scores 0.
inline Var cross_entropy_loss(Var logits, std::span<const std::int32_t> labels, const LossConfig& cfg) {
  if (detail::all_ignored(labels, cfg.ignore_label)) {
    std::clog << "warning: every pixel carries the ignore label; cross-entropy defined as 0\n";
  }
  return ops::cross_entropy(detail::pixels_by_class(logits, labels), labels, cfg.ignore_label);
}

/// 1 - mean_c (2 sum p_c y_c + eps) / (sum p_c + sum y_c + eps) over the
/// non-ignored pixels, p = softmax(logits).
inline Var dice_loss(Var logits, std::span<const std::int32_t> labels, const LossConfig& cfg) {
  Var probs = ops::softmax(detail::pixels_by_class(logits, labels));
  return ops::dice_from_probs(probs, labels, cfg.dice_smooth, cfg.ignore_label);
}

inline Var total_loss(Var logits, std::span<const std::int32_t> labels, const LossConfig& cfg) {
  if (cfg.lambda_dice < 0) throw ConfigError("lambda_dice must be non-negative");
  Var ce = cross_entropy_loss(logits, labels, cfg);
  if (cfg.lambda_dice == 0) return ce;
  return ops::add(ce, ops::scale(dice_loss(logits, labels, cfg), cfg.lambda_dice));
}

}  // namespace taseg
