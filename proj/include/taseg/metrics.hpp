#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "taseg/data.hpp"
#include "taseg/error.hpp"

namespace taseg {

/// Per-class pixel counts accumulated over one or more label maps.
struct Confusion {
  std::vector<std::size_t> tp, fp, fn;

  explicit Confusion(std::size_t classes = 0) : tp(classes, 0), fp(classes, 0), fn(classes, 0) {}
  std::size_t classes() const noexcept { return tp.size(); }

  void add(std::span<const std::int32_t> pred, std::span<const std::int32_t> gt, std::int32_t ignore) {
    if (pred.size() != gt.size()) {
      throw ShapeError("metrics: prediction has " + std::to_string(pred.size()) + " pixels, ground truth " +
                       std::to_string(gt.size()));
    }
    const auto C = static_cast<std::int32_t>(classes());
    for (std::size_t i = 0; i < gt.size(); ++i) {
      const std::int32_t g = gt[i], p = pred[i];
      if (g == ignore) continue;
      if (g < 0 || g >= C) throw ConfigError("metrics: ground-truth label " + std::to_string(g) + " out of range");
      if (p < 0 || p >= C) throw ConfigError("metrics: predicted label " + std::to_string(p) + " out of range");
      if (p == g) {
        ++tp[static_cast<std::size_t>(g)];
      } else {
        ++fp[static_cast<std::size_t>(p)];
        ++fn[static_cast<std::size_t>(g)];
      }
    }
  }

  void add(const LabelMap& pred, const LabelMap& gt, std::int32_t ignore) {
    if (pred.height != gt.height || pred.width != gt.width) {
      throw ShapeError("metrics: label maps " + std::to_string(pred.height) + "x" + std::to_string(pred.width) +
                       " and " + std::to_string(gt.height) + "x" + std::to_string(gt.width) + " differ");
    }
    add(pred.ids, gt.ids, ignore);
  }
};

/// IoU per class; nullopt marks a class with empty union (absent).
using ClassIou = std::vector<std::optional<double>>;

inline ClassIou iou_from(const Confusion& c) {
  ClassIou out(c.classes());
  for (std::size_t k = 0; k < c.classes(); ++k) {
    const std::size_t u = c.tp[k] + c.fp[k] + c.fn[k];
    if (u > 0) out[k] = static_cast<double>(c.tp[k]) / static_cast<double>(u);
  }
  return out;
}

inline ClassIou iou_per_class(const LabelMap& pred, const LabelMap& gt, std::size_t classes, std::int32_t ignore) {
  Confusion c(classes);
  c.add(pred, gt, ignore);
  return iou_from(c);
}

struct MiouPolicy {
  bool include_background = true;  // class 0 counted in the mean
};

/// Mean over present classes.
inline double miou(const ClassIou& iou, MiouPolicy policy = {}) {
  double sum = 0;
  std::size_t n = 0;
  for (std::size_t k = policy.include_background ? 0 : 1; k < iou.size(); ++k) {
    if (iou[k]) {
      sum += *iou[k];
      ++n;
    }
  }
  if (n == 0) throw ConfigError("mIoU undefined: no class is present in prediction or ground truth");
  return sum / static_cast<double>(n);
}

/// Per-split and overall confusion; the overall entry is keyed "overall".
struct SplitMetrics {
  std::vector<std::string> class_names;
  std::map<std::string, Confusion> by_split;

  nlohmann::json to_json(MiouPolicy policy = {}) const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [split, conf] : by_split) {
      ClassIou iou = iou_from(conf);
      nlohmann::json per = nlohmann::json::object();
      for (std::size_t k = 0; k < iou.size(); ++k) {
        per[class_names.at(k)] = iou[k] ? nlohmann::json(*iou[k]) : nlohmann::json(nullptr);
      }
      j[split] = {{"per_class_iou", per}, {"miou", miou(iou, policy)}};
    }
    return j;
  }
};

}  // namespace taseg
