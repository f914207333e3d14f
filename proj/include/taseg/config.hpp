#pragma once

#include <cstddef>
#include <cstdint>
#include <fstream>
#include <set>
#include <string>

#include <json.hpp>

#include "taseg/error.hpp"
#include "taseg/tensor.hpp"

namespace taseg {

/// Architecture dimensions and the three ablation switches.
struct ModelConfig {
  std::size_t image_size = 64;
  std::size_t patch = 8;
  std::size_t d = 64;
  std::size_t heads = 4;
  std::size_t depth = 4;  // number of (DFFM, transformer block) pairs
  std::size_t lora_rank = 4;
  Scalar lora_alpha = 4;  // scale = alpha / rank
  std::size_t decoder_layers = 2;
  std::size_t mask_tokens = 4;
  std::size_t d_k = 16;
  std::size_t d_v = 16;
  std::size_t d_t = 32;
  std::size_t se_reduction = 4;
  std::size_t num_classes = 4;  // only sizes the text-free classifier head
  std::size_t rgb_channels = 3;
  std::size_t thermal_channels = 1;
  std::uint64_t init_seed = 0;

  bool enable_dffm = true;
  bool enable_decoder_lora = true;
  bool enable_text = true;

  std::size_t grid() const { return image_size / patch; }
  /// Channel width of the upscaled mask embeddings (d/4 after two halvings).
  std::size_t mask_dim() const { return d / 4; }

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v == 0) throw ConfigError(std::string("model.") + name + " must be positive");
    };
    positive(image_size, "image_size");
    positive(patch, "patch");
    positive(d, "d");
    positive(heads, "heads");
    positive(depth, "depth");
    positive(lora_rank, "lora_rank");
    positive(decoder_layers, "decoder_layers");
    positive(mask_tokens, "mask_tokens");
    positive(d_k, "d_k");
    positive(d_v, "d_v");
    positive(d_t, "d_t");
    positive(se_reduction, "se_reduction");
    positive(num_classes, "num_classes");
    positive(rgb_channels, "rgb_channels");
    positive(thermal_channels, "thermal_channels");
    if (image_size % patch != 0) {
      throw ConfigError("model.image_size " + std::to_string(image_size) +
                        " is not divisible by patch " + std::to_string(patch));
    }
    if (d % heads != 0) throw ConfigError("model.d must be divisible by model.heads");
    if (d % se_reduction != 0) throw ConfigError("model.d must be divisible by model.se_reduction");
    if (d % 4 != 0) throw ConfigError("model.d must be divisible by 4 (mask upscaling halves it twice)");
    if (lora_rank >= d) throw ConfigError("model.lora_rank must be smaller than model.d");
    if (!(lora_alpha > 0)) throw ConfigError("model.lora_alpha must be positive");
  }
};

enum class LrSchedule { Constant, Cosine };

struct TrainConfig {
  Scalar lr = Scalar{5e-4};
  Scalar weight_decay = Scalar{0.01};
  Scalar beta1 = Scalar{0.9};
  Scalar beta2 = Scalar{0.999};
  Scalar adam_eps = Scalar{1e-8};
  Scalar lambda_dice = 1;
  Scalar dice_smooth = 1;
  std::int32_t ignore_label = 255;
  std::size_t steps = 200;
  std::size_t batch = 4;
  std::uint64_t seed = 0;
  LrSchedule schedule = LrSchedule::Constant;
  std::size_t points_per_sample = 0;  // point prompts sampled per training image
  std::size_t log_every = 1;

  void validate() const {
    if (!(lr > 0)) throw ConfigError("training.lr must be positive");
    if (weight_decay < 0) throw ConfigError("training.weight_decay must be non-negative");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) {
      throw ConfigError("training.betas must lie in [0, 1)");
    }
    if (!(adam_eps > 0)) throw ConfigError("training.adam_eps must be positive");
    if (lambda_dice < 0) throw ConfigError("training.lambda_dice must be non-negative");
    if (!(dice_smooth > 0)) throw ConfigError("training.dice_smooth must be positive");
    if (batch == 0) throw ConfigError("training.batch must be positive");
    if (log_every == 0) throw ConfigError("training.log_every must be positive");
  }
};

struct RunConfig {
  ModelConfig model;
  TrainConfig training;
  std::string data_dir;
  std::string out_dir;

  void validate() const {
    model.validate();
    training.validate();
  }
};

// JSON mapping. Unknown keys are rejected so that typos do not silently fall
// back to defaults.

namespace detail {

template <typename T>
void read_field(const nlohmann::json& j, const char* key, T& out, std::set<std::string>& seen) {
  seen.insert(key);
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config field '") + key + "': " + e.what());
  }
}

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& seen,
                           const std::string& section) {
  if (!j.is_object()) throw ConfigError("config section '" + section + "' must be an object");
  for (const auto& [key, _] : j.items()) {
    if (!seen.contains(key)) throw ConfigError("unknown config key '" + section + "." + key + "'");
  }
}

}  // namespace detail

inline nlohmann::json to_json(const ModelConfig& m) {
  return {{"image_size", m.image_size},
          {"patch", m.patch},
          {"d", m.d},
          {"heads", m.heads},
          {"depth", m.depth},
          {"lora_rank", m.lora_rank},
          {"lora_alpha", m.lora_alpha},
          {"decoder_layers", m.decoder_layers},
          {"mask_tokens", m.mask_tokens},
          {"d_k", m.d_k},
          {"d_v", m.d_v},
          {"d_t", m.d_t},
          {"se_reduction", m.se_reduction},
          {"num_classes", m.num_classes},
          {"rgb_channels", m.rgb_channels},
          {"thermal_channels", m.thermal_channels},
          {"init_seed", m.init_seed}};
}

inline nlohmann::json ablation_json(const ModelConfig& m) {
  return {{"enable_dffm", m.enable_dffm},
          {"enable_decoder_lora", m.enable_decoder_lora},
          {"enable_text", m.enable_text}};
}

inline nlohmann::json to_json(const TrainConfig& t) {
  return {{"lr", t.lr},
          {"weight_decay", t.weight_decay},
          {"beta1", t.beta1},
          {"beta2", t.beta2},
          {"adam_eps", t.adam_eps},
          {"lambda_dice", t.lambda_dice},
          {"dice_smooth", t.dice_smooth},
          {"ignore_label", t.ignore_label},
          {"steps", t.steps},
          {"batch", t.batch},
          {"seed", t.seed},
          {"schedule", t.schedule == LrSchedule::Cosine ? "cosine" : "constant"},
          {"points_per_sample", t.points_per_sample},
          {"log_every", t.log_every}};
}

inline nlohmann::json to_json(const RunConfig& c) {
  return {{"model", to_json(c.model)},
          {"ablation", ablation_json(c.model)},
          {"training", to_json(c.training)},
          {"paths", {{"data", c.data_dir}, {"out", c.out_dir}}}};
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  std::set<std::string> top;
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  if (j.contains("model")) {
    const auto& m = j.at("model");
    std::set<std::string> seen;
    auto& mc = c.model;
    detail::read_field(m, "image_size", mc.image_size, seen);
    detail::read_field(m, "patch", mc.patch, seen);
    detail::read_field(m, "d", mc.d, seen);
    detail::read_field(m, "heads", mc.heads, seen);
    detail::read_field(m, "depth", mc.depth, seen);
    detail::read_field(m, "lora_rank", mc.lora_rank, seen);
    detail::read_field(m, "lora_alpha", mc.lora_alpha, seen);
    detail::read_field(m, "decoder_layers", mc.decoder_layers, seen);
    detail::read_field(m, "mask_tokens", mc.mask_tokens, seen);
    detail::read_field(m, "d_k", mc.d_k, seen);
    detail::read_field(m, "d_v", mc.d_v, seen);
    detail::read_field(m, "d_t", mc.d_t, seen);
    detail::read_field(m, "se_reduction", mc.se_reduction, seen);
    detail::read_field(m, "num_classes", mc.num_classes, seen);
    detail::read_field(m, "rgb_channels", mc.rgb_channels, seen);
    detail::read_field(m, "thermal_channels", mc.thermal_channels, seen);
    detail::read_field(m, "init_seed", mc.init_seed, seen);
    detail::reject_unknown(m, seen, "model");
  }
  if (j.contains("ablation")) {
    const auto& a = j.at("ablation");
    std::set<std::string> seen;
    detail::read_field(a, "enable_dffm", c.model.enable_dffm, seen);
    detail::read_field(a, "enable_decoder_lora", c.model.enable_decoder_lora, seen);
    detail::read_field(a, "enable_text", c.model.enable_text, seen);
    detail::reject_unknown(a, seen, "ablation");
  }
  if (j.contains("training")) {
    const auto& t = j.at("training");
    std::set<std::string> seen;
    auto& tc = c.training;
    detail::read_field(t, "lr", tc.lr, seen);
    detail::read_field(t, "weight_decay", tc.weight_decay, seen);
    detail::read_field(t, "beta1", tc.beta1, seen);
    detail::read_field(t, "beta2", tc.beta2, seen);
    detail::read_field(t, "adam_eps", tc.adam_eps, seen);
    detail::read_field(t, "lambda_dice", tc.lambda_dice, seen);
    detail::read_field(t, "dice_smooth", tc.dice_smooth, seen);
    detail::read_field(t, "ignore_label", tc.ignore_label, seen);
    detail::read_field(t, "steps", tc.steps, seen);
    detail::read_field(t, "batch", tc.batch, seen);
    detail::read_field(t, "seed", tc.seed, seen);
    detail::read_field(t, "points_per_sample", tc.points_per_sample, seen);
    detail::read_field(t, "log_every", tc.log_every, seen);
    std::string schedule = "constant";
    detail::read_field(t, "schedule", schedule, seen);
    if (schedule == "constant") {
      tc.schedule = LrSchedule::Constant;
    } else if (schedule == "cosine") {
      tc.schedule = LrSchedule::Cosine;
    } else {
      throw ConfigError("training.schedule must be 'constant' or 'cosine', got '" + schedule + "'");
    }
    detail::reject_unknown(t, seen, "training");
  }
  if (j.contains("paths")) {
    const auto& p = j.at("paths");
    std::set<std::string> seen;
    detail::read_field(p, "data", c.data_dir, seen);
    detail::read_field(p, "out", c.out_dir, seen);
    detail::reject_unknown(p, seen, "paths");
  }
  for (const char* key : {"model", "ablation", "training", "paths"}) top.insert(key);
  detail::reject_unknown(j, top, "config");
  c.validate();
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace taseg
