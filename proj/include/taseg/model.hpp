#pragma once

#include <cstddef>

#include "taseg/config.hpp"
#include "taseg/decoder.hpp"
#include "taseg/encoder.hpp"
#include "taseg/params.hpp"
#include "taseg/prompt.hpp"

namespace taseg {

struct ModelOutput {
  FeatureMap e_en;
  DecoderOutput decoder;
  Var logits() const { return decoder.logits; }
};

/// Encoder, prompt encoder and mask decoder over one parameter registry.
/// Parameters register in that order, and each draws its initial value from
/// its own name-derived stream, so switching a component off leaves every
/// other parameter bit-identical.
class TasegModel {
 public:
  explicit TasegModel(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    const Seeder seed(cfg_.init_seed);
    prompt_ = PromptEncoder(registry_, cfg_.d, seed);
    encoder_ = RgbtEncoder(registry_, cfg_, seed);
    decoder_ = MaskDecoder(registry_, cfg_, seed);
  }

  TasegModel(const TasegModel&) = delete;
  TasegModel& operator=(const TasegModel&) = delete;

  /// rgb [H x W x 3] and thermal [H x W x 1] to logits [H x W x C].
  ModelOutput forward(Tape& tape, const Tensor& rgb, const Tensor& thermal,
                      const ClassVocabulary* vocab, const PointPrompt& points = {}) const {
    if (rgb.ndim() != 3 || rgb.dim(0) != cfg_.image_size || rgb.dim(1) != cfg_.image_size) {
      throw ShapeError("model expects " + std::to_string(cfg_.image_size) + "x" +
                       std::to_string(cfg_.image_size) + " images, got " + to_string(rgb.shape()));
    }
    FeatureMap e_en = encoder_(tape, tape.constant_ref(rgb), tape.constant_ref(thermal));
    const Tensor pe = prompt_.dense_pe(e_en.h, e_en.w);
    Var sparse = prompt_.encode_points(tape, points, rgb.dim(0), rgb.dim(1));
    DecoderOutput dec = decoder_(tape, e_en, prompt_.no_mask(tape), pe, sparse, vocab,
                                 rgb.dim(0), rgb.dim(1));
    return {e_en, dec};
  }

  const ModelConfig& config() const noexcept { return cfg_; }
  ParamRegistry& registry() noexcept { return registry_; }
  const ParamRegistry& registry() const noexcept { return registry_; }
  const PromptEncoder& prompt() const noexcept { return prompt_; }
  const RgbtEncoder& encoder() const noexcept { return encoder_; }
  const MaskDecoder& decoder() const noexcept { return decoder_; }

 private:
  ModelConfig cfg_;
  ParamRegistry registry_;
  PromptEncoder prompt_;
  RgbtEncoder encoder_;
  MaskDecoder decoder_;
};

}  // namespace taseg
