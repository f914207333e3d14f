#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "taseg/attention.hpp"
#include "taseg/config.hpp"
#include "taseg/error.hpp"
#include "taseg/layers.hpp"
#include "taseg/lora.hpp"
#include "taseg/ops.hpp"

namespace taseg {

/// Thermal stream and backbone stream after `depth_index` fusion stages.
/// depth_index 0 holds the two patch embeddings.
struct EncoderState {
  FeatureMap f_dffm;
  FeatureMap f_tb;
  std::size_t depth_index = 0;
};

/// One fusion stage:
///   out = conv_out(conv_prev(f_dffm) + SE(conv_tb(f_tb)))
/// with every conv a 1x1 projection over the patch grid. conv_out starts at
/// zero, so an untrained stage contributes nothing to the backbone.
class DffmBlock {
 public:
  DffmBlock() = default;
  DffmBlock(ParamRegistry& reg, const std::string& name, std::size_t d, std::size_t se_reduction,
            const Seeder& seed)
      : conv_prev_(reg, name + ".conv_prev", d, d, false, seed),
        conv_tb_(reg, name + ".conv_tb", d, d, false, seed),
        attention_(reg, name + ".se", d, se_reduction, false, seed),
        conv_out_(reg, name + ".conv_out", d, d, false, seed, Init::Zero) {}

  FeatureMap operator()(Tape& tape, const EncoderState& state) const {
    if (state.f_dffm.tokens.shape() != state.f_tb.tokens.shape()) {
      throw ShapeError("DFFM: thermal stream " + to_string(state.f_dffm.tokens.shape()) +
                       " and backbone stream " + to_string(state.f_tb.tokens.shape()) +
                       " differ");
    }
    Var prev = conv_prev_(tape, state.f_dffm.tokens);
    Var gated = attention_(tape, conv_tb_(tape, state.f_tb.tokens));
    return {conv_out_(tape, ops::add(prev, gated)), state.f_tb.h, state.f_tb.w};
  }

  const Linear& conv_prev() const { return conv_prev_; }
  const Linear& conv_tb() const { return conv_tb_; }
  const SeBlock& attention() const { return attention_; }
  const Linear& conv_out() const { return conv_out_; }

 private:
  Linear conv_prev_;
  Linear conv_tb_;
  SeBlock attention_;
  Linear conv_out_;
};

inline FeatureMap dffm_step(Tape& tape, const EncoderState& state, const DffmBlock& block) {
  return block(tape, state);
}

/// Dual-branch image encoder. The RGB patch embedding and the transformer
/// blocks are frozen; the thermal patch embedding, the fusion stages and the
/// Q/V adapters of every block are trainable.
///
/// With fusion disabled the two embeddings are concatenated channel-wise and
/// projected back to d by a trainable linear map initialised to [I; 0], and
/// the blocks run on that single stream.
class RgbtEncoder {
 public:
  RgbtEncoder() = default;

  RgbtEncoder(ParamRegistry& reg, const ModelConfig& cfg, const Seeder& seed) : cfg_(cfg) {
    const LoraConfig lora{cfg.lora_rank, cfg.lora_alpha};
    rgb_embed_ = PatchEmbed(reg, "encoder.rgb_embed", cfg.patch, cfg.rgb_channels, cfg.d, true, seed);
    thermal_embed_ = PatchEmbed(reg, "encoder.thermal_embed", cfg.patch, cfg.thermal_channels,
                                cfg.d, false, seed);
    if (!cfg.enable_dffm) {
      concat_fuse_ = Linear(reg, "encoder.concat_fuse", 2 * cfg.d, cfg.d, false, seed, Init::Zero);
      Tensor& w = concat_fuse_->weight().value;
      for (std::size_t i = 0; i < cfg.d; ++i) w[i * cfg.d + i] = 1;
    }
    for (std::size_t i = 0; i < cfg.depth; ++i) {
      const std::string idx = std::to_string(i);
      if (cfg.enable_dffm) {
        dffm_.emplace_back(reg, "encoder.dffm." + idx, cfg.d, cfg.se_reduction, seed);
      }
      blocks_.emplace_back(reg, "encoder.blocks." + idx, cfg.d, cfg.heads, true, seed, lora);
    }
  }

  void check_inputs(Var rgb, Var thermal) const {
    const Shape& a = rgb.shape();
    const Shape& b = thermal.shape();
    if (a.size() != 3 || b.size() != 3 || a[0] != b[0] || a[1] != b[1]) {
      throw ShapeError("encoder: RGB " + to_string(a) + " and thermal " + to_string(b) +
                       " are not pixel-aligned");
    }
    if (a[2] != cfg_.rgb_channels || b[2] != cfg_.thermal_channels) {
      throw ShapeError("encoder: expected " + std::to_string(cfg_.rgb_channels) + " RGB and " +
                       std::to_string(cfg_.thermal_channels) + " thermal channels");
    }
  }

  /// Depth-0 state: backbone stream = RGB embedding, fusion stream = thermal
  /// embedding.
  EncoderState embed_pair(Tape& tape, Var rgb, Var thermal) const {
    check_inputs(rgb, thermal);
    return {thermal_embed_(tape, thermal), rgb_embed_(tape, rgb), 0};
  }

  /// Runs one (fusion stage, transformer block) pair and returns the next state.
  EncoderState step(Tape& tape, const EncoderState& state) const {
    const std::size_t i = state.depth_index;
    const DffmBlock& fuse = dffm_.at(i);
    FeatureMap f_dffm = dffm_step(tape, state, fuse);
    FeatureMap input{ops::add(state.f_tb.tokens, f_dffm.tokens), state.f_tb.h, state.f_tb.w};
    return {f_dffm, blocks_.at(i)(tape, input), i + 1};
  }

  /// Image embedding e_en: the backbone stream after the last block.
  FeatureMap operator()(Tape& tape, Var rgb, Var thermal) const {
    EncoderState state = embed_pair(tape, rgb, thermal);
    if (!cfg_.enable_dffm) {
      FeatureMap x = state.f_tb;
      x.tokens = (*concat_fuse_)(tape, ops::concat_cols({state.f_tb.tokens, state.f_dffm.tokens}));
      for (const auto& block : blocks_) x = block(tape, x);
      return x;
    }
    while (state.depth_index < blocks_.size()) state = step(tape, state);
    return state.f_tb;
  }

  const PatchEmbed& rgb_embed() const { return rgb_embed_; }
  const PatchEmbed& thermal_embed() const { return thermal_embed_; }
  const std::vector<DffmBlock>& dffm() const { return dffm_; }
  const std::vector<TransformerBlock>& blocks() const { return blocks_; }
  const std::optional<Linear>& concat_fuse() const { return concat_fuse_; }

 private:
  ModelConfig cfg_;
  PatchEmbed rgb_embed_;
  PatchEmbed thermal_embed_;
  std::vector<DffmBlock> dffm_;
  std::vector<TransformerBlock> blocks_;
  std::optional<Linear> concat_fuse_;
};

}  // namespace taseg
