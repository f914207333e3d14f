#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "taseg/attention.hpp"
#include "taseg/config.hpp"
#include "taseg/error.hpp"
#include "taseg/layers.hpp"
#include "taseg/lora.hpp"
#include "taseg/ops.hpp"
#include "taseg/prompt.hpp"

namespace taseg {

/// Decoder inputs: image side E_s = e_en + dense prompt, its positional grid
/// E_p, and the token sequence E_t = [iou; mask tokens; sparse prompts].
struct DecoderInputs {
  Var image;
  Var pe;
  Var tokens;
  std::size_t h = 0;
  std::size_t w = 0;
};

/// `dense` is either one [1 x d] row broadcast over the grid or a full
/// [(h*w) x d] map.
inline DecoderInputs assemble_inputs(Tape& tape, const FeatureMap& e_en, Var dense,
                                     const Tensor& pe, Var iou_token, Var mask_tokens,
                                     Var sparse) {
  const Shape& s = e_en.tokens.shape();
  const std::size_t d = s.at(1);
  if (pe.shape() != s) {
    throw ShapeError("assemble_inputs: positional grid " + to_string(pe.shape()) +
                     " does not match image embedding " + to_string(s));
  }
  Var image;
  if (dense.shape() == Shape{1, d}) {
    image = ops::add_row(e_en.tokens, ops::reshape(dense, {d}));
  } else if (dense.shape() == s) {
    image = ops::add(e_en.tokens, dense);
  } else {
    throw ShapeError("assemble_inputs: dense prompt " + to_string(dense.shape()) +
                     " conforms to neither [1 x d] nor " + to_string(s));
  }
  for (Var t : {iou_token, mask_tokens, sparse}) {
    if (t.shape().size() != 2 || t.shape()[1] != d) {
      throw ShapeError("assemble_inputs: token block " + to_string(t.shape()) +
                       " is not [n x " + std::to_string(d) + "]");
    }
  }
  return {image, tape.constant(pe), ops::concat_rows({iou_token, mask_tokens, sparse}), e_en.h,
          e_en.w};
}

/// One two-way layer: token self-attention, token-to-image cross-attention
/// (the adapted site), token MLP, then image-to-token cross-attention.
/// Post-norm, positional grid added to image keys only.
class TwoWayLayer {
 public:
  TwoWayLayer() = default;
  TwoWayLayer(ParamRegistry& reg, const std::string& name, std::size_t d, std::size_t heads,
              const Seeder& seed, std::optional<LoraConfig> lora)
      : self_attn_(reg, name + ".self_attn", d, heads, true, seed),
        norm1_(reg, name + ".norm1", d, true),
        t2i_(reg, name + ".t2i", d, heads, true, seed, lora),
        norm2_(reg, name + ".norm2", d, true),
        mlp_(reg, name + ".mlp", d, 2 * d, true, seed),
        norm3_(reg, name + ".norm3", d, true),
        i2t_(reg, name + ".i2t", d, heads, true, seed),
        norm4_(reg, name + ".norm4", d, true) {}

  void operator()(Tape& tape, Var& queries, Var& keys, Var key_pe) const {
    Var q = norm1_(tape, ops::add(queries, self_attn_(tape, queries, queries, queries)));
    Var k_pe = ops::add(keys, key_pe);
    q = norm2_(tape, ops::add(q, t2i_(tape, q, k_pe, keys)));
    q = norm3_(tape, ops::add(q, mlp_(tape, q)));
    Var k = norm4_(tape, ops::add(keys, i2t_(tape, k_pe, q, q)));
    queries = q;
    keys = k;
  }

  const MultiHeadAttention& token_to_image() const { return t2i_; }

 private:
  MultiHeadAttention self_attn_;
  LayerNorm norm1_;
  MultiHeadAttention t2i_;
  LayerNorm norm2_;
  Mlp mlp_;
  LayerNorm norm3_;
  MultiHeadAttention i2t_;
  LayerNorm norm4_;
};

struct TwoWayOutput {
  Var e_m;  // updated image embedding [(h*w) x d]
  Var e_f;  // refined token sequence [n x d]
};

class TwoWayTransformer {
 public:
  TwoWayTransformer() = default;
  TwoWayTransformer(ParamRegistry& reg, const std::string& name, const ModelConfig& cfg,
                    const Seeder& seed) {
    std::optional<LoraConfig> lora;
    if (cfg.enable_decoder_lora) lora = LoraConfig{cfg.lora_rank, cfg.lora_alpha};
    for (std::size_t i = 0; i < cfg.decoder_layers; ++i) {
      layers_.emplace_back(reg, name + ".layers." + std::to_string(i), cfg.d, cfg.heads, seed,
                           lora);
    }
    final_attn_ = MultiHeadAttention(reg, name + ".final_attn", cfg.d, cfg.heads, true, seed);
    norm_final_ = LayerNorm(reg, name + ".norm_final", cfg.d, true);
  }

  TwoWayOutput operator()(Tape& tape, const DecoderInputs& in) const {
    Var q = in.tokens;
    Var k = in.image;
    for (const auto& layer : layers_) layer(tape, q, k, in.pe);
    Var f = ops::add(q, final_attn_(tape, q, ops::add(k, in.pe), k));
    return {k, norm_final_(tape, f)};
  }

  const std::vector<TwoWayLayer>& layers() const { return layers_; }

 private:
  std::vector<TwoWayLayer> layers_;
  MultiHeadAttention final_attn_;
  LayerNorm norm_final_;
};

inline TwoWayOutput two_way_transformer(Tape& tape, const TwoWayTransformer& t,
                                        const DecoderInputs& in) {
  return t(tape, in);
}

/// 2x2 stride-2 transposed convolution followed by GELU: [h x w x c_in] to
/// [2h x 2w x c_out].
class Upsample2x {
 public:
  Upsample2x() = default;
  Upsample2x(ParamRegistry& reg, const std::string& name, std::size_t c_in, std::size_t c_out,
             const Seeder& seed)
      : c_out_(c_out) {
    Rng rng = seed.for_param(name);
    weight_ = &reg.add(name + ".weight",
                       normal_tensor({c_in, 4 * c_out},
                                     Scalar{1} / std::sqrt(static_cast<Scalar>(c_in)), rng),
                       false);
    bias_ = &reg.add(name + ".bias", normal_tensor({c_out}, Scalar{0.02}, rng), false);
  }

  FeatureMap operator()(Tape& tape, const FeatureMap& x) const {
    Var y = ops::matmul(x.tokens, bind(tape, *weight_));
    y = ops::depth_to_space2(ops::reshape(y, {x.h, x.w, 4 * c_out_}));
    FeatureMap out = FeatureMap::from_grid(y);
    out.tokens = ops::gelu(ops::add_row(out.tokens, bind(tape, *bias_)));
    return out;
  }

 private:
  std::size_t c_out_ = 0;
  Parameter* weight_ = nullptr;
  Parameter* bias_ = nullptr;
};

/// Cross-attention from mask-embedding pixels to class text embeddings:
///   F_M = softmax((e_M W_Q)(e_t W_K)^T / sqrt(d_k)) (e_t W_V)
inline Var text_cross_attention(Var e_m, Var e_t, Var w_q, Var w_k, Var w_v) {
  if (e_t.shape().size() != 2 || e_t.shape()[0] == 0) {
    throw ConfigError("text attention needs at least one class embedding");
  }
  const std::size_t d_k = w_q.shape().at(1);
  if (w_k.shape().at(1) != d_k) {
    throw ShapeError("text attention: W_Q " + to_string(w_q.shape()) + " and W_K " +
                     to_string(w_k.shape()) + " project to different widths");
  }
  Var q = ops::matmul(e_m, w_q);
  Var k = ops::matmul(e_t, w_k);
  Var v = ops::matmul(e_t, w_v);
  Scalar s = Scalar{1} / std::sqrt(static_cast<Scalar>(d_k));
  return ops::matmul(ops::softmax(ops::scale(ops::matmul(q, ops::transpose(k)), s)), v);
}

/// Per-pixel class scores: h = [e_M, F_M] W_h + b_h, logit_c = <h, e_t,c W_K> / sqrt(d_k).
inline Var class_logits(Var e_m, Var f_m, Var e_t, Var w_k, Var w_h, Var b_h) {
  Var h = linear(ops::concat_cols({e_m, f_m}), w_h, b_h);
  Var k = ops::matmul(e_t, w_k);
  const Scalar s = Scalar{1} / std::sqrt(static_cast<Scalar>(w_k.shape().at(1)));
  return ops::scale(ops::matmul(h, ops::transpose(k)), s);
}

/// Row order that sorts embeddings lexicographically. Evaluating the class
/// head in this order makes its output independent of the order in which the
/// caller lists classes, down to the last bit.
inline std::vector<std::size_t> canonical_class_order(const Tensor& emb) {
  const std::size_t c = emb.dim(0), d = emb.dim(1);
  std::vector<std::size_t> order(c);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const Scalar* p = emb.data().data();
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::lexicographical_compare(p + a * d, p + (a + 1) * d, p + b * d, p + (b + 1) * d);
  });
  return order;
}

struct DecoderOutput {
  FeatureMap e_m;      // image embedding after the two-way transformer
  Var e_f;             // refined tokens
  FeatureMap e_mask;   // upscaled mask embedding e_M, 4x the patch grid
  std::optional<Var> f_m;  // text-attended features (text head only)
  Var logits;          // [H x W x C]
};

/// Two-way transformer, mask upscaling and the class head. The transformer
/// and the positional Gaussian are frozen; the prompt tokens, the upscaling
/// path, the text projections and the classifier are trainable.
class MaskDecoder {
 public:
  MaskDecoder() = default;

  MaskDecoder(ParamRegistry& reg, const ModelConfig& cfg, const Seeder& seed) : cfg_(cfg) {
    const std::size_t d = cfg.d;
    Rng rng = seed.for_param("decoder.tokens");
    iou_token_ = &reg.add("decoder.iou_token", normal_tensor({1, d}, Scalar{0.02}, rng), false);
    mask_tokens_ = &reg.add("decoder.mask_tokens",
                            normal_tensor({cfg.mask_tokens, d}, Scalar{0.02}, rng), false);
    transformer_ = TwoWayTransformer(reg, "decoder.transformer", cfg, seed);
    up1_ = Upsample2x(reg, "decoder.upscale.0", d, d / 2, seed);
    up2_ = Upsample2x(reg, "decoder.upscale.1", d / 2, cfg.mask_dim(), seed);
    if (cfg.enable_text) {
      auto init = [&](const std::string& name, std::size_t r, std::size_t c, Scalar std) -> Parameter* {
        Rng g = seed.for_param(name);
        return &reg.add(name, normal_tensor({r, c}, std, g), false);
      };
      // Text embeddings are unit-norm rather than unit-variance per
      // coordinate, so unit-variance projections give e_t W unit-variance
      // coordinates.
      w_q_ = init("decoder.text_attn.w_q", cfg.mask_dim(), cfg.d_k,
                  Scalar{1} / std::sqrt(static_cast<Scalar>(cfg.mask_dim())));
      w_k_ = init("decoder.text_attn.w_k", cfg.d_t, cfg.d_k, Scalar{1});
      w_v_ = init("decoder.text_attn.w_v", cfg.d_t, cfg.d_v, Scalar{1});
      head_ = Linear(reg, "decoder.head.proj", cfg.mask_dim() + cfg.d_v, cfg.d_k, false, seed);
    } else {
      head_ = Linear(reg, "decoder.head.classifier", cfg.mask_dim(), cfg.num_classes, false, seed);
    }
  }

  /// Full decoder pass. `vocab` is required with the text head and, when
  /// given without it, must list exactly num_classes classes.
  DecoderOutput operator()(Tape& tape, const FeatureMap& e_en, Var dense, const Tensor& pe,
                           Var sparse, const ClassVocabulary* vocab, std::size_t out_h,
                           std::size_t out_w) const {
    DecoderInputs in = assemble_inputs(tape, e_en, dense, pe, bind(tape, *iou_token_),
                                       bind(tape, *mask_tokens_), sparse);
    TwoWayOutput tw = transformer_(tape, in);
    FeatureMap e_m{tw.e_m, in.h, in.w};
    FeatureMap e_mask = up2_(tape, up1_(tape, e_m));
    DecoderOutput out{e_m, tw.e_f, e_mask, std::nullopt, Var{}};

    Var scores;
    std::size_t c = 0;
    if (cfg_.enable_text) {
      if (vocab == nullptr) throw ConfigError("decoder: the text head needs a class vocabulary");
      if (vocab->dim() != cfg_.d_t) {
        throw ShapeError("decoder: text embeddings have dim " + std::to_string(vocab->dim()) +
                         ", model expects d_t=" + std::to_string(cfg_.d_t));
      }
      c = vocab->size();
      const std::vector<std::size_t> order = canonical_class_order(vocab->embeddings());
      std::vector<std::size_t> rank(c);
      for (std::size_t i = 0; i < c; ++i) rank[order[i]] = i;
      Tensor sorted({c, cfg_.d_t});
      for (std::size_t i = 0; i < c; ++i) {
        std::copy_n(vocab->embeddings().data().data() + order[i] * cfg_.d_t, cfg_.d_t,
                    sorted.data().data() + i * cfg_.d_t);
      }
      Var e_t = tape.constant(std::move(sorted));
      Var w_k = bind(tape, *w_k_);
      Var f_m = text_cross_attention(e_mask.tokens, e_t, bind(tape, *w_q_), w_k, bind(tape, *w_v_));
      out.f_m = f_m;
      scores = class_logits(e_mask.tokens, f_m, e_t, w_k, bind(tape, head_.weight()),
                            bind(tape, head_.bias()));
      scores = ops::select_cols(scores, rank);
    } else {
      c = cfg_.num_classes;
      if (vocab != nullptr && vocab->size() != c) {
        throw ConfigError("decoder: text-free head has " + std::to_string(c) +
                          " classes, vocabulary lists " + std::to_string(vocab->size()));
      }
      scores = head_(tape, e_mask.tokens);
    }
    Var grid = ops::reshape(scores, {e_mask.h, e_mask.w, c});
    out.logits = ops::bilinear_resize(grid, out_h, out_w);
    return out;
  }

  const TwoWayTransformer& transformer() const { return transformer_; }
  Parameter& iou_token() const { return *iou_token_; }
  Parameter& mask_tokens() const { return *mask_tokens_; }

 private:
  ModelConfig cfg_;
  Parameter* iou_token_ = nullptr;
  Parameter* mask_tokens_ = nullptr;
  TwoWayTransformer transformer_;
  Upsample2x up1_;
  Upsample2x up2_;
  Parameter* w_q_ = nullptr;
  Parameter* w_k_ = nullptr;
  Parameter* w_v_ = nullptr;
  Linear head_;
};

}  // namespace taseg
