#include <gtest/gtest.h>

#include "taseg/encoder.hpp"
#include "test_util.hpp"

namespace taseg {
namespace {

using testutil::random_tensor;

ModelConfig small_config() {
  ModelConfig c;
  c.image_size = 16;
  c.patch = 8;
  c.d = 16;
  c.heads = 2;
  c.depth = 2;
  c.lora_rank = 2;
  c.lora_alpha = 2;
  c.se_reduction = 4;
  return c;
}

struct EncoderFixture : ::testing::Test {
  ModelConfig cfg = small_config();
  ParamRegistry reg;
  Seeder seed{21};
  Rng rng{5};
  Tensor rgb, th;
  void SetUp() override {
    rgb = random_tensor({cfg.image_size, cfg.image_size, 3}, rng);
    th = random_tensor({cfg.image_size, cfg.image_size, 1}, rng);
  }
  void randomize(const Linear& l) {
    l.weight().value = random_tensor(l.weight().value.shape(), rng, 0.3);
    l.bias().value = random_tensor(l.bias().value.shape(), rng, 0.3);
  }
  void randomize_adapters(const RgbtEncoder& enc) {
    for (const auto& b : enc.blocks()) {
      b.attn().q().lora_b().value = random_tensor(b.attn().q().lora_b().value.shape(), rng, 0.3);
      b.attn().v().lora_b().value = random_tensor(b.attn().v().lora_b().value.shape(), rng, 0.3);
    }
    for (const auto& f : enc.dffm()) randomize(f.conv_out());
  }
};

TEST_F(EncoderFixture, ZeroImagesGiveBiasGrids) {
  RgbtEncoder enc(reg, cfg, seed);
  Tape tape;
  EncoderState s = enc.embed_pair(tape, tape.constant(Tensor({16, 16, 3}, 0.0)),
                                  tape.constant(Tensor({16, 16, 1}, 0.0)));
  const Tensor& rb = enc.rgb_embed().proj().bias().value;
  const Tensor& tb = enc.thermal_embed().proj().bias().value;
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t j = 0; j < cfg.d; ++j) {
      EXPECT_EQ(s.f_tb.tokens.value()[t * cfg.d + j], rb[j]);
      EXPECT_EQ(s.f_dffm.tokens.value()[t * cfg.d + j], tb[j]);
    }
  EXPECT_EQ(s.depth_index, 0u);
}

TEST(Encoder, ToyShapeContract) {
  ModelConfig cfg;
  ParamRegistry reg;
  RgbtEncoder enc(reg, cfg, Seeder{});
  Tape tape;
  EncoderState s = enc.embed_pair(tape, tape.constant(Tensor({64, 64, 3}, 0.1)),
                                  tape.constant(Tensor({64, 64, 1}, 0.2)));
  EXPECT_EQ(s.f_tb.grid().shape(), (Shape{8, 8, 64}));
  EXPECT_EQ(s.f_dffm.grid().shape(), (Shape{8, 8, 64}));
  FeatureMap e = enc(tape, tape.constant(Tensor({64, 64, 3}, 0.1)), tape.constant(Tensor({64, 64, 1}, 0.2)));
  EXPECT_EQ(e.grid().shape(), (Shape{8, 8, 64}));
}

TEST_F(EncoderFixture, EmbedPairIsTwoPatchEmbeds) {
  RgbtEncoder enc(reg, cfg, seed);
  Tape tape;
  Var r = tape.constant(rgb), t = tape.constant(th);
  EncoderState s = enc.embed_pair(tape, r, t);
  EXPECT_TRUE(bitwise_equal(s.f_tb.tokens.value(), enc.rgb_embed()(tape, r).tokens.value()));
  EXPECT_TRUE(bitwise_equal(s.f_dffm.tokens.value(), enc.thermal_embed()(tape, t).tokens.value()));
}

TEST_F(EncoderFixture, MisalignedInputsRejected) {
  RgbtEncoder enc(reg, cfg, seed);
  Tape tape;
  EXPECT_THROW(enc.embed_pair(tape, tape.constant(rgb), tape.constant(Tensor({16, 8, 1}))), ShapeError);
}

TEST_F(EncoderFixture, FreshFusionStageOutputsZero) {
  DffmBlock block(reg, "f", cfg.d, cfg.se_reduction, seed);
  Tape tape;
  EncoderState s{FeatureMap{tape.constant(random_tensor({4, cfg.d}, rng)), 2, 2},
                 FeatureMap{tape.constant(random_tensor({4, cfg.d}, rng)), 2, 2}, 0};
  for (Scalar v : dffm_step(tape, s, block).tokens.value().data()) EXPECT_EQ(v, 0.0);
}

TEST_F(EncoderFixture, FusionStageWiring) {
  DffmBlock block(reg, "f", cfg.d, cfg.se_reduction, seed);
  auto set_identity = [&](const Linear& l) {
    l.weight().value.fill(0);
    for (std::size_t i = 0; i < cfg.d; ++i) l.weight().value[i * cfg.d + i] = 1;
    l.bias().value.fill(0);
  };
  set_identity(block.conv_prev());
  set_identity(block.conv_out());
  block.conv_tb().weight().value.fill(0);
  block.conv_tb().bias().value.fill(0);
  block.attention().fc2().bias().value.fill(0);
  Tensor f_dffm = random_tensor({4, cfg.d}, rng);
  Tape tape;
  EncoderState s{FeatureMap{tape.constant(f_dffm), 2, 2},
                 FeatureMap{tape.constant(random_tensor({4, cfg.d}, rng)), 2, 2}, 0};
  EXPECT_TRUE(bitwise_equal(dffm_step(tape, s, block).tokens.value(), f_dffm));
}

TEST_F(EncoderFixture, FusionStageMatchesComposition) {
  DffmBlock block(reg, "f", cfg.d, cfg.se_reduction, seed);
  randomize(block.conv_out());
  Tape tape;
  Var a = tape.constant(random_tensor({4, cfg.d}, rng));
  Var b = tape.constant(random_tensor({4, cfg.d}, rng));
  Tensor got = dffm_step(tape, EncoderState{{a, 2, 2}, {b, 2, 2}, 0}, block).tokens.value();
  Var want = block.conv_out()(tape, ops::add(block.conv_prev()(tape, a),
                                             block.attention()(tape, block.conv_tb()(tape, b))));
  EXPECT_LE(max_abs_diff(got, want.value()), 1e-12);
}

// The frozen RGB-only backbone: blocks rebuilt without adapters under the
// same names, hence the same initial weights.
Tensor frozen_backbone(const ModelConfig& cfg, const Seeder& seed, const RgbtEncoder& enc,
                       const Tensor& rgb) {
  ParamRegistry reg;
  Tape tape;
  FeatureMap x = enc.rgb_embed()(tape, tape.constant(rgb));
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    TransformerBlock b(reg, "encoder.blocks." + std::to_string(i), cfg.d, cfg.heads, true, seed);
    x = b(tape, x);
  }
  return x.tokens.value();
}

TEST_F(EncoderFixture, InitEqualsFrozenRgbBackbone) {
  RgbtEncoder enc(reg, cfg, seed);
  Tape tape;
  Tensor e = enc(tape, tape.constant(rgb), tape.constant(th)).tokens.value();
  EXPECT_TRUE(bitwise_equal(e, frozen_backbone(cfg, seed, enc, rgb)));
}

TEST_F(EncoderFixture, ConcatBaselineInitEqualsFrozenRgbBackbone) {
  cfg.enable_dffm = false;
  RgbtEncoder enc(reg, cfg, seed);
  Tape tape;
  Tensor e = enc(tape, tape.constant(rgb), tape.constant(th)).tokens.value();
  EXPECT_TRUE(bitwise_equal(e, frozen_backbone(cfg, seed, enc, rgb)));
}

TEST_F(EncoderFixture, InitIgnoresThermal) {
  RgbtEncoder enc(reg, cfg, seed);
  Tape tape;
  Tensor a = enc(tape, tape.constant(rgb), tape.constant(th)).tokens.value();
  Tensor b = enc(tape, tape.constant(rgb), tape.constant(random_tensor(th.shape(), rng))).tokens.value();
  EXPECT_TRUE(bitwise_equal(a, b));
}

TEST_F(EncoderFixture, TrainedFusionDependsOnThermal) {
  RgbtEncoder enc(reg, cfg, seed);
  randomize_adapters(enc);
  Tape tape;
  Tensor a = enc(tape, tape.constant(rgb), tape.constant(th)).tokens.value();
  Tensor b = enc(tape, tape.constant(rgb), tape.constant(random_tensor(th.shape(), rng))).tokens.value();
  EXPECT_GT(max_abs_diff(a, b), 0.0);
}

TEST_F(EncoderFixture, ZeroBlocksLeaveResidualSum) {
  cfg.depth = 1;
  RgbtEncoder enc(reg, cfg, seed);
  randomize_adapters(enc);
  for (const auto& b : enc.blocks()) {
    b.attn().v().lora_b().value.fill(0);
    b.attn().q().lora_b().value.fill(0);
  }
  for (std::size_t i = 0; i < reg.size(); ++i) {
    if (reg[i].name.starts_with("encoder.blocks.") && reg[i].frozen) reg[i].value.fill(0);
  }
  Tape tape;
  Var r = tape.constant(rgb), t = tape.constant(th);
  Tensor got = enc(tape, r, t).tokens.value();
  EncoderState s0 = enc.embed_pair(tape, r, t);
  Var want = ops::add(s0.f_tb.tokens, dffm_step(tape, s0, enc.dffm()[0]).tokens);
  EXPECT_TRUE(bitwise_equal(got, want.value()));
}

TEST_F(EncoderFixture, MatchesUnrolledLoop) {
  RgbtEncoder enc(reg, cfg, seed);
  randomize_adapters(enc);
  Tape tape;
  Var r = tape.constant(rgb), t = tape.constant(th);
  Tensor got = enc(tape, r, t).tokens.value();
  Var f_dffm = enc.thermal_embed()(tape, t).tokens;
  Var f_tb = enc.rgb_embed()(tape, r).tokens;
  for (std::size_t i = 0; i < 2; ++i) {
    const DffmBlock& blk = enc.dffm()[i];
    f_dffm = blk.conv_out()(tape, ops::add(blk.conv_prev()(tape, f_dffm),
                                           blk.attention()(tape, blk.conv_tb()(tape, f_tb))));
    f_tb = enc.blocks()[i](tape, ops::add(f_tb, f_dffm));
  }
  EXPECT_TRUE(bitwise_equal(got, f_tb.value()));
}

TEST_F(EncoderFixture, FrozenAndTrainableSplit) {
  RgbtEncoder enc(reg, cfg, seed);
  for (std::size_t i = 0; i < reg.size(); ++i) {
    const Parameter& p = reg[i];
    const bool adapter = p.name.find(".lora_") != std::string::npos;
    if (p.name.starts_with("encoder.rgb_embed.")) {
      EXPECT_TRUE(p.frozen) << p.name;
    } else if (p.name.starts_with("encoder.blocks.")) {
      EXPECT_EQ(p.frozen, !adapter) << p.name;
    } else {
      EXPECT_FALSE(p.frozen) << p.name;
    }
  }
}

}  // namespace
}  // namespace taseg
