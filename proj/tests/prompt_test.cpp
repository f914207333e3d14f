#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>

#include <gtest/gtest.h>

#include "taseg/prompt.hpp"
#include "test_util.hpp"

namespace taseg {
namespace {

using testutil::random_tensor;

std::string write_temp(const std::string& name, const std::string& body) {
  auto path = std::filesystem::temp_directory_path() / ("taseg_prompt_" + name + ".json");
  std::ofstream(path) << body;
  return path.string();
}

struct PromptFixture : ::testing::Test {
  ParamRegistry reg;
  PromptEncoder enc{reg, 8, Seeder{3}};
};

TEST_F(PromptFixture, NoPointsGiveEmptyBlock) {
  Tape tape;
  EXPECT_EQ(enc.encode_points(tape, {}, 64, 64).shape(), (Shape{0, 8}));
}

TEST_F(PromptFixture, RepeatedPointGivesIdenticalRows) {
  Tape tape;
  PointPrompt p{{{10, 20, true}, {10, 20, true}}};
  Tensor e = enc.encode_points(tape, p, 64, 64).value();
  for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(e[j], e[8 + j]);
}

TEST_F(PromptFixture, CentrePointMatchesFormula) {
  Tape tape;
  PointPrompt p{{{31.5, 31.5, false}}};
  Tensor e = enc.encode_points(tape, p, 64, 64).value();
  // Centre of a 64-pixel image maps to normalized (0.5, 0.5), i.e. c = (0, 0).
  const Tensor& g = enc.gaussian().value;
  const Tensor& lbl = enc.point_embed().value;
  for (std::size_t j = 0; j < 4; ++j) {
    const double ph = 2 * std::numbers::pi * (0.0 * g[j] + 0.0 * g[4 + j]);
    EXPECT_EQ(e[j], std::sin(ph) + lbl[j]);
    EXPECT_EQ(e[4 + j], std::cos(ph) + lbl[4 + j]);
  }
}

TEST_F(PromptFixture, OffCentrePointMatchesFormula) {
  Tape tape;
  PointPrompt p{{{5, 40, true}}};
  Tensor e = enc.encode_points(tape, p, 64, 32).value();
  const Tensor& g = enc.gaussian().value;
  const Tensor& lbl = enc.point_embed().value;
  const double cx = 2 * (5.5 / 32) - 1, cy = 2 * (40.5 / 64) - 1;
  for (std::size_t j = 0; j < 4; ++j) {
    const double ph = 2 * std::numbers::pi * (cx * g[j] + cy * g[4 + j]);
    EXPECT_NEAR(e[j], std::sin(ph) + lbl[8 + j], 1e-12);
    EXPECT_NEAR(e[4 + j], std::cos(ph) + lbl[8 + 4 + j], 1e-12);
  }
}

TEST_F(PromptFixture, OutOfBoundsPointRejected) {
  Tape tape;
  EXPECT_THROW(enc.encode_points(tape, PointPrompt{{{64, 3, true}}}, 64, 64), ConfigError);
  EXPECT_THROW(enc.encode_points(tape, PointPrompt{{{3, -1, true}}}, 64, 64), ConfigError);
}

TEST_F(PromptFixture, PositionalGridIsFrozenLabelsTrainable) {
  EXPECT_TRUE(enc.gaussian().frozen);
  EXPECT_FALSE(enc.point_embed().frozen);
  EXPECT_FALSE(enc.no_mask_embed().frozen);
}

TEST(TextEmbeddings, TwoClassFileLoadsUnitNorm) {
  const std::string path = write_temp(
      "two", R"({"dim": 4, "classes": [{"name": "car", "embedding": [1, 2, 3, 4]},
                                        {"name": "person", "embedding": [0, 0, -2, 0]}]})");
  ClassVocabulary v = load_text_embeddings(path);
  ASSERT_EQ(v.size(), 2u);
  EXPECT_EQ(v.names()[1], "person");
  for (std::size_t c = 0; c < 2; ++c) {
    double n = 0;
    for (std::size_t j = 0; j < 4; ++j) n += v.embeddings()[c * 4 + j] * v.embeddings()[c * 4 + j];
    EXPECT_NEAR(std::sqrt(n), 1.0, 1e-9);
  }
}

TEST(TextEmbeddings, EmptyClassListRejected) {
  EXPECT_THROW(load_text_embeddings(write_temp("empty", R"({"dim": 4, "classes": []})")), FormatError);
}

TEST(TextEmbeddings, DimMismatchRejected) {
  EXPECT_THROW(load_text_embeddings(write_temp(
                   "dim", R"({"dim": 3, "classes": [{"name": "a", "embedding": [1, 2]}]})")),
               FormatError);
}

TEST(TextEmbeddings, DuplicateNamesRejected) {
  EXPECT_THROW(load_text_embeddings(write_temp("dup", R"({"dim": 1, "classes": [
                   {"name": "a", "embedding": [1]}, {"name": "a", "embedding": [2]}]})")),
               FormatError);
}

TEST(TextEmbeddings, MalformedJsonRejected) {
  EXPECT_THROW(load_text_embeddings(write_temp("bad", "{\"dim\": 4,")), FormatError);
  EXPECT_THROW(load_text_embeddings("/nonexistent/embeddings.json"), FormatError);
}

TEST(TextEmbeddings, NormalizationMatchesManual) {
  Rng rng(8);
  Tensor raw = random_tensor({5, 7}, rng, 3.0);
  std::vector<std::string> names = {"a", "b", "c", "d", "e"};
  ClassVocabulary v(names, raw);
  const std::string path = write_temp("round", to_json(v).dump());
  ClassVocabulary back = load_text_embeddings(path);
  for (std::size_t c = 0; c < 5; ++c) {
    double n = 0;
    for (std::size_t j = 0; j < 7; ++j) n += raw[c * 7 + j] * raw[c * 7 + j];
    n = std::sqrt(n);
    for (std::size_t j = 0; j < 7; ++j) {
      EXPECT_NEAR(v.embeddings()[c * 7 + j], raw[c * 7 + j] / n, 1e-12);
      EXPECT_NEAR(back.embeddings()[c * 7 + j], raw[c * 7 + j] / n, 1e-12);
    }
  }
}

TEST(ToyText, Deterministic) {
  EXPECT_TRUE(bitwise_equal(toy_text_embed("car", 32, 0), toy_text_embed("car", 32, 0)));
  EXPECT_FALSE(bitwise_equal(toy_text_embed("car", 32, 0), toy_text_embed("car", 32, 1)));
}

TEST(ToyText, UnitNorm) {
  Tensor v = toy_text_embed("bicycle", 32, 7);
  double n = 0;
  for (Scalar x : v.data()) n += x * x;
  EXPECT_NEAR(std::sqrt(n), 1.0, 1e-9);
}

TEST(ToyText, HundredNamesAreWellSeparated) {
  std::vector<Tensor> e;
  for (int i = 0; i < 100; ++i) e.push_back(toy_text_embed("class_" + std::to_string(i), 32, 0));
  double worst = 0;
  for (std::size_t a = 0; a < e.size(); ++a)
    for (std::size_t b = a + 1; b < e.size(); ++b) {
      double c = 0;
      for (std::size_t j = 0; j < 32; ++j) c += e[a][j] * e[b][j];
      worst = std::max(worst, std::abs(c));
    }
  RecordProperty("max_abs_cos", std::to_string(worst));
  EXPECT_LT(worst, 0.9);
}

TEST(ToyText, EmptyNameRejected) { EXPECT_THROW(toy_text_embed("", 8, 0), ConfigError); }

TEST(Vocabulary, PermutedReordersNamesAndRows) {
  ClassVocabulary v = toy_vocabulary({"a", "b", "c"}, 4);
  ClassVocabulary p = v.permuted({2, 0, 1});
  EXPECT_EQ(p.names(), (std::vector<std::string>{"c", "a", "b"}));
  for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(p.embeddings()[j], v.embeddings()[2 * 4 + j]);
}

// Renormalizing a unit row can move its last bits, which would break
// bitwise class-permutation equivariance downstream.
TEST(Vocabulary, RepeatedPermutationKeepsRowsBitwise) {
  std::vector<std::string> names;
  for (int c = 0; c < 8; ++c) names.push_back("class_" + std::to_string(c));
  const ClassVocabulary v = toy_vocabulary(names, 32, 3);
  ClassVocabulary p = v;
  for (int round = 0; round < 5; ++round) p = p.permuted({1, 2, 3, 4, 5, 6, 7, 0});
  for (std::size_t c = 0; c < 8; ++c) {
    const std::size_t src = (c + 5) % 8;
    for (std::size_t j = 0; j < 32; ++j) ASSERT_EQ(p.embeddings()[c * 32 + j], v.embeddings()[src * 32 + j]);
  }
}

}  // namespace
}  // namespace taseg
