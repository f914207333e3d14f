// Drives the built command-line tool end to end.

#include <sys/wait.h>
#include <unistd.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>
#include <tuple>
#include <string>

#include <gtest/gtest.h>
#include <json.hpp>

#include "taseg/checkpoint.hpp"
#include "taseg/data.hpp"
#include "taseg/ledger.hpp"
#include "taseg/train.hpp"

namespace taseg {
namespace {

namespace fs = std::filesystem;

// One directory per process so that tests may run in parallel.
const fs::path kWork = fs::temp_directory_path() / ("taseg_cli_test_" + std::to_string(::getpid()));

int run(const std::string& args, const std::string& log = "last.log") {
  const std::string cmd = std::string(TASEG_CLI) + " " + args + " > " + (kWork / log).string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string p(const fs::path& rel) { return (kWork / rel).string(); }

nlohmann::json tiny_config_json() {
  return {{"model",
           {{"image_size", 16}, {"patch", 4}, {"d", 16}, {"heads", 2}, {"depth", 2}, {"lora_rank", 2},
            {"lora_alpha", 2}, {"decoder_layers", 1}, {"mask_tokens", 2}, {"d_k", 4}, {"d_v", 4}, {"d_t", 8}}},
          {"training", {{"steps", 3}, {"batch", 2}, {"log_every", 1}}}};
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    fs::remove_all(kWork);
    fs::create_directories(kWork);
    std::ofstream(kWork / "tiny.json") << tiny_config_json().dump(2);
    ASSERT_EQ(run("gen-data --out " + p("data") + " --n 6 --size 16 --patch 4 --seed 1"), 0);
    ASSERT_EQ(run("train --config " + p("tiny.json") + " --data " + p("data") + " --out " + p("run")), 0);
  }
  static void TearDownTestSuite() { fs::remove_all(kWork); }
};

TEST_F(Cli, GenDataDefaultsGiveSixtyFourSamplesFourClasses) {
  ASSERT_EQ(run("gen-data --out " + p("defaults")), 0);
  const DatasetManifest m = read_manifest(kWork / "defaults");
  EXPECT_EQ(m.samples.size(), 64u);
  EXPECT_EQ(m.classes.size(), 4u);
  EXPECT_NE(slurp(kWork / "last.log").find("hidden_hot_object"), std::string::npos);
}

TEST_F(Cli, GenDataIsByteReproducible) {
  ASSERT_EQ(run("gen-data --out " + p("again") + " --n 6 --size 16 --patch 4 --seed 1"), 0);
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(kWork / "data")) {
    if (!e.is_regular_file()) continue;
    const fs::path rel = fs::relative(e.path(), kWork / "data");
    EXPECT_EQ(slurp(e.path()), slurp(kWork / "again" / rel)) << rel;
    ++files;
  }
  EXPECT_EQ(files, 6u * 3 + 1);
}

TEST_F(Cli, GenDataRejectsIndivisibleSizeBeforeWriting) {
  EXPECT_EQ(run("gen-data --out " + p("odd") + " --size 65"), 2);
  EXPECT_FALSE(fs::exists(kWork / "odd"));
}

TEST_F(Cli, ZeroStepCheckpointEqualsInitialization) {
  ASSERT_EQ(run("train --config " + p("tiny.json") + " --data " + p("data") + " --out " + p("zero") + " --steps 0"), 0);
  const RunConfig cfg = load_run_config(p("tiny.json"));
  TasegModel init(cfg.model);
  const auto bytes = serialize_checkpoint(init.registry());
  EXPECT_EQ(slurp(kWork / "zero" / "checkpoint.tseg"), std::string(bytes.begin(), bytes.end()));
  EXPECT_EQ(slurp(kWork / "zero" / "metrics.tsv"), "");
}

TEST_F(Cli, MetricsLogHasOneTabSeparatedLinePerStep) {
  std::ifstream in(kWork / "run" / "metrics.tsv");
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    std::stringstream s(line);
    std::string step, loss, miou, extra;
    ASSERT_TRUE(std::getline(s, step, '\t') && std::getline(s, loss, '\t') && std::getline(s, miou, '\t'));
    EXPECT_FALSE(std::getline(s, extra, '\t'));
    EXPECT_EQ(std::stoul(step), n);
    EXPECT_TRUE(std::isfinite(std::stod(loss)));
    ++n;
  }
  EXPECT_EQ(n, 3u);
}

TEST_F(Cli, EvalIsDeterministicAndMatchesPixelCounting) {
  const std::string ckpt = p("run/checkpoint.tseg");
  ASSERT_EQ(run("eval --ckpt " + ckpt + " --data " + p("data") + " --out " + p("ev1"), "ev1.log"), 0);
  ASSERT_EQ(run("eval --ckpt " + ckpt + " --data " + p("data") + " --out " + p("ev2"), "ev2.log"), 0);
  EXPECT_EQ(slurp(kWork / "ev1.log"), slurp(kWork / "ev2.log"));
  EXPECT_EQ(slurp(kWork / "ev1" / "results.json"), slurp(kWork / "ev2" / "results.json"));

  // Oracle: reload the checkpoint in-process and count pixels directly.
  const RunConfig cfg = load_run_config(p("run/config.json"));
  TasegModel model(cfg.model);
  restore_parameters(model.registry(), load_checkpoint(ckpt));
  const ClassVocabulary vocab = load_text_embeddings(p("run/classes.json"));
  const auto data = load_samples(read_manifest(kWork / "data"));
  std::vector<std::size_t> inter(4, 0), uni(4, 0);
  for (const auto& s : data) {
    Tape tape;
    const LabelMap pred = predict_labels(model.forward(tape, s.rgb, s.thermal, &vocab).logits().value());
    for (std::size_t i = 0; i < pred.ids.size(); ++i) {
      for (std::int32_t c = 0; c < 4; ++c) {
        const bool a = pred.ids[i] == c, b = s.labels.ids[i] == c;
        inter[static_cast<std::size_t>(c)] += a && b;
        uni[static_cast<std::size_t>(c)] += a || b;
      }
    }
  }
  double sum = 0;
  int present = 0;
  for (std::size_t c = 0; c < 4; ++c) {
    if (uni[c] == 0) continue;
    sum += static_cast<double>(inter[c]) / static_cast<double>(uni[c]);
    ++present;
  }
  const auto j = nlohmann::json::parse(slurp(kWork / "ev1" / "results.json"));
  EXPECT_EQ(j["splits"]["overall"]["miou"].get<double>(), sum / present);
  EXPECT_TRUE(j["splits"].contains("day"));
  EXPECT_TRUE(j["splits"].contains("night"));
}

TEST_F(Cli, SplitOnUntaggedManifestWarnsAndUsesAllSamples) {
  fs::copy(kWork / "data", kWork / "untagged", fs::copy_options::recursive | fs::copy_options::overwrite_existing);
  auto m = nlohmann::json::parse(slurp(kWork / "untagged" / "manifest.json"));
  for (auto& s : m["samples"]) s.erase("split");
  std::ofstream(kWork / "untagged" / "manifest.json") << m.dump();
  ASSERT_EQ(run("eval --ckpt " + p("run/checkpoint.tseg") + " --data " + p("untagged") + " --split day --out " +
                p("ev_untagged")),
            0);
  EXPECT_NE(slurp(kWork / "last.log").find("warning"), std::string::npos);
  const auto j = nlohmann::json::parse(slurp(kWork / "ev_untagged" / "results.json"));
  EXPECT_EQ(j["samples"].get<std::size_t>(), 6u);
}

TEST_F(Cli, EvalMissingCheckpointIsAUsageError) {
  EXPECT_EQ(run("eval --ckpt " + p("nope.tseg") + " --data " + p("data") + " --out " + p("ev3")), 2);
}

TEST_F(Cli, InferIsDeterministicInRangeAndClassOrderEquivariant) {
  const std::string base = "infer --ckpt " + p("run/checkpoint.tseg") + " --rgb " + p("data/rgb/0002.ppm") +
                           " --thermal " + p("data/thermal/0002.pgm") + " --points '3,4,1;12,12,0'";
  ASSERT_EQ(run(base + " --out " + p("inf1") + " --color"), 0);
  ASSERT_EQ(run(base + " --out " + p("inf2")), 0);
  const std::string m1 = slurp(kWork / "inf1" / "mask.pgm");
  EXPECT_EQ(m1, slurp(kWork / "inf2" / "mask.pgm"));
  EXPECT_TRUE(fs::exists(kWork / "inf1" / "overlay.ppm"));
  const Image8 a = read_image(p("inf1/mask.pgm"));
  for (std::uint8_t v : a.pixels) EXPECT_LT(v, 4);

  const std::vector<std::size_t> order{2, 0, 3, 1};
  const ClassVocabulary vocab = load_text_embeddings(p("run/classes.json"));
  save_text_embeddings(vocab.permuted(order), p("permuted.json"));
  ASSERT_EQ(run(base + " --classes " + p("permuted.json") + " --out " + p("inf3")), 0);
  const Image8 b = read_image(p("inf3/mask.pgm"));
  ASSERT_EQ(a.pixels.size(), b.pixels.size());
  for (std::size_t i = 0; i < a.pixels.size(); ++i) EXPECT_EQ(order[b.pixels[i]], a.pixels[i]) << "pixel " << i;
}

TEST_F(Cli, InferWithWrongEmbeddingWidthIsAUsageError) {
  save_text_embeddings(toy_vocabulary(synthetic_class_names(), 5, 0), p("narrow.json"));
  EXPECT_EQ(run("infer --ckpt " + p("run/checkpoint.tseg") + " --rgb " + p("data/rgb/0000.ppm") + " --thermal " +
                p("data/thermal/0000.pgm") + " --classes " + p("narrow.json") + " --out " + p("inf4")),
            2);
}

TEST_F(Cli, GradcheckPassesOnTinyModel) {
  EXPECT_EQ(run("gradcheck --config " + p("tiny.json") + " --coords 2"), 0);
  EXPECT_NE(slurp(kWork / "last.log").find("gradcheck passed"), std::string::npos);
}

TEST_F(Cli, ParamsFollowTheAblationSwitches) {
  auto trainable = [](const std::string& cfg) {
    EXPECT_EQ(run("params --json --config " + std::string(TASEG_SOURCE_DIR) + "/configs/" + cfg, "params.log"), 0);
    return nlohmann::json::parse(slurp(kWork / "params.log"))["trainable"].get<std::size_t>();
  };
  EXPECT_EQ(trainable("ablation_7_full.json"), 81344u);
  EXPECT_LT(trainable("ablation_1_baseline.json"), trainable("ablation_7_full.json"));
  EXPECT_LT(trainable("ablation_4_dffm.json"), trainable("ablation_6_dffm_decoder_lora.json"));
  EXPECT_LT(trainable("ablation_6_dffm_decoder_lora.json"), trainable("ablation_7_full.json"));
}

TEST_F(Cli, ShippedConfigsCoverEverySwitchCombination) {
  std::set<std::tuple<bool, bool, bool>> seen;
  for (const auto& e : fs::directory_iterator(fs::path(TASEG_SOURCE_DIR) / "configs")) {
    const RunConfig c = load_run_config(e.path().string());
    seen.insert({c.model.enable_dffm, c.model.enable_decoder_lora, c.model.enable_text});
  }
  EXPECT_EQ(seen.size(), 7u);
}

TEST_F(Cli, UnknownConfigKeyIsAUsageError) {
  std::ofstream(kWork / "typo.json") << R"({"training": {"stpes": 3}})";
  EXPECT_EQ(run("train --config " + p("typo.json") + " --data " + p("data") + " --out " + p("typo")), 2);
  EXPECT_NE(slurp(kWork / "last.log").find("stpes"), std::string::npos);
}

TEST_F(Cli, DivergentTrainingIsANumericAbort) {
  auto j = tiny_config_json();
  j["training"]["lr"] = 1e200;
  j["training"]["steps"] = 5;
  std::ofstream(kWork / "diverge.json") << j.dump();
  EXPECT_EQ(run("train --config " + p("diverge.json") + " --data " + p("data") + " --out " + p("diverge")), 3);
}

TEST_F(Cli, PrintConfigShowsDefaults) {
  ASSERT_EQ(run("--print-config"), 0);
  const auto j = nlohmann::json::parse(slurp(kWork / "last.log"));
  EXPECT_EQ(j["training"]["lr"].get<double>(), 5e-4);
  EXPECT_EQ(j["model"]["d"].get<int>(), 64);
}

TEST_F(Cli, BadArgumentsAreUsageErrors) {
  EXPECT_EQ(run("frobnicate"), 2);
  EXPECT_EQ(run("eval --data x"), 2);
}

}  // namespace
}  // namespace taseg
