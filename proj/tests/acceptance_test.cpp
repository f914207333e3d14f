// Acceptance suite: one PASS/FAIL line per criterion on stdout, progress on
// stderr. Exit status is nonzero if any criterion fails.

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <iterator>
#include <memory>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "taseg/checkpoint.hpp"
#include "taseg/ledger.hpp"
#include "taseg/train.hpp"
#include "taseg/verify.hpp"

namespace fs = std::filesystem;
using namespace taseg;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Verdict {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(int id, const std::string& title, const std::function<Verdict()>& check) {
  Verdict v;
  try {
    v = check();
  } catch (const std::exception& e) {
    v = {false, std::string("exception: ") + e.what()};
  }
  if (!v.pass) ++failures;
  std::cout << (v.pass ? "PASS" : "FAIL") << "  [" << id << "] " << title << ": " << v.detail << std::endl;
}

std::string num(double v, int prec = 4) {
  std::ostringstream s;
  s << std::setprecision(prec) << v;
  return s.str();
}

std::string sci(double v) {
  std::ostringstream s;
  s << std::scientific << std::setprecision(2) << v;
  return s.str();
}

// ---- seeded benchmark ---------------------------------------------------

// 64 training and 32 test scenes, 200 steps at batch 4.
struct Benchmark {
  std::vector<RgbtSample> train = gen_synthetic({64, 64, 8, 1});
  std::vector<RgbtSample> test = gen_synthetic({32, 64, 8, 2});
  ClassVocabulary vocab = toy_vocabulary(synthetic_class_names(), ModelConfig{}.d_t, 0);
  TrainConfig train_cfg = [] {
    TrainConfig t;
    t.steps = 200;
    t.batch = 4;
    t.seed = 0;
    return t;
  }();
};

struct RunResult {
  std::unique_ptr<TasegModel> model;
  ClassIou test_iou;
  double test_miou = 0;
  double seconds = 0;
};

RunResult train_and_test(const Benchmark& b, const ModelConfig& cfg, const std::string& label) {
  const auto t0 = Clock::now();
  RunResult r{std::make_unique<TasegModel>(cfg), {}, 0, 0};
  const ClassVocabulary* v = cfg.enable_text ? &b.vocab : nullptr;
  const TrainHistory h = train(*r.model, b.train, v, b.train_cfg);
  const SplitMetrics m = evaluate(*r.model, b.test, v, synthetic_class_names());
  r.test_iou = iou_from(m.by_split.at("overall"));
  r.test_miou = miou(r.test_iou);
  r.seconds = seconds_since(t0);
  std::cerr << "  " << label << ": loss " << num(h.steps.front().loss) << " -> " << num(h.steps.back().loss)
            << ", test mIoU " << num(r.test_miou) << ", IoU";
  for (const auto& x : r.test_iou) std::cerr << " " << (x ? num(*x) : "-");
  std::cerr << " (" << num(r.seconds, 3) << " s)\n";
  return r;
}

ModelConfig with_flags(bool dffm, bool dec_lora, bool text) {
  ModelConfig c;
  c.enable_dffm = dffm;
  c.enable_decoder_lora = dec_lora;
  c.enable_text = text;
  return c;
}

// ---- criteria -----------------------------------------------------------

Verdict gradient_correctness() {
  if (sizeof(Scalar) != 8) return {false, "build uses 32-bit scalars; the check needs 64-bit"};
  const auto t0 = Clock::now();
  Scalar worst = 0;
  std::string worst_at;
  bool ok = true;
  std::size_t n_ops = 0;
  for (const auto& c : gradcheck_ops(1e-5, 1e-4)) {
    ok = ok && c.report.pass;
    if (c.report.max_rel_err >= worst) {
      worst = c.report.max_rel_err;
      worst_at = c.op + " " + to_string(c.shape);
    }
    ++n_ops;
  }
  ModelGradcheckOptions opt;
  opt.coords_per_target = 4;
  const GradcheckReport m = gradcheck_model(ModelConfig{}, opt);
  ok = ok && m.pass;
  if (m.max_rel_err >= worst) {
    worst = m.max_rel_err;
    worst_at = "model " + m.worst;
  }
  const double secs = seconds_since(t0);
  return {ok && worst <= 1e-4 && secs <= 120,
          "max rel err " + sci(worst) + " at " + worst_at + " over " + std::to_string(n_ops) + " op checks and " +
              std::to_string(m.coords_checked) + " model coordinates (toy dims), " + num(secs, 3) +
              " s; limits 1e-4, 120 s"};
}

Verdict init_identity() {
  const ModelConfig cfg;
  const TasegModel with_lora(cfg);
  ModelConfig plain = cfg;
  plain.enable_decoder_lora = false;
  const TasegModel without_lora(plain);
  const auto s = gen_synthetic({2, 64, 8, 5});
  const ClassVocabulary vocab = toy_vocabulary(synthetic_class_names(), cfg.d_t, 0);

  Tape t1, t2, t3;
  const Tensor e1 = with_lora.encoder()(t1, t1.constant(s[0].rgb), t1.constant(s[0].thermal)).tokens.value();
  const Tensor e2 = with_lora.encoder()(t2, t2.constant(s[0].rgb), t2.constant(s[1].thermal)).tokens.value();
  Tensor zero_thermal(s[0].thermal.shape(), Scalar{0});
  const Tensor e3 = with_lora.encoder()(t3, t3.constant(s[0].rgb), t3.constant(zero_thermal)).tokens.value();
  const bool a = bitwise_equal(e1, e2) && bitwise_equal(e1, e3);

  Tape t4, t5;
  const Tensor l1 = with_lora.forward(t4, s[0].rgb, s[0].thermal, &vocab).logits().value();
  const Tensor l2 = without_lora.forward(t5, s[0].rgb, s[0].thermal, &vocab).logits().value();
  const bool b = bitwise_equal(l1, l2);
  return {a && b, std::string("(a) encoder output independent of thermal input: ") + (a ? "bitwise" : "DIFFERS") +
                      "; (b) decoder with adapters vs without: " + (b ? "bitwise" : "DIFFERS")};
}

Verdict freeze_invariance(const Benchmark& b) {
  TasegModel m{ModelConfig{}};
  const auto before = m.registry().snapshot();
  TrainConfig cfg = b.train_cfg;
  cfg.steps = 50;
  train(m, b.train, &b.vocab, cfg);
  std::size_t frozen_changed = 0, trainable_unchanged = 0, frozen = 0, trainable = 0;
  std::string first_bad;
  std::set<std::string> groups_moved;
  for (std::size_t i = 0; i < before.size(); ++i) {
    const Parameter& p = m.registry()[i];
    const bool same = bitwise_equal(before[i], p.value);
    if (p.frozen) {
      ++frozen;
      if (!same) {
        ++frozen_changed;
        if (first_bad.empty()) first_bad = p.name;
      }
    } else {
      ++trainable;
      if (same) {
        ++trainable_unchanged;
        if (first_bad.empty()) first_bad = p.name;
      } else {
        groups_moved.insert(param_group(p.name));
      }
    }
  }
  const std::vector<std::string> required{"thermal-patch-embed", "dffm",           "encoder-lora",
                                          "decoder-lora",        "decoder-heads",  "text-attention"};
  bool groups_ok = true;
  for (const auto& g : required) groups_ok = groups_ok && groups_moved.contains(g);
  const bool ok = frozen_changed == 0 && trainable_unchanged == 0 && groups_ok;
  return {ok, std::to_string(frozen - frozen_changed) + "/" + std::to_string(frozen) +
                  " frozen tensors bitwise unchanged, " + std::to_string(trainable - trainable_unchanged) + "/" +
                  std::to_string(trainable) + " trainable tensors changed after 50 steps" +
                  (first_bad.empty() ? "" : "; first offender " + first_bad)};
}

Verdict fusion_ablation(const RunResult& full, const RunResult& concat) {
  const auto k = static_cast<std::size_t>(kThermalOnly);
  if (!full.test_iou[k] || !concat.test_iou[k]) return {false, "thermal-only class absent from the test set"};
  const double gap = *full.test_iou[k] - *concat.test_iou[k];
  const double secs = full.seconds + concat.seconds;
  return {gap >= 0.20 && secs <= 600,
          "thermal-only IoU " + num(*full.test_iou[k]) + " (fusion module) vs " + num(*concat.test_iou[k]) +
              " (concatenated embeddings), gap " + num(gap) + " (need >= 0.20); " + num(secs, 3) + " s"};
}

Verdict text_ablation(const RunResult& with_text, const RunResult& without) {
  const double d = with_text.test_miou - without.test_miou;
  return {d >= -0.01, "test mIoU " + num(with_text.test_miou) + " with text head vs " + num(without.test_miou) +
                          " without, difference " + num(d) + " (need >= -0.01)"};
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(TASEG_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Verdict permutation_equivariance(const TasegModel& model, const Benchmark& b) {
  Rng rng(31);
  std::size_t checks = 0;
  for (std::size_t C : {2u, 4u, 8u}) {
    std::vector<std::string> names;
    for (std::size_t c = 0; c < C; ++c) names.push_back("class_" + std::to_string(c));
    const ClassVocabulary vocab = toy_vocabulary(names, model.config().d_t, C);
    for (int trial = 0; trial < 3; ++trial) {
      std::vector<std::size_t> order(C);
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::shuffle(order.begin(), order.end(), rng);
      const ClassVocabulary perm = vocab.permuted(order);
      const RgbtSample& s = b.test[static_cast<std::size_t>(trial)];
      Tape t1, t2;
      const Tensor a = model.forward(t1, s.rgb, s.thermal, &vocab).logits().value();
      const Tensor p = model.forward(t2, s.rgb, s.thermal, &perm).logits().value();
      for (std::size_t px = 0; px < a.size() / C; ++px) {
        for (std::size_t i = 0; i < C; ++i) {
          const Scalar x = p[px * C + i], y = a[px * C + order[i]];
          if (std::memcmp(&x, &y, sizeof(Scalar)) != 0) {
            return {false, "C=" + std::to_string(C) + ": channel " + std::to_string(i) + " at pixel " +
                               std::to_string(px) + " differs"};
          }
        }
      }
      ++checks;
    }
  }

  // End to end through the inference command.
  const fs::path dir = fs::temp_directory_path() / ("taseg_accept_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir / "ckpt");
  RunConfig rc;
  rc.model = model.config();
  std::ofstream(dir / "ckpt" / "config.json") << to_json(rc).dump(2);
  save_checkpoint(model.registry(), (dir / "ckpt" / "checkpoint.tseg").string());
  save_text_embeddings(b.vocab, (dir / "classes.json").string());
  const std::vector<std::size_t> order{3, 1, 0, 2};
  save_text_embeddings(b.vocab.permuted(order), (dir / "permuted.json").string());
  write_image((dir / "rgb.ppm").string(), to_image8(b.test[0].rgb));
  write_image((dir / "thermal.pgm").string(), to_image8(b.test[0].thermal));
  const std::string base = "infer --ckpt " + (dir / "ckpt" / "checkpoint.tseg").string() + " --rgb " +
                           (dir / "rgb.ppm").string() + " --thermal " + (dir / "thermal.pgm").string();
  if (run_cli(base + " --classes " + (dir / "classes.json").string() + " --out " + (dir / "a").string()) != 0 ||
      run_cli(base + " --classes " + (dir / "permuted.json").string() + " --out " + (dir / "b").string()) != 0) {
    return {false, "inference command failed"};
  }
  const Image8 ma = read_image((dir / "a" / "mask.pgm").string());
  const Image8 mb = read_image((dir / "b" / "mask.pgm").string());
  std::size_t mismatched = 0;
  for (std::size_t i = 0; i < ma.pixels.size(); ++i) mismatched += order.at(mb.pixels[i]) != ma.pixels[i];
  fs::remove_all(dir);
  return {mismatched == 0, std::to_string(checks) + " permutations over C in {2,4,8} permute logit channels bitwise; "
                               "infer command with permuted class file: " +
                               std::to_string(mismatched) + " inconsistent mask pixels"};
}

Verdict metric_oracle() {
  Rng rng(2024);
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::int32_t C = 2 + trial % 6;
    std::uniform_int_distribution<std::int32_t> lab(0, C - 1);
    LabelMap gt(16, 16), pred(16, 16);
    for (std::size_t i = 0; i < 256; ++i) {
      gt.ids[i] = lab(rng);
      pred.ids[i] = lab(rng);
    }
    const ClassIou got = iou_per_class(pred, gt, static_cast<std::size_t>(C), 255);
    double sum = 0;
    int present = 0;
    for (std::int32_t c = 0; c < C; ++c) {
      std::size_t inter = 0, uni = 0;
      for (std::size_t i = 0; i < 256; ++i) {
        inter += gt.ids[i] == c && pred.ids[i] == c;
        uni += gt.ids[i] == c || pred.ids[i] == c;
      }
      const auto k = static_cast<std::size_t>(c);
      if (uni == 0) {
        mismatches += got[k].has_value();
        continue;
      }
      const double want = static_cast<double>(inter) / static_cast<double>(uni);
      mismatches += !got[k] || *got[k] != want;
      sum += want;
      ++present;
    }
    mismatches += miou(got) != sum / present;
  }
  return {mismatches == 0, "100 random 16x16 pairs, " + std::to_string(mismatches) + " exact mismatches"};
}

Verdict analytic_losses() {
  Rng rng(8);
  std::vector<std::int32_t> labels(12);
  std::uniform_int_distribution<std::int32_t> lab(0, 3);
  for (auto& l : labels) l = lab(rng);
  Tape tape;
  const double ce = cross_entropy_loss(tape.constant(Tensor({3, 4, 4}, 0.0)), labels, {}).value().item();
  Tensor onehot({3, 4, 4}, 0.0);
  for (std::size_t i = 0; i < 12; ++i) onehot[i * 4 + static_cast<std::size_t>(labels[i])] = 800;
  const double dice = dice_loss(tape.constant(onehot), labels, {}).value().item();

  ParamRegistry reg;
  Parameter& p = reg.add("w", normal_tensor({8, 8}, 1, rng), false);
  const Tensor before = p.value;
  AdamWConfig acfg;
  AdamW opt(reg, acfg);
  opt.step();
  const double factor = 1 - static_cast<double>(acfg.lr * acfg.weight_decay);
  double worst = 0;
  for (std::size_t i = 0; i < before.size(); ++i) {
    worst = std::max(worst, std::abs(p.value[i] / before[i] - factor));
  }
  const double e_ce = std::abs(ce - std::log(4.0));
  const bool ok = e_ce <= 1e-12 && std::abs(dice) <= 1e-12 && worst <= 1e-15;
  return {ok, "|CE - ln 4| = " + sci(e_ce) + ", perfect Dice = " + sci(dice) + ", AdamW decay factor error " +
                  sci(worst) + " (limits 1e-12, 1e-12, 1e-15)"};
}

// Closed form for the trainable count, from the architecture dimensions.
std::size_t closed_form_trainable(const ModelConfig& c) {
  const std::size_t d = c.d, r = c.lora_rank, N = c.depth, L = c.decoder_layers, M = c.mask_tokens;
  const std::size_t dm = d / 4, s = d / c.se_reduction, p = c.patch;
  std::size_t n = p * p * c.thermal_channels * d + d;            // thermal patch embedding
  n += c.enable_dffm ? N * (3 * (d * d + d) + 2 * d * s + s + d)  // three 1x1 convs and squeeze-excite
                     : 2 * d * d + d;                             // concatenation projection
  n += N * 2 * r * (d + d);                                       // adapters on Q and V per block
  if (c.enable_decoder_lora) n += L * 2 * r * (d + d);            // token-to-image Q and V per layer
  n += (d * 4 * (d / 2) + d / 2) + ((d / 2) * 4 * dm + dm);       // two upsampling stages
  if (c.enable_text) {
    n += (dm + c.d_v) * c.d_k + c.d_k;                            // class head projection
    n += dm * c.d_k + c.d_t * c.d_k + c.d_t * c.d_v;              // text attention
  } else {
    n += dm * c.num_classes + c.num_classes;                      // linear classifier
  }
  n += 2 * d + d + d + M * d;  // point labels, no-mask, IoU token, mask tokens
  return n;
}

Verdict ledger() {
  const ModelConfig toy;
  const std::size_t got = param_ledger(TasegModel(toy).registry()).trainable;
  const std::size_t want = closed_form_trainable(toy);
  std::size_t counts[2][2][2];
  bool forms_ok = got == want;
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 2; ++b)
      for (int t = 0; t < 2; ++t) {
        const ModelConfig c = with_flags(a, b, t);
        counts[a][b][t] = param_ledger(TasegModel(c).registry()).trainable;
        forms_ok = forms_ok && counts[a][b][t] == closed_form_trainable(c);
      }
  bool monotone = true;
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 2; ++b)
      for (int t = 0; t < 2; ++t) {
        if (a == 0) monotone = monotone && counts[0][b][t] < counts[1][b][t];
        if (b == 0) monotone = monotone && counts[a][0][t] < counts[a][1][t];
        if (t == 0) monotone = monotone && counts[a][b][0] < counts[a][b][1];
      }
  return {forms_ok && monotone, "toy trainable total " + std::to_string(got) + " vs closed form " +
                                    std::to_string(want) + "; all 8 switch settings match the closed form: " +
                                    (forms_ok ? "yes" : "no") + "; enabling any switch adds parameters: " +
                                    (monotone ? "yes" : "no")};
}

Verdict persistence(const TasegModel& trained, const Benchmark& b) {
  const auto bytes = serialize_checkpoint(trained.registry());
  const fs::path path = fs::temp_directory_path() / ("taseg_accept_" + std::to_string(::getpid()) + ".tseg");
  save_checkpoint(trained.registry(), path.string());
  const ParamRegistry loaded = load_checkpoint(path.string());
  fs::remove(path);
  const bool bytes_ok = serialize_checkpoint(loaded) == bytes;

  ModelConfig other = trained.config();
  other.init_seed = 12345;
  TasegModel fresh(other);
  restore_parameters(fresh.registry(), loaded);
  Tape t1, t2;
  const bool fwd_ok = bitwise_equal(trained.forward(t1, b.test[0].rgb, b.test[0].thermal, &b.vocab).logits().value(),
                                    fresh.forward(t2, b.test[0].rgb, b.test[0].thermal, &b.vocab).logits().value());

  std::size_t typed = 0, untyped = 0, accepted = 0;
  auto attempt = [&](const std::vector<std::uint8_t>& data) {
    try {
      parse_checkpoint(data);
      ++accepted;
    } catch (const CheckpointError&) {
      ++typed;
    } catch (...) {
      ++untyped;
    }
  };
  for (std::size_t n = 0; n < bytes.size(); n += 1 + n / 3) {
    attempt(std::vector<std::uint8_t>(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(n)));
  }
  Rng rng(5);
  std::uniform_int_distribution<std::size_t> pos(0, bytes.size() - 1);
  for (int i = 0; i < 200; ++i) {
    auto c = bytes;
    c[pos(rng)] ^= static_cast<std::uint8_t>(1u << (i % 8));
    attempt(c);
  }
  const bool ok = bytes_ok && fwd_ok && untyped == 0 && accepted == 0;
  return {ok, std::string("round trip bytes ") + (bytes_ok ? "identical" : "DIFFER") + ", forward " +
                  (fwd_ok ? "bitwise identical" : "DIFFERS") + "; " + std::to_string(typed) +
                  " truncated/corrupted files raised typed errors, " + std::to_string(untyped) + " other failures, " +
                  std::to_string(accepted) + " accepted"};
}

}  // namespace

int main() {
  const auto t0 = Clock::now();
  const Benchmark bench;

  report(1, "gradient correctness", gradient_correctness);
  report(2, "init identity", init_identity);
  report(3, "freeze invariance", [&] { return freeze_invariance(bench); });

  std::cerr << "training ablation runs (200 steps each)\n";
  const RunResult full = train_and_test(bench, with_flags(true, true, true), "full");
  const RunResult concat = train_and_test(bench, with_flags(false, true, true), "concatenated fusion");
  const RunResult no_text = train_and_test(bench, with_flags(true, true, false), "no text head");
  report(4, "fusion ablation", [&] { return fusion_ablation(full, concat); });
  report(5, "text-path ablation", [&] { return text_ablation(full, no_text); });

  report(6, "class-permutation equivariance", [&] { return permutation_equivariance(*full.model, bench); });
  report(7, "metric oracle", metric_oracle);
  report(8, "analytic loss values", analytic_losses);
  report(9, "parameter ledger", ledger);
  report(10, "persistence", [&] { return persistence(*full.model, bench); });

  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << " in "
            << num(seconds_since(t0), 3) << " s" << std::endl;
  return failures == 0 ? 0 : 1;
}
