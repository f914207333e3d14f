// taseg: data generation, training, evaluation, inference and verification.
//
// Exit codes: 0 success, 1 verification failure, 2 usage or validation
// error, 3 numeric abort.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "taseg/checkpoint.hpp"
#include "taseg/data.hpp"
#include "taseg/ledger.hpp"
#include "taseg/metrics.hpp"
#include "taseg/train.hpp"
#include "taseg/verify.hpp"

namespace fs = std::filesystem;
using namespace taseg;

namespace {

constexpr int kOk = 0;
constexpr int kVerifyFailed = 1;
constexpr int kUsage = 2;
constexpr int kNumeric = 3;

// Files a training run leaves next to its checkpoint; eval and infer find
// the architecture and class list there unless told otherwise.
constexpr const char* kCheckpointFile = "checkpoint.tseg";
constexpr const char* kConfigFile = "config.json";
constexpr const char* kVocabFile = "classes.json";

void make_out_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) {
    throw ConfigError("cannot create output directory '" + dir.string() + "'" + (ec ? ": " + ec.message() : ""));
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw ConfigError("failed writing '" + path.string() + "'");
}

std::string fmt(double v, int prec = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(prec) << v;
  return s.str();
}

// ---- gen-data -----------------------------------------------------------

struct GenArgs {
  std::string out;
  std::size_t n = 64;
  std::size_t size = 64;
  std::size_t patch = 8;
  std::uint64_t seed = 0;
  double noise = 0.02;
};

int cmd_gen_data(const GenArgs& a) {
  SyntheticOptions opt{a.n, a.size, a.patch, a.seed, static_cast<Scalar>(a.noise)};
  if (a.size == 0 || a.patch == 0 || a.size % a.patch != 0) {
    throw ConfigError("--size " + std::to_string(a.size) + " is not a multiple of --patch " + std::to_string(a.patch));
  }
  if (a.n == 0) throw ConfigError("--n must be positive");
  const auto samples = gen_synthetic(opt);
  make_out_dir(a.out);
  const auto names = synthetic_class_names();
  write_dataset(a.out, samples, names);

  std::vector<std::size_t> counts(names.size(), 0);
  for (const auto& s : samples)
    for (std::int32_t l : s.labels.ids) ++counts[static_cast<std::size_t>(l)];
  const double total = static_cast<double>(samples.size() * a.size * a.size);
  std::cout << "wrote " << samples.size() << " samples to " << a.out << "\n";
  std::cout << std::left << std::setw(20) << "class" << std::right << std::setw(10) << "pixels" << std::setw(10)
            << "share" << "\n";
  for (std::size_t c = 0; c < names.size(); ++c) {
    std::cout << std::left << std::setw(20) << names[c] << std::right << std::setw(10) << counts[c] << std::setw(10)
              << fmt(static_cast<double>(counts[c]) / total) << "\n";
  }
  return kOk;
}

// ---- shared loading -----------------------------------------------------

RunConfig config_or_default(const std::string& path) { return path.empty() ? RunConfig{} : load_run_config(path); }

ClassVocabulary resolve_vocabulary(const std::string& path, const std::vector<std::string>& names,
                                   const ModelConfig& cfg) {
  ClassVocabulary v = path.empty() ? toy_vocabulary(names, cfg.d_t, cfg.init_seed) : load_text_embeddings(path);
  if (v.dim() != cfg.d_t) {
    throw ConfigError("class embeddings have dimension " + std::to_string(v.dim()) + ", the model expects d_t = " +
                      std::to_string(cfg.d_t));
  }
  return v;
}

void require_same_classes(const std::vector<std::string>& vocab, const std::vector<std::string>& manifest) {
  if (vocab != manifest) {
    std::string a, b;
    for (const auto& n : vocab) a += (a.empty() ? "" : ",") + n;
    for (const auto& n : manifest) b += (b.empty() ? "" : ",") + n;
    throw ConfigError("class list [" + a + "] does not match the manifest's [" + b + "]");
  }
}

struct LoadedModel {
  RunConfig cfg;
  std::unique_ptr<TasegModel> model;
  ClassVocabulary vocab;
};

LoadedModel load_model(const std::string& ckpt, std::string config, std::string classes) {
  const fs::path dir = fs::path(ckpt).parent_path();
  if (!fs::exists(ckpt)) throw ConfigError("checkpoint '" + ckpt + "' does not exist");
  if (config.empty()) config = (dir / kConfigFile).string();
  if (classes.empty()) classes = (dir / kVocabFile).string();
  LoadedModel m{load_run_config(config), nullptr, {}};
  m.model = std::make_unique<TasegModel>(m.cfg.model);
  restore_parameters(m.model->registry(), load_checkpoint(ckpt));
  m.vocab = load_text_embeddings(classes);
  if (m.vocab.dim() != m.cfg.model.d_t && m.cfg.model.enable_text) {
    throw ConfigError("class file '" + classes + "' has embedding dimension " + std::to_string(m.vocab.dim()) +
                      ", the checkpoint expects d_t = " + std::to_string(m.cfg.model.d_t));
  }
  if (!m.cfg.model.enable_text && m.vocab.size() != m.cfg.model.num_classes) {
    throw ConfigError("class file lists " + std::to_string(m.vocab.size()) + " classes, the text-free head has " +
                      std::to_string(m.cfg.model.num_classes));
  }
  return m;
}

// ---- train --------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::string data;
  std::string out;
  std::string text_embeddings;
  std::optional<std::size_t> steps;
  std::optional<std::uint64_t> seed;
  bool print_config = false;
};

int cmd_train(const TrainArgs& a) {
  RunConfig cfg = config_or_default(a.config);
  if (!a.data.empty()) cfg.data_dir = a.data;
  if (!a.out.empty()) cfg.out_dir = a.out;
  if (a.steps) cfg.training.steps = *a.steps;
  if (a.seed) cfg.training.seed = *a.seed;
  cfg.validate();
  if (a.print_config) {
    std::cout << to_json(cfg).dump(2) << "\n";
    return kOk;
  }
  if (cfg.data_dir.empty()) throw ConfigError("no dataset given (--data or paths.data)");
  if (cfg.out_dir.empty()) throw ConfigError("no output directory given (--out or paths.out)");

  const DatasetManifest manifest = read_manifest(cfg.data_dir);
  const auto data = load_samples(manifest);
  if (data.empty()) throw ConfigError("dataset '" + cfg.data_dir + "' holds no samples");
  if (!cfg.model.enable_text && manifest.classes.size() != cfg.model.num_classes) {
    throw ConfigError("manifest lists " + std::to_string(manifest.classes.size()) +
                      " classes but model.num_classes is " + std::to_string(cfg.model.num_classes));
  }
  ClassVocabulary vocab = resolve_vocabulary(a.text_embeddings, manifest.classes, cfg.model);
  require_same_classes(vocab.names(), manifest.classes);
  for (const auto& s : data) {
    if (s.rgb.dim(0) != cfg.model.image_size || s.rgb.dim(1) != cfg.model.image_size) {
      throw ConfigError("dataset images are " + std::to_string(s.rgb.dim(0)) + "x" + std::to_string(s.rgb.dim(1)) +
                        ", model.image_size is " + std::to_string(cfg.model.image_size));
    }
  }

  const fs::path out = cfg.out_dir;
  make_out_dir(out);
  TasegModel model(cfg.model);
  const ParamLedger ledger = param_ledger(model.registry());
  write_text(out / kConfigFile, to_json(cfg).dump(2) + "\n");
  save_text_embeddings(vocab, (out / kVocabFile).string());
  write_text(out / "ledger.json", to_json(ledger).dump(2) + "\n");

  std::ofstream log(out / "metrics.tsv");
  if (!log) throw ConfigError("cannot write metrics log under '" + out.string() + "'");
  std::cout << "training " << ledger.trainable << " of " << ledger.trainable + ledger.frozen << " parameters for "
            << cfg.training.steps << " steps\n";
  const TrainHistory h = train(model, data, cfg.model.enable_text ? &vocab : nullptr, cfg.training,
                               [&](const StepRecord& r) {
                                 log << r.step << '\t' << std::setprecision(17) << r.loss << '\t' << r.miou << '\n';
                                 if (r.step % cfg.training.log_every == 0 || r.step + 1 == cfg.training.steps) {
                                   std::cout << "step " << r.step << "  loss " << fmt(r.loss) << "  miou "
                                             << fmt(r.miou) << "\n";
                                 }
                               });
  log.close();
  save_checkpoint(model.registry(), (out / kCheckpointFile).string());
  if (!h.steps.empty()) {
    std::cout << "final train mIoU " << fmt(h.steps.back().miou) << "\n";
  }
  std::cout << "checkpoint written to " << (out / kCheckpointFile).string() << "\n";
  return kOk;
}

// ---- eval ---------------------------------------------------------------

struct EvalArgs {
  std::string ckpt;
  std::string data;
  std::string split;
  std::string out;
  std::string config;
  std::string classes;
  bool exclude_background = false;
};

void print_table(const SplitMetrics& m, MiouPolicy policy) {
  std::size_t w = 8;
  for (const auto& n : m.class_names) w = std::max(w, n.size() + 2);
  std::cout << std::left << std::setw(10) << "split";
  for (const auto& n : m.class_names) std::cout << std::right << std::setw(static_cast<int>(w)) << n;
  std::cout << std::right << std::setw(10) << "mIoU" << "\n";
  // Per-split rows first, overall last.
  std::vector<std::string> order;
  for (const auto& [k, _] : m.by_split) {
    if (k != "overall") order.push_back(k);
  }
  order.push_back("overall");
  for (const auto& k : order) {
    const ClassIou iou = iou_from(m.by_split.at(k));
    std::cout << std::left << std::setw(10) << k;
    for (const auto& v : iou) std::cout << std::right << std::setw(static_cast<int>(w)) << (v ? fmt(*v) : "-");
    std::cout << std::right << std::setw(10) << fmt(miou(iou, policy)) << "\n";
  }
}

int cmd_eval(const EvalArgs& a) {
  LoadedModel lm = load_model(a.ckpt, a.config, a.classes);
  const DatasetManifest manifest = read_manifest(a.data);
  require_same_classes(lm.vocab.names(), manifest.classes);
  auto data = load_samples(manifest);
  if (!a.split.empty()) {
    bool tagged = false;
    for (const auto& s : data) tagged = tagged || !s.split.empty();
    if (!tagged) {
      std::cerr << "warning: manifest has no split tags; evaluating all samples as one split\n";
    } else {
      std::vector<RgbtSample> keep;
      for (auto& s : data) {
        if (s.split == a.split) keep.push_back(std::move(s));
      }
      if (keep.empty()) throw ConfigError("no sample carries split tag '" + a.split + "'");
      data = std::move(keep);
    }
  }
  if (data.empty()) throw ConfigError("dataset '" + a.data + "' holds no samples");
  make_out_dir(a.out);
  const MiouPolicy policy{!a.exclude_background};
  const SplitMetrics m = evaluate(*lm.model, data, lm.cfg.model.enable_text ? &lm.vocab : nullptr,
                                  manifest.classes, lm.cfg.training.ignore_label);
  print_table(m, policy);
  nlohmann::json results = {{"checkpoint", a.ckpt},
                            {"data", a.data},
                            {"samples", data.size()},
                            {"include_background", policy.include_background},
                            {"splits", m.to_json(policy)}};
  if (!a.split.empty()) results["split_filter"] = a.split;
  write_text(fs::path(a.out) / "results.json", results.dump(2) + "\n");
  return kOk;
}

// ---- infer --------------------------------------------------------------

struct InferArgs {
  std::string ckpt;
  std::string rgb;
  std::string thermal;
  std::string classes;
  std::string points;
  std::string out;
  std::string config;
  bool color = false;
};

// "x,y,label;x,y,label" with label 1 for foreground, 0 for background.
PointPrompt parse_points(const std::string& spec) {
  PointPrompt p;
  std::stringstream all(spec);
  std::string item;
  while (std::getline(all, item, ';')) {
    if (item.empty()) continue;
    double x = 0, y = 0;
    int label = 1;
    char c1 = 0, c2 = 0;
    std::stringstream one(item);
    if (!(one >> x >> c1 >> y) || c1 != ',') throw ConfigError("bad point '" + item + "' (expected x,y[,label])");
    if (one >> c2) {
      if (c2 != ',' || !(one >> label) || (label != 0 && label != 1)) {
        throw ConfigError("bad point label in '" + item + "' (expected 0 or 1)");
      }
    }
    p.points.push_back({x, y, label == 1});
  }
  return p;
}

std::array<std::uint8_t, 3> palette(std::size_t c) {
  static const std::array<std::array<std::uint8_t, 3>, 8> base{{{0, 0, 0},
                                                                {230, 25, 75},
                                                                {255, 225, 25},
                                                                {0, 130, 200},
                                                                {60, 180, 75},
                                                                {245, 130, 48},
                                                                {145, 30, 180},
                                                                {70, 240, 240}}};
  if (c < base.size()) return base[c];
  Rng rng(c);
  std::uniform_int_distribution<int> u(40, 255);
  return {static_cast<std::uint8_t>(u(rng)), static_cast<std::uint8_t>(u(rng)), static_cast<std::uint8_t>(u(rng))};
}

int cmd_infer(const InferArgs& a) {
  LoadedModel lm = load_model(a.ckpt, a.config, a.classes);
  const Image8 rgb8 = read_image(a.rgb);
  const Image8 th8 = read_image(a.thermal);
  if (rgb8.channels != 3) throw ConfigError("'" + a.rgb + "' is not a 3-channel pixmap");
  if (th8.channels != 1) throw ConfigError("'" + a.thermal + "' is not a single-channel graymap");
  if (rgb8.height != th8.height || rgb8.width != th8.width) {
    throw ConfigError("RGB and thermal images differ in size");
  }
  const PointPrompt points = parse_points(a.points);
  Tape tape;
  const ModelOutput out = lm.model->forward(tape, to_tensor(rgb8), to_tensor(th8),
                                            lm.cfg.model.enable_text ? &lm.vocab : nullptr, points);
  const LabelMap mask = predict_labels(out.logits().value());
  make_out_dir(a.out);
  write_image((fs::path(a.out) / "mask.pgm").string(), labels_to_image(mask));
  if (a.color) {
    Image8 overlay{rgb8.height, rgb8.width, 3, rgb8.pixels};
    for (std::size_t i = 0; i < mask.ids.size(); ++i) {
      const auto col = palette(static_cast<std::size_t>(mask.ids[i]));
      for (std::size_t k = 0; k < 3; ++k) {
        overlay.pixels[i * 3 + k] = static_cast<std::uint8_t>((overlay.pixels[i * 3 + k] + col[k] + 1) / 2);
      }
    }
    write_image((fs::path(a.out) / "overlay.ppm").string(), overlay);
  }
  const std::size_t classes = out.logits().shape()[2];
  std::vector<std::size_t> counts(classes, 0);
  for (std::int32_t l : mask.ids) ++counts[static_cast<std::size_t>(l)];
  for (std::size_t c = 0; c < classes; ++c) {
    std::cout << c << '\t' << lm.vocab.names().at(c) << '\t' << counts[c] << "\n";
  }
  return kOk;
}

// ---- gradcheck / params -------------------------------------------------

struct GradcheckArgs {
  std::string config;
  std::size_t coords = 4;
  bool skip_model = false;
};

int cmd_gradcheck(const GradcheckArgs& a) {
  const RunConfig cfg = config_or_default(a.config);
  bool ok = true;
  Scalar worst = 0;
  for (const auto& c : gradcheck_ops()) {
    ok = ok && c.report.pass;
    worst = std::max(worst, c.report.max_rel_err);
    std::cout << (c.report.pass ? "ok   " : "FAIL ") << std::left << std::setw(18) << c.op << std::setw(14)
              << to_string(c.shape) << " max rel err " << std::scientific << std::setprecision(2)
              << c.report.max_rel_err << std::defaultfloat << "\n";
  }
  if (!a.skip_model) {
    ModelGradcheckOptions opt;
    opt.coords_per_target = a.coords;
    opt.seed = cfg.training.seed;
    const GradcheckReport r = gradcheck_model(cfg.model, opt);
    ok = ok && r.pass;
    worst = std::max(worst, r.max_rel_err);
    std::cout << (r.pass ? "ok   " : "FAIL ") << "model (" << r.coords_checked << " coords)  max rel err "
              << std::scientific << std::setprecision(2) << r.max_rel_err << std::defaultfloat << " at " << r.worst
              << "\n";
  }
  std::cout << (ok ? "gradcheck passed" : "gradcheck FAILED") << ", worst relative error " << std::scientific
            << std::setprecision(2) << worst << std::defaultfloat << "\n";
  return ok ? kOk : kVerifyFailed;
}

int cmd_params(const std::string& config, bool json) {
  const RunConfig cfg = config_or_default(config);
  const TasegModel model(cfg.model);
  const ParamLedger l = param_ledger(model.registry());
  if (json) {
    std::cout << to_json(l).dump(2) << "\n";
    return kOk;
  }
  std::cout << std::left << std::setw(24) << "group" << std::setw(11) << "status" << std::right << std::setw(12)
            << "params" << "\n";
  for (const auto& r : l.rows) {
    std::cout << std::left << std::setw(24) << r.group << std::setw(11) << (r.frozen ? "frozen" : "trainable")
              << std::right << std::setw(12) << r.count << "\n";
  }
  std::cout << std::left << std::setw(35) << "trainable total" << std::right << std::setw(12) << l.trainable << "\n"
            << std::left << std::setw(35) << "frozen total" << std::right << std::setw(12) << l.frozen << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"RGB-thermal segmentation with a frozen backbone, low-rank adapters and text-conditioned masks"};
  app.require_subcommand(0, 1);
  bool print_config = false;
  app.add_flag("--print-config", print_config, "Print the default run configuration and exit");

  GenArgs gen;
  auto* g = app.add_subcommand("gen-data", "Write a seeded synthetic RGB-thermal dataset");
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_option("--n", gen.n, "Number of samples")->capture_default_str();
  g->add_option("--size", gen.size, "Image side in pixels")->capture_default_str();
  g->add_option("--patch", gen.patch, "Patch size the image side must divide into")->capture_default_str();
  g->add_option("--seed", gen.seed, "Generator seed")->capture_default_str();
  g->add_option("--noise", gen.noise, "Gaussian pixel noise")->capture_default_str();

  TrainArgs tr;
  std::size_t steps = 0;
  std::uint64_t seed = 0;
  auto* t = app.add_subcommand("train", "Train on a dataset and write a checkpoint and metrics log");
  t->add_option("--config", tr.config, "Run configuration (JSON)");
  t->add_option("--data", tr.data, "Dataset directory with manifest.json");
  t->add_option("--out", tr.out, "Output directory");
  t->add_option("--text-embeddings", tr.text_embeddings, "Class embedding file; toy embeddings when omitted");
  auto* steps_opt = t->add_option("--steps", steps, "Override training.steps");
  auto* seed_opt = t->add_option("--seed", seed, "Override training.seed");
  t->add_flag("--print-config", tr.print_config, "Print the resolved configuration and exit");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Per-class IoU and mIoU of a checkpoint on a dataset");
  e->add_option("--ckpt", ev.ckpt, "Checkpoint file")->required();
  e->add_option("--data", ev.data, "Dataset directory")->required();
  e->add_option("--out", ev.out, "Directory for results.json")->required();
  e->add_option("--split", ev.split, "Evaluate only samples with this split tag");
  e->add_option("--config", ev.config, "Run configuration; defaults to config.json beside the checkpoint");
  e->add_option("--classes", ev.classes, "Class embedding file; defaults to classes.json beside the checkpoint");
  e->add_flag("--exclude-background", ev.exclude_background, "Leave class 0 out of the mIoU mean");

  InferArgs in;
  auto* i = app.add_subcommand("infer", "Predict a class-id mask for one RGB/thermal pair");
  i->add_option("--ckpt", in.ckpt, "Checkpoint file")->required();
  i->add_option("--rgb", in.rgb, "RGB pixmap (P6)")->required();
  i->add_option("--thermal", in.thermal, "Thermal graymap (P5)")->required();
  i->add_option("--out", in.out, "Output directory")->required();
  i->add_option("--classes", in.classes, "Class embedding file; its order defines the output ids");
  i->add_option("--points", in.points, "Point prompts 'x,y,label;...' (label 1 foreground, 0 background)");
  i->add_option("--config", in.config, "Run configuration; defaults to config.json beside the checkpoint");
  i->add_flag("--color", in.color, "Also write a colorized overlay.ppm");

  GradcheckArgs gc;
  auto* c = app.add_subcommand("gradcheck", "Check analytic gradients against central differences");
  c->add_option("--config", gc.config, "Run configuration for the model check");
  c->add_option("--coords", gc.coords, "Coordinates sampled per parameter tensor")->capture_default_str();
  c->add_flag("--skip-model", gc.skip_model, "Only check the individual ops");

  std::string params_config;
  bool params_json = false;
  auto* p = app.add_subcommand("params", "Trainable and frozen parameter counts per component");
  p->add_option("--config", params_config, "Run configuration");
  p->add_flag("--json", params_json, "Print JSON instead of a table");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return kUsage;
  }

  try {
    if (print_config) {
      std::cout << to_json(RunConfig{}).dump(2) << "\n";
      return kOk;
    }
    if (*steps_opt) tr.steps = steps;
    if (*seed_opt) tr.seed = seed;
    if (g->parsed()) return cmd_gen_data(gen);
    if (t->parsed()) return cmd_train(tr);
    if (e->parsed()) return cmd_eval(ev);
    if (i->parsed()) return cmd_infer(in);
    if (c->parsed()) return cmd_gradcheck(gc);
    if (p->parsed()) return cmd_params(params_config, params_json);
    std::cout << app.help();
    return kUsage;
  } catch (const NumericError& err) {
    std::cerr << "numeric abort: " << err.what() << "\n";
    return kNumeric;
  } catch (const Error& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kUsage;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kUsage;
  }
}
