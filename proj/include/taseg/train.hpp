#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "taseg/data.hpp"
#include "taseg/losses.hpp"
#include "taseg/metrics.hpp"
#include "taseg/model.hpp"
#include "taseg/optim.hpp"

namespace taseg {

/// Argmax over the class axis of logits [H x W x C]; ties go to the lower id.
inline LabelMap predict_labels(const Tensor& logits) {
  if (logits.ndim() != 3) throw ShapeError("predict_labels: expected [H x W x C], got " + to_string(logits.shape()));
  const std::size_t h = logits.dim(0), w = logits.dim(1), c = logits.dim(2);
  LabelMap out(h, w);
  for (std::size_t p = 0; p < h * w; ++p) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < c; ++k) {
      if (logits[p * c + k] > logits[p * c + best]) best = k;
    }
    out.ids[p] = static_cast<std::int32_t>(best);
  }
  return out;
}

/// Seeded point prompts drawn from a label map: foreground points land on
/// non-background pixels, background points elsewhere, alternating.
inline PointPrompt sample_points(const LabelMap& labels, std::size_t count, std::uint64_t seed,
                                 std::int32_t ignore) {
  PointPrompt out;
  if (count == 0) return out;
  std::vector<std::size_t> fg, bg;
  for (std::size_t i = 0; i < labels.ids.size(); ++i) {
    if (labels.ids[i] == ignore) continue;
    (labels.ids[i] == kBackground ? bg : fg).push_back(i);
  }
  Rng rng(seed);
  for (std::size_t k = 0; k < count; ++k) {
    const bool want_fg = k % 2 == 0 ? !fg.empty() : bg.empty();
    const auto& pool = want_fg ? fg : bg;
    if (pool.empty()) break;
    const std::size_t idx = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
    out.points.push_back({static_cast<double>(idx % labels.width), static_cast<double>(idx / labels.width), want_fg});
  }
  return out;
}

struct StepRecord {
  std::size_t step = 0;
  double loss = 0;
  double miou = 0;  // on the step's own batch predictions
  double lr = 0;
};

struct TrainHistory {
  std::vector<StepRecord> steps;
};

/// Deterministic sample order: a fresh seeded permutation per epoch.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::size_t batch, std::uint64_t seed) : n_(n), batch_(batch), seed_(seed) {
    if (n == 0) throw ConfigError("training set is empty");
  }

  std::vector<std::size_t> next() {
    std::vector<std::size_t> out;
    while (out.size() < batch_) {
      if (pos_ == order_.size()) reshuffle();
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  void reshuffle() {
    order_.resize(n_);
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    Rng rng(mix_seed(seed_, epoch_++));
    std::shuffle(order_.begin(), order_.end(), rng);
    pos_ = 0;
  }

  std::size_t n_, batch_;
  std::uint64_t seed_;
  std::uint64_t epoch_ = 0;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

/// Runs cfg.steps AdamW steps. Each step averages the gradient of the total
/// loss over cfg.batch samples. A non-finite value anywhere aborts with a
/// NumericError naming the step.
inline TrainHistory train(TasegModel& model, const std::vector<RgbtSample>& data, const ClassVocabulary* vocab,
                          const TrainConfig& cfg, const std::function<void(const StepRecord&)>& on_step = {}) {
  cfg.validate();
  TrainHistory history;
  if (cfg.steps == 0) return history;
  const LossConfig loss_cfg = LossConfig::from(cfg);
  const std::size_t classes = vocab ? vocab->size() : model.config().num_classes;
  AdamW opt(model.registry(), AdamWConfig::from(cfg));
  BatchSampler sampler(data.size(), cfg.batch, mix_seed(cfg.seed, 0x5eed));
  const Scalar inv_batch = Scalar{1} / static_cast<Scalar>(cfg.batch);

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    model.registry().zero_grad();
    Confusion conf(classes);
    double loss_sum = 0;
    const std::vector<std::size_t> batch = sampler.next();
    for (std::size_t j = 0; j < batch.size(); ++j) {
      const RgbtSample& s = data[batch[j]];
      const PointPrompt points =
          sample_points(s.labels, cfg.points_per_sample, mix_seed(cfg.seed, step * cfg.batch + j), cfg.ignore_label);
      try {
        Tape tape;
        ModelOutput out = model.forward(tape, s.rgb, s.thermal, vocab, points);
        Var loss = total_loss(out.logits(), s.labels.ids, loss_cfg);
        tape.backward(loss, inv_batch);
        loss_sum += loss.value().item();
        conf.add(predict_labels(out.logits().value()), s.labels, cfg.ignore_label);
      } catch (const NumericError& e) {
        throw NumericError("training step " + std::to_string(step) + ", sample " + std::to_string(batch[j]) + ": " +
                           e.what());
      }
    }
    const double loss = loss_sum / static_cast<double>(batch.size());
    if (!std::isfinite(loss)) throw NumericError("training step " + std::to_string(step) + ": loss is not finite");
    const Scalar lr = scheduled_lr(cfg, step);
    opt.step(lr);
    StepRecord rec{step, loss, miou(iou_from(conf)), static_cast<double>(lr)};
    history.steps.push_back(rec);
    if (on_step) on_step(rec);
  }
  return history;
}

/// Confusion per split tag plus "overall". Samples without a tag count only
/// toward "overall".
inline SplitMetrics evaluate(const TasegModel& model, const std::vector<RgbtSample>& data,
                             const ClassVocabulary* vocab, std::vector<std::string> class_names,
                             std::int32_t ignore = 255) {
  SplitMetrics m{std::move(class_names), {}};
  const std::size_t classes = m.class_names.size();
  m.by_split.emplace("overall", Confusion(classes));
  for (const RgbtSample& s : data) {
    Tape tape;
    LabelMap pred = predict_labels(model.forward(tape, s.rgb, s.thermal, vocab).logits().value());
    m.by_split.at("overall").add(pred, s.labels, ignore);
    if (!s.split.empty()) {
      m.by_split.try_emplace(s.split, Confusion(classes)).first->second.add(pred, s.labels, ignore);
    }
  }
  return m;
}

}  // namespace taseg
