#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "taseg/autograd.hpp"
#include "taseg/error.hpp"
#include "taseg/ops.hpp"
#include "taseg/params.hpp"
#include "taseg/random.hpp"
#include "taseg/tensor.hpp"

namespace taseg {

/// Ordered class names with one unit-norm text embedding per class. The
/// order defines class ids everywhere downstream.
class ClassVocabulary {
 public:
  ClassVocabulary() = default;

  /// Rows of `embeddings` ([C x d_t]) are L2-normalized here.
  ClassVocabulary(std::vector<std::string> names, Tensor embeddings)
      : names_(std::move(names)), embeddings_(std::move(embeddings)) {
    if (names_.empty()) throw FormatError("class vocabulary needs at least one class");
    if (embeddings_.ndim() != 2 || embeddings_.dim(0) != names_.size() || embeddings_.dim(1) == 0) {
      throw FormatError("class vocabulary: embeddings " + to_string(embeddings_.shape()) +
                        " do not match " + std::to_string(names_.size()) + " classes");
    }
    std::set<std::string> seen;
    for (const auto& n : names_) {
      if (n.empty()) throw FormatError("class vocabulary: empty class name");
      if (!seen.insert(n).second) throw FormatError("class vocabulary: duplicate class '" + n + "'");
    }
    const std::size_t d = embeddings_.dim(1);
    for (std::size_t c = 0; c < names_.size(); ++c) {
      Scalar norm = 0;
      for (std::size_t j = 0; j < d; ++j) norm += embeddings_[c * d + j] * embeddings_[c * d + j];
      norm = std::sqrt(norm);
      if (!(norm > 0) || !std::isfinite(norm)) {
        throw FormatError("class vocabulary: embedding of '" + names_[c] + "' has zero norm");
      }
      for (std::size_t j = 0; j < d; ++j) embeddings_[c * d + j] /= norm;
    }
  }

  std::size_t size() const noexcept { return names_.size(); }
  std::size_t dim() const { return embeddings_.dim(1); }
  const std::vector<std::string>& names() const noexcept { return names_; }
  const Tensor& embeddings() const noexcept { return embeddings_; }

  /// Vocabulary with class `order[i]` moved to position i.
  ClassVocabulary permuted(const std::vector<std::size_t>& order) const {
    if (order.size() != size()) throw ConfigError("permutation size does not match vocabulary");
    std::vector<std::string> names;
    Tensor emb({size(), dim()});
    for (std::size_t i = 0; i < order.size(); ++i) {
      names.push_back(names_.at(order[i]));
      std::copy_n(embeddings_.data().data() + order[i] * dim(), dim(),
                  emb.data().data() + i * dim());
    }
    ClassVocabulary out;
    out.names_ = std::move(names);
    out.embeddings_ = std::move(emb);
    return out;  // rows are already unit-norm; renormalizing would move their last bits
  }

 private:
  std::vector<std::string> names_;
  Tensor embeddings_;
};

/// Deterministic stand-in for a text encoder: a unit-norm Gaussian vector
/// seeded from hash(name) and `seed`.
inline Tensor toy_text_embed(const std::string& name, std::size_t dim, std::uint64_t seed) {
  if (name.empty()) throw ConfigError("toy_text_embed: empty class name");
  if (dim == 0) throw ConfigError("toy_text_embed: dimension must be positive");
  Rng rng(mix_seed(seed, hash_string(name)));
  std::normal_distribution<double> dist(0.0, 1.0);
  Tensor v({dim});
  double norm = 0;
  for (Scalar& x : v.data()) {
    x = static_cast<Scalar>(dist(rng));
    norm += static_cast<double>(x) * x;
  }
  norm = std::sqrt(norm);
  for (Scalar& x : v.data()) x = static_cast<Scalar>(x / norm);
  return v;
}

inline ClassVocabulary toy_vocabulary(const std::vector<std::string>& names, std::size_t dim,
                                      std::uint64_t seed = 0) {
  Tensor emb({names.size(), dim});
  for (std::size_t c = 0; c < names.size(); ++c) {
    Tensor v = toy_text_embed(names[c], dim, seed);
    std::copy(v.data().begin(), v.data().end(), emb.data().begin() + c * dim);
  }
  return ClassVocabulary(names, std::move(emb));
}

/// Text-embedding file:
///   {"dim": <int>, "classes": [{"name": <string>, "embedding": [<dim numbers>]}, ...]}
inline ClassVocabulary vocabulary_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("dim") || !j.contains("classes")) {
    throw FormatError("text embeddings: expected an object with 'dim' and 'classes'");
  }
  if (!j.at("dim").is_number_unsigned() || j.at("dim").get<std::size_t>() == 0) {
    throw FormatError("text embeddings: 'dim' must be a positive integer");
  }
  const std::size_t dim = j.at("dim").get<std::size_t>();
  const auto& classes = j.at("classes");
  if (!classes.is_array()) throw FormatError("text embeddings: 'classes' must be an array");
  if (classes.empty()) throw FormatError("text embeddings: at least one class is required");
  std::vector<std::string> names;
  Tensor emb({classes.size(), dim});
  for (std::size_t c = 0; c < classes.size(); ++c) {
    const auto& entry = classes[c];
    if (!entry.is_object() || !entry.contains("name") || !entry.at("name").is_string() ||
        !entry.contains("embedding") || !entry.at("embedding").is_array()) {
      throw FormatError("text embeddings: class " + std::to_string(c) +
                        " needs a string 'name' and an 'embedding' array");
    }
    const auto& e = entry.at("embedding");
    if (e.size() != dim) {
      throw FormatError("text embeddings: class '" + entry.at("name").get<std::string>() +
                        "' has " + std::to_string(e.size()) + " values, expected dim " +
                        std::to_string(dim));
    }
    for (std::size_t i = 0; i < dim; ++i) {
      if (!e[i].is_number()) throw FormatError("text embeddings: non-numeric embedding value");
      emb[c * dim + i] = e[i].get<Scalar>();
    }
    names.push_back(entry.at("name").get<std::string>());
  }
  return ClassVocabulary(std::move(names), std::move(emb));
}

inline ClassVocabulary load_text_embeddings(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open text-embedding file '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("text-embedding file '" + path + "' is not valid JSON: " + e.what());
  }
  return vocabulary_from_json(j);
}

inline nlohmann::json to_json(const ClassVocabulary& vocab) {
  nlohmann::json classes = nlohmann::json::array();
  const std::size_t d = vocab.dim();
  for (std::size_t c = 0; c < vocab.size(); ++c) {
    std::vector<Scalar> e(vocab.embeddings().data().begin() + c * d,
                          vocab.embeddings().data().begin() + (c + 1) * d);
    classes.push_back({{"name", vocab.names()[c]}, {"embedding", e}});
  }
  return {{"dim", d}, {"classes", classes}};
}

inline void save_text_embeddings(const ClassVocabulary& vocab, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write text-embedding file '" + path + "'");
  out << to_json(vocab).dump(2) << '\n';
}

struct PromptPoint {
  double x = 0;  // pixel column
  double y = 0;  // pixel row
  bool foreground = true;
};

struct PointPrompt {
  std::vector<PromptPoint> points;
};

/// Random-Fourier positional encoding of points and grids plus the learned
/// prompt embeddings (point label types and the dense "no mask" embedding).
class PromptEncoder {
 public:
  PromptEncoder() = default;

  PromptEncoder(ParamRegistry& reg, std::size_t d, const Seeder& seed) : d_(d) {
    if (d == 0 || d % 2 != 0) throw ConfigError("prompt encoder width must be even and positive");
    Rng rng = seed.for_param("prompt.pe_gaussian");
    gaussian_ = &reg.add("prompt.pe_gaussian", normal_tensor({2, d / 2}, Scalar{1}, rng), true);
    Rng rng_pts = seed.for_param("prompt.point_embed");
    point_embed_ = &reg.add("prompt.point_embed", normal_tensor({2, d}, Scalar{0.02}, rng_pts), false);
    no_mask_ = &reg.add("prompt.no_mask_embed", Tensor({d}, Scalar{0}), false);
  }

  /// Encoding of a point in normalized coordinates u, v in [0, 1]:
  /// [sin(2 pi c G), cos(2 pi c G)] with c = (2u - 1, 2v - 1).
  void fourier(Scalar u, Scalar v, std::span<Scalar> out) const {
    const std::size_t half = d_ / 2;
    const Tensor& g = gaussian_->value;
    const Scalar cx = 2 * u - 1, cy = 2 * v - 1;
    for (std::size_t j = 0; j < half; ++j) {
      const Scalar p = 2 * std::numbers::pi_v<Scalar> * (cx * g[j] + cy * g[half + j]);
      out[j] = std::sin(p);
      out[half + j] = std::cos(p);
    }
  }

  /// Positional grid e_pe for an h x w patch grid, sampled at cell centres:
  /// [(h*w) x d].
  Tensor dense_pe(std::size_t h, std::size_t w) const {
    Tensor pe({h * w, d_});
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        fourier((static_cast<Scalar>(j) + Scalar{0.5}) / static_cast<Scalar>(w),
                (static_cast<Scalar>(i) + Scalar{0.5}) / static_cast<Scalar>(h),
                pe.data().subspan((i * w + j) * d_, d_));
      }
    return pe;
  }

  /// Sparse prompt embeddings e_s: [K x d]; K = 0 gives an empty [0 x d].
  Var encode_points(Tape& tape, const PointPrompt& prompt, std::size_t height,
                    std::size_t width) const {
    const std::size_t k = prompt.points.size();
    if (k == 0) return tape.constant(Tensor({0, d_}));
    Tensor pe({k, d_});
    for (std::size_t i = 0; i < k; ++i) {
      const auto& p = prompt.points[i];
      if (!(p.x >= 0 && p.x < static_cast<double>(width) && p.y >= 0 &&
            p.y < static_cast<double>(height))) {
        throw ConfigError("point prompt (" + std::to_string(p.x) + ", " + std::to_string(p.y) +
                          ") lies outside the " + std::to_string(width) + "x" +
                          std::to_string(height) + " image");
      }
      fourier(static_cast<Scalar>((p.x + 0.5) / static_cast<double>(width)),
              static_cast<Scalar>((p.y + 0.5) / static_cast<double>(height)),
              pe.data().subspan(i * d_, d_));
    }
    Var labels = bind(tape, *point_embed_);
    std::vector<Var> rows;
    rows.reserve(k);
    for (const auto& p : prompt.points) rows.push_back(ops::slice_rows(labels, p.foreground ? 1 : 0, 1));
    return ops::add(tape.constant(std::move(pe)), ops::concat_rows(rows));
  }

  /// Learned dense embedding e_d broadcast over the grid: [1 x d].
  Var no_mask(Tape& tape) const { return ops::reshape(bind(tape, *no_mask_), {1, d_}); }

  std::size_t dim() const noexcept { return d_; }
  Parameter& gaussian() const { return *gaussian_; }
  Parameter& point_embed() const { return *point_embed_; }
  Parameter& no_mask_embed() const { return *no_mask_; }

 private:
  std::size_t d_ = 0;
  Parameter* gaussian_ = nullptr;
  Parameter* point_embed_ = nullptr;
  Parameter* no_mask_ = nullptr;
};

}  // namespace taseg
