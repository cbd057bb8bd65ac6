#pragma once

// Client-side prediction/expertise construction and server-side
// expertise-weighted consensus over the public pool.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedmosaic/data.hpp"
#include "fedmosaic/learner.hpp"
#include "fedmosaic/random.hpp"

namespace fedmosaic {

/// Lower bound on every expertise score, keeping scores strictly positive.
inline constexpr double kExpertiseFloor = 1e-6;

/// Hard predictions over U, transported as class ids; row j is the one-hot
/// vector at labels[j].
struct PredictionMatrix {
  std::size_t num_classes = 0;
  std::vector<ClassId> labels;

  std::size_t rows() const noexcept { return labels.size(); }

  void validate() const {
    for (auto c : labels)
      if (c >= num_classes) throw std::invalid_argument("PredictionMatrix: class id out of range");
  }

  std::vector<std::uint8_t> one_hot_row(std::size_t j) const {
    std::vector<std::uint8_t> row(num_classes, 0);
    row.at(labels.at(j)) = 1;
    return row;
  }
};

struct ExpertiseVector {
  std::vector<double> scores;

  std::size_t size() const noexcept { return scores.size(); }

  void validate() const {
    for (double s : scores)
      if (!(s > 0.0) || !std::isfinite(s))
        throw std::invalid_argument("ExpertiseVector: scores must be positive and finite");
  }
};

/// rows x C, row-major.
struct ScoreMatrix {
  std::size_t rows = 0;
  std::size_t num_classes = 0;
  std::vector<double> entries;

  double at(std::size_t j, std::size_t c) const { return entries.at(j * num_classes + c); }
  std::span<const double> row(std::size_t j) const {
    return std::span<const double>(entries).subspan(j * num_classes, num_classes);
  }
};

struct ConsensusLabels {
  std::size_t num_classes = 0;
  std::vector<ClassId> labels;

  std::size_t size() const noexcept { return labels.size(); }
  bool operator==(const ConsensusLabels&) const = default;
};

enum class UncertaintyVariant { kEntropy, kMargin };

// ---------------------------------------------------------------------------
// Client side

inline PredictionMatrix predict_hard(const Model& model, const PublicPool& pool) {
  if (pool.size() > 0 && pool.dim != model.dim)
    throw std::invalid_argument("predict_hard: model/pool dimension mismatch");
  PredictionMatrix out{model.num_classes, {}};
  out.labels.reserve(pool.size());
  for (const auto& x : pool.examples) out.labels.push_back(predict_class(model, x));
  return out;
}

/// Score of a prediction = share of the predicted class in the client's
/// training set, floored at kExpertiseFloor.
inline ExpertiseVector expertise_frequency(std::span<const std::size_t> class_freq_row,
                                           const PredictionMatrix& predictions) {
  std::size_t total = 0;
  for (auto c : class_freq_row) total += c;
  if (total == 0) throw std::invalid_argument("expertise_frequency: all-zero frequency row");
  if (class_freq_row.size() != predictions.num_classes)
    throw std::invalid_argument("expertise_frequency: class count mismatch");
  ExpertiseVector e;
  e.scores.reserve(predictions.rows());
  for (auto c : predictions.labels) {
    const double f = static_cast<double>(class_freq_row[c]) / static_cast<double>(total);
    e.scores.push_back(std::max(f, kExpertiseFloor));
  }
  return e;
}

/// Shannon entropy in nats.
inline double entropy(std::span<const double> probs) {
  double h = 0.0;
  for (double p : probs)
    if (p > 0.0) h -= p * std::log(p);
  return std::max(h, 0.0);
}

/// Entropy: 1 / (H + eps). Margin: (p1 - p2) + eps.
inline double uncertainty_score(std::span<const double> probs, UncertaintyVariant variant) {
  if (variant == UncertaintyVariant::kEntropy) return 1.0 / (entropy(probs) + kExpertiseFloor);
  double p1 = -1.0, p2 = -1.0;
  for (double p : probs) {
    if (p > p1) {
      p2 = p1;
      p1 = p;
    } else if (p > p2) {
      p2 = p;
    }
  }
  return std::max(p1 - p2, 0.0) + kExpertiseFloor;
}

inline ExpertiseVector expertise_uncertainty(const Model& model, const PublicPool& pool,
                                             UncertaintyVariant variant) {
  if (pool.size() > 0 && pool.dim != model.dim)
    throw std::invalid_argument("expertise_uncertainty: model/pool dimension mismatch");
  ExpertiseVector e;
  e.scores.reserve(pool.size());
  for (const auto& x : pool.examples)
    e.scores.push_back(uncertainty_score(predict_probs(model, x), variant));
  return e;
}

inline ExpertiseVector expertise_uniform(std::size_t n) {
  return ExpertiseVector{std::vector<double>(n, 1.0)};
}

// ---------------------------------------------------------------------------
// Differential privacy

/// Laplace mechanism for scores clipped to [kExpertiseFloor, clip_max]; the
/// per-entry sensitivity is clip_max.
struct LaplaceMechanism {
  double epsilon = 1.0;
  double clip_max = 1.0;

  LaplaceMechanism(double eps, double clip) : epsilon(eps), clip_max(clip) {
    if (!(epsilon > 0.0)) throw std::invalid_argument("dp: epsilon must be positive");
    if (!(clip_max > 0.0)) throw std::invalid_argument("dp: clip_max must be positive");
    if (clip_max < kExpertiseFloor)
      throw std::invalid_argument("dp: clip_max below the expertise floor");
  }

  double scale() const { return clip_max / epsilon; }
  double clip(double v) const { return std::clamp(v, kExpertiseFloor, clip_max); }
  double noise(Rng& rng) const { return rng.laplace(scale()); }
};

/// Clip, add Laplace(clip_max / epsilon) noise per entry, clip again.
inline ExpertiseVector dp_noise_expertise(const ExpertiseVector& e, double epsilon,
                                          double clip_max, std::uint64_t seed) {
  const LaplaceMechanism mech(epsilon, clip_max);
  Rng rng(seed);
  ExpertiseVector out;
  out.scores.reserve(e.size());
  for (double s : e.scores) out.scores.push_back(mech.clip(mech.clip(s) + mech.noise(rng)));
  return out;
}

// ---------------------------------------------------------------------------
// Server side

/// S[j][c] = sum_i E_i[j] * [L_i[j] == c].
inline ScoreMatrix weighted_score_matrix(std::span<const PredictionMatrix> preds,
                                         std::span<const ExpertiseVector> experts) {
  if (preds.empty()) throw std::invalid_argument("weighted_score_matrix: no clients");
  if (preds.size() != experts.size())
    throw std::invalid_argument("weighted_score_matrix: prediction/expertise count mismatch");
  const std::size_t n = preds[0].rows(), c = preds[0].num_classes;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i].rows() != n || preds[i].num_classes != c || experts[i].size() != n)
      throw std::invalid_argument("weighted_score_matrix: shape mismatch");
    preds[i].validate();
    experts[i].validate();
  }
  // Each cell sums its contributions in ascending order, so the result is
  // bitwise independent of the order in which client uploads arrive.
  ScoreMatrix s{n, c, std::vector<double>(n * c, 0.0)};
  std::vector<std::pair<ClassId, double>> votes(preds.size());
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t i = 0; i < preds.size(); ++i)
      votes[i] = {preds[i].labels[j], experts[i].scores[j]};
    std::sort(votes.begin(), votes.end());
    for (const auto& [cls, score] : votes) s.entries[j * c + cls] += score;
  }
  return s;
}

/// Row-wise argmax, ties to the lowest class index.
inline ConsensusLabels consensus_argmax(const ScoreMatrix& s) {
  if (s.entries.size() != s.rows * s.num_classes)
    throw std::invalid_argument("consensus_argmax: malformed score matrix");
  ConsensusLabels out{s.num_classes, {}};
  out.labels.reserve(s.rows);
  for (std::size_t j = 0; j < s.rows; ++j) out.labels.push_back(argmax(s.row(j)));
  return out;
}

/// Plurality vote per example, ties to the lowest class index.
inline ConsensusLabels majority_consensus(std::span<const PredictionMatrix> preds) {
  if (preds.empty()) throw std::invalid_argument("majority_consensus: no clients");
  const std::size_t n = preds[0].rows(), c = preds[0].num_classes;
  std::vector<std::size_t> votes(c);
  ConsensusLabels out{c, {}};
  out.labels.reserve(n);
  for (const auto& p : preds) {
    if (p.rows() != n || p.num_classes != c)
      throw std::invalid_argument("majority_consensus: shape mismatch");
    p.validate();
  }
  for (std::size_t j = 0; j < n; ++j) {
    std::fill(votes.begin(), votes.end(), 0);
    for (const auto& p : preds) ++votes[p.labels[j]];
    out.labels.push_back(
        static_cast<ClassId>(std::max_element(votes.begin(), votes.end()) - votes.begin()));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Messages

/// Bits needed for one class id: max(1, ceil(log2 C)).
inline std::size_t bits_per_label(std::size_t num_classes) {
  std::size_t bits = 1;
  while ((std::size_t{1} << bits) < num_classes) ++bits;
  return bits;
}

inline constexpr std::size_t kScalarBytes = sizeof(double);

struct Upload {
  std::uint32_t client_id = 0;
  std::uint32_t round = 0;
  PredictionMatrix predictions;
  std::optional<ExpertiseVector> expertise;  // absent for majority-vote co-training
};

struct Download {
  std::uint32_t round = 0;
  ConsensusLabels labels;
};

namespace detail {

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T v) {
  for (std::size_t b = 0; b < sizeof(T); ++b) out.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
}

template <typename T>
T get_le(std::span<const std::uint8_t> in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw std::runtime_error("decode: truncated message");
  T v = 0;
  for (std::size_t b = 0; b < sizeof(T); ++b) v |= static_cast<T>(in[pos + b]) << (8 * b);
  pos += sizeof(T);
  return v;
}

inline void pack_labels(std::vector<std::uint8_t>& out, std::span<const ClassId> labels,
                        std::size_t num_classes) {
  const std::size_t bits = bits_per_label(num_classes);
  const std::size_t start = out.size();
  out.resize(start + (labels.size() * bits + 7) / 8, 0);
  std::size_t bit = 0;
  for (auto c : labels)
    for (std::size_t b = 0; b < bits; ++b, ++bit)
      if ((c >> b) & 1u) out[start + bit / 8] |= static_cast<std::uint8_t>(1u << (bit % 8));
}

inline std::vector<ClassId> unpack_labels(std::span<const std::uint8_t> in, std::size_t& pos,
                                          std::size_t n, std::size_t num_classes) {
  const std::size_t bits = bits_per_label(num_classes);
  const std::size_t bytes = (n * bits + 7) / 8;
  if (pos + bytes > in.size()) throw std::runtime_error("decode: truncated labels");
  std::vector<ClassId> labels(n, 0);
  std::size_t bit = 0;
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t b = 0; b < bits; ++b, ++bit)
      if (in[pos + bit / 8] >> (bit % 8) & 1u) labels[j] |= ClassId{1} << b;
  pos += bytes;
  for (auto c : labels)
    if (c >= num_classes) throw std::runtime_error("decode: class id out of range");
  return labels;
}

}  // namespace detail

/// Upload wire layout (little endian):
///   u32 client_id | u32 round | u32 num_classes | u32 n | u8 has_expertise |
///   packed labels (bits_per_label each, ceil(n*bits/8) bytes) | n x f64 expertise
inline constexpr std::size_t kUploadHeaderBytes = 17;
/// Download: u32 round | u32 num_classes | u32 n | packed labels
inline constexpr std::size_t kDownloadHeaderBytes = 12;

inline std::vector<std::uint8_t> encode(const Upload& u) {
  std::vector<std::uint8_t> out;
  detail::put_le<std::uint32_t>(out, u.client_id);
  detail::put_le<std::uint32_t>(out, u.round);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(u.predictions.num_classes));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(u.predictions.rows()));
  out.push_back(u.expertise ? 1 : 0);
  detail::pack_labels(out, u.predictions.labels, u.predictions.num_classes);
  if (u.expertise) {
    if (u.expertise->size() != u.predictions.rows())
      throw std::invalid_argument("encode: expertise/prediction length mismatch");
    for (double s : u.expertise->scores) {
      std::uint64_t bits;
      std::memcpy(&bits, &s, sizeof bits);
      detail::put_le<std::uint64_t>(out, bits);
    }
  }
  return out;
}

inline Upload decode_upload(std::span<const std::uint8_t> in) {
  std::size_t pos = 0;
  Upload u;
  u.client_id = detail::get_le<std::uint32_t>(in, pos);
  u.round = detail::get_le<std::uint32_t>(in, pos);
  u.predictions.num_classes = detail::get_le<std::uint32_t>(in, pos);
  const auto n = detail::get_le<std::uint32_t>(in, pos);
  const auto has = detail::get_le<std::uint8_t>(in, pos);
  u.predictions.labels = detail::unpack_labels(in, pos, n, u.predictions.num_classes);
  if (has) {
    ExpertiseVector e;
    for (std::uint32_t j = 0; j < n; ++j) {
      const auto bits = detail::get_le<std::uint64_t>(in, pos);
      double s;
      std::memcpy(&s, &bits, sizeof s);
      e.scores.push_back(s);
    }
    u.expertise = std::move(e);
  }
  if (pos != in.size()) throw std::runtime_error("decode: trailing bytes");
  return u;
}

inline std::vector<std::uint8_t> encode(const Download& d) {
  std::vector<std::uint8_t> out;
  detail::put_le<std::uint32_t>(out, d.round);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d.labels.num_classes));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d.labels.size()));
  detail::pack_labels(out, d.labels.labels, d.labels.num_classes);
  return out;
}

inline Download decode_download(std::span<const std::uint8_t> in) {
  std::size_t pos = 0;
  Download d;
  d.round = detail::get_le<std::uint32_t>(in, pos);
  d.labels.num_classes = detail::get_le<std::uint32_t>(in, pos);
  const auto n = detail::get_le<std::uint32_t>(in, pos);
  d.labels.labels = detail::unpack_labels(in, pos, n, d.labels.num_classes);
  if (pos != in.size()) throw std::runtime_error("decode: trailing bytes");
  return d;
}

inline nlohmann::json to_json(const Upload& u) {
  nlohmann::json j{{"client_id", u.client_id},
                   {"round", u.round},
                   {"num_classes", u.predictions.num_classes},
                   {"labels", u.predictions.labels}};
  if (u.expertise) j["expertise"] = u.expertise->scores;
  return j;
}

inline Upload upload_from_json(const nlohmann::json& j) {
  Upload u;
  u.client_id = j.at("client_id").get<std::uint32_t>();
  u.round = j.at("round").get<std::uint32_t>();
  u.predictions.num_classes = j.at("num_classes").get<std::size_t>();
  u.predictions.labels = j.at("labels").get<std::vector<ClassId>>();
  u.predictions.validate();
  if (j.contains("expertise")) u.expertise = ExpertiseVector{j["expertise"].get<std::vector<double>>()};
  return u;
}

inline nlohmann::json to_json(const Download& d) {
  return {{"round", d.round}, {"num_classes", d.labels.num_classes}, {"labels", d.labels.labels}};
}

inline Download download_from_json(const nlohmann::json& j) {
  Download d;
  d.round = j.at("round").get<std::uint32_t>();
  d.labels.num_classes = j.at("num_classes").get<std::size_t>();
  d.labels.labels = j.at("labels").get<std::vector<ClassId>>();
  return d;
}

}  // namespace fedmosaic
