#pragma once

// Synthetic classification data, non-IID client partitioning and the shared
// unlabeled public pool.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <ostream>
#include <set>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "fedmosaic/random.hpp"

namespace fedmosaic {

using ClassId = std::uint32_t;
using Features = std::vector<double>;

struct Example {
  Features features;
  ClassId label = 0;
  std::uint64_t id = 0;  // identity within the generating dataset
};

struct Dataset {
  std::size_t num_classes = 0;
  std::size_t dim = 0;
  std::vector<Example> examples;

  std::size_t size() const noexcept { return examples.size(); }
  bool empty() const noexcept { return examples.empty(); }

  void validate() const {
    for (const auto& e : examples) {
      if (e.features.size() != dim)
        throw std::invalid_argument("Dataset: feature dimension mismatch");
      if (e.label >= num_classes) throw std::invalid_argument("Dataset: label out of range");
    }
  }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> counts(num_classes, 0);
    for (const auto& e : examples) ++counts.at(e.label);
    return counts;
  }

  std::set<ClassId> label_set() const {
    std::set<ClassId> s;
    for (const auto& e : examples) s.insert(e.label);
    return s;
  }
};

/// The shared unlabeled dataset. Index j is the identity used by all parties.
/// It deliberately carries no labels; evaluation-only ground truth travels
/// separately (see PublicSplit::truth).
struct PublicPool {
  std::size_t dim = 0;
  std::vector<Features> examples;
  std::vector<std::uint64_t> ids;

  std::size_t size() const noexcept { return examples.size(); }
};

// ---------------------------------------------------------------------------
// Gaussian mixtures

/// Unit direction for class `c`. Classes are spread over the coordinate planes
/// (0,1), (2,3), ... and, within a plane, at evenly spaced angles, so that no
/// two classes share a mean for any C >= 2, dim >= 2.
inline Features class_direction(std::size_t c, std::size_t num_classes, std::size_t dim) {
  const std::size_t planes = dim / 2;
  const std::size_t plane = c % planes;
  const std::size_t per_plane = (num_classes + planes - 1) / planes;
  const double angle = 2.0 * std::numbers::pi * static_cast<double>(c / planes) /
                       static_cast<double>(per_plane);
  Features u(dim, 0.0);
  u[2 * plane] = std::cos(angle);
  u[2 * plane + 1] = std::sin(angle);
  return u;
}

/// C * n labeled examples; class c ~ N(separation * dir_c, class_std^2 I).
/// Examples are ordered by class, then draw order, with ids 0..C*n-1.
inline Dataset make_mixture(std::size_t num_classes, std::size_t dim, std::size_t per_class,
                            double separation, std::uint64_t seed, double class_std = 1.0) {
  if (num_classes < 2) throw std::invalid_argument("make_mixture: need at least 2 classes");
  if (dim < 2) throw std::invalid_argument("make_mixture: need dim >= 2");
  if (per_class == 0) throw std::invalid_argument("make_mixture: per_class must be >= 1");
  if (!(separation > 0)) throw std::invalid_argument("make_mixture: separation must be positive");
  if (!(class_std >= 0)) throw std::invalid_argument("make_mixture: class_std must be >= 0");

  Rng rng(seed);
  Dataset ds{num_classes, dim, {}};
  ds.examples.reserve(num_classes * per_class);
  std::uint64_t id = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    const Features dir = class_direction(c, num_classes, dim);
    for (std::size_t k = 0; k < per_class; ++k) {
      Features x(dim);
      for (std::size_t f = 0; f < dim; ++f) x[f] = separation * dir[f] + class_std * rng.normal();
      ds.examples.push_back({std::move(x), static_cast<ClassId>(c), id++});
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Feature shift

struct DomainTransform {
  double rotation = 0.0;  // radians, applied in every coordinate plane (2p, 2p+1)
  double scale = 1.0;
  Features bias;          // length dim
  double noise_std = 0.0;
};

struct FeatureShiftParams {
  std::vector<DomainTransform> domains;
};

/// Domain d: rotation d*rotation_step, scale 1 + d*scale_step, bias d*bias_gap
/// on every coordinate, additive noise noise_std.
inline FeatureShiftParams make_domain_transforms(std::size_t num_domains, std::size_t dim,
                                                 double rotation_step, double scale_step,
                                                 double bias_gap, double noise_std) {
  FeatureShiftParams p;
  for (std::size_t d = 0; d < num_domains; ++d) {
    const double k = static_cast<double>(d);
    p.domains.push_back({k * rotation_step, 1.0 + k * scale_step, Features(dim, k * bias_gap),
                         noise_std});
  }
  return p;
}

inline Features transform_features(const Features& x, const DomainTransform& t, Rng& rng) {
  if (t.bias.size() != x.size())
    throw std::invalid_argument("apply_feature_shift: transform/feature dimension mismatch");
  Features y = x;
  if (t.rotation != 0.0) {
    const double c = std::cos(t.rotation), s = std::sin(t.rotation);
    for (std::size_t p = 0; p + 1 < y.size(); p += 2) {
      const double a = y[p], b = y[p + 1];
      y[p] = c * a - s * b;
      y[p + 1] = s * a + c * b;
    }
  }
  for (std::size_t f = 0; f < y.size(); ++f) {
    y[f] = t.scale * y[f] + t.bias[f];
    if (t.noise_std > 0) y[f] += t.noise_std * rng.normal();
  }
  return y;
}

inline Dataset apply_feature_shift(const Dataset& data, std::size_t domain_id,
                                   const FeatureShiftParams& params, std::uint64_t seed) {
  if (domain_id >= params.domains.size())
    throw std::invalid_argument("apply_feature_shift: domain id out of range");
  const auto& t = params.domains[domain_id];
  Rng rng(seed);
  Dataset out{data.num_classes, data.dim, {}};
  out.examples.reserve(data.size());
  for (const auto& e : data.examples)
    out.examples.push_back({transform_features(e.features, t, rng), e.label, e.id});
  return out;
}

/// Shifts public example j into domain domain_of[j].
inline PublicPool apply_feature_shift(const PublicPool& pool,
                                      const std::vector<std::size_t>& domain_of,
                                      const FeatureShiftParams& params, std::uint64_t seed) {
  if (domain_of.size() != pool.size())
    throw std::invalid_argument("apply_feature_shift: domain assignment size mismatch");
  Rng rng(seed);
  PublicPool out{pool.dim, {}, pool.ids};
  out.examples.reserve(pool.size());
  for (std::size_t j = 0; j < pool.size(); ++j) {
    if (domain_of[j] >= params.domains.size())
      throw std::invalid_argument("apply_feature_shift: domain id out of range");
    out.examples.push_back(transform_features(pool.examples[j], params.domains[domain_of[j]], rng));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Partitioning

struct Pathological {
  std::size_t classes_per_client = 2;
  std::vector<ClassId> target_classes;  // empty: all classes
};

struct DirichletSkew {
  double alpha = 0.5;
};

/// Label-IID split across clients; client i lives in domain i % D.
struct FeatureShift {
  std::size_t num_domains = 2;
  FeatureShiftParams params;
};

/// Pathological label skew inside each domain; client i lives in domain
/// i / clients_per_domain. Each domain draws its own class permutation, so
/// clients holding the same pair of classes rarely share a domain pattern.
struct Hybrid {
  std::size_t num_domains = 2;
  std::size_t classes_per_client = 2;
  std::size_t clients_per_domain = 2;
  FeatureShiftParams params;
};

using PartitionScheme = std::variant<Pathological, DirichletSkew, FeatureShift, Hybrid>;

struct PartitionSpec {
  PartitionScheme scheme;
  std::size_t num_clients = 2;
  std::uint64_t seed = 0;
  std::size_t max_attempts = 10;

  void validate() const {
    if (num_clients < 2) throw std::invalid_argument("PartitionSpec: need at least 2 clients");
    std::visit(
        [&](const auto& s) {
          using S = std::decay_t<decltype(s)>;
          if constexpr (std::is_same_v<S, Pathological>) {
            if (s.classes_per_client < 1)
              throw std::invalid_argument("PartitionSpec: classes_per_client must be >= 1");
          } else if constexpr (std::is_same_v<S, DirichletSkew>) {
            if (!(s.alpha > 0)) throw std::invalid_argument("PartitionSpec: alpha must be > 0");
          } else if constexpr (std::is_same_v<S, FeatureShift>) {
            if (s.num_domains < 1 || s.params.domains.size() != s.num_domains)
              throw std::invalid_argument("PartitionSpec: domain transforms do not match domains");
          } else {
            if (s.classes_per_client < 1)
              throw std::invalid_argument("PartitionSpec: classes_per_client must be >= 1");
            if (s.num_domains < 1 || s.params.domains.size() != s.num_domains)
              throw std::invalid_argument("PartitionSpec: domain transforms do not match domains");
            if (s.num_domains * s.clients_per_domain != num_clients)
              throw std::invalid_argument(
                  "PartitionSpec: hybrid needs num_clients = domains * clients_per_domain");
          }
        },
        scheme);
  }

  /// Domain of each client, empty for pure label-skew schemes.
  std::vector<std::size_t> client_domains() const {
    std::vector<std::size_t> out;
    if (const auto* fs = std::get_if<FeatureShift>(&scheme)) {
      for (std::size_t i = 0; i < num_clients; ++i) out.push_back(i % fs->num_domains);
    } else if (const auto* hy = std::get_if<Hybrid>(&scheme)) {
      for (std::size_t i = 0; i < num_clients; ++i) out.push_back(i / hy->clients_per_domain);
    }
    return out;
  }

  const FeatureShiftParams* shift_params() const {
    if (const auto* fs = std::get_if<FeatureShift>(&scheme)) return &fs->params;
    if (const auto* hy = std::get_if<Hybrid>(&scheme)) return &hy->params;
    return nullptr;
  }
};

struct Partition {
  std::vector<Dataset> shards;
  std::vector<std::vector<std::size_t>> class_frequency;  // m x C counts
  std::vector<std::size_t> client_domain;                 // empty without feature shift
};

namespace detail {

inline std::vector<std::vector<std::size_t>> indices_by_class(const Dataset& ds) {
  std::vector<std::vector<std::size_t>> by_class(ds.num_classes);
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[ds.examples[i].label].push_back(i);
  return by_class;
}

/// Class sets for pathological skew: client i receives k consecutive entries
/// of a seeded permutation of the target set, cyclically.
inline std::vector<std::vector<ClassId>> pathological_class_sets(std::size_t num_clients,
                                                                 std::size_t k,
                                                                 std::vector<ClassId> target,
                                                                 std::size_t num_classes,
                                                                 Rng& rng,
                                                                 bool require_cover = true) {
  if (target.empty())
    for (std::size_t c = 0; c < num_classes; ++c) target.push_back(static_cast<ClassId>(c));
  for (auto c : target)
    if (c >= num_classes) throw std::invalid_argument("partition: target class out of range");
  if (std::set<ClassId>(target.begin(), target.end()).size() != target.size())
    throw std::invalid_argument("partition: duplicate target classes");
  if (k > target.size())
    throw std::invalid_argument("partition: classes_per_client exceeds target classes");
  if (require_cover && num_clients * k < target.size())
    throw std::invalid_argument("partition: clients cannot cover the target classes");
  rng.shuffle(target);
  std::vector<std::vector<ClassId>> sets(num_clients);
  for (std::size_t i = 0; i < num_clients; ++i) {
    for (std::size_t r = 0; r < k; ++r) sets[i].push_back(target[(i * k + r) % target.size()]);
    std::sort(sets[i].begin(), sets[i].end());
  }
  return sets;
}

/// Splits `n` items into parts proportional to `p` by largest remainder.
inline std::vector<std::size_t> proportional_counts(std::size_t n, const std::vector<double>& p) {
  std::vector<std::size_t> counts(p.size());
  std::vector<std::pair<double, std::size_t>> rem;
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double exact = p[i] * static_cast<double>(n);
    counts[i] = static_cast<std::size_t>(std::floor(exact));
    assigned += counts[i];
    rem.emplace_back(exact - std::floor(exact), i);
  }
  std::stable_sort(rem.begin(), rem.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t r = 0; assigned < n; ++r, ++assigned) ++counts[rem[r % rem.size()].second];
  return counts;
}

inline std::vector<std::vector<std::size_t>> assign_pathological(
    const Dataset& ds, const std::vector<std::vector<ClassId>>& sets, Rng& rng) {
  const std::size_t m = sets.size();
  std::vector<std::vector<std::size_t>> holders(ds.num_classes);
  for (std::size_t i = 0; i < m; ++i)
    for (auto c : sets[i]) holders[c].push_back(i);
  auto by_class = indices_by_class(ds);
  std::vector<std::vector<std::size_t>> assigned(m);
  for (std::size_t c = 0; c < ds.num_classes; ++c) {
    if (holders[c].empty()) continue;
    auto& idx = by_class[c];
    if (idx.size() < holders[c].size())
      throw std::runtime_error("partition: class " + std::to_string(c) +
                               " has fewer examples than clients holding it");
    rng.shuffle(idx);
    const std::size_t h = holders[c].size();
    for (std::size_t r = 0; r < idx.size(); ++r) assigned[holders[c][r % h]].push_back(idx[r]);
  }
  return assigned;
}

inline std::vector<std::vector<std::size_t>> assign_dirichlet(const Dataset& ds, std::size_t m,
                                                              double alpha, Rng& rng) {
  auto by_class = indices_by_class(ds);
  std::vector<std::vector<std::size_t>> assigned(m);
  for (auto& idx : by_class) {
    rng.shuffle(idx);
    const auto counts = proportional_counts(idx.size(), rng.dirichlet(alpha, m));
    std::size_t pos = 0;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t r = 0; r < counts[i]; ++r) assigned[i].push_back(idx[pos++]);
  }
  return assigned;
}

inline std::vector<std::vector<std::size_t>> assign_iid(const Dataset& ds, std::size_t m,
                                                        Rng& rng) {
  std::vector<std::size_t> idx(ds.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  rng.shuffle(idx);
  std::vector<std::vector<std::size_t>> assigned(m);
  for (std::size_t r = 0; r < idx.size(); ++r) assigned[r % m].push_back(idx[r]);
  return assigned;
}

}  // namespace detail

/// Splits a labeled dataset into num_clients disjoint shards.
inline Partition partition(const Dataset& dataset, const PartitionSpec& spec) {
  spec.validate();
  dataset.validate();
  const std::size_t m = spec.num_clients;

  std::vector<std::vector<std::size_t>> assigned;
  bool ok = false;
  for (std::size_t attempt = 0; attempt < std::max<std::size_t>(spec.max_attempts, 1) && !ok;
       ++attempt) {
    Rng rng(derive_seed(spec.seed, {stream::kPartition, attempt}));
    if (const auto* p = std::get_if<Pathological>(&spec.scheme)) {
      auto sets = detail::pathological_class_sets(m, p->classes_per_client, p->target_classes,
                                                  dataset.num_classes, rng);
      assigned = detail::assign_pathological(dataset, sets, rng);
    } else if (const auto* h = std::get_if<Hybrid>(&spec.scheme)) {
      std::vector<std::vector<ClassId>> sets;
      for (std::size_t d = 0; d < h->num_domains; ++d) {
        auto part = detail::pathological_class_sets(h->clients_per_domain, h->classes_per_client,
                                                    {}, dataset.num_classes, rng, false);
        sets.insert(sets.end(), part.begin(), part.end());
      }
      assigned = detail::assign_pathological(dataset, sets, rng);
    } else if (const auto* d = std::get_if<DirichletSkew>(&spec.scheme)) {
      assigned = detail::assign_dirichlet(dataset, m, d->alpha, rng);
    } else {
      assigned = detail::assign_iid(dataset, m, rng);
    }
    ok = std::none_of(assigned.begin(), assigned.end(),
                      [](const auto& a) { return a.empty(); });
  }
  if (!ok)
    throw std::runtime_error("partition: a client shard stayed empty after " +
                             std::to_string(spec.max_attempts) + " attempts");

  Partition out;
  out.client_domain = spec.client_domains();
  const FeatureShiftParams* shift = spec.shift_params();
  for (std::size_t i = 0; i < m; ++i) {
    auto idx = assigned[i];
    std::sort(idx.begin(), idx.end());
    Dataset shard{dataset.num_classes, dataset.dim, {}};
    for (auto k : idx) shard.examples.push_back(dataset.examples[k]);
    if (shift)
      shard = apply_feature_shift(shard, out.client_domain[i], *shift,
                                  derive_seed(spec.seed, {stream::kFeatureShift, i}));
    out.class_frequency.push_back(shard.class_counts());
    out.shards.push_back(std::move(shard));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Public split

struct PublicSplit {
  Dataset private_data;
  PublicPool pool;
  std::vector<ClassId> truth;  // evaluation only; never used for training
};

/// Moves round(fraction * n) randomly chosen examples into the unlabeled pool.
/// Both outputs keep the input order.
inline PublicSplit split_public(const Dataset& dataset, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0))
    throw std::invalid_argument("split_public: fraction must be in (0, 1)");
  const auto n = dataset.size();
  const auto n_pub = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  if (n_pub < 1 || n_pub >= n)
    throw std::invalid_argument("split_public: degenerate fraction for dataset size");

  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(seed);
  rng.shuffle(idx);
  std::vector<char> is_public(n, 0);
  for (std::size_t r = 0; r < n_pub; ++r) is_public[idx[r]] = 1;

  PublicSplit out;
  out.private_data = Dataset{dataset.num_classes, dataset.dim, {}};
  out.pool.dim = dataset.dim;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& e = dataset.examples[i];
    if (is_public[i]) {
      out.pool.examples.push_back(e.features);
      out.pool.ids.push_back(e.id);
      out.truth.push_back(e.label);
    } else {
      out.private_data.examples.push_back(e);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::json to_json(const FeatureShiftParams& p) {
  auto arr = nlohmann::json::array();
  for (const auto& d : p.domains)
    arr.push_back({{"rotation", d.rotation},
                   {"scale", d.scale},
                   {"bias", d.bias},
                   {"noise_std", d.noise_std}});
  return arr;
}

inline nlohmann::json to_json(const PartitionSpec& spec) {
  nlohmann::json j{{"num_clients", spec.num_clients}, {"seed", spec.seed}};
  std::visit(
      [&](const auto& s) {
        using S = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<S, Pathological>) {
          j["scheme"] = "pathological";
          j["classes_per_client"] = s.classes_per_client;
          j["target_classes"] = s.target_classes;
        } else if constexpr (std::is_same_v<S, DirichletSkew>) {
          j["scheme"] = "dirichlet";
          j["alpha"] = s.alpha;
        } else if constexpr (std::is_same_v<S, FeatureShift>) {
          j["scheme"] = "feature_shift";
          j["domains"] = s.num_domains;
          j["transforms"] = to_json(s.params);
        } else {
          j["scheme"] = "hybrid";
          j["domains"] = s.num_domains;
          j["classes_per_client"] = s.classes_per_client;
          j["clients_per_domain"] = s.clients_per_domain;
          j["transforms"] = to_json(s.params);
        }
      },
      spec.scheme);
  return j;
}

/// One row per example: features..., label. Label column is empty for the
/// public pool.
inline void write_csv(std::ostream& os, const Dataset& ds) {
  os.precision(17);
  for (const auto& e : ds.examples) {
    for (double v : e.features) os << v << ',';
    os << e.label << '\n';
  }
}

inline void write_csv(std::ostream& os, const PublicPool& pool) {
  os.precision(17);
  for (const auto& x : pool.examples) {
    for (double v : x) os << v << ',';
    os << '\n';
  }
}

}  // namespace fedmosaic
