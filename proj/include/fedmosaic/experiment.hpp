#pragma once

// Builds a scenario from an ExperimentConfig, runs modes over seeds and writes
// run artifacts.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedmosaic/config.hpp"
#include "fedmosaic/data.hpp"
#include "fedmosaic/metrics.hpp"
#include "fedmosaic/protocol.hpp"

namespace fedmosaic {

struct Scenario {
  std::uint64_t seed = 0;
  std::vector<Dataset> clients;  // training shards, labels as the clients see them
  PublicPool pool;
  std::vector<ClassId> pool_truth;
  std::vector<Dataset> tests;
  std::vector<std::vector<std::size_t>> class_counts;           // as trained on
  std::vector<std::vector<std::size_t>> original_class_counts;  // before label flipping
  std::vector<std::size_t> client_domain;
  std::optional<std::size_t> flipped_label_client;
  PartitionSpec spec;
};

inline PartitionSpec make_partition_spec(const ExperimentConfig& cfg, std::uint64_t seed) {
  const auto& p = cfg.partition;
  PartitionSpec spec;
  spec.num_clients = p.num_clients;
  spec.seed = derive_seed(seed, {stream::kPartition});
  spec.max_attempts = p.max_attempts;
  auto shift = [&] {
    return make_domain_transforms(p.domains, cfg.data.dim, p.rotation_step, p.scale_step,
                                  p.bias_gap, p.domain_noise);
  };
  if (p.scheme == "pathological")
    spec.scheme = Pathological{p.classes_per_client, p.target_classes};
  else if (p.scheme == "dirichlet")
    spec.scheme = DirichletSkew{p.alpha};
  else if (p.scheme == "feature_shift")
    spec.scheme = FeatureShift{p.domains, shift()};
  else if (p.scheme == "hybrid")
    spec.scheme = Hybrid{p.domains, p.classes_per_client, p.clients_per_domain, shift()};
  else
    throw ConfigError("unknown partition scheme '" + p.scheme + "'");
  return spec;
}

/// Cyclic label shift c -> (c + 1) mod C; every label changes.
inline Dataset flip_labels(Dataset d) {
  for (auto& e : d.examples) e.label = static_cast<ClassId>((e.label + 1) % d.num_classes);
  return d;
}

/// Every random draw is derived from `seed`.
inline Scenario build_scenario(const ExperimentConfig& cfg, std::uint64_t seed) {
  const auto& dc = cfg.data;
  Scenario sc;
  sc.seed = seed;
  const Dataset base = make_mixture(dc.num_classes, dc.dim, dc.per_class, dc.separation,
                                    derive_seed(seed, {stream::kMixture}), dc.class_std);
  PublicSplit split = split_public(base, dc.public_fraction, derive_seed(seed, {stream::kSplit}));
  sc.spec = make_partition_spec(cfg, seed);
  Partition part = partition(split.private_data, sc.spec);
  sc.client_domain = part.client_domain;
  sc.original_class_counts = part.class_frequency;
  sc.clients = std::move(part.shards);
  if (cfg.flipped_label_client) {
    const auto i = *cfg.flipped_label_client;
    if (i >= sc.clients.size()) throw ConfigError("flipped_label_client out of range");
    sc.clients[i] = flip_labels(std::move(sc.clients[i]));
    sc.flipped_label_client = i;
  }
  for (const auto& c : sc.clients) sc.class_counts.push_back(c.class_counts());

  sc.pool = std::move(split.pool);
  sc.pool_truth = std::move(split.truth);
  const FeatureShiftParams* shift = sc.spec.shift_params();
  if (shift && dc.public_source == "union") {
    std::vector<std::size_t> domain_of(sc.pool.size());
    for (std::size_t j = 0; j < domain_of.size(); ++j) domain_of[j] = j % shift->domains.size();
    sc.pool = apply_feature_shift(sc.pool, domain_of, *shift,
                                  derive_seed(seed, {stream::kFeatureShift, 1000}));
  }

  // Test sets follow each client's own (uncorrupted) label proportions and
  // domain, drawn from an independent sample of the same mixture.
  const Dataset test_base = make_mixture(dc.num_classes, dc.dim, dc.test_per_client,
                                         dc.separation, derive_seed(seed, {stream::kTestMixture}),
                                         dc.class_std);
  std::vector<std::vector<std::size_t>> by_class(dc.num_classes);
  for (std::size_t k = 0; k < test_base.size(); ++k) by_class[test_base.examples[k].label].push_back(k);
  for (std::size_t i = 0; i < sc.clients.size(); ++i) {
    const auto& counts = sc.original_class_counts[i];
    double total = 0.0;
    for (auto c : counts) total += static_cast<double>(c);
    std::vector<double> props;
    for (auto c : counts) props.push_back(static_cast<double>(c) / total);
    const auto want = detail::proportional_counts(dc.test_per_client, props);
    Rng rng(derive_seed(seed, {stream::kTestSample, i}));
    Dataset test{dc.num_classes, dc.dim, {}};
    for (std::size_t c = 0; c < dc.num_classes; ++c) {
      auto idx = by_class[c];
      rng.shuffle(idx);
      for (std::size_t r = 0; r < want[c]; ++r) test.examples.push_back(test_base.examples[idx[r]]);
    }
    if (shift)
      test = apply_feature_shift(test, sc.client_domain[i], *shift,
                                 derive_seed(seed, {stream::kFeatureShift, 2000 + i}));
    sc.tests.push_back(std::move(test));
  }
  return sc;
}

inline nlohmann::json manifest(const ExperimentConfig& cfg, const Scenario& sc) {
  nlohmann::json clients = nlohmann::json::array();
  for (std::size_t i = 0; i < sc.clients.size(); ++i) {
    const auto label_set = sc.clients[i].label_set();
    const std::vector<ClassId> labels(label_set.begin(), label_set.end());
    nlohmann::json c{{"client_id", i},
                     {"size", sc.clients[i].size()},
                     {"class_counts", sc.class_counts[i]},
                     {"original_class_counts", sc.original_class_counts[i]},
                     {"label_set", labels},
                     {"test_size", sc.tests[i].size()}};
    if (!sc.client_domain.empty()) c["domain"] = sc.client_domain[i];
    clients.push_back(std::move(c));
  }
  nlohmann::json j{{"seed", sc.seed},
                   {"num_classes", cfg.data.num_classes},
                   {"dim", cfg.data.dim},
                   {"mixture",
                    {{"per_class", cfg.data.per_class},
                     {"separation", cfg.data.separation},
                     {"class_std", cfg.data.class_std}}},
                   {"public_size", sc.pool.size()},
                   {"public_source", cfg.data.public_source},
                   {"partition", to_json(sc.spec)},
                   {"clients", std::move(clients)}};
  j["flipped_label_client"] =
      sc.flipped_label_client ? nlohmann::json(*sc.flipped_label_client) : nlohmann::json(nullptr);
  if (sc.flipped_label_client) j["label_flip"] = "cyclic: c -> (c + 1) mod C";
  return j;
}

inline ProtocolConfig job_protocol(const ExperimentConfig& cfg, Mode mode, std::uint64_t seed) {
  ProtocolConfig p = cfg.protocol;
  p.mode = mode;
  p.seed = seed;
  if (mode != Mode::kFedMosaic) p.dp.reset();
  return p;
}

inline RunRecord run_mode(const ExperimentConfig& cfg, const Scenario& sc, Mode mode) {
  const ProtocolConfig p = job_protocol(cfg, mode, sc.seed);
  RunRecord r = run_experiment(sc.clients, sc.pool, sc.tests, p, &sc.pool_truth);
  r.config["experiment"] = serialize_config(cfg);
  return r;
}

inline std::string resolved_scenario_text(const ExperimentConfig& cfg, const Scenario& sc) {
  std::ostringstream os;
  os << "seed " << sc.seed << ": m = " << sc.clients.size() << ", |U| = " << sc.pool.size()
     << ", C = " << cfg.data.num_classes << ", scheme = " << cfg.partition.scheme << '\n';
  for (std::size_t i = 0; i < sc.clients.size(); ++i) {
    os << "  client " << i << ": " << sc.clients[i].size() << " examples, classes {";
    bool first = true;
    for (auto c : sc.clients[i].label_set()) {
      os << (first ? "" : ",") << c;
      first = false;
    }
    os << "}";
    if (!sc.client_domain.empty()) os << ", domain " << sc.client_domain[i];
    if (sc.flipped_label_client == i) os << ", labels flipped";
    os << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Summary across seeds

struct SummaryRow {
  std::string mode;
  std::string client;  // client id or "mean"
  double mean = 0.0;
  double stddev = 0.0;  // sample stddev over seeds, 0 for a single seed
  std::size_t seeds = 0;
};

inline std::pair<double, double> mean_stddev(const std::vector<double>& xs) {
  if (xs.empty()) return {0.0, 0.0};
  double m = 0.0;
  for (double x : xs) m += x;
  m /= static_cast<double>(xs.size());
  if (xs.size() < 2) return {m, 0.0};
  double v = 0.0;
  for (double x : xs) v += (x - m) * (x - m);
  return {m, std::sqrt(v / static_cast<double>(xs.size() - 1))};
}

/// records[mode] holds one RunRecord per seed.
inline std::vector<SummaryRow> summarize(const std::vector<std::pair<Mode, std::vector<RunRecord>>>& records) {
  std::vector<SummaryRow> rows;
  for (const auto& [mode, runs] : records) {
    if (runs.empty()) continue;
    const std::size_t m = runs.front().final_accuracy.size();
    for (std::size_t i = 0; i < m; ++i) {
      std::vector<double> xs;
      for (const auto& r : runs) xs.push_back(r.final_accuracy.at(i));
      const auto [mu, sd] = mean_stddev(xs);
      rows.push_back({to_string(mode), std::to_string(i), mu, sd, runs.size()});
    }
    std::vector<double> xs;
    for (const auto& r : runs) xs.push_back(r.mean_final_accuracy());
    const auto [mu, sd] = mean_stddev(xs);
    rows.push_back({to_string(mode), "mean", mu, sd, runs.size()});
  }
  return rows;
}

inline void write_summary_csv(std::ostream& os, const std::vector<SummaryRow>& rows) {
  os << "mode,client,mean_test_acc,stddev_test_acc,seeds\n";
  for (const auto& r : rows)
    os << r.mode << ',' << r.client << ',' << format_double(r.mean) << ','
       << format_double(r.stddev) << ',' << r.seeds << '\n';
}

/// Writes run.json, rounds.csv, manifest.json and the trend report (when the
/// run is long enough) into `dir`.
inline void write_run_artifacts(const std::filesystem::path& dir, const RunRecord& rec,
                                const nlohmann::json& data_manifest) {
  std::filesystem::create_directories(dir);
  auto open = [&](const char* name) {
    std::ofstream f(dir / name);
    if (!f) throw std::runtime_error("cannot write " + (dir / name).string());
    return f;
  };
  open("run.json") << to_json(rec).dump(1) << '\n';
  {
    auto f = open("rounds.csv");
    write_rounds_csv(f, rec);
  }
  open("manifest.json") << data_manifest.dump(1) << '\n';
  if (rec.rounds.size() >= 8) {
    const auto rep = trend_checks(rec);
    open("report.json") << to_json(rep).dump(1) << '\n';
    open("report.txt") << to_text(rep);
  }
}

}  // namespace fedmosaic
