#pragma once

// Per-round run records and their JSON / CSV forms.

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedmosaic/consensus.hpp"
#include "fedmosaic/format.hpp"

namespace fedmosaic {

/// Traffic for one round. Analytic byte columns count label entries at
/// bits_per_label(C)/8 bytes and expertise scalars at kScalarBytes; wire
/// columns are the encoded message sizes, headers included.
struct LedgerEntry {
  std::size_t round = 0;
  double uplink_bytes = 0.0;
  double downlink_bytes = 0.0;
  std::size_t uplink_wire_bytes = 0;
  std::size_t downlink_wire_bytes = 0;
  std::size_t uplink_scalars = 0;
  std::size_t uplink_label_entries = 0;
  std::size_t downlink_label_entries = 0;

  bool has_traffic() const {
    return uplink_wire_bytes || downlink_wire_bytes || uplink_scalars || uplink_label_entries ||
           downlink_label_entries;
  }
};

struct MessageLedger {
  std::vector<LedgerEntry> rounds;

  std::size_t total_uplink_scalars() const {
    std::size_t s = 0;
    for (const auto& r : rounds) s += r.uplink_scalars;
    return s;
  }
  std::size_t sync_count() const {
    std::size_t s = 0;
    for (const auto& r : rounds) s += r.has_traffic() ? 1 : 0;
    return s;
  }
};

/// Gradient statistics probed at a sync round, used for the convergence-bound
/// comparison.
struct GradientDiagnostics {
  double sigma_bar_sq = 0.0;        // per-example gradient variance, private data
  double sigma_tilde_sq = 0.0;      // same on the pseudo-labeled pool
  double smoothness_local = 0.0;    // probed local Lipschitz estimate of the gradient
  double smoothness_global = 0.0;
};

struct ClientRound {
  std::size_t client_id = 0;
  double lambda = 0.0;
  double loss_priv = 0.0;
  std::optional<double> loss_pseudo;  // absent while no pseudo-labels exist
  double test_acc = 0.0;
  double grad_norm_sq = 0.0;          // full-batch combined gradient at the round's start point
  std::optional<double> objective_drift;
  double uplink_bytes = 0.0;
  double downlink_bytes = 0.0;
  std::optional<GradientDiagnostics> diagnostics;
};

struct RoundRecord {
  std::size_t round = 0;
  bool sync = false;
  std::optional<double> drift;  // pseudo-label drift, from the second sync on
  std::vector<ClientRound> clients;
};

struct SyncRecord {
  std::size_t round = 0;
  ConsensusLabels consensus;
  std::optional<double> drift;
  std::optional<double> pseudo_label_accuracy;
};

struct RunRecord {
  std::string mode;
  std::uint64_t seed = 0;
  nlohmann::json config;
  std::size_t num_clients = 0;
  std::size_t public_size = 0;
  std::vector<std::size_t> client_data_sizes;
  std::vector<RoundRecord> rounds;
  std::vector<SyncRecord> syncs;
  MessageLedger ledger;
  std::vector<double> final_accuracy;
  std::vector<double> final_lambda;

  double mean_final_accuracy() const {
    double s = 0.0;
    for (double a : final_accuracy) s += a;
    return final_accuracy.empty() ? 0.0 : s / static_cast<double>(final_accuracy.size());
  }
};

inline nlohmann::json to_json(const LedgerEntry& e) {
  return {{"round", e.round},
          {"uplink_bytes", e.uplink_bytes},
          {"downlink_bytes", e.downlink_bytes},
          {"uplink_wire_bytes", e.uplink_wire_bytes},
          {"downlink_wire_bytes", e.downlink_wire_bytes},
          {"uplink_scalars", e.uplink_scalars},
          {"uplink_label_entries", e.uplink_label_entries},
          {"downlink_label_entries", e.downlink_label_entries}};
}

namespace detail {
inline nlohmann::json opt(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}
}  // namespace detail

inline nlohmann::json to_json(const RunRecord& r) {
  nlohmann::json rounds = nlohmann::json::array();
  for (const auto& rr : r.rounds) {
    nlohmann::json clients = nlohmann::json::array();
    for (const auto& c : rr.clients) {
      nlohmann::json cj{{"client_id", c.client_id},
                        {"lambda", c.lambda},
                        {"loss_priv", c.loss_priv},
                        {"loss_pseudo", detail::opt(c.loss_pseudo)},
                        {"test_acc", c.test_acc},
                        {"grad_norm_sq", c.grad_norm_sq},
                        {"objective_drift", detail::opt(c.objective_drift)},
                        {"uplink_bytes", c.uplink_bytes},
                        {"downlink_bytes", c.downlink_bytes}};
      if (c.diagnostics)
        cj["diagnostics"] = {{"sigma_bar_sq", c.diagnostics->sigma_bar_sq},
                             {"sigma_tilde_sq", c.diagnostics->sigma_tilde_sq},
                             {"smoothness_local", c.diagnostics->smoothness_local},
                             {"smoothness_global", c.diagnostics->smoothness_global}};
      clients.push_back(std::move(cj));
    }
    rounds.push_back({{"round", rr.round},
                      {"sync", rr.sync},
                      {"drift", detail::opt(rr.drift)},
                      {"clients", std::move(clients)}});
  }
  nlohmann::json syncs = nlohmann::json::array();
  for (const auto& s : r.syncs)
    syncs.push_back({{"round", s.round},
                     {"labels", s.consensus.labels},
                     {"drift", detail::opt(s.drift)},
                     {"pseudo_label_accuracy", detail::opt(s.pseudo_label_accuracy)}});
  nlohmann::json ledger = nlohmann::json::array();
  for (const auto& e : r.ledger.rounds) ledger.push_back(to_json(e));
  return {{"mode", r.mode},
          {"seed", r.seed},
          {"config", r.config},
          {"num_clients", r.num_clients},
          {"public_size", r.public_size},
          {"client_data_sizes", r.client_data_sizes},
          {"final_accuracy", r.final_accuracy},
          {"final_lambda", r.final_lambda},
          {"rounds", std::move(rounds)},
          {"syncs", std::move(syncs)},
          {"ledger", std::move(ledger)}};
}

inline constexpr const char* kRoundsCsvHeader =
    "round,client_id,lambda,loss_priv,loss_pseudo,test_acc,pseudo_label_drift,uplink_bytes,"
    "downlink_bytes";

/// Flat per-round, per-client table. Absent values are empty fields.
inline void write_rounds_csv(std::ostream& os, const RunRecord& r) {
  os << kRoundsCsvHeader << '\n';
  for (const auto& rr : r.rounds)
    for (const auto& c : rr.clients)
      os << rr.round << ',' << c.client_id << ',' << format_double(c.lambda) << ','
         << format_double(c.loss_priv) << ',' << format_optional(c.loss_pseudo) << ','
         << format_double(c.test_acc) << ',' << format_optional(rr.drift) << ','
         << format_double(c.uplink_bytes) << ',' << format_double(c.downlink_bytes) << '\n';
}

}  // namespace fedmosaic
