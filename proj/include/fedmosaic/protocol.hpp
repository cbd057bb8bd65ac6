#pragma once

// Round-based simulation of federated co-training with adaptive loss
// weighting and expertise-weighted consensus.
//
// Round t (0-based), every client i:
//   loss_priv   = CE(h_{t-1}, D_i)
//   loss_pseudo = CE(h_{t-1}, P)          (only once P exists)
//   lambda      = compute_lambda(loss_priv, loss_pseudo), 0 before P exists
//   h_t         = one SGD epoch on CE(D_i) + lambda * CE(P)
// and when t % b == b - 1 all clients upload (predictions, expertise) on U,
// the server forms consensus labels L_t and broadcasts them, P <- (U, L_t).

#include <algorithm>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "fedmosaic/consensus.hpp"
#include "fedmosaic/data.hpp"
#include "fedmosaic/learner.hpp"
#include "fedmosaic/metrics.hpp"
#include "fedmosaic/random.hpp"
#include "fedmosaic/record.hpp"

namespace fedmosaic {

enum class Mode { kFedMosaic, kFedCtMajority, kLocalOnly, kCentralized };
enum class ExpertiseKind { kFrequency, kEntropy, kMargin, kUniform };

inline std::string to_string(Mode m) {
  switch (m) {
    case Mode::kFedMosaic: return "fedmosaic";
    case Mode::kFedCtMajority: return "fedct_majority";
    case Mode::kLocalOnly: return "local_only";
    case Mode::kCentralized: return "centralized";
  }
  return "?";
}

inline Mode mode_from_string(const std::string& s) {
  if (s == "fedmosaic") return Mode::kFedMosaic;
  if (s == "fedct_majority") return Mode::kFedCtMajority;
  if (s == "local_only") return Mode::kLocalOnly;
  if (s == "centralized") return Mode::kCentralized;
  throw std::invalid_argument("unknown mode '" + s + "'");
}

inline std::string to_string(ExpertiseKind k) {
  switch (k) {
    case ExpertiseKind::kFrequency: return "frequency";
    case ExpertiseKind::kEntropy: return "entropy";
    case ExpertiseKind::kMargin: return "margin";
    case ExpertiseKind::kUniform: return "uniform";
  }
  return "?";
}

inline ExpertiseKind expertise_from_string(const std::string& s) {
  if (s == "frequency") return ExpertiseKind::kFrequency;
  if (s == "entropy") return ExpertiseKind::kEntropy;
  if (s == "margin") return ExpertiseKind::kMargin;
  if (s == "uniform") return ExpertiseKind::kUniform;
  throw std::invalid_argument("unknown expertise variant '" + s + "'");
}

struct DpConfig {
  double epsilon = 1.0;
  double clip_max = 1.0;
  bool operator==(const DpConfig&) const = default;
};

struct ProtocolConfig {
  std::size_t num_rounds = 20;
  std::size_t sync_period = 1;
  double step_size = 0.1;
  std::size_t batch_size = 16;
  ExpertiseKind expertise = ExpertiseKind::kFrequency;
  std::optional<DpConfig> dp;
  Mode mode = Mode::kFedMosaic;
  ModelKind model = ModelKind::kLogistic;
  std::size_t hidden = 16;
  std::uint64_t seed = 0;
  std::size_t threads = 1;  // client workers per round; results do not depend on it
  bool diagnostics = true;  // gradient variance / smoothness probes at syncs
  std::size_t smoothness_probes = 4;

  bool operator==(const ProtocolConfig&) const = default;

  void validate() const {
    if (num_rounds < 1) throw std::invalid_argument("protocol: num_rounds must be >= 1");
    if (sync_period < 1) throw std::invalid_argument("protocol: sync_period must be >= 1");
    if (!(step_size > 0)) throw std::invalid_argument("protocol: step_size must be > 0");
    if (batch_size < 1) throw std::invalid_argument("protocol: batch_size must be >= 1");
    if (threads < 1) throw std::invalid_argument("protocol: threads must be >= 1");
    if (dp) {
      if (mode != Mode::kFedMosaic)
        throw std::invalid_argument("protocol: dp noise applies only to fedmosaic mode");
      LaplaceMechanism(dp->epsilon, dp->clip_max);
    }
  }

  bool is_sync_round(std::size_t t) const {
    return (mode == Mode::kFedMosaic || mode == Mode::kFedCtMajority) &&
           t % sync_period == sync_period - 1;
  }
};

inline nlohmann::json to_json(const ProtocolConfig& c) {
  nlohmann::json j{{"num_rounds", c.num_rounds},
                   {"sync_period", c.sync_period},
                   {"step_size", c.step_size},
                   {"batch_size", c.batch_size},
                   {"expertise", to_string(c.expertise)},
                   {"mode", to_string(c.mode)},
                   {"model", to_string(c.model)},
                   {"hidden", c.hidden},
                   {"seed", c.seed}};
  if (c.dp) j["dp"] = {{"epsilon", c.dp->epsilon}, {"clip_max", c.dp->clip_max}};
  return j;
}

struct ClientState {
  std::size_t id = 0;
  Model model;
  Dataset private_data;
  std::vector<std::size_t> class_freq;
  LambdaState lambda;
  std::uint64_t rng_seed = 0;
};

struct ServerState {
  std::size_t round = 0;
  std::optional<ConsensusLabels> consensus;
  std::vector<Upload> received;
};

struct SyncOutcome {
  ConsensusLabels labels;
  LedgerEntry ledger;
  std::vector<double> uplink_bytes;  // per client, analytic
  double downlink_bytes = 0.0;       // per client, analytic
};

inline Dataset pseudo_labeled(const PublicPool& pool, const ConsensusLabels& labels,
                              std::size_t dim) {
  Dataset p{labels.num_classes, dim, {}};
  p.examples.reserve(pool.size());
  for (std::size_t j = 0; j < pool.size(); ++j)
    p.examples.push_back({pool.examples[j], labels.labels.at(j), pool.ids.empty() ? j : pool.ids[j]});
  return p;
}

/// Builds one client's upload: hard predictions plus, outside majority mode,
/// its expertise vector (noised when DP is configured).
inline Upload make_upload(const ClientState& client, const PublicPool& pool,
                          const ProtocolConfig& cfg, std::size_t round) {
  Upload u;
  u.client_id = static_cast<std::uint32_t>(client.id);
  u.round = static_cast<std::uint32_t>(round);
  u.predictions = predict_hard(client.model, pool);
  if (cfg.mode == Mode::kFedCtMajority) return u;
  ExpertiseVector e;
  switch (cfg.expertise) {
    case ExpertiseKind::kFrequency: e = expertise_frequency(client.class_freq, u.predictions); break;
    case ExpertiseKind::kEntropy:
      e = expertise_uncertainty(client.model, pool, UncertaintyVariant::kEntropy);
      break;
    case ExpertiseKind::kMargin:
      e = expertise_uncertainty(client.model, pool, UncertaintyVariant::kMargin);
      break;
    case ExpertiseKind::kUniform: e = expertise_uniform(pool.size()); break;
  }
  if (cfg.dp)
    e = dp_noise_expertise(e, cfg.dp->epsilon, cfg.dp->clip_max,
                           derive_seed(cfg.seed, {stream::kDp, client.id, round}));
  u.expertise = std::move(e);
  return u;
}

/// Aggregates the buffered uploads; clears the buffer.
inline ConsensusLabels aggregate(ServerState& server, std::size_t num_clients, Mode mode) {
  auto& rx = server.received;
  if (rx.size() != num_clients)
    throw std::runtime_error("sync: expected " + std::to_string(num_clients) + " uploads, got " +
                             std::to_string(rx.size()));
  std::sort(rx.begin(), rx.end(),
            [](const Upload& a, const Upload& b) { return a.client_id < b.client_id; });
  for (std::size_t i = 0; i < rx.size(); ++i)
    if (rx[i].client_id != i) throw std::runtime_error("sync: missing upload from client " + std::to_string(i));

  std::vector<PredictionMatrix> preds;
  for (const auto& u : rx) preds.push_back(u.predictions);
  ConsensusLabels out;
  if (mode == Mode::kFedCtMajority) {
    out = majority_consensus(preds);
  } else {
    std::vector<ExpertiseVector> ex;
    for (const auto& u : rx) {
      if (!u.expertise) throw std::runtime_error("sync: upload without expertise");
      ex.push_back(*u.expertise);
    }
    out = consensus_argmax(weighted_score_matrix(preds, ex));
  }
  rx.clear();
  return out;
}

/// One exchange: every client uploads over the wire format, the server
/// aggregates and broadcasts. Client models are read, not modified.
inline SyncOutcome sync_round(const std::vector<ClientState>& clients, ServerState& server,
                              const PublicPool& pool, const ProtocolConfig& cfg, std::size_t round) {
  if (!cfg.is_sync_round(round))
    throw std::logic_error("sync_round: round " + std::to_string(round) + " is not a sync round");
  if (clients.empty()) throw std::invalid_argument("sync_round: no clients");
  const std::size_t C = clients.front().model.num_classes;
  const double label_bytes = static_cast<double>(bits_per_label(C)) / 8.0;
  const double n = static_cast<double>(pool.size());

  SyncOutcome out;
  out.ledger.round = round;
  server.round = round;
  for (const auto& c : clients) {
    const Upload u = make_upload(c, pool, cfg, round);
    const auto wire = encode(u);
    out.ledger.uplink_wire_bytes += wire.size();
    out.ledger.uplink_label_entries += u.predictions.rows();
    double bytes = n * label_bytes;
    if (u.expertise) {
      out.ledger.uplink_scalars += u.expertise->size();
      bytes += n * static_cast<double>(kScalarBytes);
    }
    out.uplink_bytes.push_back(bytes);
    out.ledger.uplink_bytes += bytes;
    server.received.push_back(decode_upload(wire));
  }
  out.labels = aggregate(server, clients.size(), cfg.mode);
  server.consensus = out.labels;

  const Download d{static_cast<std::uint32_t>(round), out.labels};
  const auto wire = encode(d);
  out.downlink_bytes = n * label_bytes;
  for (std::size_t i = 0; i < clients.size(); ++i) {
    out.ledger.downlink_wire_bytes += wire.size();
    out.ledger.downlink_label_entries += out.labels.size();
    out.ledger.downlink_bytes += out.downlink_bytes;
  }
  if (!(decode_download(wire).labels == out.labels))
    throw std::logic_error("sync_round: download did not survive encoding");
  return out;
}

namespace detail {

/// Runs fn(i) for i in [0, n) on up to `threads` workers. Each index is owned
/// by exactly one worker.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < threads; ++w)
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += threads) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline void check_inputs(const std::vector<Dataset>& clients_data, const std::vector<Dataset>& test_sets) {
  if (clients_data.empty()) throw std::invalid_argument("run: no clients");
  if (test_sets.size() != clients_data.size())
    throw std::invalid_argument("run: need one test set per client");
  for (const auto& d : clients_data) {
    if (d.empty()) throw std::invalid_argument("run: empty client dataset");
    d.validate();
  }
  for (const auto& t : test_sets)
    if (t.empty()) throw std::invalid_argument("run: empty test set");
}

}  // namespace detail

inline Model initial_model(const ProtocolConfig& cfg, std::size_t client, std::size_t dim,
                           std::size_t num_classes) {
  return init_model(cfg.model, dim, num_classes, cfg.hidden,
                    derive_seed(cfg.seed, {stream::kInit, client}));
}

inline std::uint64_t train_seed(const ProtocolConfig& cfg, std::size_t client, std::size_t round) {
  return derive_seed(cfg.seed, {stream::kTrain, client, round});
}

inline RunRecord run_centralized(const std::vector<Dataset>& clients_data,
                                 const std::vector<Dataset>& test_sets, ProtocolConfig cfg);

/// Full protocol run. `pool_truth`, when given, is used only to report
/// pseudo-label accuracy.
inline RunRecord run_experiment(const std::vector<Dataset>& clients_data, const PublicPool& pool,
                                const std::vector<Dataset>& test_sets, const ProtocolConfig& cfg,
                                const std::vector<ClassId>* pool_truth = nullptr) {
  cfg.validate();
  detail::check_inputs(clients_data, test_sets);
  if (cfg.mode == Mode::kCentralized) return run_centralized(clients_data, test_sets, cfg);

  const std::size_t m = clients_data.size();
  const std::size_t dim = clients_data[0].dim, C = clients_data[0].num_classes;
  for (const auto& d : clients_data)
    if (d.dim != dim || d.num_classes != C) throw std::invalid_argument("run: inconsistent client data");
  if (cfg.mode != Mode::kLocalOnly) {
    if (pool.size() == 0) throw std::invalid_argument("run: empty public pool");
    if (pool.dim != dim) throw std::invalid_argument("run: public pool dimension mismatch");
  }

  std::vector<ClientState> clients(m);
  for (std::size_t i = 0; i < m; ++i) {
    clients[i].id = i;
    clients[i].private_data = clients_data[i];
    clients[i].class_freq = clients_data[i].class_counts();
    clients[i].model = initial_model(cfg, i, dim, C);
    clients[i].rng_seed = derive_seed(cfg.seed, {stream::kTrain, i});
  }
  ServerState server;

  RunRecord rec;
  rec.mode = to_string(cfg.mode);
  rec.seed = cfg.seed;
  rec.config = to_json(cfg);
  rec.num_clients = m;
  rec.public_size = pool.size();
  for (const auto& d : clients_data) rec.client_data_sizes.push_back(d.size());

  Dataset pseudo{C, dim, {}};       // P; empty until the first sync
  Dataset prev_pseudo{C, dim, {}};  // P before the most recent sync
  std::vector<double> prev_lambda(m, 0.0);

  for (std::size_t t = 0; t < cfg.num_rounds; ++t) {
    RoundRecord rr;
    rr.round = t;
    rr.clients.resize(m);
    const bool pseudo_active = !pseudo.empty() && cfg.mode != Mode::kLocalOnly;
    const bool pseudo_changed = t > 0 && cfg.is_sync_round(t - 1);

    detail::parallel_for(m, cfg.threads, [&](std::size_t i) {
      auto& c = clients[i];
      auto& row = rr.clients[i];
      row.client_id = i;
      const double lp = cross_entropy_loss(c.model, c.private_data);
      if (!std::isfinite(lp)) throw DivergenceError("client " + std::to_string(i) + ": non-finite loss");
      double lam = 0.0;
      double lq = 0.0;
      if (pseudo_active) {
        lq = cross_entropy_loss(c.model, pseudo);
        lam = compute_lambda(lp, lq);
        row.loss_pseudo = lq;
      }
      c.lambda = LambdaState{lam, lp, lq, pseudo_active, t};
      row.lambda = lam;
      row.loss_priv = lp;

      // |l^t(theta) - l^{t-1}(theta)| at the current parameters; the private
      // term cancels.
      if (t > 0 && cfg.mode != Mode::kLocalOnly) {
        double prev_term = 0.0;
        if (prev_lambda[i] != 0.0)
          prev_term = prev_lambda[i] *
                      (pseudo_changed ? cross_entropy_loss(c.model, prev_pseudo) : lq);
        row.objective_drift = std::abs(lam * lq - prev_term);
      }

      row.grad_norm_sq = grad_norm_sq_sample(c.model, c.private_data, pseudo, pseudo_active ? lam : 0.0);
      c.model = sgd_epoch(std::move(c.model), c.private_data, pseudo, lam, cfg.step_size,
                          cfg.batch_size, train_seed(cfg, i, t));
      row.test_acc = accuracy(c.model, test_sets[i]);
    });
    for (std::size_t i = 0; i < m; ++i) prev_lambda[i] = clients[i].lambda.value;

    if (cfg.is_sync_round(t)) {
      rr.sync = true;
      auto outcome = sync_round(clients, server, pool, cfg, t);
      SyncRecord sr;
      sr.round = t;
      if (!rec.syncs.empty()) sr.drift = pseudo_label_drift(rec.syncs.back().consensus, outcome.labels);
      if (pool_truth) {
        if (pool_truth->size() != pool.size())
          throw std::invalid_argument("run: pool truth size mismatch");
        std::size_t ok = 0;
        for (std::size_t j = 0; j < pool.size(); ++j) ok += (*pool_truth)[j] == outcome.labels.labels[j];
        sr.pseudo_label_accuracy = static_cast<double>(ok) / static_cast<double>(pool.size());
      }
      rr.drift = sr.drift;
      prev_pseudo = std::move(pseudo);
      pseudo = pseudo_labeled(pool, outcome.labels, dim);
      sr.consensus = std::move(outcome.labels);
      rec.syncs.push_back(std::move(sr));
      for (std::size_t i = 0; i < m; ++i) {
        rr.clients[i].uplink_bytes = outcome.uplink_bytes[i];
        rr.clients[i].downlink_bytes = outcome.downlink_bytes;
      }
      if (cfg.diagnostics) {
        detail::parallel_for(m, cfg.threads, [&](std::size_t i) {
          const auto& c = clients[i];
          GradientDiagnostics g;
          g.sigma_bar_sq = gradient_variance(c.model, c.private_data);
          g.sigma_tilde_sq = gradient_variance(c.model, pseudo);
          g.smoothness_local = probe_smoothness(c.model, c.private_data, cfg.smoothness_probes,
                                                derive_seed(cfg.seed, {stream::kTrain, i, t, 1}));
          g.smoothness_global = probe_smoothness(c.model, pseudo, cfg.smoothness_probes,
                                                 derive_seed(cfg.seed, {stream::kTrain, i, t, 2}));
          rr.clients[i].diagnostics = g;
        });
      }
      rec.ledger.rounds.push_back(outcome.ledger);
    } else {
      rec.ledger.rounds.push_back(LedgerEntry{t});
    }
    rec.rounds.push_back(std::move(rr));
  }
  for (const auto& c : clients) {
    rec.final_lambda.push_back(c.lambda.value);
  }
  for (std::size_t i = 0; i < m; ++i) rec.final_accuracy.push_back(rec.rounds.back().clients[i].test_acc);
  return rec;
}

/// Pools every client's private data in client order.
inline Dataset pool_datasets(const std::vector<Dataset>& parts) {
  if (parts.empty()) throw std::invalid_argument("pool_datasets: nothing to pool");
  Dataset all{parts[0].num_classes, parts[0].dim, {}};
  for (const auto& p : parts) all.examples.insert(all.examples.end(), p.examples.begin(), p.examples.end());
  return all;
}

/// One model trained on the union of the private shards with the learner and
/// optimizer the clients use; it reuses client 0's initialization and SGD
/// streams, so a single-client run matches local training exactly.
inline RunRecord run_centralized(const std::vector<Dataset>& clients_data,
                                 const std::vector<Dataset>& test_sets, ProtocolConfig cfg) {
  cfg.mode = Mode::kCentralized;
  cfg.validate();
  detail::check_inputs(clients_data, test_sets);
  const Dataset all = pool_datasets(clients_data);
  const std::size_t m = clients_data.size();
  const Dataset none{all.num_classes, all.dim, {}};

  RunRecord rec;
  rec.mode = to_string(cfg.mode);
  rec.seed = cfg.seed;
  rec.config = to_json(cfg);
  rec.num_clients = m;
  for (const auto& d : clients_data) rec.client_data_sizes.push_back(d.size());

  Model model = initial_model(cfg, 0, all.dim, all.num_classes);
  for (std::size_t t = 0; t < cfg.num_rounds; ++t) {
    RoundRecord rr;
    rr.round = t;
    const double lp = cross_entropy_loss(model, all);
    const double g = grad_norm_sq_sample(model, all, none, 0.0);
    model = sgd_epoch(std::move(model), all, none, 0.0, cfg.step_size, cfg.batch_size,
                      train_seed(cfg, 0, t));
    for (std::size_t i = 0; i < m; ++i) {
      ClientRound row;
      row.client_id = i;
      row.loss_priv = lp;
      row.grad_norm_sq = g;
      row.test_acc = accuracy(model, test_sets[i]);
      rr.clients.push_back(row);
    }
    rec.ledger.rounds.push_back(LedgerEntry{t});
    rec.rounds.push_back(std::move(rr));
  }
  rec.final_lambda.assign(m, 0.0);
  for (std::size_t i = 0; i < m; ++i) rec.final_accuracy.push_back(rec.rounds.back().clients[i].test_acc);
  return rec;
}

}  // namespace fedmosaic
