#pragma once

// Evaluation, convergence diagnostics and run reports.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedmosaic/consensus.hpp"
#include "fedmosaic/learner.hpp"
#include "fedmosaic/random.hpp"
#include "fedmosaic/record.hpp"

namespace fedmosaic {

inline double accuracy(const Model& model, const Dataset& test) {
  if (test.empty()) throw std::invalid_argument("accuracy: empty test set");
  std::size_t correct = 0;
  for (const auto& e : test.examples) correct += predict_class(model, e.features) == e.label;
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

/// Fraction of indices whose label changed.
inline double pseudo_label_drift(const ConsensusLabels& prev, const ConsensusLabels& curr) {
  if (prev.size() != curr.size()) throw std::invalid_argument("pseudo_label_drift: length mismatch");
  if (prev.size() == 0) return 0.0;
  std::size_t diff = 0;
  for (std::size_t j = 0; j < prev.size(); ++j) diff += prev.labels[j] != curr.labels[j];
  return static_cast<double>(diff) / static_cast<double>(prev.size());
}

inline double squared_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return s;
}

/// ||grad of CE(priv) + lambda * CE(pseudo)||^2 over the full data.
inline double grad_norm_sq_sample(const Model& model, const Dataset& priv, const Dataset& pseudo,
                                  double lambda) {
  return squared_norm(grad_combined(model, priv, pseudo, lambda));
}

/// Mean over examples of ||grad l(x) - mean grad||^2.
inline double gradient_variance(const Model& model, const Dataset& data) {
  if (data.empty()) return 0.0;
  const std::size_t p = model.params.size();
  std::vector<double> mean(p, 0.0), sum_sq(p, 0.0);
  const Dataset none{data.num_classes, data.dim, {}};
  for (const auto& e : data.examples) {
    const auto g = grad_combined(model, std::span<const Example>(&e, 1), none.examples, 0.0);
    for (std::size_t k = 0; k < p; ++k) {
      mean[k] += g[k];
      sum_sq[k] += g[k] * g[k];
    }
  }
  const double n = static_cast<double>(data.size());
  double var = 0.0;
  for (std::size_t k = 0; k < p; ++k) {
    const double m = mean[k] / n;
    var += sum_sq[k] / n - m * m;
  }
  return std::max(var, 0.0);
}

/// Largest ||grad f(theta + h v) - grad f(theta)|| / h over random unit v,
/// f = CE on `data`. A local estimate only; the global constant is not
/// available in closed form for the MLP.
inline double probe_smoothness(const Model& model, const Dataset& data, std::size_t probes,
                               std::uint64_t seed, double h = 1e-4) {
  if (data.empty()) return 0.0;
  const Dataset none{data.num_classes, data.dim, {}};
  const auto g0 = grad_combined(model, data, none, 0.0);
  Rng rng(seed);
  double best = 0.0;
  for (std::size_t k = 0; k < probes; ++k) {
    std::vector<double> v(model.params.size());
    for (auto& x : v) x = rng.normal();
    const double norm = std::sqrt(squared_norm(v));
    Model shifted = model;
    for (std::size_t i = 0; i < v.size(); ++i) shifted.params[i] += h * v[i] / norm;
    const auto g1 = grad_combined(shifted, data, none, 0.0);
    double d = 0.0;
    for (std::size_t i = 0; i < g0.size(); ++i) d += (g1[i] - g0[i]) * (g1[i] - g0[i]);
    best = std::max(best, std::sqrt(d) / h);
  }
  return best;
}

/// Right-hand side of the convergence bound:
///   4 L (L0 - L*) / T + sigma_bar^2 / (2 L d) + e^2 sigma_tilde^2 / (2 L |U|) + 2 delta
inline double convergence_bound(double L0, double Lstar, double L_smooth, double sigma_bar_sq,
                                 double sigma_tilde_sq, std::size_t d, std::size_t U_size,
                                 double delta, std::size_t T) {
  if (!(L_smooth > 0)) throw std::invalid_argument("convergence_bound: L must be positive");
  if (d < 1 || U_size < 1 || T < 1)
    throw std::invalid_argument("convergence_bound: d, |U| and T must be >= 1");
  if (!(L0 >= Lstar)) throw std::invalid_argument("convergence_bound: need L0 >= L*");
  if (sigma_bar_sq < 0 || sigma_tilde_sq < 0 || delta < 0)
    throw std::invalid_argument("convergence_bound: variances and drift must be >= 0");
  constexpr double e2 = std::numbers::e * std::numbers::e;
  return 4.0 * L_smooth * (L0 - Lstar) / static_cast<double>(T) +
         sigma_bar_sq / (2.0 * L_smooth * static_cast<double>(d)) +
         e2 * sigma_tilde_sq / (2.0 * L_smooth * static_cast<double>(U_size)) + 2.0 * delta;
}

// ---------------------------------------------------------------------------
// Trend checks

struct QuarterTrend {
  double first_quarter_mean = 0.0;
  double last_quarter_mean = 0.0;
  bool converged_at_start = false;  // both quarters exactly zero
  bool decreasing = false;          // last < first

  std::optional<double> ratio() const {
    if (first_quarter_mean == 0.0) return std::nullopt;
    return last_quarter_mean / first_quarter_mean;
  }
};

inline QuarterTrend quarter_trend(std::span<const double> series) {
  if (series.size() < 8) throw std::invalid_argument("trend_checks: need at least 8 rounds");
  const std::size_t q = series.size() / 4;
  QuarterTrend t;
  for (std::size_t k = 0; k < q; ++k) {
    t.first_quarter_mean += series[k];
    t.last_quarter_mean += series[series.size() - q + k];
  }
  t.first_quarter_mean /= static_cast<double>(q);
  t.last_quarter_mean /= static_cast<double>(q);
  t.converged_at_start = t.first_quarter_mean == 0.0 && t.last_quarter_mean == 0.0;
  t.decreasing = !t.converged_at_start && t.last_quarter_mean < t.first_quarter_mean;
  return t;
}

struct ClientTrend {
  std::size_t client_id = 0;
  QuarterTrend grad_norm;
  double lambda_min = 0.0;
  double lambda_max = 0.0;
  double lambda_final = 0.0;
};

struct DriftTrend {
  std::size_t measurable = 0;
  std::optional<double> first;
  std::optional<double> final;
  std::optional<double> early_mean;  // first half of measurable syncs
  std::optional<double> late_mean;   // second half

  bool final_not_above_first() const { return first && final && *final <= *first; }
};

struct BoundComparison {
  double empirical_mean_grad_norm_sq = 0.0;
  double bound = 0.0;
  double L_smooth = 0.0;
  double L0 = 0.0;
  double sigma_bar_sq = 0.0;
  double sigma_tilde_sq = 0.0;
  double delta = 0.0;
  std::string smoothness_source = "probed local estimate";
};

struct TrendReport {
  std::vector<ClientTrend> clients;
  DriftTrend drift;
  std::vector<std::optional<BoundComparison>> bounds;  // per client, when diagnostics exist
};

inline TrendReport trend_checks(const RunRecord& record) {
  const std::size_t T = record.rounds.size();
  if (T < 8) throw std::invalid_argument("trend_checks: run too short (< 8 rounds)");
  TrendReport rep;
  const std::size_t m = record.num_clients;
  for (std::size_t i = 0; i < m; ++i) {
    std::vector<double> g, lam;
    for (const auto& rr : record.rounds) {
      g.push_back(rr.clients.at(i).grad_norm_sq);
      lam.push_back(rr.clients.at(i).lambda);
    }
    ClientTrend ct{i, quarter_trend(g), *std::min_element(lam.begin(), lam.end()),
                   *std::max_element(lam.begin(), lam.end()), lam.back()};
    rep.clients.push_back(ct);

    // Bound comparison from the probed constants. L* is taken as 0 (CE >= 0).
    std::optional<BoundComparison> bc;
    double L = 0.0, sb = 0.0, st = 0.0, delta = 0.0;
    for (const auto& rr : record.rounds) {
      const auto& c = rr.clients.at(i);
      if (c.diagnostics) {
        L = std::max({L, c.diagnostics->smoothness_local, c.diagnostics->smoothness_global});
        sb = std::max(sb, c.diagnostics->sigma_bar_sq);
        st = std::max(st, c.diagnostics->sigma_tilde_sq);
      }
      if (c.objective_drift) delta = std::max(delta, *c.objective_drift);
    }
    if (L > 0.0 && !record.client_data_sizes.empty() && record.public_size > 0) {
      BoundComparison b;
      b.L_smooth = (1.0 + std::numbers::e) * L;
      b.L0 = record.rounds.front().clients.at(i).loss_priv;
      b.sigma_bar_sq = sb;
      b.sigma_tilde_sq = st;
      b.delta = delta;
      double s = 0.0;
      for (double v : g) s += v;
      b.empirical_mean_grad_norm_sq = s / static_cast<double>(T);
      const auto d = *std::min_element(record.client_data_sizes.begin(),
                                       record.client_data_sizes.end());
      b.bound = convergence_bound(b.L0, 0.0, b.L_smooth, sb, st, d, record.public_size, delta, T);
      bc = b;
    }
    rep.bounds.push_back(bc);
  }

  std::vector<double> drifts;
  for (const auto& s : record.syncs)
    if (s.drift) drifts.push_back(*s.drift);
  rep.drift.measurable = drifts.size();
  if (!drifts.empty()) {
    rep.drift.first = drifts.front();
    rep.drift.final = drifts.back();
    if (drifts.size() >= 2) {
      const std::size_t half = drifts.size() / 2;
      double a = 0.0, b = 0.0;
      for (std::size_t k = 0; k < half; ++k) a += drifts[k];
      for (std::size_t k = half; k < drifts.size(); ++k) b += drifts[k];
      rep.drift.early_mean = a / static_cast<double>(half);
      rep.drift.late_mean = b / static_cast<double>(drifts.size() - half);
    }
  }
  return rep;
}

inline nlohmann::json to_json(const TrendReport& rep) {
  nlohmann::json clients = nlohmann::json::array();
  for (std::size_t i = 0; i < rep.clients.size(); ++i) {
    const auto& c = rep.clients[i];
    nlohmann::json cj{{"client_id", c.client_id},
                      {"grad_norm_first_quarter", c.grad_norm.first_quarter_mean},
                      {"grad_norm_last_quarter", c.grad_norm.last_quarter_mean},
                      {"grad_norm_decreasing", c.grad_norm.decreasing},
                      {"converged_at_start", c.grad_norm.converged_at_start},
                      {"lambda_min", c.lambda_min},
                      {"lambda_max", c.lambda_max},
                      {"lambda_final", c.lambda_final}};
    if (const auto& b = rep.bounds.at(i)) {
      cj["bound"] = {{"empirical_mean_grad_norm_sq", b->empirical_mean_grad_norm_sq},
                     {"bound", b->bound},
                     {"L", b->L_smooth},
                     {"L0", b->L0},
                     {"sigma_bar_sq", b->sigma_bar_sq},
                     {"sigma_tilde_sq", b->sigma_tilde_sq},
                     {"delta", b->delta},
                     {"smoothness_source", b->smoothness_source}};
    }
    clients.push_back(std::move(cj));
  }
  return {{"clients", std::move(clients)},
          {"drift",
           {{"measurable_syncs", rep.drift.measurable},
            {"first", detail::opt(rep.drift.first)},
            {"final", detail::opt(rep.drift.final)},
            {"early_mean", detail::opt(rep.drift.early_mean)},
            {"late_mean", detail::opt(rep.drift.late_mean)}}}};
}

inline std::string to_text(const TrendReport& rep) {
  std::ostringstream os;
  os.precision(4);
  for (std::size_t i = 0; i < rep.clients.size(); ++i) {
    const auto& c = rep.clients[i];
    os << "client " << c.client_id << ": grad_norm_sq first quarter "
       << c.grad_norm.first_quarter_mean << ", last quarter " << c.grad_norm.last_quarter_mean;
    if (c.grad_norm.converged_at_start)
      os << " (converged at start)";
    else
      os << (c.grad_norm.decreasing ? " (decreasing)" : " (not decreasing)");
    os << "; lambda min " << c.lambda_min << " max " << c.lambda_max << " final "
       << c.lambda_final << '\n';
    if (const auto& b = rep.bounds.at(i))
      os << "  bound: mean grad_norm_sq " << b->empirical_mean_grad_norm_sq << " vs bound "
         << b->bound << " (L " << b->L_smooth << ", " << b->smoothness_source << ")\n";
  }
  os << "pseudo-label drift: " << rep.drift.measurable << " measurable syncs";
  if (rep.drift.first) os << ", first " << *rep.drift.first << ", final " << *rep.drift.final;
  if (rep.drift.early_mean)
    os << ", early mean " << *rep.drift.early_mean << ", late mean " << *rep.drift.late_mean;
  os << '\n';
  return os.str();
}

}  // namespace fedmosaic
