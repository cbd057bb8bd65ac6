#pragma once

// Small differentiable classifiers trained with mini-batch SGD on
//   loss = CE(private) + lambda * CE(pseudo-labeled public data)
// plus the adaptive weight lambda.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <istream>
#include <limits>
#include <numbers>
#include <ostream>
#include <ranges>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedmosaic/data.hpp"
#include "fedmosaic/errors.hpp"
#include "fedmosaic/random.hpp"

namespace fedmosaic {

/// Probabilities are floored here before taking logs.
inline constexpr double kProbFloor = 1e-12;
/// Floor on the private loss in the adaptive weight.
inline constexpr double kLambdaLossFloor = 1e-8;
inline constexpr double kLambdaMax = std::numbers::e;

enum class ModelKind { kLogistic, kMlp };

inline std::string to_string(ModelKind k) { return k == ModelKind::kLogistic ? "logistic" : "mlp"; }

inline ModelKind model_kind_from_string(const std::string& s) {
  if (s == "logistic" || s == "multinomial_logistic") return ModelKind::kLogistic;
  if (s == "mlp") return ModelKind::kMlp;
  throw std::invalid_argument("unknown model kind '" + s + "'");
}

/// Parameter layout:
///   logistic: W[C x d] row-major, b[C]
///   mlp:      W1[h x d], b1[h], W2[C x h], b2[C]; tanh hidden activation
struct Model {
  ModelKind kind = ModelKind::kLogistic;
  std::size_t dim = 0;
  std::size_t num_classes = 0;
  std::size_t hidden = 0;
  std::vector<double> params;

  static std::size_t param_count(ModelKind kind, std::size_t d, std::size_t c, std::size_t h) {
    return kind == ModelKind::kLogistic ? c * d + c : h * d + h + c * h + c;
  }
  std::size_t param_count() const { return param_count(kind, dim, num_classes, hidden); }

  static Model zeros(ModelKind kind, std::size_t d, std::size_t c, std::size_t h = 0) {
    if (d == 0 || c < 2) throw std::invalid_argument("Model: need dim >= 1 and >= 2 classes");
    if (kind == ModelKind::kMlp && h == 0)
      throw std::invalid_argument("Model: mlp needs at least one hidden unit");
    if (kind == ModelKind::kLogistic) h = 0;
    return Model{kind, d, c, h, std::vector<double>(param_count(kind, d, c, h), 0.0)};
  }

  void validate() const {
    if (params.size() != param_count())
      throw std::invalid_argument("Model: parameter vector does not match dims");
  }

  bool operator==(const Model&) const = default;
};

/// Logistic: N(0, 0.01^2). MLP: N(0, 1/fan_in) weights, zero biases.
inline Model init_model(ModelKind kind, std::size_t d, std::size_t c, std::size_t h,
                        std::uint64_t seed) {
  Model m = Model::zeros(kind, d, c, h);
  Rng rng(seed);
  if (kind == ModelKind::kLogistic) {
    for (std::size_t i = 0; i < c * d; ++i) m.params[i] = 0.01 * rng.normal();
  } else {
    const double s1 = 1.0 / std::sqrt(static_cast<double>(d));
    const double s2 = 1.0 / std::sqrt(static_cast<double>(m.hidden));
    for (std::size_t i = 0; i < m.hidden * d; ++i) m.params[i] = s1 * rng.normal();
    const std::size_t w2 = m.hidden * d + m.hidden;
    for (std::size_t i = 0; i < c * m.hidden; ++i) m.params[w2 + i] = s2 * rng.normal();
  }
  return m;
}

namespace detail {

inline const Example& as_example(const Example& e) { return e; }
inline const Example& as_example(std::reference_wrapper<const Example> e) { return e.get(); }

inline void check_dim(const Model& m, std::size_t d) {
  if (d != m.dim) throw std::invalid_argument("model/feature dimension mismatch");
}

/// Logits for x; fills `hidden_out` with tanh activations for the MLP.
inline void forward(const Model& m, std::span<const double> x, std::vector<double>& logits,
                    std::vector<double>& hidden_out) {
  check_dim(m, x.size());
  const std::size_t d = m.dim, c = m.num_classes;
  const double* p = m.params.data();
  logits.assign(c, 0.0);
  if (m.kind == ModelKind::kLogistic) {
    const double* b = p + c * d;
    for (std::size_t k = 0; k < c; ++k) {
      double z = b[k];
      const double* w = p + k * d;
      for (std::size_t f = 0; f < d; ++f) z += w[f] * x[f];
      logits[k] = z;
    }
    return;
  }
  const std::size_t h = m.hidden;
  const double* b1 = p + h * d;
  const double* w2 = b1 + h;
  const double* b2 = w2 + c * h;
  hidden_out.assign(h, 0.0);
  for (std::size_t u = 0; u < h; ++u) {
    double z = b1[u];
    const double* w = p + u * d;
    for (std::size_t f = 0; f < d; ++f) z += w[f] * x[f];
    hidden_out[u] = std::tanh(z);
  }
  for (std::size_t k = 0; k < c; ++k) {
    double z = b2[k];
    const double* w = w2 + k * h;
    for (std::size_t u = 0; u < h; ++u) z += w[u] * hidden_out[u];
    logits[k] = z;
  }
}

inline void softmax_inplace(std::vector<double>& z) {
  const double mx = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (auto& v : z) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (auto& v : z) v /= sum;
}

/// Adds weight * d CE(x, y) / d params into grad. Returns the example's loss.
inline double accumulate_example(const Model& m, const Example& e, double weight,
                                 std::vector<double>& grad, std::vector<double>& probs,
                                 std::vector<double>& hid) {
  forward(m, e.features, probs, hid);
  softmax_inplace(probs);
  const double loss = -std::log(std::max(probs[e.label], kProbFloor));
  if (weight == 0.0) return loss;
  probs[e.label] -= 1.0;  // dCE/dlogits
  const std::size_t d = m.dim, c = m.num_classes;
  const auto& x = e.features;
  if (m.kind == ModelKind::kLogistic) {
    double* gb = grad.data() + c * d;
    for (std::size_t k = 0; k < c; ++k) {
      const double g = weight * probs[k];
      double* gw = grad.data() + k * d;
      for (std::size_t f = 0; f < d; ++f) gw[f] += g * x[f];
      gb[k] += g;
    }
    return loss;
  }
  const std::size_t h = m.hidden;
  const double* w2 = m.params.data() + h * d + h;
  double* gw1 = grad.data();
  double* gb1 = gw1 + h * d;
  double* gw2 = gb1 + h;
  double* gb2 = gw2 + c * h;
  std::vector<double> dh(h, 0.0);
  for (std::size_t k = 0; k < c; ++k) {
    const double g = weight * probs[k];
    for (std::size_t u = 0; u < h; ++u) {
      gw2[k * h + u] += g * hid[u];
      dh[u] += g * w2[k * h + u];
    }
    gb2[k] += g;
  }
  for (std::size_t u = 0; u < h; ++u) {
    const double g = dh[u] * (1.0 - hid[u] * hid[u]);
    for (std::size_t f = 0; f < d; ++f) gw1[u * d + f] += g * x[f];
    gb1[u] += g;
  }
  return loss;
}

}  // namespace detail

inline std::vector<double> predict_scores(const Model& model, std::span<const double> features) {
  std::vector<double> z, h;
  detail::forward(model, features, z, h);
  return z;
}

inline std::vector<double> predict_probs(const Model& model, std::span<const double> features) {
  auto z = predict_scores(model, features);
  detail::softmax_inplace(z);
  return z;
}

/// Lowest index among maximal entries.
inline ClassId argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < v.size(); ++k)
    if (v[k] > v[best]) best = k;
  return static_cast<ClassId>(best);
}

inline ClassId predict_class(const Model& model, std::span<const double> features) {
  return argmax(predict_scores(model, features));
}

/// Mean negative log-probability of the true labels.
template <std::ranges::input_range R>
double cross_entropy_loss(const Model& model, const R& data) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& item : data) {
    const Example& e = detail::as_example(item);
    if (e.label >= model.num_classes) throw std::invalid_argument("label out of range");
    const auto p = predict_probs(model, e.features);
    sum += -std::log(std::max(p[e.label], kProbFloor));
    ++n;
  }
  if (n == 0) throw std::invalid_argument("cross_entropy_loss: empty data");
  return sum / static_cast<double>(n);
}

inline double cross_entropy_loss(const Model& model, const Dataset& data) {
  return cross_entropy_loss(model, data.examples);
}

/// Adaptive weight exp(-(loss_pseudo - loss_priv) / loss_priv), in (0, e].
/// loss_priv is floored at kLambdaLossFloor; a result that underflows is
/// raised to the smallest normal double so the weight stays strictly positive.
inline double compute_lambda(double loss_priv, double loss_pseudo) {
  if (!(loss_pseudo >= 0.0) || !(loss_priv >= 0.0) || !std::isfinite(loss_priv))
    throw std::invalid_argument("compute_lambda: losses must be finite and non-negative");
  const double denom = std::max(loss_priv, kLambdaLossFloor);
  const double lam = std::exp(-(loss_pseudo - loss_priv) / denom);
  return std::clamp(lam, std::numeric_limits<double>::min(), kLambdaMax);
}

struct LambdaState {
  double value = 0.0;
  double loss_priv = 0.0;
  double loss_pseudo = 0.0;  // meaningful only when pseudo_active
  bool pseudo_active = false;
  std::size_t round = 0;
};

/// Loss and gradient of mean CE(priv) + lambda * mean CE(pseudo).
/// An empty pseudo batch contributes nothing regardless of lambda.
struct LossGrad {
  double loss_priv = 0.0;
  double loss_pseudo = 0.0;
  double loss = 0.0;
  std::vector<double> grad;
};

template <std::ranges::input_range P, std::ranges::input_range Q>
LossGrad loss_and_grad(const Model& model, const P& priv_batch, const Q& pseudo_batch,
                       double lambda) {
  LossGrad out;
  out.grad.assign(model.params.size(), 0.0);
  std::vector<double> probs, hid;
  const auto n_priv = static_cast<std::size_t>(std::ranges::distance(priv_batch));
  const auto n_pseudo = static_cast<std::size_t>(std::ranges::distance(pseudo_batch));
  if (n_priv == 0) throw std::invalid_argument("grad_combined: empty private batch");
  const double wp = 1.0 / static_cast<double>(n_priv);
  for (const auto& item : priv_batch) {
    const Example& e = detail::as_example(item);
    out.loss_priv += wp * detail::accumulate_example(model, e, wp, out.grad, probs, hid);
  }
  out.loss = out.loss_priv;
  if (n_pseudo > 0 && lambda != 0.0) {
    const double wq = 1.0 / static_cast<double>(n_pseudo);
    for (const auto& item : pseudo_batch) {
      const Example& e = detail::as_example(item);
      out.loss_pseudo += wq * detail::accumulate_example(model, e, lambda * wq, out.grad, probs, hid);
    }
    out.loss += lambda * out.loss_pseudo;
  }
  return out;
}

template <std::ranges::input_range P, std::ranges::input_range Q>
std::vector<double> grad_combined(const Model& model, const P& priv_batch, const Q& pseudo_batch,
                                  double lambda) {
  if (!(lambda >= 0.0 && lambda <= kLambdaMax))
    throw std::invalid_argument("grad_combined: lambda must lie in [0, e]");
  return loss_and_grad(model, priv_batch, pseudo_batch, lambda).grad;
}

inline std::vector<double> grad_combined(const Model& model, const Dataset& priv,
                                         const Dataset& pseudo, double lambda) {
  return grad_combined(model, priv.examples, pseudo.examples, lambda);
}

/// Value of the combined objective; CE terms use the same floors as
/// cross_entropy_loss.
inline double combined_loss(const Model& model, const Dataset& priv, const Dataset& pseudo,
                            double lambda) {
  double l = cross_entropy_loss(model, priv);
  if (!pseudo.empty() && lambda != 0.0) l += lambda * cross_entropy_loss(model, pseudo);
  return l;
}

/// One shuffled pass of mini-batch SGD over the private data. The pseudo set is
/// shuffled and spread over the same number of steps, so each epoch visits
/// every private and every pseudo-labeled example once.
inline Model sgd_epoch(Model model, const Dataset& priv, const Dataset& pseudo, double lambda,
                       double step_size, std::size_t batch_size, std::uint64_t seed) {
  if (!(step_size >= 0.0)) throw std::invalid_argument("sgd_epoch: step size must be >= 0");
  if (batch_size == 0) throw std::invalid_argument("sgd_epoch: batch size must be >= 1");
  if (priv.empty()) throw std::invalid_argument("sgd_epoch: empty private data");
  if (!(lambda >= 0.0 && lambda <= kLambdaMax))
    throw std::invalid_argument("sgd_epoch: lambda must lie in [0, e]");
  model.validate();

  Rng rng(seed);
  std::vector<std::size_t> pi(priv.size()), qi(pseudo.size());
  for (std::size_t i = 0; i < pi.size(); ++i) pi[i] = i;
  for (std::size_t i = 0; i < qi.size(); ++i) qi[i] = i;
  rng.shuffle(pi);
  rng.shuffle(qi);

  const std::size_t steps = (pi.size() + batch_size - 1) / batch_size;
  const bool use_pseudo = lambda != 0.0 && !qi.empty();
  std::vector<std::reference_wrapper<const Example>> pb, qb;
  for (std::size_t s = 0; s < steps; ++s) {
    pb.clear();
    qb.clear();
    for (std::size_t r = s * batch_size; r < std::min(pi.size(), (s + 1) * batch_size); ++r)
      pb.emplace_back(priv.examples[pi[r]]);
    if (use_pseudo) {
      const std::size_t lo = s * qi.size() / steps, hi = (s + 1) * qi.size() / steps;
      for (std::size_t r = lo; r < hi; ++r) qb.emplace_back(pseudo.examples[qi[r]]);
    }
    const auto lg = loss_and_grad(model, pb, qb, use_pseudo ? lambda : 0.0);
    if (!std::isfinite(lg.loss))
      throw DivergenceError("sgd_epoch: non-finite loss at step " + std::to_string(s));
    for (std::size_t k = 0; k < model.params.size(); ++k) model.params[k] -= step_size * lg.grad[k];
    if (!std::all_of(model.params.begin(), model.params.end(),
                     [](double v) { return std::isfinite(v); }))
      throw DivergenceError("sgd_epoch: non-finite parameters at step " + std::to_string(s));
  }
  return model;
}

// ---------------------------------------------------------------------------
// Checkpointing

inline nlohmann::json to_json(const Model& m) {
  return {{"kind", to_string(m.kind)},
          {"dim", m.dim},
          {"num_classes", m.num_classes},
          {"hidden", m.hidden},
          {"params", m.params}};
}

inline Model model_from_json(const nlohmann::json& j) {
  Model m;
  m.kind = model_kind_from_string(j.at("kind").get<std::string>());
  m.dim = j.at("dim").get<std::size_t>();
  m.num_classes = j.at("num_classes").get<std::size_t>();
  m.hidden = j.at("hidden").get<std::size_t>();
  m.params = j.at("params").get<std::vector<double>>();
  m.validate();
  return m;
}

/// Binary checkpoint: "FMDL", u32 kind, u64 dim, u64 classes, u64 hidden,
/// u64 count, count little-endian doubles (host byte order).
inline void write_binary(std::ostream& os, const Model& m) {
  auto put = [&](const auto& v) { os.write(reinterpret_cast<const char*>(&v), sizeof v); };
  os.write("FMDL", 4);
  put(static_cast<std::uint32_t>(m.kind));
  put(static_cast<std::uint64_t>(m.dim));
  put(static_cast<std::uint64_t>(m.num_classes));
  put(static_cast<std::uint64_t>(m.hidden));
  put(static_cast<std::uint64_t>(m.params.size()));
  os.write(reinterpret_cast<const char*>(m.params.data()),
           static_cast<std::streamsize>(m.params.size() * sizeof(double)));
}

inline Model read_binary(std::istream& is) {
  auto get = [&](auto& v) {
    if (!is.read(reinterpret_cast<char*>(&v), sizeof v))
      throw std::runtime_error("read_binary: truncated model");
  };
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "FMDL", 4) != 0)
    throw std::runtime_error("read_binary: bad magic");
  std::uint32_t kind;
  std::uint64_t d, c, h, n;
  get(kind), get(d), get(c), get(h), get(n);
  if (kind > 1) throw std::runtime_error("read_binary: unknown model kind");
  Model m{static_cast<ModelKind>(kind), d, c, h, std::vector<double>(n)};
  if (!is.read(reinterpret_cast<char*>(m.params.data()),
               static_cast<std::streamsize>(n * sizeof(double))))
    throw std::runtime_error("read_binary: truncated model");
  m.validate();
  return m;
}

}  // namespace fedmosaic
