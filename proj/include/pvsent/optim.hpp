#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "pvsent/error.hpp"
#include "pvsent/random.hpp"

namespace pvsent {

// ---------------------------------------------------------------------------
// Binary cross-entropy

inline constexpr double kProbabilityClip = 1e-12;

struct LossAndGrad {
  double loss = 0.0;
  double grad = 0.0;  // d loss / d p, evaluated at the clamped probability
};

inline LossAndGrad bce_loss(double p, int y) {
  const double q = std::clamp(p, kProbabilityClip, 1.0 - kProbabilityClip);
  if (y != 0) return {-std::log(q), -1.0 / q};
  return {-std::log1p(-q), 1.0 / (1.0 - q)};
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// log(1 + e^x) without overflow; -log sigmoid(x) = softplus(-x).
inline double softplus(double x) {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t t = 0;

  AdamState() = default;
  explicit AdamState(AdamConfig c) : config(c) {}
};

// One Adam update over a list of parameter tensors. Moment buffers are
// allocated on the first call and must keep the same shapes afterwards.
inline void adam_step(std::span<const std::span<double>> params,
                      std::span<const std::span<const double>> grads, AdamState& state) {
  if (params.size() != grads.size()) throw UsageError("adam_step: parameter/gradient count mismatch");
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (params[k].size() != grads[k].size()) throw UsageError("adam_step: shape mismatch");
    for (double g : grads[k]) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient");
    }
  }
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.size(), 0.0);
      state.v.emplace_back(p.size(), 0.0);
    }
  } else if (state.m.size() != params.size()) {
    throw UsageError("adam_step: state was initialized for a different parameter list");
  }

  const AdamConfig& c = state.config;
  ++state.t;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& m = state.m[k];
    auto& v = state.v[k];
    if (m.size() != params[k].size()) throw UsageError("adam_step: shape changed between steps");
    const auto& g = grads[k];
    auto& theta = params[k];
    for (std::size_t i = 0; i < theta.size(); ++i) {
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      theta[i] -= c.learning_rate * (m_hat / (std::sqrt(v_hat) + c.epsilon));
    }
  }
}

// ---------------------------------------------------------------------------
// Early stopping

enum class StopDecision { kContinue, kStop };

// Tracks the best validation loss and keeps a snapshot of whatever produced it.
template <typename Snapshot>
class EarlyStopper {
 public:
  explicit EarlyStopper(std::size_t patience = 3, double min_delta = 1e-5)
      : patience_(patience), min_delta_(min_delta) {}

  // Call once per epoch. An epoch improves when its loss is below the best by
  // at least min_delta; the stopper halts once non-improving epochs exceed
  // the patience.
  StopDecision update(double validation_loss, const Snapshot& current) {
    ++epoch_;
    if (!best_ || validation_loss < best_loss_ - min_delta_) {
      best_loss_ = validation_loss;
      best_ = current;
      best_epoch_ = epoch_;
      since_improvement_ = 0;
      return StopDecision::kContinue;
    }
    ++since_improvement_;
    return since_improvement_ > patience_ ? StopDecision::kStop : StopDecision::kContinue;
  }

  bool has_snapshot() const { return best_.has_value(); }
  const Snapshot& best() const { return *best_; }
  double best_loss() const { return best_loss_; }
  // 1-based epoch index of the snapshot.
  std::size_t best_epoch() const { return best_epoch_; }
  std::size_t epochs_since_improvement() const { return since_improvement_; }
  std::size_t patience() const { return patience_; }

 private:
  std::size_t patience_;
  double min_delta_;
  std::optional<Snapshot> best_;
  double best_loss_ = std::numeric_limits<double>::infinity();
  std::size_t best_epoch_ = 0;
  std::size_t since_improvement_ = 0;
  std::size_t epoch_ = 0;
};

// ---------------------------------------------------------------------------
// Finite-difference gradient check

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  // Check at most this many coordinates, sampled without replacement; 0 = all.
  std::size_t max_coordinates = 0;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  bool passed = true;
};

inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

// `theta` is a live view of the parameters that `loss` reads; each coordinate
// is perturbed in place by +-step and restored afterwards.
template <typename LossFn>
GradCheckReport grad_check(std::span<double> theta, std::span<const double> analytic, LossFn&& loss,
                           const GradCheckOptions& opts = {}) {
  if (theta.size() != analytic.size()) throw UsageError("grad_check: size mismatch");
  std::vector<std::size_t> coords(theta.size());
  for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
  if (opts.max_coordinates != 0 && opts.max_coordinates < coords.size()) {
    Rng rng(opts.seed);
    rng.shuffle(coords);
    coords.resize(opts.max_coordinates);
  }

  GradCheckReport report;
  for (std::size_t i : coords) {
    const double saved = theta[i];
    theta[i] = saved + opts.step;
    const double plus = loss();
    theta[i] = saved - opts.step;
    const double minus = loss();
    theta[i] = saved;
    const double numeric = (plus - minus) / (2.0 * opts.step);
    const double err = relative_error(analytic[i], numeric);
    if (err > report.max_relative_error) {
      report.max_relative_error = err;
      report.worst_index = i;
    }
    ++report.checked;
  }
  report.passed = report.max_relative_error <= opts.tolerance;
  return report;
}

}  // namespace pvsent
