#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include "sure/autodiff.hpp"
#include "sure/error.hpp"
#include "sure/model.hpp"

namespace sure {

struct SGDConfig {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  /// Parameters excluded from weight decay.
  std::vector<std::string> no_decay;

  void validate() const {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ValidationError("lr must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ValidationError("momentum must lie in [0, 1)");
    if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) throw ValidationError("weight_decay must be >= 0");
  }

  bool decays(const std::string& name) const {
    return std::find(no_decay.begin(), no_decay.end(), name) == no_decay.end();
  }
};

/// Momentum buffers keyed by parameter name.
using Velocity = std::map<std::string, Tensor>;

/// v <- momentum v + (g + wd p);  p <- p - lr v
inline void sgd_step(ParameterSet& params, const Gradients& grads, const SGDConfig& cfg, Velocity& velocity) {
  cfg.validate();
  for (const auto& [name, g] : grads) check_finite(g, "gradient of '" + name + "'");
  for (auto& p : params) {
    if (!p.trainable) continue;
    auto git = grads.find(p.name);
    if (git == grads.end()) throw ValidationError("missing gradient for '" + p.name + "'");
    const Tensor& g = git->second;
    require_same_shape(p.value, g, "sgd_step");
    auto [vit, fresh] = velocity.try_emplace(p.name, Tensor(p.value.shape(), 0.0));
    Tensor& v = vit->second;
    const double wd = cfg.decays(p.name) ? cfg.weight_decay : 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) {
      v[i] = cfg.momentum * v[i] + (g[i] + wd * p.value[i]);
      p.value[i] -= cfg.lr * v[i];
    }
  }
}

struct SAMConfig {
  double rho = 0.05;

  void validate() const {
    if (!(rho >= 0.0) || !std::isfinite(rho)) throw ValidationError("rho must be >= 0");
  }
};

inline double global_norm(const Gradients& grads) {
  double ss = 0.0;
  for (const auto& [name, g] : grads)
    for (double v : g.values()) ss += v * v;
  return std::sqrt(ss);
}

/// First-order worst-case perturbation rho * g / ||g|| with the norm taken
/// over all parameters jointly. Zero when the gradient vanishes.
inline Gradients sam_perturbation(const Gradients& grads, const SAMConfig& cfg) {
  cfg.validate();
  const double norm = global_norm(grads);
  Gradients eps;
  for (const auto& [name, g] : grads) {
    Tensor e(g.shape(), 0.0);
    if (norm > kNormEpsilon && cfg.rho > 0.0)
      for (std::size_t i = 0; i < g.size(); ++i) e[i] = cfg.rho * g[i] / norm;
    eps.emplace(name, std::move(e));
  }
  return eps;
}

struct LossAndGrad {
  double loss = 0.0;
  Gradients grads;
};

/// Evaluates the loss and its gradients at the current parameter values.
using LossClosure = std::function<LossAndGrad()>;

struct SAMStepResult {
  double loss = 0.0;            // at theta
  double perturbed_loss = 0.0;  // at theta + eps
  Gradients update_grads;       // the phase-2 gradients fed to SGD
};

/// One sharpness-aware step: gradient at theta, ascend to theta + eps,
/// gradient there, restore theta and apply SGD with the second gradient.
inline SAMStepResult sam_step(ParameterSet& params, const LossClosure& closure, const SGDConfig& sgd,
                              const SAMConfig& sam, Velocity& velocity) {
  sam.validate();
  LossAndGrad first = closure();
  if (!std::isfinite(first.loss)) throw DivergenceError("loss is not finite at theta");
  for (const auto& [name, g] : first.grads) check_finite(g, "gradient of '" + name + "'");

  const Gradients eps = sam_perturbation(first.grads, sam);
  std::vector<Tensor> saved;
  saved.reserve(params.size());
  for (auto& p : params) {
    saved.push_back(p.value);
    auto it = eps.find(p.name);
    if (it == eps.end()) continue;
    for (std::size_t i = 0; i < p.value.size(); ++i) p.value[i] += it->second[i];
  }

  LossAndGrad second;
  try {
    second = closure();
  } catch (...) {
    std::size_t k = 0;
    for (auto& p : params) p.value = saved[k++];
    throw;
  }
  std::size_t k = 0;
  for (auto& p : params) p.value = std::move(saved[k++]);
  if (!std::isfinite(second.loss)) throw DivergenceError("loss is not finite at the perturbed point");

  sgd_step(params, second.grads, sgd, velocity);
  return {first.loss, second.loss, std::move(second.grads)};
}

// ---------------------------------------------------------------------------
// Stochastic weight averaging

struct SWAState {
  std::map<std::string, Tensor> averaged;
  std::size_t count = 0;
  int start_epoch = 0;
  double swa_lr = 0.05;

  /// Whether any snapshot can be taken in a run of `total_epochs` epochs
  /// (epochs are numbered from 0).
  bool active(int total_epochs) const { return start_epoch < total_epochs; }
};

/// averaged <- (averaged * count + current) / (count + 1)
inline void swa_update(SWAState& state, const ParameterSet& params, int epoch) {
  if (epoch < state.start_epoch)
    throw ValidationError("swa_update at epoch " + std::to_string(epoch) + " before start epoch " +
                          std::to_string(state.start_epoch));
  if (state.count > 0) {
    if (state.averaged.size() != params.size()) throw ShapeError("swa_update: parameter set changed");
    for (const auto& p : params) {
      auto it = state.averaged.find(p.name);
      if (it == state.averaged.end()) throw ShapeError("swa_update: unknown parameter '" + p.name + "'");
      require_same_shape(it->second, p.value, "swa_update");
    }
  }
  const double n = static_cast<double>(state.count);
  for (const auto& p : params) {
    auto [it, fresh] = state.averaged.try_emplace(p.name, p.value);
    if (fresh) continue;
    Tensor& avg = it->second;
    for (std::size_t i = 0; i < avg.size(); ++i) avg[i] = (avg[i] * n + p.value[i]) / (n + 1.0);
  }
  ++state.count;
}

/// Installs the averaged weights into `params`.
inline void swa_finalize(const SWAState& state, ParameterSet& params) {
  if (state.count == 0) throw ValidationError("swa_finalize: no snapshots were averaged");
  for (auto& p : params) {
    auto it = state.averaged.find(p.name);
    if (it == state.averaged.end()) throw ShapeError("swa_finalize: no average for '" + p.name + "'");
    require_same_shape(it->second, p.value, "swa_finalize");
    p.value = it->second;
  }
}

/// No-op when SWA never started within `total_epochs`.
inline bool swa_finalize_if_active(const SWAState& state, ParameterSet& params, int total_epochs) {
  if (!state.active(total_epochs)) return false;
  swa_finalize(state, params);
  return true;
}

// ---------------------------------------------------------------------------
// Learning-rate schedule

struct LRSchedule {
  double eta_max = 0.1;
  double eta_min = 0.0;
  int total_epochs = 100;

  void validate() const {
    if (!(eta_max > 0.0)) throw ValidationError("eta_max must be > 0");
    if (!(eta_min >= 0.0) || eta_min > eta_max) throw ValidationError("eta_min must lie in [0, eta_max]");
    if (total_epochs <= 0) throw ValidationError("schedule length must be > 0");
  }
};

inline double cosine_lr(const LRSchedule& sched, double t) {
  sched.validate();
  if (!(t >= 0.0 && t <= sched.total_epochs)) throw ValidationError("cosine_lr: epoch out of range");
  return sched.eta_min +
         0.5 * (sched.eta_max - sched.eta_min) * (1.0 + std::cos(std::numbers::pi * t / sched.total_epochs));
}

/// Cosine annealing, replaced by the constant SWA rate from the SWA start epoch on.
inline double epoch_learning_rate(const LRSchedule& sched, const SWAState* swa, int epoch) {
  if (swa && epoch >= swa->start_epoch) return swa->swa_lr;
  return cosine_lr(sched, epoch);
}

}  // namespace sure
