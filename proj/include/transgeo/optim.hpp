#pragma once

// AdamW, cosine schedule and the adaptive sharpness-aware two-pass step.

#include <cmath>
#include <functional>
#include <map>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "transgeo/checkpoint.hpp"
#include "transgeo/ops.hpp"

namespace transgeo {

/// Named handles onto trainable tensors. Handles share storage with the owning model.
template <class T>
using ParamList = std::vector<std::pair<std::string, Tensor<T>>>;

template <class T>
void collect_params(ParamList<T>& out, const ParameterSet<T>& set, const std::string& prefix) {
  for (const auto& e : set.entries()) out.emplace_back(prefix + e.name, e.tensor);
}

template <class T>
void zero_grads(ParamList<T>& params) {
  for (auto& [name, t] : params) t.zero_grad();
}

struct CosineSchedule {
  std::size_t total_steps = 1;
  double lr0 = 1e-4;
  double lr_min = 0.0;

  double lr(std::size_t t) const {
    if (t > total_steps) {
      throw std::out_of_range("schedule step " + std::to_string(t) + " beyond " + std::to_string(total_steps));
    }
    if (total_steps == 0) return lr0;
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + std::cos(std::numbers::pi * double(t) / double(total_steps)));
  }
};

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.03;

  void validate() const {
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw std::invalid_argument("AdamW betas must lie in [0, 1)");
    if (!(eps > 0)) throw std::invalid_argument("AdamW eps must be positive");
    if (!(weight_decay >= 0)) throw std::invalid_argument("weight decay must be >= 0");
  }
};

/// Decoupled weight decay Adam:
///   w <- w (1 - lr wd);  m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2
///   w <- w - lr (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
template <class T>
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) { cfg_.validate(); }

  const AdamWConfig& config() const { return cfg_; }
  std::uint64_t steps() const { return t_; }

  void step(ParamList<T>& params, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
    for (auto& [name, p] : params) {
      auto& st = state_[name];
      if (st.m.size() != p.numel()) {
        st.m.assign(p.numel(), T(0));
        st.v.assign(p.numel(), T(0));
      }
      auto w = p.data();
      auto g = p.grad();
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = double(g[i]);
        const double m = cfg_.beta1 * double(st.m[i]) + (1.0 - cfg_.beta1) * gi;
        const double v = cfg_.beta2 * double(st.v[i]) + (1.0 - cfg_.beta2) * gi * gi;
        st.m[i] = T(m);
        st.v[i] = T(v);
        double wi = double(w[i]) * (1.0 - lr * cfg_.weight_decay);
        wi -= lr * (m / bc1) / (std::sqrt(v / bc2) + cfg_.eps);
        w[i] = T(wi);
      }
    }
  }

  void append_to(std::vector<NamedArray>& out, const std::string& prefix = "opt/") const {
    out.push_back({prefix + "step", {1}, {float(t_)}});
    for (const auto& [name, st] : state_) {
      out.push_back({prefix + "m/" + name, {st.m.size()}, {st.m.begin(), st.m.end()}});
      out.push_back({prefix + "v/" + name, {st.v.size()}, {st.v.begin(), st.v.end()}});
    }
  }

  void load_from(const std::vector<NamedArray>& arrays, const std::string& prefix = "opt/") {
    state_.clear();
    t_ = 0;
    for (const auto& a : arrays) {
      if (a.name.rfind(prefix, 0) != 0) continue;
      const std::string rest = a.name.substr(prefix.size());
      if (rest == "step") {
        t_ = static_cast<std::uint64_t>(a.values.at(0));
      } else if (rest.rfind("m/", 0) == 0) {
        state_[rest.substr(2)].m.assign(a.values.begin(), a.values.end());
      } else if (rest.rfind("v/", 0) == 0) {
        state_[rest.substr(2)].v.assign(a.values.begin(), a.values.end());
      }
    }
  }

 private:
  struct Moments {
    std::vector<T> m, v;
  };
  AdamWConfig cfg_;
  std::uint64_t t_ = 0;
  std::map<std::string, Moments> state_;
};

struct AsamConfig {
  bool enabled = true;
  double rho = 2.5;
  double eta = 0.01;

  void validate() const {
    if (!(rho >= 0)) throw std::invalid_argument("ASAM rho must be >= 0");
    if (!(eta >= 0)) throw std::invalid_argument("ASAM eta must be >= 0");
  }
};

/// Ascent step e = rho T^2 g / ||T g|| with T = diag(|w| + eta), over the concatenation of
/// all parameters. With adaptive = false, T = I (plain SAM direction).
template <class T>
std::vector<std::vector<T>> asam_perturbation(const ParamList<T>& params, double rho, double eta, bool adaptive = true) {
  double norm_sq = 0;
  for (const auto& [name, p] : params) {
    auto w = p.data();
    auto g = p.grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double s = adaptive ? (std::abs(double(w[i])) + eta) * double(g[i]) : double(g[i]);
      norm_sq += s * s;
    }
  }
  const double norm = std::sqrt(norm_sq);
  if (!(norm > 0) || !std::isfinite(norm)) throw NonFiniteError("ASAM perturbation needs a finite nonzero scaled gradient");
  std::vector<std::vector<T>> out;
  out.reserve(params.size());
  for (const auto& [name, p] : params) {
    auto w = p.data();
    auto g = p.grad();
    std::vector<T> e(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double t = adaptive ? std::abs(double(w[i])) + eta : 1.0;
      e[i] = T(rho * t * t * double(g[i]) / norm);
    }
    out.push_back(std::move(e));
  }
  return out;
}

/// ||T_w^{-1} e||_2, the quantity the perturbation constrains to rho.
template <class T>
double asam_constraint(const ParamList<T>& params, const std::vector<std::vector<T>>& eps, double eta) {
  double s = 0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto w = params[k].second.data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double v = double(eps[k][i]) / (std::abs(double(w[i])) + eta);
      s += v * v;
    }
  }
  return std::sqrt(s);
}

template <class T>
void apply_perturbation(ParamList<T>& params, const std::vector<std::vector<T>>& eps) {
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto w = params[k].second.data();
    for (std::size_t i = 0; i < w.size(); ++i) w[i] += eps[k][i];
  }
}

template <class T>
std::vector<std::vector<T>> snapshot(const ParamList<T>& params) {
  std::vector<std::vector<T>> out;
  out.reserve(params.size());
  for (const auto& [name, p] : params) out.push_back(p.storage());
  return out;
}

template <class T>
void restore(ParamList<T>& params, const std::vector<std::vector<T>>& saved) {
  for (std::size_t k = 0; k < params.size(); ++k) params[k].second.storage() = saved[k];
}

enum class StepPhase { after_first_pass, after_restore };

struct StepResult {
  double loss = 0;            // loss at the unperturbed weights
  double perturbed_loss = 0;  // loss at w + e (equals loss when ASAM is off)
  int passes = 0;
};

/// Runs forward and backward of `loss_fn` and returns the loss value.
template <class T>
double forward_backward(const std::function<Tensor<T>()>& loss_fn) {
  Tensor<T> loss;
  try {
    loss = loss_fn();
  } catch (...) {
    active_tape<T>().reset();
    throw;
  }
  const double v = double(loss.item());
  if (!std::isfinite(v)) {
    active_tape<T>().reset();
    throw NonFiniteError("non-finite loss");
  }
  backward(loss);
  return v;
}

/// One optimization step. With ASAM enabled: gradient at w, move to w + e, gradient there,
/// restore w exactly, then AdamW with the perturbed gradient. Otherwise a single pass.
template <class T>
StepResult asam_step(ParamList<T>& params, const std::function<Tensor<T>()>& loss_fn, const AsamConfig& asam,
                     AdamW<T>& opt, double lr,
                     const std::function<void(StepPhase, const ParamList<T>&)>& observer = {}) {
  asam.validate();
  StepResult r;
  zero_grads(params);
  r.loss = forward_backward<T>(loss_fn);
  r.passes = 1;
  r.perturbed_loss = r.loss;
  if (asam.enabled) {
    if (observer) observer(StepPhase::after_first_pass, params);
    auto saved = snapshot(params);
    apply_perturbation(params, asam_perturbation(params, asam.rho, asam.eta));
    zero_grads(params);
    try {
      r.perturbed_loss = forward_backward<T>(loss_fn);
    } catch (...) {
      restore(params, saved);
      throw;
    }
    r.passes = 2;
    restore(params, saved);
    if (observer) observer(StepPhase::after_restore, params);
  }
  opt.step(params, lr);
  return r;
}

/// First-order sharpness estimate L(w + e) - L(w) with the SAM or adaptive ascent step.
/// A flat loss (all-zero gradient) has zero sharpness.
template <class T>
double sharpness_estimate(ParamList<T>& params, const std::function<Tensor<T>()>& loss_fn, double rho,
                          bool adaptive, double eta = 0.01) {
  zero_grads(params);
  const double base = forward_backward<T>(loss_fn);
  bool flat = true;
  for (const auto& [name, p] : params)
    for (T g : p.grad()) flat = flat && g == T(0);
  if (flat) return 0.0;
  auto saved = snapshot(params);
  apply_perturbation(params, asam_perturbation(params, rho, eta, adaptive));
  double moved = 0;
  {
    NoGradGuard guard;
    try {
      moved = double(loss_fn().item());
    } catch (...) {
      restore(params, saved);
      throw;
    }
  }
  restore(params, saved);
  return moved - base;
}

}  // namespace transgeo
