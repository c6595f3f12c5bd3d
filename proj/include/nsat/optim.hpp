#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "nsat/errors.hpp"
#include "nsat/tensor.hpp"

namespace nsat {

// Adam moment buffers for one parameter tensor. beta/epsilon are the
// conventional defaults.
struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::size_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  explicit AdamState(std::size_t n = 0) : m(n, 0.0), v(n, 0.0) {}
};

// One bias-corrected Adam update, in place.
inline void adam_step(Tensor& param, const std::vector<double>& grad,
                      AdamState& state, double lr,
                      const std::string& name = "param") {
  auto& p = param.mutable_value();
  if (grad.size() != p.size())
    throw DimensionError("adam_step: grad length " + std::to_string(grad.size()) +
                         " vs param length " + std::to_string(p.size()) +
                         " for " + name);
  if (state.m.size() != p.size()) state = AdamState(p.size());
  for (double g : grad)
    if (!std::isfinite(g))
      throw NumericError("adam_step: non-finite gradient for " + name);
  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < p.size(); ++i) {
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grad[i];
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grad[i] * grad[i];
    const double mhat = state.m[i] / bc1;
    const double vhat = state.v[i] / bc2;
    p[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
  }
}

// Optimizer over a named parameter set. Registration order fixes update
// order, which keeps runs reproducible.
class Adam {
 public:
  void add(const std::string& name, Tensor param) {
    entries_.push_back({name, std::move(param), AdamState()});
  }

  void step(double lr) {
    for (auto& e : entries_) {
      if (!e.param.has_grad()) continue;
      adam_step(e.param, e.param.grad(), e.state, lr, e.name);
    }
  }

  void zero_grad() {
    for (auto& e : entries_) e.param.zero_grad();
  }

  struct Entry {
    std::string name;
    Tensor param;
    AdamState state;
  };
  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }

 private:
  std::vector<Entry> entries_;
};

// Learning-rate schedules used by the training recipes: per-epoch
// exponential decay, milestone multiplication, and halving every k epochs.
struct LrSchedule {
  enum class Kind { ExponentialDecay, StepMultiply, HalveEveryK };

  Kind kind = Kind::ExponentialDecay;
  double initial = 1e-3;
  double ratio = 0.0;                     // exponential: lr0 * (1-ratio)^epoch
  double factor = 1.0;                    // step-multiply factor per milestone
  std::vector<std::size_t> milestones;    // step-multiply epochs
  std::size_t period = 1;                 // halve-every-k period

  static LrSchedule exponential(double lr0, double decay_ratio) {
    LrSchedule s;
    s.kind = Kind::ExponentialDecay;
    s.initial = lr0;
    s.ratio = decay_ratio;
    s.validate();
    return s;
  }
  static LrSchedule step_multiply(double lr0, double f,
                                  std::vector<std::size_t> ms) {
    LrSchedule s;
    s.kind = Kind::StepMultiply;
    s.initial = lr0;
    s.factor = f;
    s.milestones = std::move(ms);
    s.validate();
    return s;
  }
  static LrSchedule halve_every(double lr0, std::size_t k) {
    LrSchedule s;
    s.kind = Kind::HalveEveryK;
    s.initial = lr0;
    s.period = k;
    s.validate();
    return s;
  }

  void validate() const {
    if (initial <= 0.0) throw ConfigError("lr schedule: initial rate must be > 0");
    if (kind == Kind::ExponentialDecay && (ratio < 0.0 || ratio >= 1.0))
      throw ConfigError("lr schedule: decay ratio must lie in [0,1)");
    if (kind == Kind::StepMultiply && (factor <= 0.0 || factor > 1.0))
      throw ConfigError("lr schedule: factor must lie in (0,1]");
    if (kind == Kind::HalveEveryK && period == 0)
      throw ConfigError("lr schedule: period must be >= 1");
  }
};

inline double schedule_lr(const LrSchedule& s, std::size_t epoch) {
  switch (s.kind) {
    case LrSchedule::Kind::ExponentialDecay:
      return s.initial * std::pow(1.0 - s.ratio, static_cast<double>(epoch));
    case LrSchedule::Kind::StepMultiply: {
      std::size_t hit = 0;
      for (std::size_t m : s.milestones)
        if (m <= epoch) ++hit;
      return s.initial * std::pow(s.factor, static_cast<double>(hit));
    }
    case LrSchedule::Kind::HalveEveryK:
      return s.initial * std::pow(0.5, static_cast<double>(epoch / s.period));
  }
  throw ConfigError("lr schedule: unknown kind");
}

}  // namespace nsat
