#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <numbers>
#include <string>

#include "mmlg/autodiff.hpp"

namespace mmlg {

// Linear warmup then cosine decay to zero, AdamW with decoupled weight decay.
struct TrainSchedule {
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  double lr = 3e-4;
  std::size_t warmup_steps = 200;
  double weight_decay = 0.1;
  std::uint64_t seed = 0;
  double lambda = 1.0;
  double grad_clip = 0.0;  // global-norm clip; 0 disables
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-6;

  void validate() const {
    require(batch_size >= 1, "schedule: batch_size must be >= 1");
    require(lr > 0 && std::isfinite(lr), "schedule: lr must be positive");
    require(weight_decay >= 0, "schedule: weight_decay must be >= 0");
    require(lambda >= 0, "schedule: lambda must be >= 0");
    require(grad_clip >= 0, "schedule: grad_clip must be >= 0");
    require(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1, "schedule: betas must be in [0, 1)");
    require(adam_eps > 0, "schedule: adam_eps must be positive");
  }

  // Batches per epoch: full batches only, or one batch when the data is
  // smaller than a batch.
  std::size_t batches_per_epoch(std::size_t n) const {
    if (n == 0) return 0;
    return n < batch_size ? 1 : n / batch_size;
  }

  void validate_for(std::size_t n) const {
    validate();
    const std::size_t total = epochs * batches_per_epoch(n);
    require(total == 0 || warmup_steps <= total,
            "schedule: warmup_steps " + std::to_string(warmup_steps) + " exceeds total steps " + std::to_string(total));
  }
};

inline double learning_rate(const TrainSchedule& s, std::size_t step, std::size_t total_steps) {
  if (step < s.warmup_steps) return s.lr * double(step + 1) / double(s.warmup_steps);
  const std::size_t span = total_steps > s.warmup_steps ? total_steps - s.warmup_steps : 1;
  const double progress = std::min(1.0, double(step - s.warmup_steps) / double(span));
  return 0.5 * s.lr * (1.0 + std::cos(std::numbers::pi * progress));
}

template <typename T>
class AdamW {
 public:
  explicit AdamW(const TrainSchedule& s) : beta1_(s.beta1), beta2_(s.beta2), eps_(s.adam_eps), wd_(s.weight_decay) {}

  using Frozen = std::function<bool(const std::string&)>;

  // One update of every non-frozen parameter from its accumulated gradient.
  void step(ParamStore<T>& store, double lr, const Frozen& frozen = {}) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, double(t_));
    const double c2 = 1.0 - std::pow(beta2_, double(t_));
    for (auto& [name, p] : store) {
      if (frozen && frozen(name)) continue;
      auto [it, fresh] = state_.try_emplace(name);
      auto& st = it->second;
      if (fresh) {
        st.m.assign(p.value.size(), 0.0);
        st.v.assign(p.value.size(), 0.0);
      }
      const double decay = p.decay ? lr * wd_ : 0.0;
      auto& w = p.value.storage();
      const auto& g = p.grad.storage();
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = g[i];
        st.m[i] = beta1_ * st.m[i] + (1.0 - beta1_) * gi;
        st.v[i] = beta2_ * st.v[i] + (1.0 - beta2_) * gi * gi;
        const double update = (st.m[i] / c1) / (std::sqrt(st.v[i] / c2) + eps_);
        w[i] = static_cast<T>(double(w[i]) - decay * double(w[i]) - lr * update);
      }
    }
  }

  std::size_t steps() const noexcept { return t_; }

 private:
  struct State {
    std::vector<double> m, v;
  };
  double beta1_, beta2_, eps_, wd_;
  std::size_t t_ = 0;
  std::map<std::string, State> state_;
};

template <typename T>
double grad_norm(const ParamStore<T>& store) {
  double ss = 0;
  for (const auto& [_, p] : store)
    for (auto v : p.grad.storage()) ss += double(v) * double(v);
  return std::sqrt(ss);
}

template <typename T>
void clip_grad_norm(ParamStore<T>& store, double max_norm) {
  const double n = grad_norm(store);
  if (max_norm <= 0 || n <= max_norm) return;
  const T s = static_cast<T>(max_norm / n);
  for (auto& [_, p] : store)
    for (auto& v : p.grad.storage()) v *= s;
}

}  // namespace mmlg
