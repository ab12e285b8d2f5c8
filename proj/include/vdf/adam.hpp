#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "vdf/unet.hpp"

namespace vdf {

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  void validate() const {
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
      throw ConfigError("Adam betas must lie in [0, 1)");
    if (!(epsilon > 0.0)) throw ConfigError("Adam epsilon must be positive");
    if (!(learning_rate >= 0.0)) throw ConfigError("learning rate must be non-negative");
  }
};

/// Bias-corrected Adam over the trainable entries of a WeightStore.  Moments
/// are held in double and created lazily on the first step.
template <typename Scalar>
class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) { config_.validate(); }

  const AdamConfig& config() const { return config_; }
  std::uint64_t step_count() const { return t_; }

  /// Applies one update from the gradients held in each parameter's grad
  /// slot (a missing slot counts as a zero gradient).
  void step(WeightStore<Scalar>& store) {
    auto& entries = store.entries();
    if (m_.empty()) {
      for (const auto& e : entries) {
        m_.push_back(Eigen::ArrayXd::Zero(e.value.size()));
        v_.push_back(Eigen::ArrayXd::Zero(e.value.size()));
      }
    }
    if (m_.size() != entries.size()) throw UsageError("optimizer state does not match the weight store");
    ++t_;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < entries.size(); ++i) {
      auto& e = entries[i];
      if (m_[i].size() != e.value.size()) throw UsageError("gradient shape mismatch for '" + e.name + "'");
      if (!e.trainable || !e.value.has_grad()) continue;
      const Eigen::ArrayXd g = e.value.grad().template cast<double>();
      m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * g;
      v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * g.square();
      const Eigen::ArrayXd update = config_.learning_rate * (m_[i] / bc1) / ((v_[i] / bc2).sqrt() + config_.epsilon);
      e.value.data() = (e.value.data().template cast<double>() - update).template cast<Scalar>();
    }
  }

 private:
  AdamConfig config_;
  std::uint64_t t_ = 0;
  std::vector<Eigen::ArrayXd> m_;
  std::vector<Eigen::ArrayXd> v_;
};

/// One Adam update using explicit gradients (one tensor per store entry).
template <typename Scalar>
void adam_step(WeightStore<Scalar>& store, const std::vector<Tensor5<Scalar>>& grads, Adam<Scalar>& optimizer) {
  auto& entries = store.entries();
  if (grads.size() != entries.size())
    throw UsageError("expected " + std::to_string(entries.size()) + " gradients, got " +
                     std::to_string(grads.size()));
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (grads[i].shape() != entries[i].value.shape())
      throw UsageError("gradient shape mismatch for '" + entries[i].name + "'");
    entries[i].value.grad() = grads[i].data();
  }
  optimizer.step(store);
}

}  // namespace vdf
