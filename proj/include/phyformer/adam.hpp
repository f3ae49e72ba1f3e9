#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "phyformer/tensor.hpp"

namespace phyformer {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// First/second moment estimates, one tensor per parameter.
class AdamState {
 public:
  explicit AdamState(AdamConfig config = {});

  const AdamConfig& config() const { return config_; }
  std::uint64_t step() const { return step_; }
  const std::vector<Tensor>& first_moment() const { return m_; }
  const std::vector<Tensor>& second_moment() const { return v_; }

 private:
  friend void adam_step(std::span<Tensor> params, std::span<const Tensor> grads, AdamState& state,
                        double lr);
  AdamConfig config_;
  std::uint64_t step_ = 0;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
};

// One bias-corrected Adam update in place. Moments are created lazily on the
// first call; later calls must pass parameters of identical shapes.
// `lr` < 0 uses the configured learning rate.
void adam_step(std::span<Tensor> params, std::span<const Tensor> grads, AdamState& state,
               double lr = -1.0);

}  // namespace phyformer
