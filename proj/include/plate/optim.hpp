#pragma once

#include <cstdint>

#include "plate/tensor.hpp"

namespace plate {

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;
};

/// Per-parameter Adam moments. `step` counts completed updates.
struct AdamState {
  Tensor m;
  Tensor v;
  std::uint64_t step = 0;

  static AdamState for_param(const Tensor& param) { return {Tensor::zeros_like(param), Tensor::zeros_like(param), 0}; }
};

/// Bias-corrected Adam with decoupled weight decay: the parameter is first
/// shrunk by (1 - lr * wd), then moved by the Adam delta.
/// Throws std::invalid_argument if param, grad and state shapes disagree.
void adam_step(Tensor& param, const Tensor& grad, AdamState& state, const AdamOptions& options);

}  // namespace plate
