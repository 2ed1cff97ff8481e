#pragma once

#include <cstdint>

#include "ibd/tensor.hpp"

namespace ibd {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig config;
  ParamSet m;  // first moments, same names/shapes as the parameters
  ParamSet v;  // second moments
  std::int64_t step = 0;

  explicit AdamState(AdamConfig cfg = {}) : config(cfg) {}
};

// One bias-corrected Adam update of every parameter that has a gradient entry.
// Throws ErrorKind::Numeric (leaving params and state untouched) if any gradient is non-finite.
void adam_step(ParamSet& params, const ParamSet& grads, AdamState& state);

}  // namespace ibd
