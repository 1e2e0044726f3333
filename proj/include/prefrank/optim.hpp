#pragma once

#include <cstdint>

#include "prefrank/tensor.hpp"

namespace prefrank::nk {

struct AdamWConfig {
  double learning_rate = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Moment buffers and step count for decoupled-weight-decay Adam.
struct OptimState {
  AdamWConfig config;
  ParamSet first_moment;
  ParamSet second_moment;
  std::uint64_t step = 0;
};

OptimState make_optim_state(const ParamSet& params, const AdamWConfig& config);

/// One AdamW update. Decay is applied multiplicatively (p *= 1 - lr*wd)
/// before the moment update. Tensors with requires_grad == false are left
/// alone. Throws NumericError on a non-finite gradient, leaving params and
/// state untouched.
void opt_step(ParamSet& params, const ParamSet& grads, OptimState& state);

/// In-place params += scale * other, over matching names.
void axpy(ParamSet& params, const ParamSet& other, double scale);
void scale(ParamSet& params, double factor);
double l2_norm(const ParamSet& params);

}  // namespace prefrank::nk
