#include "prefrank/optim.hpp"

#include <cmath>

namespace prefrank::nk {

OptimState make_optim_state(const ParamSet& params, const AdamWConfig& config) {
  OptimState s;
  s.config = config;
  s.first_moment = params.zeros_like();
  s.second_moment = params.zeros_like();
  return s;
}

void opt_step(ParamSet& params, const ParamSet& grads, OptimState& state) {
  for (const auto& [name, g] : grads.tensors()) {
    if (!g.all_finite()) throw NumericError("opt_step: non-finite gradient for '" + name + "'");
    if (params.get(name).shape() != g.shape() && params.get(name).size() != g.size()) {
      throw ShapeError("opt_step: gradient shape " + shape_str(g.shape()) + " does not match parameter '" + name +
                       "' " + shape_str(params.get(name).shape()));
    }
  }
  const AdamWConfig& c = state.config;
  state.step += 1;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  const double decay = 1.0 - c.learning_rate * c.weight_decay;
  for (auto& [name, p] : params.tensors()) {
    if (!p.requires_grad || !grads.contains(name)) continue;
    const auto g = grads.get(name).data();
    auto m = state.first_moment.get(name).data();
    auto v = state.second_moment.get(name).data();
    auto w = p.data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      w[i] *= decay;
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= c.learning_rate * mhat / (std::sqrt(vhat) + c.eps);
    }
  }
}

void axpy(ParamSet& params, const ParamSet& other, double scale_by) {
  for (auto& [name, p] : params.tensors()) {
    if (!other.contains(name)) continue;
    auto dst = p.data();
    auto src = other.get(name).data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += scale_by * src[i];
  }
}

void scale(ParamSet& params, double factor) {
  for (auto& [_, p] : params.tensors())
    for (auto& v : p.data()) v *= factor;
}

double l2_norm(const ParamSet& params) {
  double s = 0.0;
  for (const auto& [_, p] : params.tensors())
    for (double v : p.data()) s += v * v;
  return std::sqrt(s);
}

}  // namespace prefrank::nk
