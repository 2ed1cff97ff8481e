#include "ibd/optim.hpp"

#include <cmath>

#include "ibd/error.hpp"

namespace ibd {

void adam_step(ParamSet& params, const ParamSet& grads, AdamState& state) {
  for (const auto& [name, g] : grads) {
    require(params.contains(name), ErrorKind::Invalid, "gradient for unknown parameter '" + name + "'");
    require(params.at(name).shape() == g.shape(), ErrorKind::Shape,
            "gradient shape " + shape_str(g.shape()) + " does not match parameter '" + name + "'");
    require(g.all_finite(), ErrorKind::Numeric, "non-finite gradient for parameter '" + name + "'");
  }

  const auto& c = state.config;
  const std::int64_t t = ++state.step;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(t));

  for (const auto& [name, g] : grads) {
    Tensor& p = params.at(name);
    if (!state.m.contains(name)) {
      state.m.add(name, Tensor(p.shape()));
      state.v.add(name, Tensor(p.shape()));
    }
    Tensor& m = state.m.at(name);
    Tensor& v = state.v.at(name);
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] -= c.lr * mhat / (std::sqrt(vhat) + c.eps);
    }
  }
}

}  // namespace ibd
