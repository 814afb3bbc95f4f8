#include "plate/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace plate {

void adam_step(Tensor& param, const Tensor& grad, AdamState& state, const AdamOptions& options) {
  if (!param.same_shape(grad) || !param.same_shape(state.m) || !param.same_shape(state.v)) {
    throw std::invalid_argument("adam_step: parameter " + shape_string(param.shape()) + ", gradient " +
                                shape_string(grad.shape()) + " and moments must share a shape");
  }
  state.step += 1;
  const double b1 = options.beta1, b2 = options.beta2;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(b1, t);
  const double c2 = 1.0 - std::pow(b2, t);
  const double lr = options.learning_rate;
  const double decay = 1.0 - lr * options.weight_decay;
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
    state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
    const double m_hat = state.m[i] / c1;
    const double v_hat = state.v[i] / c2;
    if (options.weight_decay != 0.0) param[i] *= decay;
    param[i] -= lr * m_hat / (std::sqrt(v_hat) + options.epsilon);
  }
}

}  // namespace plate
