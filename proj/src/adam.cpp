#include "cpcser/adam.hpp"

#include <cmath>
#include <stdexcept>

namespace cpcser {

void adam_update(std::span<double> param, std::span<const double> grad, AdamMoments& moments,
                 const AdamOptions& options, std::uint64_t step) {
  if (grad.size() != param.size()) throw std::invalid_argument("adam: gradient size does not match parameter");
  if (step == 0) throw std::invalid_argument("adam: step index is 1-based");
  if (moments.first.size() != param.size()) moments.first.assign(param.size(), 0.0);
  if (moments.second.size() != param.size()) moments.second.assign(param.size(), 0.0);

  const double b1 = options.beta1, b2 = options.beta2;
  const double correction1 = 1.0 - std::pow(b1, static_cast<double>(step));
  const double correction2 = 1.0 - std::pow(b2, static_cast<double>(step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    double g = grad[i];
    if (!options.decoupled_weight_decay) g += options.weight_decay * param[i];
    moments.first[i] = b1 * moments.first[i] + (1.0 - b1) * g;
    moments.second[i] = b2 * moments.second[i] + (1.0 - b2) * g * g;
    const double m_hat = moments.first[i] / correction1;
    const double v_hat = moments.second[i] / correction2;
    if (options.decoupled_weight_decay) param[i] -= options.lr * options.weight_decay * param[i];
    param[i] -= options.lr * m_hat / (std::sqrt(v_hat) + options.eps);
  }
}

Adam::Adam(std::vector<NamedTensor> params, AdamOptions options)
    : params_(std::move(params)), moments_(params_.size()), options_(options) {}

void Adam::step() {
  for (const auto& p : params_) {
    for (double g : p.tensor.grad()) {
      if (!std::isfinite(g)) throw std::runtime_error("adam: non-finite gradient in parameter '" + p.name + "'");
    }
  }
  ++step_;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& t = params_[i].tensor;
    if (!t.has_grad()) continue;  // parameter did not take part in this step's graph
    adam_update(t.mutable_data(), t.grad(), moments_[i], options_, step_);
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

}  // namespace cpcser
