#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cpcser/tensor.hpp"

namespace cpcser {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct AdamOptions {
  double lr = 2e-4;
  double weight_decay = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// false: L2 term added to the gradient (classic Adam). true: AdamW-style decay.
  bool decoupled_weight_decay = false;
};

struct AdamMoments {
  std::vector<double> first;
  std::vector<double> second;
};

/// One Adam update of a single parameter buffer. `step` is the 1-based step
/// index used for bias correction.
void adam_update(std::span<double> param, std::span<const double> grad, AdamMoments& moments,
                 const AdamOptions& options, std::uint64_t step);

/// Adam over a named parameter set. Gradients are read from each tensor's grad buffer.
class Adam {
 public:
  Adam(std::vector<NamedTensor> params, AdamOptions options);

  /// Throws std::runtime_error naming the parameter if any gradient is non-finite;
  /// in that case no parameter is modified.
  void step();
  void zero_grad();

  std::uint64_t steps_taken() const { return step_; }
  const AdamOptions& options() const { return options_; }
  const std::vector<NamedTensor>& params() const { return params_; }

 private:
  std::vector<NamedTensor> params_;
  std::vector<AdamMoments> moments_;
  AdamOptions options_;
  std::uint64_t step_ = 0;
};

}  // namespace cpcser
