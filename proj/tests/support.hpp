#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "cpcser/tensor.hpp"

namespace cpcser::testing {

inline Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                            bool requires_grad = true) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor::from_data(shape, std::move(v), requires_grad);
}

inline double norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

/// Largest norm-wise relative error ||g - g_fd|| / max(||g||, ||g_fd||) over the
/// inputs, comparing backward() against central differences of a scalar loss.
inline double gradcheck(const std::function<Tensor(const std::vector<Tensor>&)>& loss_fn,
                        std::vector<Tensor> inputs, double eps = 1e-6) {
  for (auto& t : inputs) t.zero_grad();
  Tensor loss = loss_fn(inputs);
  loss.backward();
  double worst = 0.0;
  for (auto& t : inputs) {
    if (!t.requires_grad()) continue;
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) analytic.assign(t.grad().begin(), t.grad().end());
    std::vector<double> numeric(t.numel());
    auto values = t.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double keep = values[i];
      double up, down;
      {
        NoGradGuard no_grad;
        values[i] = keep + eps;
        up = loss_fn(inputs).item();
        values[i] = keep - eps;
        down = loss_fn(inputs).item();
      }
      values[i] = keep;
      numeric[i] = (up - down) / (2.0 * eps);
    }
    std::vector<double> diff(analytic.size());
    for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = analytic[i] - numeric[i];
    const double scale = std::max({norm(analytic), norm(numeric), 1e-12});
    worst = std::max(worst, norm(diff) / scale);
  }
  return worst;
}

/// sum(f(x) * R) for a fixed random R, so every output element feeds the loss.
inline std::function<Tensor(const std::vector<Tensor>&)> weighted(
    std::function<Tensor(const std::vector<Tensor>&)> f, std::uint64_t seed = 99) {
  return [f = std::move(f), seed](const std::vector<Tensor>& in) {
    Tensor y = f(in);
    std::mt19937_64 rng(seed);
    Tensor r = random_tensor(y.shape(), rng, -1.0, 1.0, false);
    return sum(y * r);
  };
}

}  // namespace cpcser::testing
