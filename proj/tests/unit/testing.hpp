#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <unistd.h>

#include "doctest.h"

#include "c2l/rng.hpp"
#include "c2l/tensor.hpp"

namespace c2l::testing {

// Fresh directory under the system temp dir, removed on scope exit.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() / ("c2l-test-" + tag + "-" + std::to_string(::getpid()));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline Tensor64 random64(Shape shape, Rng& rng, bool requires_grad = false, double scale = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = scale * rng.normal();
  return Tensor64(std::move(shape), std::move(v), requires_grad);
}

inline Tensor random32(Shape shape, Rng& rng, bool requires_grad = false, float scale = 1.0f) {
  std::vector<float> v(shape_numel(shape));
  for (auto& x : v) x = scale * static_cast<float>(rng.normal());
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Fourth-order central difference:
// f'(x) ~ (8 (f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h.
// Truncation error is O(h^4), so h can be large enough to keep roundoff small.
inline double central_difference(const std::function<double(double)>& f, double x, double h) {
  return (8 * (f(x + h) - f(x - h)) - (f(x + 2 * h) - f(x - 2 * h))) / (12 * h);
}

// Checks the analytic gradients left in `leaves` by backward against central
// differences. Returns the max relative error |a - n| / max(|a| + |n|, floor).
inline double grad_check(std::vector<Tensor64*> leaves, const std::function<Tensor64()>& loss,
                         double h = 1e-3, double floor = 1e-8) {
  for (auto* l : leaves) l->zero_grad();
  loss().backward();
  double worst = 0;
  for (auto* leaf : leaves) {
    REQUIRE(leaf->has_grad());
    const std::vector<double> analytic(leaf->grad().begin(), leaf->grad().end());
    auto vals = leaf->mutable_values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double keep = vals[i];
      double numeric;
      {
        NoGradGuard ng;
        numeric = central_difference(
            [&](double v) {
              vals[i] = v;
              return loss().item();
            },
            keep, h);
      }
      vals[i] = keep;
      const double err = std::abs(analytic[i] - numeric) / std::max(std::abs(analytic[i]) + std::abs(numeric), floor);
      worst = std::max(worst, err);
    }
  }
  return worst;
}

inline double grad_check(Tensor64& leaf, const std::function<Tensor64()>& loss, double h = 1e-3,
                         double floor = 1e-8) {
  return grad_check(std::vector<Tensor64*>{&leaf}, loss, h, floor);
}

}  // namespace c2l::testing
