#ifndef METAGAIT_TEST_SUPPORT_HPP
#define METAGAIT_TEST_SUPPORT_HPP

#include <cmath>
#include <cstdlib>
#include <random>
#include <string>
#include <vector>

#include "metagait/tensor.hpp"

namespace testsupport {

// Random tensor with entries in [lo,hi], nudged away from zero so that
// kinked ops (leaky_relu, relu, clamp) stay finite-difference friendly.
inline metagait::Tensor random_tensor(const metagait::Shape& shape, std::mt19937_64& rng,
                                      double lo = -2.0, double hi = 2.0,
                                      double kink_margin = 1e-3) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(static_cast<std::size_t>(metagait::shape_size(shape)));
  for (double& x : v) {
    do {
      x = dist(rng);
    } while (std::abs(x) < kink_margin);
  }
  return metagait::Tensor::from_values(shape, std::move(v));
}

inline metagait::Tensor random_parameter(const metagait::Shape& shape, std::mt19937_64& rng,
                                         double lo = -2.0, double hi = 2.0,
                                         double kink_margin = 1e-3) {
  metagait::Tensor t = random_tensor(shape, rng, lo, hi, kink_margin);
  return metagait::Tensor::parameter(shape, t.values());
}

inline std::string metagait_bin() {
  const char* p = std::getenv("METAGAIT_BIN");
  return p ? std::string(p) : std::string();
}

}  // namespace testsupport

#endif
