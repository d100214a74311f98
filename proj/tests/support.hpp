#pragma once

// Seeded random instances and comparison helpers shared by the unit tests.

#include <cmath>
#include <memory>
#include <random>

#include <Eigen/Dense>

#include "klr/metric.hpp"
#include "klr/random.hpp"

namespace klr::test {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

inline std::mt19937_64 rng_for(std::uint64_t seed) { return make_rng(seed, stream_id("unit-test")); }

inline Vec random_vector(Eigen::Index n, std::mt19937_64& rng) { return random_normal(n, 1, rng); }

/// Well-conditioned SPD matrix: A A^T / n + I.
inline Mat random_spd(Eigen::Index n, std::mt19937_64& rng) {
  const Mat a = random_normal(n, n, rng);
  Mat s = a * a.transpose() / static_cast<double>(n) + Mat::Identity(n, n);
  return 0.5 * (s + s.transpose());
}

inline MetricSpace<double> random_metric(Eigen::Index n, std::mt19937_64& rng) {
  return MetricSpace<double>::from_inverse_covariance(random_spd(n, rng));
}

inline std::shared_ptr<const MetricSpace<double>> shared_metric(Eigen::Index n, std::mt19937_64& rng) {
  return std::make_shared<const MetricSpace<double>>(random_metric(n, rng));
}

inline double rel_err(const Mat& a, const Mat& b) {
  const double scale = std::max(a.norm(), b.norm());
  return scale == 0.0 ? 0.0 : (a - b).norm() / scale;
}

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace klr::test
