#pragma once

#include "filo/autodiff.hpp"
#include "filo/types.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

namespace filo::test {

inline Mat random_mat(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  Mat m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = d(rng);
  return m;
}

inline Vec random_unit(Eigen::Index n, std::mt19937_64& rng) {
  Vec v = random_mat(n, 1, rng);
  return v / v.norm();
}

inline double rel_err(double a, double n) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-6});
}

// Worst relative error between backprop and central differences of a scalar
// function over `probes` random coordinates of each leaf.
inline double max_fd_error(std::vector<ad::Var>& leaves, const std::function<ad::Var()>& f, int probes,
                           std::mt19937_64& rng, double h = 1e-6) {
  for (auto& l : leaves) l.zero_grad();
  ad::backward(f());
  double worst = 0.0;
  for (auto& l : leaves) {
    const Mat g = l.grad();
    std::uniform_int_distribution<Eigen::Index> pick(0, l.value().size() - 1);
    for (int t = 0; t < probes; ++t) {
      const Eigen::Index k = pick(rng);
      double& x = l.mutable_value().data()[k];
      const double keep = x;
      x = keep + h;
      const double up = f().value()(0, 0);
      x = keep - h;
      const double down = f().value()(0, 0);
      x = keep;
      worst = std::max(worst, rel_err(g.data()[k], (up - down) / (2 * h)));
    }
  }
  return worst;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("filo_test_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace filo::test
