#pragma once

// Dense Lagrange-multiplier solve of the ridge-regularized, divergence
// constrained least-squares problem. Shared by the estimator unit test and
// the acceptance binary as an independent check on the null-space solver.

#include <Eigen/Dense>

#include <algorithm>
#include <random>
#include <vector>

#include "btd/estimator.hpp"

namespace btd::oracle {

/// Minimizes ||target - A design||^2 + ridge ||A||^2 subject to
/// constraint * vec(A) = 0 by solving the KKT system
///   [2 H  C^T] [x]   [2 b]
///   [C    0  ] [l] = [0  ]
/// with H = blockdiag(design design^T + ridge I) and b the stacked design * target_c.
/// Solved with full-pivot LU in extended precision.
inline CoeffMatrix kkt_solve(const Eigen::MatrixXd& design, const Eigen::MatrixXd& target,
                             const Eigen::MatrixXd& constraint, double ridge) {
  using MatL = Eigen::Matrix<long double, Eigen::Dynamic, Eigen::Dynamic>;
  using VecL = Eigen::Matrix<long double, Eigen::Dynamic, 1>;
  const Eigen::Index t = design.rows();
  const Eigen::Index m = constraint.rows();
  const Eigen::Index n = 3 * t;
  const MatL d = design.cast<long double>();
  const MatL h = d * d.transpose() + static_cast<long double>(ridge) * MatL::Identity(t, t);
  MatL kkt = MatL::Zero(n + m, n + m);
  VecL rhs = VecL::Zero(n + m);
  for (Eigen::Index c = 0; c < 3; ++c) {
    kkt.block(c * t, c * t, t, t) = 2.0L * h;
    rhs.segment(c * t, t) = 2.0L * d * target.row(c).transpose().cast<long double>();
  }
  kkt.block(0, n, n, m) = constraint.transpose().cast<long double>();
  kkt.block(n, 0, m, n) = constraint.cast<long double>();
  const VecL x = Eigen::FullPivLU<MatL>(kkt).solve(rhs);
  return PolyField::unflatten(x.head(n).cast<double>(), static_cast<std::size_t>(t));
}

struct KktInstance {
  int order = 1;
  PeakVolume vol;
  Mask seeds;
};

/// Random peaks on a random voxel subset of an 8 x 8 x 4 grid.
inline KktInstance random_instance(std::mt19937_64& rng, int max_order, int max_voxels) {
  KktInstance inst;
  inst.order = 1 + static_cast<int>(rng() % static_cast<unsigned>(max_order));
  const int voxels = 4 + static_cast<int>(rng() % static_cast<unsigned>(max_voxels - 3));
  Mask mask({8, 8, 4}, Vec3(1.0, 1.0, 1.5));
  std::vector<std::size_t> order(mask.voxel_count());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  for (int i = 0; i < voxels; ++i) mask[order[static_cast<std::size_t>(i)]] = 1;
  inst.vol = PeakVolume(mask);
  std::normal_distribution<double> g;
  for (std::size_t i = 0; i < mask.voxel_count(); ++i)
    if (mask[i]) inst.vol.peaks[i] = Vec3(g(rng), g(rng), g(rng)).normalized();
  inst.seeds = Mask(mask.dims(), mask.voxel_size());
  inst.seeds[order[0]] = 1;
  return inst;
}

}  // namespace btd::oracle
