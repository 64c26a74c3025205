#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "btd/grid.hpp"
#include "btd/polyfield.hpp"

namespace btd {

/// Per-voxel peak directions with the bundle mask they are fitted over.
struct PeakVolume {
  Mask mask;
  std::vector<Vec3> peaks;                     // one per voxel, unit or zero
  std::vector<std::vector<Vec3>> extra_peaks;  // empty, or one list per voxel

  PeakVolume() = default;
  explicit PeakVolume(Mask m);

  const Dims& dims() const { return mask.dims(); }
  const Vec3& voxel_size() const { return mask.voxel_size(); }
  Vec3& peak(const Voxel& v) { return peaks[dims().linear(v)]; }
  const Vec3& peak(const Voxel& v) const { return peaks[dims().linear(v)]; }

  /// Throws InvalidArgument when a masked voxel has a zero or non-unit peak.
  void validate() const;
};

enum class ConstraintMode {
  exact_divergence_free,  // every coefficient of the divergence polynomial is zero
  sampled,                // divergence vanishes at the masked voxel centers only
};

struct SignAlignment {
  enum class Mode { propagation, reference_axis };
  Mode mode = Mode::propagation;
  Vec3 axis = Vec3::UnitX();
};

struct MultiPeakPolicy {
  enum class Kind { primary_only, nearest_to_field };
  Kind kind = Kind::primary_only;
  int iterations = 2;
};

struct FitConfig {
  int order = 5;
  ConstraintMode constraint = ConstraintMode::exact_divergence_free;
  SignAlignment sign;
  /// Ridge weight on ||A||^2. Unset means 1e-8 times the voxel count.
  std::optional<double> regularization;
  MultiPeakPolicy multi_peak;

  double ridge_for(std::size_t voxels) const {
    return regularization ? *regularization : 1e-8 * static_cast<double>(voxels);
  }
  void validate() const;
};

struct FitReport {
  double residual = 0.0;        // ||G - A C||_F^2 at the solution
  double max_divergence = 0.0;  // max |div v| over masked voxel centers
  double condition_estimate = 0.0;
  int iterations_used = 0;
  std::size_t voxels = 0;
  std::size_t free_parameters = 0;  // dimension of the constraint null space
  int rank = 0;
};

/// +1/-1 per voxel; 0 outside the mask.
struct SignField {
  Grid3<std::int8_t> signs;
  std::size_t unreached = 0;  // masked voxels aligned by the axis fallback

  std::int8_t sign(const Voxel& v) const { return signs.at(v); }
};

SignField align_signs(const PeakVolume& vol, const FitConfig& cfg, const Mask& seed_region);

/// Peaks multiplied by their signs.
PeakVolume apply_signs(const PeakVolume& vol, const SignField& signs);

struct LinearSystem {
  Eigen::MatrixXd design;  // terms x voxels: C_n evaluated at each voxel center
  Eigen::MatrixXd target;  // 3 x voxels: sign-aligned peaks G
  CoordFrame frame;
  Vec3 voxel_size = Vec3::Ones();
  std::vector<Voxel> voxels;
};

LinearSystem assemble_system(const PeakVolume& vol, const SignField& signs, const FitConfig& cfg);
LinearSystem assemble_system(const PeakVolume& vol, const SignField& signs, const FitConfig& cfg,
                             const CoordFrame& frame);

struct SolveInfo {
  double condition_estimate = 0.0;
  int rank = 0;
  std::size_t free_parameters = 0;
};

/// Minimizes ||target - A design||_F^2 + ridge ||A||_F^2 subject to
/// constraint * vec(A) = 0, with vec(A) the row-major flattening.
///
/// The constraint is eliminated through an orthonormal null-space basis N
/// (vec(A) = N z); the data term is compressed by a Householder QR of the
/// design, and the reduced problem is solved with a complete orthogonal
/// decomposition, which yields the minimum-norm z when rank deficient.
CoeffMatrix solve_constrained(const Eigen::MatrixXd& design, const Eigen::MatrixXd& target,
                              const Eigen::MatrixXd& constraint, double ridge,
                              SolveInfo* info = nullptr);

/// Orthonormal basis of the null space of `m` (columns).
Eigen::MatrixXd null_space(const Eigen::MatrixXd& m, double rel_tol = 1e-10);

/// Constraint rows for the configured mode, acting on vec(A).
Eigen::MatrixXd constraint_matrix(const FitConfig& cfg, const LinearSystem& sys);

struct FitResult {
  PolyField field;
  FitReport report;
};

FitResult fit_btd(const PeakVolume& vol, const Mask& seed_region, const FitConfig& cfg);

double fit_residual(const PolyField& field, const LinearSystem& sys);

}  // namespace btd
