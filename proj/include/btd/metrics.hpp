#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>

#include "btd/grid.hpp"
#include "btd/tracer.hpp"

namespace btd {

struct ScoreReport {
  double vc = 0.0;
  double ol = 0.0;
  double or_ = 0.0;
  std::optional<double> deviation;  // voxels, circle phantoms only
  std::size_t n_streamlines = 0;
  std::size_t n_valid = 0;

  std::string to_json() const;
  static ScoreReport from_json(const std::string& text);
  static std::string csv_header();  // "vc,ol,or,deviation,n_streamlines,n_valid"
  std::string csv_row() const;
};

/// Whether a streamline starts in `seed_region`, ends in `target_region` and
/// keeps every point inside `dilated_mask`.
bool is_valid_connection(const Streamline& s, const Mask& seed_region, const Mask& target_region,
                         const Mask& dilated_mask);

struct VcScore {
  double vc = 0.0;
  std::size_t n_valid = 0;
  std::size_t n_streamlines = 0;
};

/// Fraction of valid connections: streamlines that start in the seed region,
/// end in the target region and stay inside `mask` dilated by one voxel
/// (unclipped at the volume faces). An empty tractogram scores 0 with a warning.
VcScore score_vc(const Tractogram& t, const Mask& seed_region, const Mask& target_region,
                 const Mask& mask);

struct OverlapScore {
  double ol = 0.0;
  double or_ = 0.0;
};

/// Overlap and overreach by point visitation. OR counts visited voxels
/// outside the truth mask dilated by `eval_dilation` (6-connected).
OverlapScore score_ol_or(const Tractogram& t, const Mask& truth_mask, int eval_dilation = 1);

/// Voxels visited by at least one streamline point.
Mask visited_voxels(const Tractogram& t, const Dims& dims, const Vec3& voxel_size);

struct DeviationOptions {
  /// Sum the signed radial errors instead of their magnitudes.
  bool signed_error = false;
  /// When non-empty, each streamline must start at one of these seeds
  /// (within 1e-6 mm); others are excluded with a warning.
  std::span<const Vec3> seeds;
};

/// Mean in-plane radial error per point, in units of the x voxel size. Each
/// streamline's reference radius is the in-plane distance of its first point
/// (the seed) from `center`. Returns nullopt when no streamline contributes.
std::optional<double> score_deviation(const Tractogram& t, const Vec3& center, const Vec3& voxel_size,
                                      const DeviationOptions& opts = {});

}  // namespace btd
