#pragma once

#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "btd/estimator.hpp"
#include "btd/grid.hpp"
#include "btd/tracer.hpp"

namespace btd {

enum class PhantomKind { hough, sine, circle };

std::string_view to_string(PhantomKind kind);
std::optional<PhantomKind> parse_phantom_kind(std::string_view text);

inline constexpr double kInfiniteSnr = std::numeric_limits<double>::infinity();

struct PhantomSpec {
  PhantomKind kind = PhantomKind::hough;
  double alpha = 0.3;  // sine amplitude parameter, (0, 1]
  double r1 = 10.0;    // circle inner radius, mm
  double r2 = 20.0;    // circle outer radius, mm
  Dims dims{60, 60, 6};
  Vec3 voxel_size = Vec3::Ones();
  double snr = kInfiniteSnr;
  double bvalue = 1000.0;  // s/mm^2
  int n_gradients = 78;
  int seed_count = 2000;

  /// Sizes and seed counts used for each phantom kind.
  static PhantomSpec defaults(PhantomKind kind);
  void validate() const;
};

/// Analytic unit fiber direction of a phantom.
class DirectionModel {
 public:
  virtual ~DirectionModel() = default;
  /// Unit tangent at p, or nullopt when p is outside the bundle.
  virtual std::optional<Vec3> direction(const Vec3& p) const = 0;
  /// Whether p lies in the bundle's start region (seeds).
  virtual bool in_seed(const Vec3& p) const = 0;
  /// Whether p lies in the bundle's end region (target).
  virtual bool in_target(const Vec3& p) const = 0;
  virtual std::vector<Streamline> ground_truth(const Vec3& voxel_size, int slices) const = 0;
  virtual std::string describe() const = 0;
};

struct Phantom {
  PhantomSpec spec;
  std::shared_ptr<const DirectionModel> model;
  Mask mask;
  Mask seed_region;
  Mask target_region;
  Tractogram ground_truth;
  Vec3 center = Vec3::Zero();  // circle center (also the volume center for others)
  std::string provenance;

  std::optional<Vec3> direction(const Vec3& p) const { return model->direction(p); }
};

Phantom make_phantom(const PhantomSpec& spec);

/// Deterministic seed placement. With count <= voxels, seeds are voxel
/// centers spread evenly over the region's linear order. Otherwise each voxel
/// receives an in-plane rank-1 lattice of points (shifted per voxel by a
/// low-discrepancy sequence) on its z mid-plane.
std::vector<Vec3> seed_points(const Mask& region, int count);

/// Peak volume holding the analytic directions at masked voxel centers.
PeakVolume analytic_peaks(const Phantom& ph);

struct GradientTable {
  std::vector<Vec3> directions;
  std::vector<double> bvalues;

  std::size_t size() const { return directions.size(); }
};

/// Hemispherical Fibonacci set of unit directions, all at b-value `b`.
GradientTable fibonacci_gradients(int n, double b);

struct DwiVolume {
  GradientTable gradients;
  Grid3<float> signals;  // one channel per gradient
  double s0 = 1.0;
};

inline constexpr double kAxialDiffusivity = 1.7e-3;   // mm^2/s
inline constexpr double kRadialDiffusivity = 0.3e-3;  // mm^2/s
inline constexpr double kIsotropicDiffusivity = 0.7e-3;

/// Noise-free single-tensor signal S0 exp(-b g^T D g) for fiber direction d.
double tensor_signal(double s0, double b, const Vec3& g, const Vec3& fiber);

/// Magnitude of a complex Gaussian-perturbed signal with per-channel sigma.
double rician_sample(double signal, double sigma, std::mt19937_64& rng);

/// Per-voxel generator derived from the run seed and the voxel index, so the
/// result is independent of evaluation order.
std::mt19937_64 voxel_rng(std::uint64_t rng_seed, std::uint64_t voxel_index);

DwiVolume simulate_dwi(const Phantom& ph, const PhantomSpec& spec, std::uint64_t rng_seed);

struct PeakFit {
  PeakVolume peaks;
  Mask low_quality;        // non-positive-definite or FA < 0.1
  std::vector<double> fa;  // per voxel, 0 outside the mask
};

/// Log-linear least-squares tensor fit in every masked voxel; the primary
/// peak is the principal eigenvector.
PeakFit fit_peaks(const DwiVolume& dwi, const Mask& mask);

/// Axis angle in degrees between two directions (sign ignored).
double axis_angle_deg(const Vec3& a, const Vec3& b);

}  // namespace btd
