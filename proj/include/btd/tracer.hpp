#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "btd/estimator.hpp"
#include "btd/grid.hpp"
#include "btd/polyfield.hpp"

namespace btd {

enum class StreamlineStatus { exited_mask, reached_target, max_steps, stalled };

inline constexpr std::size_t kStatusCount = 4;

std::string_view to_string(StreamlineStatus s);
std::optional<StreamlineStatus> parse_status(std::string_view text);

struct Streamline {
  std::vector<Vec3> points;
  StreamlineStatus status = StreamlineStatus::exited_mask;

  double length() const;
};

struct Tractogram {
  std::vector<Streamline> streamlines;
  double step_size = 0.2;
  std::string provenance;
};

struct TraceConfig {
  double step_size = 0.2;  // mm
  int max_steps = 10000;
  double min_length = 0.0;  // mm
  bool normalize_field = true;
  std::optional<Mask> target_region;
  double max_angle_per_step = 60.0;  // degrees, baseline tracker only

  void validate() const;
};

/// Kept/discarded counts by termination status.
struct TraceStats {
  std::array<std::size_t, kStatusCount> kept{};
  std::array<std::size_t, kStatusCount> discarded{};

  std::size_t total_kept() const;
  std::size_t total_discarded() const;
};

/// One classical RK4 step of dp/dt = v(p), or of the unit field v/|v| when
/// `normalize` is set. Returns nullopt (stalled) when |v| < 1e-12 at any stage.
std::optional<Vec3> rk4_step(const PolyField& field, const Vec3& p, double h, bool normalize);

/// Forward integration from each seed until the point leaves the mask,
/// passes through the target region, stalls, or hits max_steps.
///
/// A streamline that enters the target region after having been outside it
/// stops when it leaves the target again (or the mask); its last point is the
/// last one inside the target. Only points inside the mask are emitted.
/// Seeds outside the mask and streamlines shorter than min_length are dropped.
Tractogram trace(const PolyField& field, std::span<const Vec3> seeds, const Mask& mask,
                 const TraceConfig& cfg, TraceStats* stats = nullptr);

/// Deterministic nearest-voxel peak follower (Euler steps). The sign of each
/// peak is chosen to keep a nonnegative dot product with the previous step;
/// the first step uses the stored peak sign. A turn sharper than
/// max_angle_per_step ends the streamline with status `stalled`.
Tractogram trace_baseline(const PeakVolume& vol, std::span<const Vec3> seeds, const Mask& mask,
                          const TraceConfig& cfg, TraceStats* stats = nullptr);

}  // namespace btd
