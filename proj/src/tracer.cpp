#include "btd/tracer.hpp"

#include <cmath>
#include <numbers>

namespace btd {

std::string_view to_string(StreamlineStatus s) {
  switch (s) {
    case StreamlineStatus::exited_mask: return "exited_mask";
    case StreamlineStatus::reached_target: return "reached_target";
    case StreamlineStatus::max_steps: return "max_steps";
    case StreamlineStatus::stalled: return "stalled";
  }
  return "unknown";
}

std::optional<StreamlineStatus> parse_status(std::string_view text) {
  for (auto s : {StreamlineStatus::exited_mask, StreamlineStatus::reached_target,
                 StreamlineStatus::max_steps, StreamlineStatus::stalled})
    if (to_string(s) == text) return s;
  return std::nullopt;
}

double Streamline::length() const {
  double len = 0.0;
  for (std::size_t i = 1; i < points.size(); ++i) len += (points[i] - points[i - 1]).norm();
  return len;
}

void TraceConfig::validate() const {
  if (!(step_size > 0.0)) throw InvalidArgument("step size must be positive");
  if (max_steps < 1) throw InvalidArgument("max_steps must be >= 1");
  if (!(min_length >= 0.0)) throw InvalidArgument("min_length must be nonnegative");
  if (!(max_angle_per_step > 0.0)) throw InvalidArgument("max_angle_per_step must be positive");
}

std::size_t TraceStats::total_kept() const {
  std::size_t n = 0;
  for (auto k : kept) n += k;
  return n;
}

std::size_t TraceStats::total_discarded() const {
  std::size_t n = 0;
  for (auto k : discarded) n += k;
  return n;
}

namespace {

constexpr double kStallMagnitude = 1e-12;

std::optional<Vec3> direction(const PolyField& field, const Vec3& p, bool normalize) {
  const Vec3 v = field(p);
  const double n = v.norm();
  if (!(n >= kStallMagnitude)) return std::nullopt;
  return normalize ? Vec3(v / n) : v;
}

// Shared integration loop; `advance` maps (point, previous step) to the next
// point or nullopt (stalled).
template <class Advance>
Streamline integrate(const Vec3& seed, const Mask& mask, const TraceConfig& cfg, Advance&& advance) {
  Streamline s;
  if (!contains_point(mask, seed)) {
    s.status = StreamlineStatus::exited_mask;
    return s;
  }
  const Mask* target = cfg.target_region ? &*cfg.target_region : nullptr;
  auto in_target = [&](const Vec3& p) { return target && contains_point(*target, p); };

  s.points.push_back(seed);
  Vec3 p = seed;
  bool been_outside = !in_target(p);
  bool entered = false;  // inside target after having been outside it
  s.status = StreamlineStatus::max_steps;
  for (int step = 0; step < cfg.max_steps; ++step) {
    const auto next = advance(p);
    if (!next) {
      s.status = StreamlineStatus::stalled;
      break;
    }
    if (!contains_point(mask, *next)) {
      s.status = entered ? StreamlineStatus::reached_target : StreamlineStatus::exited_mask;
      break;
    }
    const bool next_in = in_target(*next);
    if (entered && !next_in) {
      s.status = StreamlineStatus::reached_target;
      break;
    }
    s.points.push_back(*next);
    if (next_in && been_outside) entered = true;
    if (!next_in) been_outside = true;
    p = *next;
  }
  return s;
}

void collect(Tractogram& out, Streamline s, const TraceConfig& cfg, TraceStats* stats) {
  const auto idx = static_cast<std::size_t>(s.status);
  const bool keep = !s.points.empty() && s.length() >= cfg.min_length;
  if (stats) (keep ? stats->kept : stats->discarded)[idx] += 1;
  if (keep) out.streamlines.push_back(std::move(s));
}

}  // namespace

std::optional<Vec3> rk4_step(const PolyField& field, const Vec3& p, double h, bool normalize) {
  if (!(h > 0.0)) throw InvalidArgument("RK4 step must be positive");
  const auto k1 = direction(field, p, normalize);
  if (!k1) return std::nullopt;
  const auto k2 = direction(field, p + 0.5 * h * *k1, normalize);
  if (!k2) return std::nullopt;
  const auto k3 = direction(field, p + 0.5 * h * *k2, normalize);
  if (!k3) return std::nullopt;
  const auto k4 = direction(field, p + h * *k3, normalize);
  if (!k4) return std::nullopt;
  return Vec3(p + h / 6.0 * (*k1 + 2.0 * *k2 + 2.0 * *k3 + *k4));
}

Tractogram trace(const PolyField& field, std::span<const Vec3> seeds, const Mask& mask,
                 const TraceConfig& cfg, TraceStats* stats) {
  cfg.validate();
  Tractogram out;
  out.step_size = cfg.step_size;
  for (const Vec3& seed : seeds) {
    collect(out,
            integrate(seed, mask, cfg,
                      [&](const Vec3& p) { return rk4_step(field, p, cfg.step_size, cfg.normalize_field); }),
            cfg, stats);
  }
  return out;
}

Tractogram trace_baseline(const PeakVolume& vol, std::span<const Vec3> seeds, const Mask& mask,
                          const TraceConfig& cfg, TraceStats* stats) {
  cfg.validate();
  if (!(vol.voxel_size() == mask.voxel_size()))
    throw InvalidArgument("peak volume and mask voxel sizes differ");
  const double cos_limit = std::cos(cfg.max_angle_per_step * std::numbers::pi / 180.0);
  Tractogram out;
  out.step_size = cfg.step_size;
  for (const Vec3& seed : seeds) {
    std::optional<Vec3> previous;
    auto advance = [&](const Vec3& p) -> std::optional<Vec3> {
      const auto v = voxel_of(p, vol.dims(), vol.voxel_size());
      if (!v) return std::nullopt;
      Vec3 d = vol.peak(*v);
      if (!(d.norm() > kStallMagnitude)) return std::nullopt;
      d.normalize();
      if (previous) {
        if (d.dot(*previous) < 0.0) d = -d;
        if (d.dot(*previous) < cos_limit) return std::nullopt;
      }
      previous = d;
      return Vec3(p + cfg.step_size * d);
    };
    collect(out, integrate(seed, mask, cfg, advance), cfg, stats);
  }
  return out;
}

}  // namespace btd
