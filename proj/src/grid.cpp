#include "btd/grid.hpp"

#include <array>
#include <cmath>
#include <iostream>

namespace btd {

void log_warning(const std::string& message) { std::cerr << "warning: " << message << '\n'; }
void log_info(const std::string& message) { std::cerr << message << '\n'; }

std::optional<Voxel> voxel_of(const Vec3& p, const Dims& dims, const Vec3& voxel_size) {
  if (!p.allFinite()) return std::nullopt;
  const Vec3 q = p.cwiseQuotient(voxel_size);
  // Guard the int conversion before flooring far-away points.
  if ((q.array().abs() > 1e9).any()) return std::nullopt;
  const Voxel v{static_cast<int>(std::floor(q.x())), static_cast<int>(std::floor(q.y())),
                static_cast<int>(std::floor(q.z()))};
  if (!dims.contains(v)) return std::nullopt;
  return v;
}

bool contains_point(const Mask& mask, const Vec3& p) {
  const Voxel& o = mask.origin();
  const Vec3 shift(o.x * mask.voxel_size().x(), o.y * mask.voxel_size().y(),
                   o.z * mask.voxel_size().z());
  const auto v = voxel_of(p - shift, mask.dims(), mask.voxel_size());
  return v && mask.at(*v) != 0;
}

std::vector<Voxel> mask_voxels(const Mask& mask) {
  std::vector<Voxel> out;
  for (std::size_t i = 0; i < mask.voxel_count(); ++i)
    if (mask[i]) out.push_back(mask.dims().voxel(i));
  return out;
}

std::size_t mask_count(const Mask& mask) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < mask.voxel_count(); ++i) n += mask[i] != 0;
  return n;
}

Mask dilate(const Mask& mask, int radius) {
  if (radius < 0) throw InvalidArgument("dilation radius must be nonnegative");
  static constexpr std::array<Voxel, 6> kFaces{{{1, 0, 0}, {-1, 0, 0}, {0, 1, 0},
                                                {0, -1, 0}, {0, 0, 1}, {0, 0, -1}}};
  Mask current = mask;
  const Dims& d = mask.dims();
  for (int r = 0; r < radius; ++r) {
    Mask next = current;
    for (std::size_t i = 0; i < current.voxel_count(); ++i) {
      if (!current[i]) continue;
      const Voxel v = d.voxel(i);
      for (const Voxel& o : kFaces) {
        const Voxel w{v.x + o.x, v.y + o.y, v.z + o.z};
        if (d.contains(w)) next.at(w) = 1;
      }
    }
    current = std::move(next);
  }
  return current;
}

Mask pad(const Mask& mask, int margin) {
  if (margin < 0) throw InvalidArgument("padding margin must be nonnegative");
  const Dims& d = mask.dims();
  Mask out({d.nx + 2 * margin, d.ny + 2 * margin, d.nz + 2 * margin}, mask.voxel_size());
  const Voxel& o = mask.origin();
  out.set_origin({o.x - margin, o.y - margin, o.z - margin});
  for (std::size_t i = 0; i < mask.voxel_count(); ++i) {
    if (!mask[i]) continue;
    const Voxel v = d.voxel(i);
    out.at({v.x + margin, v.y + margin, v.z + margin}) = 1;
  }
  return out;
}

Mask dilate_unclipped(const Mask& mask, int radius) { return dilate(pad(mask, radius), radius); }

Mask mask_intersection(const Mask& a, const Mask& b) {
  if (!(a.dims() == b.dims()) || !(a.origin() == b.origin()))
    throw InvalidArgument("mask dimensions differ");
  Mask out(a.dims(), a.voxel_size());
  out.set_origin(a.origin());
  for (std::size_t i = 0; i < a.voxel_count(); ++i) out[i] = (a[i] && b[i]) ? 1 : 0;
  return out;
}

std::span<const Voxel> neighborhood26() {
  static const std::vector<Voxel> offsets = [] {
    std::vector<Voxel> o;
    for (int dz = -1; dz <= 1; ++dz)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx)
          if (dx || dy || dz) o.push_back({dx, dy, dz});
    return o;
  }();
  return offsets;
}

}  // namespace btd
