#pragma once

#include <Eigen/Core>

#include <compare>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "btd/error.hpp"

namespace btd {

using Vec3 = Eigen::Vector3d;

/// Integer voxel coordinate.
struct Voxel {
  int x = 0;
  int y = 0;
  int z = 0;

  auto operator<=>(const Voxel&) const = default;
};

/// Grid extent in voxels. Linear indexing is x-fastest.
struct Dims {
  int nx = 0;
  int ny = 0;
  int nz = 0;

  std::size_t count() const {
    return static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny) *
           static_cast<std::size_t>(nz);
  }
  bool valid() const { return nx > 0 && ny > 0 && nz > 0; }
  bool contains(const Voxel& v) const {
    return v.x >= 0 && v.y >= 0 && v.z >= 0 && v.x < nx && v.y < ny && v.z < nz;
  }
  std::size_t linear(const Voxel& v) const {
    return (static_cast<std::size_t>(v.z) * static_cast<std::size_t>(ny) +
            static_cast<std::size_t>(v.y)) *
               static_cast<std::size_t>(nx) +
           static_cast<std::size_t>(v.x);
  }
  Voxel voxel(std::size_t index) const {
    const auto sx = static_cast<std::size_t>(nx);
    const auto sy = static_cast<std::size_t>(ny);
    return {static_cast<int>(index % sx), static_cast<int>((index / sx) % sy),
            static_cast<int>(index / (sx * sy))};
  }

  bool operator==(const Dims&) const = default;
};

/// Dense 3D grid with optional per-voxel channels (channel index innermost).
template <class T>
class Grid3 {
 public:
  Grid3() = default;
  Grid3(Dims dims, Vec3 voxel_size, int channels = 1, T fill = T{})
      : dims_(dims), voxel_size_(voxel_size), channels_(channels) {
    if (!dims.valid()) throw InvalidArgument("grid dimensions must be positive");
    if (channels < 1) throw InvalidArgument("grid channel count must be >= 1");
    if (!(voxel_size.array() > 0.0).all())
      throw InvalidArgument("voxel size must be positive");
    data_.assign(dims.count() * static_cast<std::size_t>(channels), fill);
  }

  const Dims& dims() const { return dims_; }
  const Vec3& voxel_size() const { return voxel_size_; }
  /// World voxel index of local voxel (0, 0, 0). Nonzero only for padded grids.
  const Voxel& origin() const { return origin_; }
  void set_origin(const Voxel& origin) { origin_ = origin; }
  int channels() const { return channels_; }
  std::size_t voxel_count() const { return dims_.count(); }

  T& at(const Voxel& v, int c = 0) { return data_[offset(v, c)]; }
  const T& at(const Voxel& v, int c = 0) const { return data_[offset(v, c)]; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }

  bool operator==(const Grid3& other) const {
    return dims_ == other.dims_ && voxel_size_ == other.voxel_size_ &&
           channels_ == other.channels_ && origin_ == other.origin_ && data_ == other.data_;
  }

 private:
  std::size_t offset(const Voxel& v, int c) const {
    return dims_.linear(v) * static_cast<std::size_t>(channels_) +
           static_cast<std::size_t>(c);
  }

  Dims dims_{};
  Vec3 voxel_size_ = Vec3::Ones();
  int channels_ = 1;
  Voxel origin_{};
  std::vector<T> data_;
};

/// Binary voxel set stored as 0/1 bytes.
using Mask = Grid3<std::uint8_t>;

/// Physical center of a voxel: (index + 0.5) * voxel_size.
inline Vec3 voxel_center(const Voxel& v, const Vec3& voxel_size) {
  return {(v.x + 0.5) * voxel_size.x(), (v.y + 0.5) * voxel_size.y(),
          (v.z + 0.5) * voxel_size.z()};
}

/// Voxel containing a point, i.e. floor(p / voxel_size); nullopt outside the grid.
std::optional<Voxel> voxel_of(const Vec3& p, const Dims& dims, const Vec3& voxel_size);

/// Whether p falls in a set voxel, honoring the mask's origin.
bool contains_point(const Mask& mask, const Vec3& p);

/// Masked voxels in linear (x-fastest) order.
std::vector<Voxel> mask_voxels(const Mask& mask);
std::size_t mask_count(const Mask& mask);

/// 6-connected binary dilation applied `radius` times, clipped to the grid.
Mask dilate(const Mask& mask, int radius);

/// Copy of `mask` with `margin` empty voxels added on every side; the origin
/// shifts so that world positions are unchanged.
Mask pad(const Mask& mask, int margin);

/// Dilation that is not clipped at the volume faces: pad(mask, radius) dilated.
Mask dilate_unclipped(const Mask& mask, int radius);

Mask mask_intersection(const Mask& a, const Mask& b);

/// Offsets of the 26-neighborhood.
std::span<const Voxel> neighborhood26();

}  // namespace btd
