#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "btd/estimator.hpp"
#include "btd/grid.hpp"
#include "btd/polyfield.hpp"
#include "btd/tracer.hpp"

namespace btd {

// Volumes are stored as a JSON sidecar plus a raw little-endian payload next
// to it (same stem, ".raw" extension). Payload bytes are little-endian on
// every host. The sidecar declares this with the byte pattern of 1.0f, and
// files declaring any other pattern are refused.

enum class DType { f32, u8 };

std::string_view to_string(DType t);
std::size_t dtype_size(DType t);

/// Hex dump of the little-endian encoding of 1.0f.
inline constexpr std::string_view kEndianMagic = "0000803f";

struct VolumeHeader {
  Dims dims;
  Vec3 voxel_size = Vec3::Ones();
  DType dtype = DType::f32;
  int channels = 1;
  Voxel origin{};
  std::string payload;  // file name of the raw payload, relative to the sidecar

  std::size_t payload_bytes() const;
};

std::string encode_header(const VolumeHeader& h);
/// Throws FormatError on malformed JSON, unknown keys or values, or a magic
/// that does not match this machine's float encoding.
VolumeHeader decode_header(std::string_view text);

std::string encode_payload(const Grid3<float>& grid);
std::string encode_payload(const Mask& grid);
Grid3<float> decode_f32(const VolumeHeader& h, std::string_view bytes);
Mask decode_u8(const VolumeHeader& h, std::string_view bytes);

/// Writes `<stem>.json` and `<stem>.raw` for the sidecar path `path`.
void write_volume(const std::filesystem::path& path, const Grid3<float>& grid);
void write_volume(const std::filesystem::path& path, const Mask& mask);
Grid3<float> read_volume_f32(const std::filesystem::path& path);
Mask read_mask(const std::filesystem::path& path);

/// Peaks as a 3-channel f32 volume (zero vectors outside the mask).
Grid3<float> peaks_to_grid(const PeakVolume& vol);
/// Throws FormatError when the grid and mask disagree in size or channels.
PeakVolume peaks_from_grid(const Grid3<float>& grid, const Mask& mask);

/// TSF text tractogram. First line "#TSF1 step=<mm> count=<n>", optional
/// "# provenance: ..." line, then one streamline per line:
/// "status;x,y,z;x,y,z;..." with coordinates printed as %.6f.
std::string serialize_tractogram(const Tractogram& t);
/// Throws FormatError naming the offending line.
Tractogram parse_tractogram(std::string_view text);
void write_tractogram(const std::filesystem::path& path, const Tractogram& t);
Tractogram read_tractogram(const std::filesystem::path& path);

/// {"format": "btd-polyfield", "order", "frame": {center, scale},
///  "terms": [[i, j, k], ...], "coefficients": row-major 3 x terms}
std::string serialize_polyfield(const PolyField& field);
PolyField parse_polyfield(std::string_view text);
void write_polyfield(const std::filesystem::path& path, const PolyField& field);
PolyField read_polyfield(const std::filesystem::path& path);

std::string fit_report_json(const FitReport& report);

/// Projection of the mask footprint (outline of the union over z) and one
/// polyline per nonempty streamline onto the xy plane. `scale` is pixels per mm.
std::string render_svg(const Tractogram& t, const Mask& mask, double scale = 8.0);
void write_svg(const std::filesystem::path& path, const Tractogram& t, const Mask& mask,
               double scale = 8.0);

std::string read_text(const std::filesystem::path& path);
/// Writes through a temporary file and renames it into place.
void write_text(const std::filesystem::path& path, std::string_view contents);

}  // namespace btd
