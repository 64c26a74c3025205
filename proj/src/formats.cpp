#include "btd/formats.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <vector>

#include "btd/error.hpp"

namespace btd {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

// Limits that keep a hostile header from requesting absurd allocations.
constexpr long long kMaxVoxels = 1LL << 31;
constexpr int kMaxChannels = 4096;

std::string format_fixed(double v) {
  char buf[400];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string format_exact(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::optional<double> parse_double(std::string_view s) {
  double v = 0.0;
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

template <class Int>
std::optional<Int> parse_int(std::string_view s) {
  Int v{};
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size()) return std::nullopt;
  return v;
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = s.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(s.substr(start));
      return out;
    }
    out.push_back(s.substr(start, pos - start));
    start = pos + 1;
  }
}

void put_u32(std::string& out, std::uint32_t w) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((w >> (8 * b)) & 0xffu));
}

std::uint32_t get_u32(std::string_view bytes, std::size_t at) {
  std::uint32_t w = 0;
  for (int b = 0; b < 4; ++b)
    w |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[at + b])) << (8 * b);
  return w;
}

Vec3 read_vec3(const nlohmann::json& j, const char* what) {
  if (!j.is_array() || j.size() != 3) throw FormatError(std::string(what) + " must be a 3-element array");
  Vec3 v;
  for (int a = 0; a < 3; ++a) {
    if (!j[a].is_number()) throw FormatError(std::string(what) + " entries must be numbers");
    v[a] = j[a].get<double>();
  }
  if (!v.allFinite()) throw FormatError(std::string(what) + " must be finite");
  return v;
}

std::array<int, 3> read_int3(const nlohmann::json& j, const char* what) {
  if (!j.is_array() || j.size() != 3) throw FormatError(std::string(what) + " must be a 3-element array");
  std::array<int, 3> v{};
  for (int a = 0; a < 3; ++a) {
    if (!j[a].is_number_integer()) throw FormatError(std::string(what) + " entries must be integers");
    const auto x = j[a].get<long long>();
    if (x < -(1LL << 30) || x > (1LL << 30)) throw FormatError(std::string(what) + " entry out of range");
    v[a] = static_cast<int>(x);
  }
  return v;
}

nlohmann::json parse_json(std::string_view text, const std::string& what) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(what + ": invalid JSON at byte offset " + std::to_string(e.byte) + ": " + e.what());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(what + ": " + e.what());
  }
}

void check_payload_size(const VolumeHeader& h, std::string_view bytes) {
  const std::size_t want = h.payload_bytes();
  if (bytes.size() < want)
    throw FormatError("volume payload truncated at byte offset " + std::to_string(bytes.size()) +
                      " (expected " + std::to_string(want) + " bytes)");
  if (bytes.size() > want)
    throw FormatError("volume payload has trailing data from byte offset " + std::to_string(want) +
                      " (" + std::to_string(bytes.size()) + " bytes present)");
}

fs::path payload_path(const fs::path& sidecar) {
  fs::path p = sidecar;
  p.replace_extension(".raw");
  return p;
}

template <class Grid>
VolumeHeader header_for(const Grid& g, DType dtype, const fs::path& sidecar) {
  VolumeHeader h;
  h.dims = g.dims();
  h.voxel_size = g.voxel_size();
  h.dtype = dtype;
  h.channels = g.channels();
  h.origin = g.origin();
  h.payload = payload_path(sidecar).filename().string();
  return h;
}

VolumeHeader read_header_file(const fs::path& path, std::string& payload) {
  VolumeHeader h = decode_header(read_text(path));
  if (h.payload.empty() || h.payload.find('/') != std::string::npos || h.payload == "." || h.payload == "..")
    throw FormatError(path.string() + ": payload must be a plain file name next to the sidecar");
  payload = read_text(path.parent_path() / h.payload);
  return h;
}

}  // namespace

std::string_view to_string(DType t) { return t == DType::f32 ? "f32" : "u8"; }

std::size_t dtype_size(DType t) { return t == DType::f32 ? 4 : 1; }

std::size_t VolumeHeader::payload_bytes() const {
  return dims.count() * static_cast<std::size_t>(channels) * dtype_size(dtype);
}

std::string encode_header(const VolumeHeader& h) {
  ojson j;
  j["dims"] = {h.dims.nx, h.dims.ny, h.dims.nz};
  j["voxel_size"] = {h.voxel_size.x(), h.voxel_size.y(), h.voxel_size.z()};
  j["dtype"] = std::string(to_string(h.dtype));
  j["channels"] = h.channels;
  j["order"] = "x-fastest";
  j["endian"] = "little";
  j["magic"] = std::string(kEndianMagic);
  j["origin"] = {h.origin.x, h.origin.y, h.origin.z};
  j["payload"] = h.payload;
  return j.dump(2) + "\n";
}

VolumeHeader decode_header(std::string_view text) {
  const nlohmann::json j = parse_json(text, "volume header");
  if (!j.is_object()) throw FormatError("volume header must be a JSON object");
  static const std::vector<std::string> kKeys{"dims",  "voxel_size", "dtype",  "channels", "order",
                                              "endian", "magic",     "origin", "payload"};
  for (const auto& [key, _] : j.items())
    if (std::find(kKeys.begin(), kKeys.end(), key) == kKeys.end())
      throw FormatError("volume header: unknown key '" + key + "'");
  for (const char* key : {"dims", "voxel_size", "dtype", "channels", "order", "magic"})
    if (!j.contains(key)) throw FormatError(std::string("volume header: missing key '") + key + "'");

  auto str = [&](const char* key) {
    if (!j.at(key).is_string()) throw FormatError(std::string("volume header: '") + key + "' must be a string");
    return j.at(key).get<std::string>();
  };
  if (str("magic") != kEndianMagic)
    throw FormatError("volume header: endian magic mismatch (expected " + std::string(kEndianMagic) + ")");
  if (j.contains("endian") && str("endian") != "little")
    throw FormatError("volume header: only little-endian payloads are supported");
  if (str("order") != "x-fastest") throw FormatError("volume header: order must be 'x-fastest'");

  VolumeHeader h;
  const auto d = read_int3(j.at("dims"), "dims");
  h.dims = {d[0], d[1], d[2]};
  if (!h.dims.valid()) throw FormatError("volume header: dims must be positive");
  if (static_cast<long long>(d[0]) * d[1] > kMaxVoxels ||
      static_cast<long long>(d[0]) * d[1] * d[2] > kMaxVoxels)
    throw FormatError("volume header: too many voxels");
  h.voxel_size = read_vec3(j.at("voxel_size"), "voxel_size");
  if (!(h.voxel_size.array() > 0.0).all()) throw FormatError("volume header: voxel_size must be positive");
  const std::string dtype = str("dtype");
  if (dtype == "f32") h.dtype = DType::f32;
  else if (dtype == "u8") h.dtype = DType::u8;
  else throw FormatError("volume header: unknown dtype '" + dtype + "'");
  if (!j.at("channels").is_number_integer()) throw FormatError("volume header: channels must be an integer");
  const auto ch = j.at("channels").get<long long>();
  if (ch < 1 || ch > kMaxChannels) throw FormatError("volume header: channels out of range");
  h.channels = static_cast<int>(ch);
  if (static_cast<long long>(h.dims.count()) * ch > kMaxVoxels)
    throw FormatError("volume header: payload too large");
  if (j.contains("origin")) {
    const auto o = read_int3(j.at("origin"), "origin");
    h.origin = {o[0], o[1], o[2]};
  }
  if (j.contains("payload")) h.payload = str("payload");
  return h;
}

std::string encode_payload(const Grid3<float>& grid) {
  std::string out;
  out.reserve(grid.data().size() * 4);
  for (float f : grid.data()) {
    std::uint32_t w = 0;
    std::memcpy(&w, &f, sizeof w);
    put_u32(out, w);
  }
  return out;
}

std::string encode_payload(const Mask& grid) {
  return std::string(reinterpret_cast<const char*>(grid.data().data()), grid.data().size());
}

Grid3<float> decode_f32(const VolumeHeader& h, std::string_view bytes) {
  if (h.dtype != DType::f32) throw FormatError("expected an f32 volume, found " + std::string(to_string(h.dtype)));
  check_payload_size(h, bytes);
  Grid3<float> g(h.dims, h.voxel_size, h.channels);
  g.set_origin(h.origin);
  auto data = g.data();
  for (std::size_t i = 0; i < data.size(); ++i) {
    const std::uint32_t w = get_u32(bytes, 4 * i);
    std::memcpy(&data[i], &w, sizeof w);
  }
  return g;
}

Mask decode_u8(const VolumeHeader& h, std::string_view bytes) {
  if (h.dtype != DType::u8) throw FormatError("expected a u8 volume, found " + std::string(to_string(h.dtype)));
  check_payload_size(h, bytes);
  Mask g(h.dims, h.voxel_size, h.channels);
  g.set_origin(h.origin);
  std::memcpy(g.data().data(), bytes.data(), bytes.size());
  return g;
}

void write_volume(const fs::path& path, const Grid3<float>& grid) {
  write_text(payload_path(path), encode_payload(grid));
  write_text(path, encode_header(header_for(grid, DType::f32, path)));
}

void write_volume(const fs::path& path, const Mask& mask) {
  write_text(payload_path(path), encode_payload(mask));
  write_text(path, encode_header(header_for(mask, DType::u8, path)));
}

Grid3<float> read_volume_f32(const fs::path& path) {
  std::string payload;
  const VolumeHeader h = read_header_file(path, payload);
  try {
    return decode_f32(h, payload);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

Mask read_mask(const fs::path& path) {
  std::string payload;
  const VolumeHeader h = read_header_file(path, payload);
  try {
    return decode_u8(h, payload);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

Grid3<float> peaks_to_grid(const PeakVolume& vol) {
  Grid3<float> g(vol.dims(), vol.voxel_size(), 3);
  for (std::size_t i = 0; i < vol.mask.voxel_count(); ++i) {
    if (!vol.mask[i]) continue;
    for (int c = 0; c < 3; ++c) g[3 * i + static_cast<std::size_t>(c)] = static_cast<float>(vol.peaks[i][c]);
  }
  return g;
}

PeakVolume peaks_from_grid(const Grid3<float>& grid, const Mask& mask) {
  if (grid.channels() != 3) throw FormatError("peak volume must have 3 channels");
  if (!(grid.dims() == mask.dims())) throw FormatError("peak volume and mask dimensions differ");
  if (!(grid.voxel_size() == mask.voxel_size())) throw FormatError("peak volume and mask voxel sizes differ");
  PeakVolume vol(mask);
  for (std::size_t i = 0; i < mask.voxel_count(); ++i) {
    if (!mask[i]) continue;
    Vec3 p(grid[3 * i], grid[3 * i + 1], grid[3 * i + 2]);
    if (!p.allFinite()) throw FormatError("non-finite peak at voxel index " + std::to_string(i));
    // Single precision storage: renormalize so the peaks are unit again.
    const double n = p.norm();
    vol.peaks[i] = n > 0.0 ? Vec3(p / n) : Vec3::Zero();
  }
  return vol;
}

std::string serialize_tractogram(const Tractogram& t) {
  if (!std::isfinite(t.step_size)) throw FormatError("tractogram step size must be finite");
  std::string out = "#TSF1 step=" + format_exact(t.step_size) + " count=" + std::to_string(t.streamlines.size()) + "\n";
  if (!t.provenance.empty()) {
    std::string line = t.provenance;
    for (char& c : line)
      if (c == '\n' || c == '\r') c = ' ';
    out += "# provenance: " + line + "\n";
  }
  for (const Streamline& s : t.streamlines) {
    out += to_string(s.status);
    for (const Vec3& p : s.points) {
      if (!p.allFinite()) throw FormatError("tractogram contains a non-finite point");
      out += ';';
      out += format_fixed(p.x());
      out += ',';
      out += format_fixed(p.y());
      out += ',';
      out += format_fixed(p.z());
    }
    out += '\n';
  }
  return out;
}

Tractogram parse_tractogram(std::string_view text) {
  std::vector<std::string_view> lines = split(text, '\n');
  if (!lines.empty() && lines.back().empty()) lines.pop_back();
  auto fail = [](std::size_t line, const std::string& msg) -> FormatError {
    return FormatError("tractogram line " + std::to_string(line) + ": " + msg);
  };
  if (lines.empty()) throw fail(1, "missing '#TSF1' header");

  Tractogram t;
  constexpr std::string_view kMagic = "#TSF1 step=";
  std::string_view head = lines[0];
  if (head.substr(0, kMagic.size()) != kMagic) throw fail(1, "missing '#TSF1' header");
  head.remove_prefix(kMagic.size());
  const std::size_t sp = head.find(" count=");
  if (sp == std::string_view::npos) throw fail(1, "header lacks count=");
  const auto step = parse_double(head.substr(0, sp));
  const auto count = parse_int<std::size_t>(head.substr(sp + 7));
  if (!step || !(*step > 0.0)) throw fail(1, "invalid step");
  if (!count) throw fail(1, "invalid count");
  t.step_size = *step;

  constexpr std::string_view kProvenance = "# provenance: ";
  for (std::size_t n = 1; n < lines.size(); ++n) {
    const std::string_view line = lines[n];
    const std::size_t lineno = n + 1;
    if (!line.empty() && line[0] == '#') {
      if (line.substr(0, kProvenance.size()) == kProvenance) t.provenance = std::string(line.substr(kProvenance.size()));
      continue;
    }
    const auto fields = split(line, ';');
    Streamline s;
    const auto status = parse_status(fields[0]);
    if (!status) throw fail(lineno, "unknown status '" + std::string(fields[0].substr(0, 32)) + "'");
    s.status = *status;
    for (std::size_t f = 1; f < fields.size(); ++f) {
      const auto xyz = split(fields[f], ',');
      if (xyz.size() != 3) throw fail(lineno, "point " + std::to_string(f) + " does not have 3 coordinates");
      Vec3 p;
      for (int a = 0; a < 3; ++a) {
        const auto v = parse_double(xyz[a]);
        if (!v) throw fail(lineno, "invalid coordinate in point " + std::to_string(f));
        p[a] = *v;
      }
      s.points.push_back(p);
    }
    t.streamlines.push_back(std::move(s));
    if (t.streamlines.size() > *count) throw fail(lineno, "more streamlines than the header count");
  }
  if (t.streamlines.size() != *count)
    throw fail(lines.size() + 1, "expected " + std::to_string(*count) + " streamlines, found " +
                                     std::to_string(t.streamlines.size()));
  return t;
}

void write_tractogram(const fs::path& path, const Tractogram& t) { write_text(path, serialize_tractogram(t)); }

Tractogram read_tractogram(const fs::path& path) {
  try {
    return parse_tractogram(read_text(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

std::string serialize_polyfield(const PolyField& field) {
  if (!field.coeffs().allFinite()) throw FormatError("polynomial field has non-finite coefficients");
  ojson j;
  j["format"] = "btd-polyfield";
  j["order"] = field.order();
  const CoordFrame& f = field.frame();
  j["frame"] = {{"center", {f.center.x(), f.center.y(), f.center.z()}},
                {"scale", {f.scale.x(), f.scale.y(), f.scale.z()}}};
  ojson terms = ojson::array();
  for (const Exponent& e : field.basis().terms()) terms.push_back({e.i, e.j, e.k});
  j["terms"] = terms;
  const Eigen::VectorXd flat = field.flattened();
  j["coefficients"] = std::vector<double>(flat.data(), flat.data() + flat.size());
  return j.dump(2) + "\n";
}

PolyField parse_polyfield(std::string_view text) {
  const nlohmann::json j = parse_json(text, "polynomial field");
  try {
    if (!j.is_object() || j.value("format", std::string()) != "btd-polyfield")
      throw FormatError("polynomial field: missing format tag 'btd-polyfield'");
    for (const auto& [key, _] : j.items())
      if (key != "format" && key != "order" && key != "frame" && key != "terms" && key != "coefficients")
        throw FormatError("polynomial field: unknown key '" + key + "'");
    if (!j.at("order").is_number_integer()) throw FormatError("polynomial field: order must be an integer");
    const auto order = j.at("order").get<long long>();
    if (order < kMinOrder || order > kMaxOrder) throw FormatError("polynomial field: order out of range");
    const MonomialBasis basis = MonomialBasis::build(static_cast<int>(order));
    const auto& terms = j.at("terms");
    if (!terms.is_array() || terms.size() != basis.size())
      throw FormatError("polynomial field: term list does not match the order");
    for (std::size_t t = 0; t < basis.size(); ++t) {
      const auto e = read_int3(terms[t], "term");
      if (!(Exponent{e[0], e[1], e[2]} == basis.term(t)))
        throw FormatError("polynomial field: term " + std::to_string(t) + " is out of basis order");
    }
    CoordFrame frame;
    frame.center = read_vec3(j.at("frame").at("center"), "frame.center");
    frame.scale = read_vec3(j.at("frame").at("scale"), "frame.scale");
    if (!(frame.scale.array() > 0.0).all()) throw FormatError("polynomial field: frame scale must be positive");
    const auto& c = j.at("coefficients");
    if (!c.is_array() || c.size() != 3 * basis.size())
      throw FormatError("polynomial field: expected " + std::to_string(3 * basis.size()) + " coefficients");
    Eigen::VectorXd flat(static_cast<Eigen::Index>(c.size()));
    for (std::size_t i = 0; i < c.size(); ++i) {
      if (!c[i].is_number()) throw FormatError("polynomial field: coefficient " + std::to_string(i) + " is not a number");
      flat[static_cast<Eigen::Index>(i)] = c[i].get<double>();
    }
    return PolyField(static_cast<int>(order), PolyField::unflatten(flat, basis.size()), frame);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("polynomial field: ") + e.what());
  } catch (const InvalidArgument& e) {
    throw FormatError(std::string("polynomial field: ") + e.what());
  }
}

void write_polyfield(const fs::path& path, const PolyField& field) { write_text(path, serialize_polyfield(field)); }

PolyField read_polyfield(const fs::path& path) {
  try {
    return parse_polyfield(read_text(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

std::string fit_report_json(const FitReport& r) {
  ojson j;
  j["residual"] = r.residual;
  j["max_divergence"] = r.max_divergence;
  j["condition_estimate"] = r.condition_estimate;
  j["iterations_used"] = r.iterations_used;
  j["voxels"] = r.voxels;
  j["free_parameters"] = r.free_parameters;
  j["rank"] = r.rank;
  return j.dump(2) + "\n";
}

std::string render_svg(const Tractogram& t, const Mask& mask, double scale) {
  const Dims& d = mask.dims();
  const Vec3& vs = mask.voxel_size();
  const Voxel& o = mask.origin();
  const double x0 = o.x * vs.x(), y0 = o.y * vs.y();
  const double width = d.nx * vs.x() * scale, height = d.ny * vs.y() * scale;
  auto px = [&](double x) { return (x - x0) * scale; };
  auto py = [&](double y) { return height - (y - y0) * scale; };
  auto num = [](double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return std::string(buf);
  };

  std::vector<std::uint8_t> foot(static_cast<std::size_t>(d.nx) * static_cast<std::size_t>(d.ny), 0);
  for (std::size_t i = 0; i < mask.voxel_count(); ++i)
    if (mask[i]) {
      const Voxel v = d.voxel(i);
      foot[static_cast<std::size_t>(v.y) * static_cast<std::size_t>(d.nx) + static_cast<std::size_t>(v.x)] = 1;
    }
  auto in = [&](int x, int y) {
    return x >= 0 && y >= 0 && x < d.nx && y < d.ny &&
           foot[static_cast<std::size_t>(y) * static_cast<std::size_t>(d.nx) + static_cast<std::size_t>(x)];
  };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(width) << "\" height=\"" << num(height)
     << "\" viewBox=\"0 0 " << num(width) << ' ' << num(height) << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  std::string outline;
  for (int y = 0; y < d.ny; ++y)
    for (int x = 0; x < d.nx; ++x) {
      if (!in(x, y)) continue;
      const double xa = x0 + x * vs.x(), xb = xa + vs.x();
      const double ya = y0 + y * vs.y(), yb = ya + vs.y();
      auto edge = [&](double ax, double ay, double bx, double by) {
        outline += "M" + num(px(ax)) + ' ' + num(py(ay)) + "L" + num(px(bx)) + ' ' + num(py(by));
      };
      if (!in(x - 1, y)) edge(xa, ya, xa, yb);
      if (!in(x + 1, y)) edge(xb, ya, xb, yb);
      if (!in(x, y - 1)) edge(xa, ya, xb, ya);
      if (!in(x, y + 1)) edge(xa, yb, xb, yb);
    }
  if (!outline.empty()) os << "<path d=\"" << outline << "\" fill=\"none\" stroke=\"black\" stroke-width=\"1\"/>\n";
  for (const Streamline& s : t.streamlines) {
    if (s.points.empty()) continue;
    os << "<polyline fill=\"none\" stroke=\"#c0392b\" stroke-width=\"0.5\" points=\"";
    for (std::size_t i = 0; i < s.points.size(); ++i) {
      if (i) os << ' ';
      os << num(px(s.points[i].x())) << ',' << num(py(s.points[i].y()));
    }
    os << "\"/>\n";
  }
  os << "</svg>\n";
  return os.str();
}

void write_svg(const fs::path& path, const Tractogram& t, const Mask& mask, double scale) {
  write_text(path, render_svg(t, mask, scale));
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw FormatError("read error on " + path.string());
  return ss.str();
}

void write_text(const fs::path& path, std::string_view contents) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + path.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw FormatError("write error on " + path.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw FormatError("cannot move " + tmp.string() + " into place: " + ec.message());
}

}  // namespace btd
