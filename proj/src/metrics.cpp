#include "btd/metrics.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <sstream>

#include "btd/error.hpp"

namespace btd {

namespace {

std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

std::string ScoreReport::to_json() const {
  nlohmann::ordered_json j;
  j["vc"] = vc;
  j["ol"] = ol;
  j["or"] = or_;
  j["deviation"] = deviation ? nlohmann::ordered_json(*deviation) : nlohmann::ordered_json(nullptr);
  j["n_streamlines"] = n_streamlines;
  j["n_valid"] = n_valid;
  return j.dump(2) + "\n";
}

ScoreReport ScoreReport::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("score report: ") + e.what());
  }
  try {
    ScoreReport r;
    r.vc = j.at("vc").get<double>();
    r.ol = j.at("ol").get<double>();
    r.or_ = j.at("or").get<double>();
    if (!j.at("deviation").is_null()) r.deviation = j.at("deviation").get<double>();
    r.n_streamlines = j.at("n_streamlines").get<std::size_t>();
    r.n_valid = j.at("n_valid").get<std::size_t>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("score report: ") + e.what());
  }
}

std::string ScoreReport::csv_header() { return "vc,ol,or,deviation,n_streamlines,n_valid"; }

std::string ScoreReport::csv_row() const {
  std::ostringstream os;
  os << format_number(vc) << ',' << format_number(ol) << ',' << format_number(or_) << ','
     << (deviation ? format_number(*deviation) : std::string()) << ',' << n_streamlines << ','
     << n_valid;
  return os.str();
}

bool is_valid_connection(const Streamline& s, const Mask& seed_region, const Mask& target_region,
                         const Mask& dilated_mask) {
  if (s.points.empty()) return false;
  if (!contains_point(seed_region, s.points.front())) return false;
  if (!contains_point(target_region, s.points.back())) return false;
  for (const Vec3& p : s.points)
    if (!contains_point(dilated_mask, p)) return false;
  return true;
}

VcScore score_vc(const Tractogram& t, const Mask& seed_region, const Mask& target_region,
                 const Mask& mask) {
  if (mask_count(seed_region) == 0 || mask_count(target_region) == 0)
    throw InvalidArgument("seed and target regions must be nonempty");
  VcScore out;
  out.n_streamlines = t.streamlines.size();
  if (t.streamlines.empty()) {
    log_warning("valid connections: empty tractogram scores 0");
    return out;
  }
  const Mask grown = dilate_unclipped(mask, 1);
  for (const Streamline& s : t.streamlines)
    if (is_valid_connection(s, seed_region, target_region, grown)) ++out.n_valid;
  out.vc = static_cast<double>(out.n_valid) / static_cast<double>(out.n_streamlines);
  return out;
}

Mask visited_voxels(const Tractogram& t, const Dims& dims, const Vec3& voxel_size) {
  Mask visited(dims, voxel_size);
  for (const Streamline& s : t.streamlines)
    for (const Vec3& p : s.points)
      if (const auto v = voxel_of(p, dims, voxel_size)) visited.at(*v) = 1;
  return visited;
}

OverlapScore score_ol_or(const Tractogram& t, const Mask& truth_mask, int eval_dilation) {
  const std::size_t truth = mask_count(truth_mask);
  if (truth == 0) throw InvalidArgument("truth mask is empty");
  if (eval_dilation < 0) throw InvalidArgument("evaluation dilation must be nonnegative");
  const Mask visited = visited_voxels(t, truth_mask.dims(), truth_mask.voxel_size());
  const Mask grown = dilate(truth_mask, eval_dilation);
  std::size_t hit = 0, over = 0;
  for (std::size_t i = 0; i < visited.voxel_count(); ++i) {
    if (!visited[i]) continue;
    if (truth_mask[i]) ++hit;
    if (!grown[i]) ++over;
  }
  return {static_cast<double>(hit) / static_cast<double>(truth),
          static_cast<double>(over) / static_cast<double>(truth)};
}

std::optional<double> score_deviation(const Tractogram& t, const Vec3& center, const Vec3& voxel_size,
                                      const DeviationOptions& opts) {
  if (!(voxel_size.x() > 0.0)) throw InvalidArgument("voxel size must be positive");
  auto radius = [&](const Vec3& p) { return std::hypot(p.x() - center.x(), p.y() - center.y()); };
  double sum = 0.0;
  std::size_t points = 0, excluded = 0;
  for (const Streamline& s : t.streamlines) {
    if (s.points.empty()) {
      ++excluded;
      continue;
    }
    if (!opts.seeds.empty()) {
      bool known = false;
      for (const Vec3& seed : opts.seeds)
        if ((seed - s.points.front()).norm() <= 1e-6) {
          known = true;
          break;
        }
      if (!known) {
        ++excluded;
        continue;
      }
    }
    const double r0 = radius(s.points.front());
    for (const Vec3& p : s.points) {
      const double e = radius(p) - r0;
      sum += opts.signed_error ? e : std::abs(e);
    }
    points += s.points.size();
  }
  if (excluded > 0)
    log_warning("deviation: excluded " + std::to_string(excluded) + " streamline(s) with unknown seed");
  if (points == 0) return std::nullopt;
  return sum / static_cast<double>(points) / voxel_size.x();
}

}  // namespace btd
