#include "btd/phantom.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

namespace btd {

std::string_view to_string(PhantomKind kind) {
  switch (kind) {
    case PhantomKind::hough: return "hough";
    case PhantomKind::sine: return "sine";
    case PhantomKind::circle: return "circle";
  }
  return "unknown";
}

std::optional<PhantomKind> parse_phantom_kind(std::string_view text) {
  for (auto k : {PhantomKind::hough, PhantomKind::sine, PhantomKind::circle})
    if (to_string(k) == text) return k;
  return std::nullopt;
}

PhantomSpec PhantomSpec::defaults(PhantomKind kind) {
  PhantomSpec s;
  s.kind = kind;
  switch (kind) {
    case PhantomKind::hough: s.dims = {60, 60, 6}; s.seed_count = 2000; break;
    case PhantomKind::sine: s.dims = {100, 100, 6}; s.seed_count = 2000; break;
    case PhantomKind::circle: s.dims = {60, 60, 6}; s.seed_count = 720; break;
  }
  return s;
}

void PhantomSpec::validate() const {
  if (!dims.valid()) throw InvalidArgument("phantom dimensions must be positive");
  if (!(voxel_size.array() > 0.0).all()) throw InvalidArgument("voxel size must be positive");
  if (kind == PhantomKind::sine && !(alpha > 0.0 && alpha <= 1.0))
    throw InvalidArgument("sine alpha must be in (0, 1]");
  if (kind == PhantomKind::circle && !(r1 > 0.0 && r1 < r2))
    throw InvalidArgument("circle radii must satisfy 0 < r1 < r2");
  if (!(snr > 0.0)) throw InvalidArgument("snr must be positive (or inf)");
  if (!(bvalue > 0.0)) throw InvalidArgument("b-value must be positive");
  if (n_gradients < 6) throw InvalidArgument("at least 6 gradient directions are needed");
  if (seed_count < 1) throw InvalidArgument("seed count must be >= 1");
}

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kGroundTruthStep = 0.1;  // mm

std::vector<double> slice_centers(const Vec3& vs, int slices) {
  std::vector<double> z;
  for (int k = 0; k < slices; ++k) z.push_back((k + 0.5) * vs.z());
  return z;
}

// Fan of circular arcs leaving a vertical stem. Fiber u in [-1, 1] starts at
// x = xc + u * half_width going straight up through the stem, then bends with
// curvature u / rho0 for an arc length `arc`, so its exit angle is u * 80 deg.
class HoughModel final : public DirectionModel {
 public:
  explicit HoughModel(const PhantomSpec& s) {
    const double width = s.dims.nx * s.voxel_size.x();
    const double height = s.dims.ny * s.voxel_size.y();
    xc_ = 0.5 * width;
    half_width_ = width / 8.0;
    stem_top_ = 6.0 * s.voxel_size.y();
    arc_ = 0.7 * height;
    rho0_ = arc_ / max_angle_;
    target_depth_ = 4.0 * s.voxel_size.y();
  }

  std::optional<Vec3> direction(const Vec3& p) const override {
    const auto c = locate(p);
    if (!c) return std::nullopt;
    return tangent(c->u, c->s);
  }
  bool in_seed(const Vec3& p) const override {
    const auto c = locate(p);
    return c && c->s < 0.0;
  }
  bool in_target(const Vec3& p) const override {
    const auto c = locate(p);
    return c && c->s >= arc_ - target_depth_;
  }

  std::vector<Streamline> ground_truth(const Vec3& vs, int slices) const override {
    std::vector<Streamline> out;
    constexpr int kFibers = 201;
    for (double z : slice_centers(vs, slices)) {
      for (int f = 0; f < kFibers; ++f) {
        const double u = -1.0 + 2.0 * f / (kFibers - 1);
        Streamline sl;
        sl.status = StreamlineStatus::reached_target;
        const int n = static_cast<int>(std::floor((arc_ + stem_top_) / kGroundTruthStep + 1e-9));
        for (int i = 0; i <= n; ++i) {
          const double s = -stem_top_ + i * kGroundTruthStep;
          // Keep points strictly inside the volume.
          sl.points.push_back(point(u, std::max(s, -stem_top_ + 1e-6), z));
        }
        out.push_back(std::move(sl));
      }
    }
    return out;
  }

  std::string describe() const override {
    std::ostringstream os;
    os << "hough fan: stem center x=" << xc_ << " mm, stem half-width " << half_width_
       << " mm, stem top y=" << stem_top_ << " mm, arc length " << arc_
       << " mm, exit angles +/-80 deg, target = last " << target_depth_ << " mm of each fiber";
    return os.str();
  }

 private:
  struct Coord {
    double u;
    double s;  // arc length past the stem top (negative inside the stem)
  };

  Vec3 tangent(double u, double s) const {
    if (s < 0.0) return Vec3::UnitY();
    const double phi = std::abs(u) / rho0_ * s;
    return {std::copysign(std::sin(phi), u), std::cos(phi), 0.0};
  }

  Vec3 point(double u, double s, double z) const {
    const double x0 = xc_ + u * half_width_;
    if (s < 0.0) return {x0, stem_top_ + s, z};
    const double k = std::abs(u) / rho0_;
    if (k == 0.0) return {x0, stem_top_ + s, z};
    return {x0 + std::copysign((1.0 - std::cos(k * s)) / k, u), stem_top_ + std::sin(k * s) / k, z};
  }

  std::optional<Coord> locate(const Vec3& p) const {
    const double dy = p.y() - stem_top_;
    if (dy < 0.0) {
      if (p.y() < 0.0) return std::nullopt;
      const double u = (p.x() - xc_) / half_width_;
      if (std::abs(u) > 1.0) return std::nullopt;
      return Coord{u, dy};
    }
    // h(u) = (u / rho0) (dx^2 + dy^2) - 2 dx vanishes on fiber u; strictly increasing in u.
    auto h = [&](double u) {
      const double dx = p.x() - xc_ - u * half_width_;
      return u / rho0_ * (dx * dx + dy * dy) - 2.0 * dx;
    };
    double lo = -1.0, hi = 1.0;
    if (h(lo) > 0.0 || h(hi) < 0.0) return std::nullopt;
    for (int it = 0; it < 80; ++it) {
      const double mid = 0.5 * (lo + hi);
      (h(mid) < 0.0 ? lo : hi) = mid;
    }
    const double u = 0.5 * (lo + hi);
    const double k = u / rho0_;
    const double dx = p.x() - xc_ - u * half_width_;
    const double phi = std::atan2(std::abs(k) * dy, 1.0 - k * dx);
    if (phi > 0.5 * kPi) return std::nullopt;
    const double s = k == 0.0 ? dy : phi / std::abs(k);
    if (s > arc_) return std::nullopt;
    return Coord{u, s};
  }

  static constexpr double max_angle_ = 80.0 * kPi / 180.0;
  double xc_ = 0.0;
  double half_width_ = 0.0;
  double stem_top_ = 0.0;
  double arc_ = 0.0;
  double rho0_ = 0.0;
  double target_depth_ = 0.0;
};

// Band of vertical translates of y = yc + amp sin(k x), 1.5 periods across x.
class SineModel final : public DirectionModel {
 public:
  static constexpr double kPeriods = 1.5;
  // amp = alpha * kAmplitudeScale / (2 pi), in mm.
  static constexpr double kAmplitudeScale = 300.0;
  static constexpr double kHalfBand = 3.0;  // voxels

  explicit SineModel(const PhantomSpec& s) {
    width_ = s.dims.nx * s.voxel_size.x();
    yc_ = 0.5 * s.dims.ny * s.voxel_size.y();
    k_ = 2.0 * kPi * kPeriods / width_;
    amp_ = s.alpha * kAmplitudeScale / (2.0 * kPi);
    half_band_ = kHalfBand * s.voxel_size.y();
    edge_ = 2.0 * s.voxel_size.x();
  }

  std::optional<Vec3> direction(const Vec3& p) const override {
    if (p.x() < 0.0 || p.x() >= width_) return std::nullopt;
    if (std::abs(p.y() - curve(p.x())) > half_band_) return std::nullopt;
    return Vec3(1.0, slope(p.x()), 0.0).normalized();
  }
  bool in_seed(const Vec3& p) const override { return direction(p) && p.x() < edge_; }
  bool in_target(const Vec3& p) const override { return direction(p) && p.x() >= width_ - edge_; }

  std::vector<Streamline> ground_truth(const Vec3& vs, int slices) const override {
    std::vector<Streamline> out;
    const int offsets = static_cast<int>(std::lround(2.0 * half_band_ / kGroundTruthStep));
    for (double z : slice_centers(vs, slices)) {
      for (int o = 0; o <= offsets; ++o) {
        const double off = -half_band_ + o * kGroundTruthStep;
        Streamline sl;
        sl.status = StreamlineStatus::reached_target;
        double x = 1e-6;
        while (x < width_) {
          sl.points.push_back({x, curve(x) + off, z});
          x += kGroundTruthStep / std::sqrt(1.0 + slope(x) * slope(x));
        }
        out.push_back(std::move(sl));
      }
    }
    return out;
  }

  std::string describe() const override {
    std::ostringstream os;
    os << "sine band: y = " << yc_ << " + " << amp_ << " sin(" << k_ << " x), " << kPeriods
       << " periods, amplitude scale " << kAmplitudeScale << " (amp = alpha * scale / 2pi), band half-height " << half_band_
       << " mm, seeds/targets = first/last " << edge_ << " mm in x";
    return os.str();
  }

 private:
  double curve(double x) const { return yc_ + amp_ * std::sin(k_ * x); }
  double slope(double x) const { return amp_ * k_ * std::cos(k_ * x); }

  double width_ = 0.0;
  double yc_ = 0.0;
  double k_ = 0.0;
  double amp_ = 0.0;
  double half_band_ = 0.0;
  double edge_ = 0.0;
};

// Counter-clockwise tangent field on the annulus r1 <= r <= r2.
class CircleModel final : public DirectionModel {
 public:
  explicit CircleModel(const PhantomSpec& s)
      : uc_(0.5 * s.dims.nx * s.voxel_size.x()),
        vc_(0.5 * s.dims.ny * s.voxel_size.y()),
        r1_(s.r1),
        r2_(s.r2),
        slab_(2.0 * s.voxel_size.y()) {}

  std::optional<Vec3> direction(const Vec3& p) const override {
    const double dx = p.x() - uc_, dy = p.y() - vc_;
    const double r = std::hypot(dx, dy);
    if (r < r1_ || r > r2_) return std::nullopt;
    return Vec3(-dy / r, dx / r, 0.0);
  }
  // Four voxel rows across the annulus on its right-hand horizontal section.
  bool in_seed(const Vec3& p) const override {
    return direction(p) && p.x() > uc_ && std::abs(p.y() - vc_) < slab_;
  }
  bool in_target(const Vec3& p) const override { return in_seed(p); }

  std::vector<Streamline> ground_truth(const Vec3& vs, int slices) const override {
    std::vector<Streamline> out;
    const int radii = static_cast<int>(std::lround((r2_ - r1_) / kGroundTruthStep));
    for (double z : slice_centers(vs, slices)) {
      for (int i = 0; i <= radii; ++i) {
        const double r = r1_ + (r2_ - r1_) * i / radii;
        const int n = static_cast<int>(std::ceil(2.0 * kPi * r / kGroundTruthStep));
        Streamline sl;
        sl.status = StreamlineStatus::reached_target;
        for (int j = 0; j <= n; ++j) {
          const double t = 2.0 * kPi * j / n;
          sl.points.push_back({uc_ + r * std::cos(t), vc_ + r * std::sin(t), z});
        }
        out.push_back(std::move(sl));
      }
    }
    return out;
  }

  std::string describe() const override {
    std::ostringstream os;
    os << "circle annulus: center (" << uc_ << ", " << vc_ << ") mm, r1 " << r1_ << " mm, r2 " << r2_
       << " mm, seed/target slab |y - " << vc_ << "| < " << slab_ << " mm on the right side";
    return os.str();
  }

  Vec3 center() const { return {uc_, vc_, 0.0}; }

 private:
  double uc_, vc_, r1_, r2_, slab_;
};

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Generator coprime with n, near fraction * n.
std::size_t lattice_generator(std::size_t n, double fraction) {
  if (n <= 2) return 1;
  auto g = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(n)));
  g = std::clamp<std::size_t>(g, 1, n - 1);
  while (std::gcd(g, n) != 1) ++g;
  return g % n == 0 ? 1 : g;
}

}  // namespace

Phantom make_phantom(const PhantomSpec& spec) {
  spec.validate();
  Phantom ph;
  ph.spec = spec;
  switch (spec.kind) {
    case PhantomKind::hough: ph.model = std::make_shared<HoughModel>(spec); break;
    case PhantomKind::sine: ph.model = std::make_shared<SineModel>(spec); break;
    case PhantomKind::circle: ph.model = std::make_shared<CircleModel>(spec); break;
  }
  ph.center = Vec3(0.5 * spec.dims.nx * spec.voxel_size.x(), 0.5 * spec.dims.ny * spec.voxel_size.y(),
                   0.5 * spec.dims.nz * spec.voxel_size.z());
  ph.mask = Mask(spec.dims, spec.voxel_size);
  ph.seed_region = Mask(spec.dims, spec.voxel_size);
  ph.target_region = Mask(spec.dims, spec.voxel_size);
  for (std::size_t i = 0; i < spec.dims.count(); ++i) {
    const Vec3 c = voxel_center(spec.dims.voxel(i), spec.voxel_size);
    if (!ph.model->direction(c)) continue;
    ph.mask[i] = 1;
    ph.seed_region[i] = ph.model->in_seed(c) ? 1 : 0;
    ph.target_region[i] = ph.model->in_target(c) ? 1 : 0;
  }
  if (mask_count(ph.mask) == 0) throw InvalidArgument("phantom mask is empty for these dimensions");
  if (mask_count(ph.seed_region) == 0) throw InvalidArgument("phantom seed region is empty");
  // Fibers that run past the volume walls are cut at the first outside point.
  for (Streamline& s : ph.model->ground_truth(spec.voxel_size, spec.dims.nz)) {
    const auto out = std::find_if(s.points.begin(), s.points.end(), [&](const Vec3& p) {
      return !voxel_of(p, spec.dims, spec.voxel_size);
    });
    if (out != s.points.end()) {
      s.points.erase(out, s.points.end());
      s.status = StreamlineStatus::exited_mask;
    }
    if (!s.points.empty()) ph.ground_truth.streamlines.push_back(std::move(s));
  }
  ph.ground_truth.step_size = kGroundTruthStep;
  ph.ground_truth.provenance = "ground truth; " + ph.model->describe();
  ph.provenance = ph.model->describe();
  return ph;
}

std::vector<Vec3> seed_points(const Mask& region, int count) {
  if (count < 1) throw InvalidArgument("seed count must be >= 1");
  const auto voxels = mask_voxels(region);
  if (voxels.empty()) throw InvalidArgument("seed region is empty");
  const auto nvox = voxels.size();
  const auto n = static_cast<std::size_t>(count);
  const Vec3& vs = region.voxel_size();
  std::vector<Vec3> seeds;
  seeds.reserve(n);
  if (n <= nvox) {
    for (std::size_t i = 0; i < n; ++i) seeds.push_back(voxel_center(voxels[i * nvox / n], vs));
    return seeds;
  }
  // Replica r of a voxel sits on an in-plane rank-1 lattice with R points, so
  // both x and y projections are stratified into R distinct offsets; z stays
  // at the voxel mid-plane. The lattice is shifted per voxel by a golden-ratio
  // sequence so that voxels in one column do not repeat each other's offsets.
  const std::size_t replicas = (n + nvox - 1) / nvox;
  const auto R = static_cast<double>(replicas);
  const std::size_t g = lattice_generator(replicas, 0.6180339887498949);
  auto wrap = [](double t) { return t - std::floor(t); };
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t vi = i % nvox;
    const Voxel& v = voxels[vi];
    const std::size_t r = i / nvox;
    const auto shift = static_cast<double>(vi);
    const double fx = wrap((static_cast<double>(r) + 0.5) / R + shift * 0.7548776662466927);
    const double fy = wrap((static_cast<double>(r * g % replicas) + 0.5) / R + shift * 0.5698402909980532);
    seeds.push_back(Vec3(v.x + fx, v.y + fy, v.z + 0.5).cwiseProduct(vs));
  }
  return seeds;
}

PeakVolume analytic_peaks(const Phantom& ph) {
  PeakVolume vol(ph.mask);
  for (const Voxel& v : mask_voxels(ph.mask))
    vol.peak(v) = *ph.direction(voxel_center(v, ph.spec.voxel_size));
  return vol;
}

GradientTable fibonacci_gradients(int n, double b) {
  if (n < 1) throw InvalidArgument("gradient count must be >= 1");
  GradientTable g;
  const double golden = kPi * (3.0 - std::sqrt(5.0));
  for (int i = 0; i < n; ++i) {
    const double z = 1.0 - (i + 0.5) / n;
    const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
    const double phi = golden * i;
    g.directions.emplace_back(r * std::cos(phi), r * std::sin(phi), z);
    g.bvalues.push_back(b);
  }
  return g;
}

double tensor_signal(double s0, double b, const Vec3& g, const Vec3& fiber) {
  const double c = g.dot(fiber);
  const double adc = kRadialDiffusivity + (kAxialDiffusivity - kRadialDiffusivity) * c * c;
  return s0 * std::exp(-b * adc);
}

double rician_sample(double signal, double sigma, std::mt19937_64& rng) {
  std::normal_distribution<double> noise(0.0, sigma);
  const double re = signal + noise(rng);
  const double im = noise(rng);
  return std::hypot(re, im);
}

std::mt19937_64 voxel_rng(std::uint64_t rng_seed, std::uint64_t voxel_index) {
  return std::mt19937_64(splitmix64(splitmix64(rng_seed) ^ (voxel_index * 0xd1b54a32d192ed03ULL)));
}

DwiVolume simulate_dwi(const Phantom& ph, const PhantomSpec& spec, std::uint64_t rng_seed) {
  spec.validate();
  DwiVolume dwi;
  dwi.gradients = fibonacci_gradients(spec.n_gradients, spec.bvalue);
  const int ng = spec.n_gradients;
  dwi.signals = Grid3<float>(spec.dims, spec.voxel_size, ng);
  const bool noisy = std::isfinite(spec.snr);
  const double sigma = dwi.s0 / spec.snr;
  for (std::size_t i = 0; i < spec.dims.count(); ++i) {
    const Voxel v = spec.dims.voxel(i);
    const auto fiber = ph.mask.dims() == spec.dims && ph.mask[i]
                           ? ph.direction(voxel_center(v, spec.voxel_size))
                           : std::nullopt;
    std::mt19937_64 rng = voxel_rng(rng_seed, i);
    for (int g = 0; g < ng; ++g) {
      const auto& dir = dwi.gradients.directions[static_cast<std::size_t>(g)];
      const double b = dwi.gradients.bvalues[static_cast<std::size_t>(g)];
      double s = fiber ? tensor_signal(dwi.s0, b, dir, *fiber)
                       : dwi.s0 * std::exp(-b * kIsotropicDiffusivity);
      if (noisy) s = rician_sample(s, sigma, rng);
      dwi.signals.at(v, g) = static_cast<float>(s);
    }
  }
  return dwi;
}

PeakFit fit_peaks(const DwiVolume& dwi, const Mask& mask) {
  const auto ng = static_cast<Eigen::Index>(dwi.gradients.size());
  if (ng != dwi.signals.channels()) throw InvalidArgument("gradient count does not match signal depth");
  if (!(mask.dims() == dwi.signals.dims())) throw InvalidArgument("mask and DWI dimensions differ");
  if (ng < 6) throw InvalidArgument("tensor fit needs at least 6 gradients");

  // ln(S/S0) = -b g^T D g, unknowns (Dxx, Dyy, Dzz, Dxy, Dxz, Dyz).
  Eigen::MatrixXd design(ng, 6);
  for (Eigen::Index g = 0; g < ng; ++g) {
    const Vec3& d = dwi.gradients.directions[static_cast<std::size_t>(g)];
    const double b = dwi.gradients.bvalues[static_cast<std::size_t>(g)];
    design.row(g) << d.x() * d.x(), d.y() * d.y(), d.z() * d.z(), 2 * d.x() * d.y(),
        2 * d.x() * d.z(), 2 * d.y() * d.z();
    design.row(g) *= -b;
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design);
  if (qr.rank() < 6) throw InvalidArgument("gradient table cannot determine a tensor");

  PeakFit out{PeakVolume(mask), Mask(mask.dims(), mask.voxel_size()),
              std::vector<double>(mask.voxel_count(), 0.0)};
  const double floor = 1e-6 * dwi.s0;
  Eigen::VectorXd y(ng);
  for (std::size_t i = 0; i < mask.voxel_count(); ++i) {
    if (!mask[i]) continue;
    const Voxel v = mask.dims().voxel(i);
    for (Eigen::Index g = 0; g < ng; ++g)
      y[g] = std::log(std::max(static_cast<double>(dwi.signals.at(v, static_cast<int>(g))), floor) / dwi.s0);
    const Eigen::VectorXd t = qr.solve(y);
    Eigen::Matrix3d d;
    d << t[0], t[3], t[4], t[3], t[1], t[5], t[4], t[5], t[2];
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(d);
    const Vec3 ev = eig.eigenvalues();  // ascending
    out.peaks.peaks[i] = eig.eigenvectors().col(2).normalized();
    const double mean = ev.mean();
    const double denom = ev.squaredNorm();
    const double fa = denom > 0.0 ? std::sqrt(1.5 * (ev.array() - mean).square().sum() / denom) : 0.0;
    out.fa[i] = fa;
    if (ev[0] <= 0.0 || fa < 0.1) out.low_quality[i] = 1;
  }
  return out;
}

double axis_angle_deg(const Vec3& a, const Vec3& b) {
  const double c = std::clamp(std::abs(a.normalized().dot(b.normalized())), 0.0, 1.0);
  return std::acos(c) * 180.0 / kPi;
}

}  // namespace btd
