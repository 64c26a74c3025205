#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>

#include <cmath>
#include <random>

#include "btd/estimator.hpp"
#include "btd/phantom.hpp"
#include "kkt_oracle.hpp"

using namespace btd;

namespace {

PeakVolume constant_volume(const Dims& d, const Vec3& dir) {
  Mask m(d, Vec3::Ones(), 1, 1);
  PeakVolume vol(m);
  for (auto& p : vol.peaks) p = dir;
  return vol;
}

Mask single_seed(const Dims& d, const Voxel& v) {
  Mask s(d, Vec3::Ones());
  s.at(v) = 1;
  return s;
}

// Peaks of the divergence-free field (y, x, 0) on a grid away from the origin.
PeakVolume hyperbolic_volume(Vec3 offset = Vec3::Zero()) {
  Mask m({8, 8, 3}, Vec3::Ones(), 1, 1);
  PeakVolume vol(m);
  for (std::size_t i = 0; i < m.voxel_count(); ++i) {
    const Vec3 p = voxel_center(m.dims().voxel(i), m.voxel_size()) + Vec3(2.0, 3.0, 0.0) - offset;
    vol.peaks[i] = Vec3(p.y(), p.x(), 0.0).normalized();
  }
  return vol;
}

double objective(const CoeffMatrix& a, const LinearSystem& sys, double ridge) {
  return (sys.target - a * sys.design).squaredNorm() + ridge * a.squaredNorm();
}

}  // namespace

TEST_CASE("fit config validation") {
  FitConfig c;
  c.order = 0;
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
  c.order = 9;
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
  c.order = 3;
  c.regularization = -1.0;
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
  c.regularization.reset();
  CHECK(c.ridge_for(100) == doctest::Approx(1e-6));
}

TEST_CASE("peak volume validation") {
  PeakVolume vol = constant_volume({2, 2, 1}, Vec3(2, 0, 0));
  CHECK_THROWS_AS(vol.validate(), InvalidArgument);
  vol.peaks[0] = Vec3::UnitX();
  vol.peaks[1] = vol.peaks[2] = vol.peaks[3] = Vec3::UnitY();
  CHECK_NOTHROW(vol.validate());
}

TEST_CASE("sign alignment examples") {
  const Dims d{6, 1, 1};
  FitConfig cfg;
  SUBCASE("uniform peaks keep +1") {
    const PeakVolume vol = constant_volume(d, Vec3::UnitX());
    const SignField s = align_signs(vol, cfg, single_seed(d, {0, 0, 0}));
    for (int x = 0; x < 6; ++x) CHECK(s.sign({x, 0, 0}) == 1);
  }
  SUBCASE("alternating peaks on a line all become +x") {
    PeakVolume vol = constant_volume(d, Vec3::UnitX());
    for (int x = 1; x < 6; x += 2) vol.peak({x, 0, 0}) = -Vec3::UnitX();
    const PeakVolume aligned = apply_signs(vol, align_signs(vol, cfg, single_seed(d, {0, 0, 0})));
    for (int x = 0; x < 6; ++x) CHECK(aligned.peak({x, 0, 0}) == Vec3::UnitX());
  }
  SUBCASE("reference axis mode") {
    PeakVolume vol = constant_volume(d, Vec3(-1, 0, 0));
    cfg.sign.mode = SignAlignment::Mode::reference_axis;
    cfg.sign.axis = Vec3::UnitX();
    const SignField s = align_signs(vol, cfg, single_seed(d, {0, 0, 0}));
    for (int x = 0; x < 6; ++x) CHECK(s.sign({x, 0, 0}) == -1);
  }
  SUBCASE("empty seed region is rejected") {
    const PeakVolume vol = constant_volume(d, Vec3::UnitX());
    CHECK_THROWS_AS(align_signs(vol, cfg, Mask(d, Vec3::Ones())), InvalidArgument);
  }
}

TEST_CASE("sign alignment of randomly flipped circle tangents leaves no adjacent conflicts") {
  PhantomSpec spec = PhantomSpec::defaults(PhantomKind::circle);
  const Phantom ph = make_phantom(spec);
  PeakVolume vol = analytic_peaks(ph);
  std::mt19937_64 rng(17);
  for (std::size_t i = 0; i < vol.peaks.size(); ++i)
    if (rng() & 1) vol.peaks[i] = -vol.peaks[i];
  const PeakVolume aligned = apply_signs(vol, align_signs(vol, FitConfig{}, ph.seed_region));
  const Dims& d = vol.dims();
  std::size_t conflicts = 0;
  for (const Voxel& v : mask_voxels(vol.mask))
    for (const Voxel& o : neighborhood26()) {
      const Voxel w{v.x + o.x, v.y + o.y, v.z + o.z};
      if (d.contains(w) && vol.mask.at(w) && aligned.peak(v).dot(aligned.peak(w)) < 0.0) ++conflicts;
    }
  CHECK(conflicts == 0);
}

TEST_CASE("disconnected components are aligned by the fallback") {
  const Dims d{7, 1, 1};
  PeakVolume vol = constant_volume(d, Vec3::UnitX());
  vol.mask.at({3, 0, 0}) = 0;
  vol.peak({5, 0, 0}) = -Vec3::UnitX();
  const SignField s = align_signs(vol, FitConfig{}, single_seed(d, {0, 0, 0}));
  CHECK(s.unreached == 3);
  CHECK(s.sign({5, 0, 0}) == -1);
  CHECK(s.sign({3, 0, 0}) == 0);
}

TEST_CASE("assemble_system evaluates the basis at voxel centers") {
  Mask m({2, 1, 1}, Vec3::Ones(), 1, 1);
  PeakVolume vol(m);
  vol.peaks[0] = vol.peaks[1] = Vec3::UnitX();
  FitConfig cfg;
  cfg.order = 1;
  const SignField s = align_signs(vol, cfg, single_seed(m.dims(), {0, 0, 0}));
  const LinearSystem sys = assemble_system(vol, s, cfg, CoordFrame::identity());
  CHECK(sys.design.col(0).isApprox(Eigen::Vector4d(0.5, 0.5, 0.5, 1)));
  CHECK(sys.design.col(1).isApprox(Eigen::Vector4d(1.5, 0.5, 0.5, 1)));

  const PeakVolume big = hyperbolic_volume();
  cfg.order = 5;
  const LinearSystem sys5 = assemble_system(big, align_signs(big, cfg, single_seed(big.dims(), {0, 0, 0})), cfg);
  CHECK(sys5.design.rows() == 56);
  CHECK(sys5.design.cols() == static_cast<Eigen::Index>(mask_count(big.mask)));
  for (Eigen::Index c = 0; c < sys5.target.cols(); ++c) CHECK(sys5.target.col(c).norm() == doctest::Approx(1.0));
  CHECK_THROWS_AS(assemble_system(PeakVolume(Mask({2, 2, 2}, Vec3::Ones())), s, cfg), InvalidArgument);
}

TEST_CASE("null space is orthonormal and annihilated") {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> g;
  Eigen::MatrixXd m(4, 9);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
  m.row(3) = m.row(0) + m.row(1);  // rank 3
  const Eigen::MatrixXd n = null_space(m);
  CHECK(n.cols() == 6);
  CHECK((n.transpose() * n - Eigen::MatrixXd::Identity(6, 6)).norm() < 1e-12);
  CHECK((m * n).norm() < 1e-12);
}

TEST_CASE("constant peaks are reproduced exactly") {
  const Dims d{5, 4, 3};
  const PeakVolume vol = constant_volume(d, Vec3::UnitX());
  FitConfig cfg;
  cfg.order = 5;
  const FitResult r = fit_btd(vol, single_seed(d, {0, 1, 1}), cfg);
  CHECK(r.report.residual < 1e-10);
  CHECK(r.report.max_divergence < 1e-10);
  // Only three z levels: between slices the higher-order terms are not pinned
  // by data, so the exact check is at the voxel centers.
  for (const Voxel& v : mask_voxels(vol.mask))
    CHECK((r.field(voxel_center(v, vol.voxel_size())) - Vec3::UnitX()).norm() < 1e-6);
}

TEST_CASE("fit of a divergence-free target stays divergence-free and near the unconstrained residual") {
  const PeakVolume vol = hyperbolic_volume();
  const Mask seeds = single_seed(vol.dims(), {0, 0, 1});
  for (int n : {3, 4, 5}) {
    FitConfig cfg;
    cfg.order = n;
    const FitResult r = fit_btd(vol, seeds, cfg);
    CHECK(r.report.max_divergence < 1e-8);
    const LinearSystem sys = assemble_system(vol, align_signs(vol, cfg, seeds), cfg);
    const Eigen::MatrixXd none(0, 3 * sys.design.rows());
    const CoeffMatrix free = solve_constrained(sys.design, sys.target, none, cfg.ridge_for(sys.voxels.size()));
    // The constrained optimum can only be worse, but the field itself was
    // divergence-free, so normalization is the only source of the gap.
    CHECK(r.report.residual >= fit_residual(PolyField(n, free, sys.frame), sys) - 1e-9);
    CHECK(r.report.residual / static_cast<double>(r.report.voxels) < 0.01);
  }
}

TEST_CASE("null-space solver matches the dense KKT oracle") {
  std::mt19937_64 rng(123);
  for (int trial = 0; trial < 30; ++trial) {
    const auto inst = oracle::random_instance(rng, 3, 30);
    FitConfig cfg;
    cfg.order = inst.order;
    const LinearSystem sys = assemble_system(inst.vol, align_signs(inst.vol, cfg, inst.seeds), cfg);
    const Eigen::MatrixXd c = constraint_matrix(cfg, sys);
    const double ridge = 1e-3;
    const CoeffMatrix a = solve_constrained(sys.design, sys.target, c, ridge);
    const CoeffMatrix b = oracle::kkt_solve(sys.design, sys.target, c, ridge);
    CHECK((a - b).cwiseAbs().maxCoeff() < 1e-8);
  }
}

TEST_CASE("rank-deficient fits without ridge return the minimum-norm solution") {
  std::mt19937_64 rng(99);
  const auto inst = oracle::random_instance(rng, 1, 6);
  FitConfig cfg;
  cfg.order = 3;  // 60 unknowns, far more than the data
  const LinearSystem sys = assemble_system(inst.vol, align_signs(inst.vol, cfg, inst.seeds), cfg);
  const Eigen::MatrixXd c = constraint_matrix(cfg, sys);
  const CoeffMatrix a = solve_constrained(sys.design, sys.target, c, 0.0);
  // The minimizer set is a + (null(c) intersect null(data)); a must be orthogonal to it.
  const Eigen::Index t = sys.design.rows();
  Eigen::MatrixXd data = Eigen::MatrixXd::Zero(3 * sys.design.cols(), 3 * t);
  for (Eigen::Index k = 0; k < 3; ++k) data.block(k * sys.design.cols(), k * t, sys.design.cols(), t) = sys.design.transpose();
  Eigen::MatrixXd both(c.rows() + data.rows(), 3 * t);
  both << c, data;
  const Eigen::MatrixXd free_dirs = null_space(both);
  REQUIRE(free_dirs.cols() > 0);
  const Eigen::VectorXd flat = PolyField(3, a, sys.frame).flattened();
  CHECK((free_dirs.transpose() * flat).cwiseAbs().maxCoeff() < 1e-8);
  CHECK((c * flat).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("property: the fit is a constrained minimum") {
  const PeakVolume vol = hyperbolic_volume();
  const Mask seeds = single_seed(vol.dims(), {0, 0, 1});
  FitConfig cfg;
  cfg.order = 4;
  const FitResult r = fit_btd(vol, seeds, cfg);
  const LinearSystem sys = assemble_system(vol, align_signs(vol, cfg, seeds), cfg);
  const double ridge = cfg.ridge_for(sys.voxels.size());
  const Eigen::MatrixXd n = null_space(constraint_matrix(cfg, sys));
  const double base = objective(r.field.coeffs(), sys, ridge);
  std::mt19937_64 rng(8);
  std::normal_distribution<double> g;
  for (int i = 0; i < 50; ++i) {
    Eigen::VectorXd z(n.cols());
    for (Eigen::Index k = 0; k < z.size(); ++k) z[k] = g(rng);
    const Eigen::VectorXd dir = n * z.normalized() * 1e-3;
    const CoeffMatrix moved = r.field.coeffs() + PolyField::unflatten(dir, sys.design.rows());
    CHECK(objective(moved, sys, ridge) >= base - 1e-9);
  }
}

TEST_CASE("property: residual is nonincreasing in the order") {
  const PeakVolume vol = hyperbolic_volume();
  const Mask seeds = single_seed(vol.dims(), {0, 0, 1});
  double previous = INFINITY;
  for (int n = 1; n <= 6; ++n) {
    FitConfig cfg;
    cfg.order = n;
    cfg.regularization = 0.0;
    const double res = fit_btd(vol, seeds, cfg).report.residual;
    CHECK(res <= previous + 1e-9);
    previous = res;
  }
}

TEST_CASE("property: translation equivariance") {
  FitConfig cfg;
  cfg.order = 4;
  const PeakVolume a = hyperbolic_volume();
  // Same peaks on a grid shifted by two voxels in x and one in z.
  Mask m({10, 8, 4}, Vec3::Ones());
  PeakVolume b(m);
  Mask seeds_b(m.dims(), m.voxel_size());
  for (const Voxel& v : mask_voxels(a.mask)) {
    const Voxel w{v.x + 2, v.y, v.z + 1};
    b.mask.at(w) = 1;
    b.peak(w) = a.peak(v);
  }
  seeds_b.at({2, 0, 2}) = 1;
  const FitResult fa = fit_btd(a, single_seed(a.dims(), {0, 0, 1}), cfg);
  const FitResult fb = fit_btd(b, seeds_b, cfg);
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 100; ++i) {
    const Vec3 p(8 * u(rng), 8 * u(rng), 3 * u(rng));
    CHECK((fa.field(p) - fb.field(p + Vec3(2, 0, 1))).norm() < 1e-8);
  }
}

TEST_CASE("property: flipping stored peak signs does not change the fit") {
  FitConfig cfg;
  cfg.order = 4;
  const PeakVolume a = hyperbolic_volume();
  PeakVolume b = a;
  std::mt19937_64 rng(10);
  for (std::size_t i = 0; i < b.peaks.size(); ++i)
    if (i != 1 && (rng() & 1)) b.peaks[i] = -b.peaks[i];  // keep the seed voxel's sign
  const Mask seeds = single_seed(a.dims(), {1, 0, 0});
  const FitResult fa = fit_btd(a, seeds, cfg);
  const FitResult fb = fit_btd(b, seeds, cfg);
  CHECK((fa.field.coeffs() - fb.field.coeffs()).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("sampled constraint zeroes divergence at voxel centers") {
  const PeakVolume vol = hyperbolic_volume();
  FitConfig cfg;
  cfg.order = 4;
  cfg.constraint = ConstraintMode::sampled;
  const FitResult r = fit_btd(vol, single_seed(vol.dims(), {0, 0, 1}), cfg);
  CHECK(r.report.max_divergence < 1e-8);
}

TEST_CASE("nearest_to_field picks the extra peak that agrees with the field") {
  const Dims d{6, 6, 2};
  PeakVolume vol = constant_volume(d, Vec3::UnitX());
  vol.extra_peaks.assign(vol.peaks.size(), {});
  // A few voxels have a spurious primary peak; the true one is listed as extra.
  for (std::size_t i : {7u, 20u, 33u}) {
    vol.extra_peaks[i] = {vol.peaks[i]};
    vol.peaks[i] = Vec3::UnitY();
  }
  FitConfig cfg;
  cfg.order = 2;
  const double primary = fit_btd(vol, single_seed(d, {0, 0, 0}), cfg).report.residual;
  cfg.multi_peak.kind = MultiPeakPolicy::Kind::nearest_to_field;
  const FitResult r = fit_btd(vol, single_seed(d, {0, 0, 0}), cfg);
  CHECK(r.report.iterations_used == 3);
  CHECK(r.report.residual < 1e-8);
  CHECK(primary > 0.1);
}
