#include "btd/estimator.hpp"

#include <Eigen/Dense>
#include <Eigen/QR>

#include <cmath>
#include <deque>
#include <string>

namespace btd {

PeakVolume::PeakVolume(Mask m) : mask(std::move(m)), peaks(mask.voxel_count(), Vec3::Zero()) {}

void PeakVolume::validate() const {
  if (peaks.size() != mask.voxel_count())
    throw InvalidArgument("peak grid does not match mask dimensions");
  if (!extra_peaks.empty() && extra_peaks.size() != mask.voxel_count())
    throw InvalidArgument("extra peak lists do not match mask dimensions");
  for (std::size_t i = 0; i < peaks.size(); ++i) {
    if (!mask[i]) continue;
    const double n = peaks[i].norm();
    if (!std::isfinite(n) || std::abs(n - 1.0) > 1e-6) {
      const Voxel v = mask.dims().voxel(i);
      throw InvalidArgument("masked voxel (" + std::to_string(v.x) + "," + std::to_string(v.y) +
                            "," + std::to_string(v.z) + ") has a non-unit peak");
    }
  }
}

void FitConfig::validate() const {
  if (order < kMinOrder || order > kMaxOrder)
    throw InvalidArgument("fit order must be in [1, 8], got " + std::to_string(order));
  if (regularization && !(*regularization >= 0.0))
    throw InvalidArgument("regularization must be nonnegative");
  if (multi_peak.kind == MultiPeakPolicy::Kind::nearest_to_field && multi_peak.iterations < 1)
    throw InvalidArgument("nearest_to_field needs at least one iteration");
  if (sign.mode == SignAlignment::Mode::reference_axis && !(sign.axis.norm() > 0.0))
    throw InvalidArgument("reference axis must be nonzero");
}

namespace {

std::int8_t sign_of(double d) { return d >= 0.0 ? std::int8_t{1} : std::int8_t{-1}; }

Vec3 centroid(const std::vector<Voxel>& voxels, const Vec3& vs) {
  Vec3 c = Vec3::Zero();
  for (const Voxel& v : voxels) c += voxel_center(v, vs);
  return voxels.empty() ? c : Vec3(c / static_cast<double>(voxels.size()));
}

}  // namespace

SignField align_signs(const PeakVolume& vol, const FitConfig& cfg, const Mask& seed_region) {
  const Dims& dims = vol.dims();
  if (!(seed_region.dims() == dims)) throw InvalidArgument("seed region dimensions differ from mask");
  std::vector<Voxel> seeds;
  for (std::size_t i = 0; i < dims.count(); ++i)
    if (seed_region[i] && vol.mask[i]) seeds.push_back(dims.voxel(i));
  if (seeds.empty()) throw InvalidArgument("seed region has no voxels inside the mask");

  SignField out{Grid3<std::int8_t>(dims, vol.voxel_size()), 0};
  const auto masked = mask_voxels(vol.mask);

  if (cfg.sign.mode == SignAlignment::Mode::reference_axis) {
    for (const Voxel& v : masked) out.signs.at(v) = sign_of(vol.peak(v).dot(cfg.sign.axis));
    return out;
  }

  // Breadth-first sweep from the first seed voxel. Each newly reached voxel
  // agrees with the sum of its already-aligned 26-neighbours.
  std::deque<Voxel> queue;
  out.signs.at(seeds.front()) = 1;
  queue.push_back(seeds.front());
  while (!queue.empty()) {
    const Voxel u = queue.front();
    queue.pop_front();
    for (const Voxel& o : neighborhood26()) {
      const Voxel w{u.x + o.x, u.y + o.y, u.z + o.z};
      if (!dims.contains(w) || !vol.mask.at(w) || out.signs.at(w) != 0) continue;
      Vec3 ref = Vec3::Zero();
      for (const Voxel& o2 : neighborhood26()) {
        const Voxel n{w.x + o2.x, w.y + o2.y, w.z + o2.z};
        if (dims.contains(n) && out.signs.at(n) != 0) ref += out.signs.at(n) * vol.peak(n);
      }
      const Vec3& g = vol.peak(w);
      double d = g.dot(ref);
      if (d == 0.0) d = g.dot(out.signs.at(u) * vol.peak(u));
      out.signs.at(w) = sign_of(d);
      queue.push_back(w);
    }
  }

  // Orient so the aligned field at the seeds points into the mask: compare how
  // far a straight walk along +d and -d stays inside it.
  const Vec3& vs = vol.voxel_size();
  const double step = 0.5 * vs.minCoeff();
  constexpr int kWalk = 16;
  auto run_length = [&](const Vec3& c, const Vec3& d) {
    long n = 0;
    while (n < kWalk && contains_point(vol.mask, c + static_cast<double>(n + 1) * step * d)) ++n;
    return n;
  };
  long vote = 0;
  Vec3 mean_seed = Vec3::Zero();
  for (const Voxel& s : seeds) {
    const Vec3 d = out.signs.at(s) * vol.peak(s);
    const Vec3 c = voxel_center(s, vs);
    vote += run_length(c, d) - run_length(c, -d);
    mean_seed += d;
  }
  bool flip = vote < 0;
  if (vote == 0) {
    std::vector<Voxel> rest;
    for (const Voxel& v : masked)
      if (!seed_region.at(v)) rest.push_back(v);
    const Vec3 inward = centroid(rest, vs) - centroid(seeds, vs);
    flip = mean_seed.dot(inward) < 0.0;
  }
  Vec3 reached_mean = Vec3::Zero();
  for (const Voxel& v : masked) {
    if (out.signs.at(v) == 0) continue;
    if (flip) out.signs.at(v) = static_cast<std::int8_t>(-out.signs.at(v));
    reached_mean += out.signs.at(v) * vol.peak(v);
  }

  // Components the sweep cannot reach fall back to the mean aligned direction.
  const Vec3 axis = reached_mean.norm() > 0.0 ? Vec3(reached_mean.normalized()) : Vec3::UnitX();
  for (const Voxel& v : masked) {
    if (out.signs.at(v) != 0) continue;
    out.signs.at(v) = sign_of(vol.peak(v).dot(axis));
    ++out.unreached;
  }
  if (out.unreached > 0)
    log_warning(std::to_string(out.unreached) +
                " masked voxels unreachable from the seed region; aligned to the mean direction");
  return out;
}

PeakVolume apply_signs(const PeakVolume& vol, const SignField& signs) {
  PeakVolume out = vol;
  for (std::size_t i = 0; i < out.peaks.size(); ++i)
    if (vol.mask[i] && signs.signs[i] < 0) out.peaks[i] = -out.peaks[i];
  return out;
}

LinearSystem assemble_system(const PeakVolume& vol, const SignField& signs, const FitConfig& cfg) {
  if (mask_count(vol.mask) == 0) throw InvalidArgument("mask is empty");
  return assemble_system(vol, signs, cfg, CoordFrame::from_mask(vol.mask));
}

LinearSystem assemble_system(const PeakVolume& vol, const SignField& signs, const FitConfig& cfg,
                             const CoordFrame& frame) {
  cfg.validate();
  LinearSystem sys;
  sys.voxels = mask_voxels(vol.mask);
  if (sys.voxels.empty()) throw InvalidArgument("mask is empty");
  if (!(signs.signs.dims() == vol.dims())) throw InvalidArgument("sign field does not cover the mask");
  sys.frame = frame;
  sys.voxel_size = vol.voxel_size();
  const MonomialBasis basis = MonomialBasis::build(cfg.order);
  const auto n = static_cast<Eigen::Index>(sys.voxels.size());
  sys.design.resize(static_cast<Eigen::Index>(basis.size()), n);
  sys.target.resize(3, n);
  for (Eigen::Index c = 0; c < n; ++c) {
    const Voxel& v = sys.voxels[static_cast<std::size_t>(c)];
    const std::int8_t s = signs.sign(v);
    if (s == 0) throw InvalidArgument("sign field does not cover every masked voxel");
    basis.evaluate_into(frame.normalize(voxel_center(v, vol.voxel_size())),
                        std::span<double>(sys.design.col(c).data(), basis.size()));
    sys.target.col(c) = s * vol.peak(v);
  }
  return sys;
}

Eigen::MatrixXd null_space(const Eigen::MatrixXd& m, double rel_tol) {
  const Eigen::Index cols = m.cols();
  if (m.rows() == 0) return Eigen::MatrixXd::Identity(cols, cols);
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(m.transpose());
  qr.setThreshold(rel_tol);
  const Eigen::Index rank = qr.rank();
  const Eigen::MatrixXd q = qr.householderQ();
  return q.rightCols(cols - rank);
}

Eigen::MatrixXd constraint_matrix(const FitConfig& cfg, const LinearSystem& sys) {
  const DivergenceMap div = divergence_map(cfg.order, sys.frame);
  if (cfg.constraint == ConstraintMode::exact_divergence_free) return div.matrix;

  // Divergence at each voxel center: S * D with S the (voxels x M) matrix of
  // order-(n-1) monomials. rowspace(S D) = rowspace(R P^T D) for S = Q R P^T.
  const MonomialBasis lower = MonomialBasis::divergence_basis(cfg.order);
  Eigen::MatrixXd s(static_cast<Eigen::Index>(sys.voxels.size()), static_cast<Eigen::Index>(lower.size()));
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    const Vec3 p = voxel_center(sys.voxels[static_cast<std::size_t>(r)], sys.voxel_size);
    s.row(r) = lower.evaluate(sys.frame.normalize(p)).transpose();
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(s);
  const Eigen::Index k = std::min(s.rows(), s.cols());
  Eigen::MatrixXd r = qr.matrixQR().topRows(k).triangularView<Eigen::Upper>();
  return r * qr.colsPermutation().transpose() * div.matrix;
}

CoeffMatrix solve_constrained(const Eigen::MatrixXd& design, const Eigen::MatrixXd& target,
                              const Eigen::MatrixXd& constraint, double ridge, SolveInfo* info) {
  const Eigen::Index terms = design.rows();
  const Eigen::Index samples = design.cols();
  if (target.rows() != 3 || target.cols() != samples)
    throw InvalidArgument("target must be 3 x samples");
  if (constraint.cols() != 3 * terms) throw InvalidArgument("constraint width must be 3 x terms");
  if (ridge < 0.0) throw InvalidArgument("ridge must be nonnegative");

  const Eigen::MatrixXd basis = null_space(constraint);
  const Eigen::Index free = basis.cols();
  if (free == 0) throw NumericalError("constraint null space is empty");

  // Compress the data term: design^T = Q R, so the residual splits into
  // ||R a_c - (Q^T g_c)_top||^2 plus a part independent of A.
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(design.transpose());
  const Eigen::Index rows = std::min(samples, terms);
  const Eigen::MatrixXd r = qr.matrixQR().topRows(rows).triangularView<Eigen::Upper>();
  const Eigen::MatrixXd qtg = (qr.householderQ().transpose() * target.transpose()).topRows(rows);

  const Eigen::Index stacked = 3 * rows + (ridge > 0.0 ? free : 0);
  Eigen::MatrixXd lhs = Eigen::MatrixXd::Zero(stacked, free);
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(stacked);
  for (Eigen::Index c = 0; c < 3; ++c) {
    lhs.middleRows(c * rows, rows) = r * basis.middleRows(c * terms, terms);
    rhs.segment(c * rows, rows) = qtg.col(c);
  }
  if (ridge > 0.0)
    lhs.bottomRows(free) = std::sqrt(ridge) * Eigen::MatrixXd::Identity(free, free);

  Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(lhs);
  const Eigen::Index rank = cod.rank();
  if (rank == 0) throw NumericalError("least-squares system has numerical rank 0");
  const Eigen::VectorXd z = cod.solve(rhs);

  if (info) {
    const Eigen::VectorXd d = cod.matrixT().diagonal().head(rank).cwiseAbs();
    info->condition_estimate = d.maxCoeff() / d.minCoeff();
    info->rank = static_cast<int>(rank);
    info->free_parameters = static_cast<std::size_t>(free);
  }
  return PolyField::unflatten(basis * z, static_cast<std::size_t>(terms));
}

double fit_residual(const PolyField& field, const LinearSystem& sys) {
  return (sys.target - field.coeffs() * sys.design).squaredNorm();
}

namespace {

double max_divergence(const PolyField& field, const PeakVolume& vol, const std::vector<Voxel>& voxels) {
  double m = 0.0;
  for (const Voxel& v : voxels)
    m = std::max(m, std::abs(field.divergence(voxel_center(v, vol.voxel_size()))));
  return m;
}

// Choose, per voxel, the candidate peak closest in angle to the current field
// and orient it along the field.
void reselect_peaks(const PeakVolume& vol, const PolyField& field, LinearSystem& sys) {
  for (std::size_t c = 0; c < sys.voxels.size(); ++c) {
    const Voxel& v = sys.voxels[c];
    const Vec3 f = field(voxel_center(v, vol.voxel_size()));
    Vec3 best = vol.peak(v);
    double best_dot = std::abs(best.dot(f));
    if (!vol.extra_peaks.empty()) {
      for (const Vec3& g : vol.extra_peaks[vol.dims().linear(v)]) {
        const double d = std::abs(g.dot(f));
        if (d > best_dot) {
          best_dot = d;
          best = g;
        }
      }
    }
    sys.target.col(static_cast<Eigen::Index>(c)) = best.dot(f) >= 0.0 ? best : Vec3(-best);
  }
}

}  // namespace

FitResult fit_btd(const PeakVolume& vol, const Mask& seed_region, const FitConfig& cfg) {
  cfg.validate();
  vol.validate();
  if (mask_count(vol.mask) == 0) throw InvalidArgument("mask is empty");

  const SignField signs = align_signs(vol, cfg, seed_region);
  LinearSystem sys = assemble_system(vol, signs, cfg);
  const Eigen::MatrixXd constraint = constraint_matrix(cfg, sys);
  const double ridge = cfg.ridge_for(sys.voxels.size());

  SolveInfo info;
  PolyField field(cfg.order, solve_constrained(sys.design, sys.target, constraint, ridge, &info),
                  sys.frame);
  int iterations = 1;
  if (cfg.multi_peak.kind == MultiPeakPolicy::Kind::nearest_to_field) {
    for (int it = 0; it < cfg.multi_peak.iterations; ++it, ++iterations) {
      reselect_peaks(vol, field, sys);
      field = PolyField(cfg.order, solve_constrained(sys.design, sys.target, constraint, ridge, &info),
                        sys.frame);
    }
  }

  FitReport report;
  report.residual = fit_residual(field, sys);
  report.max_divergence = max_divergence(field, vol, sys.voxels);
  report.condition_estimate = info.condition_estimate;
  report.iterations_used = iterations;
  report.voxels = sys.voxels.size();
  report.free_parameters = info.free_parameters;
  report.rank = info.rank;
  return {std::move(field), report};
}

}  // namespace btd
