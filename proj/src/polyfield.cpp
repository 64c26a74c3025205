#include "btd/polyfield.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <string>

namespace btd {
namespace {

int lookup_slot(const Exponent& e, int order) {
  const int n1 = order + 1;
  return (e.i * n1 + e.j) * n1 + e.k;
}

// Power table pw[axis][e] = q_axis^e for e in [0, order].
void fill_powers(const Vec3& q, int order, std::array<std::array<double, kMaxOrder + 1>, 3>& pw) {
  for (int a = 0; a < 3; ++a) {
    pw[a][0] = 1.0;
    for (int e = 1; e <= order; ++e) pw[a][e] = pw[a][e - 1] * q[a];
  }
}

}  // namespace

std::size_t term_count(int order) {
  if (order < 0) return 0;
  const auto n = static_cast<std::size_t>(order);
  return (n + 1) * (n + 2) * (n + 3) / 6;
}

MonomialBasis MonomialBasis::build(int order) {
  if (order < kMinOrder || order > kMaxOrder)
    throw InvalidArgument("polynomial order must be in [1, 8], got " + std::to_string(order));
  return build_unchecked(order);
}

MonomialBasis MonomialBasis::divergence_basis(int order) {
  if (order < kMinOrder || order > kMaxOrder)
    throw InvalidArgument("polynomial order must be in [1, 8], got " + std::to_string(order));
  return build_unchecked(order - 1);
}

MonomialBasis MonomialBasis::build_unchecked(int order) {
  MonomialBasis b;
  b.order_ = order;
  for (int d = order; d >= 0; --d) {
    std::vector<Exponent> block;
    for (int i = d; i >= 0; --i)
      for (int j = d - i; j >= 0; --j) block.push_back({i, j, d - i - j});
    auto pattern = [](const Exponent& e) {
      std::array<int, 3> s{e.i, e.j, e.k};
      std::sort(s.begin(), s.end(), std::greater<>());
      return s;
    };
    std::stable_sort(block.begin(), block.end(), [&](const Exponent& a, const Exponent& c) {
      return pattern(a) > pattern(c);
    });
    b.terms_.insert(b.terms_.end(), block.begin(), block.end());
  }
  const int n1 = order + 1;
  b.lookup_.assign(static_cast<std::size_t>(n1 * n1 * n1), -1);
  for (std::size_t t = 0; t < b.terms_.size(); ++t)
    b.lookup_[static_cast<std::size_t>(lookup_slot(b.terms_[t], order))] = static_cast<int>(t);
  return b;
}

std::optional<std::size_t> MonomialBasis::index_of(const Exponent& e) const {
  if (e.i < 0 || e.j < 0 || e.k < 0 || e.degree() > order_) return std::nullopt;
  const int slot = lookup_[static_cast<std::size_t>(lookup_slot(e, order_))];
  if (slot < 0) return std::nullopt;
  return static_cast<std::size_t>(slot);
}

Eigen::VectorXd MonomialBasis::evaluate(const Vec3& q) const {
  Eigen::VectorXd out(static_cast<Eigen::Index>(size()));
  evaluate_into(q, std::span<double>(out.data(), size()));
  return out;
}

void MonomialBasis::evaluate_into(const Vec3& q, std::span<double> out) const {
  std::array<std::array<double, kMaxOrder + 1>, 3> pw{};
  fill_powers(q, order_, pw);
  for (std::size_t t = 0; t < terms_.size(); ++t) {
    const Exponent& e = terms_[t];
    out[t] = pw[0][e.i] * pw[1][e.j] * pw[2][e.k];
  }
}

Eigen::VectorXd MonomialBasis::derivative(const Vec3& q, int axis) const {
  std::array<std::array<double, kMaxOrder + 1>, 3> pw{};
  fill_powers(q, order_, pw);
  Eigen::VectorXd out(static_cast<Eigen::Index>(size()));
  for (std::size_t t = 0; t < terms_.size(); ++t) {
    std::array<int, 3> e{terms_[t].i, terms_[t].j, terms_[t].k};
    double value = 0.0;
    if (e[axis] > 0) {
      value = e[axis];
      --e[axis];
      value *= pw[0][e[0]] * pw[1][e[1]] * pw[2][e[2]];
    }
    out[static_cast<Eigen::Index>(t)] = value;
  }
  return out;
}

CoordFrame CoordFrame::from_mask(const Mask& mask) {
  const auto voxels = mask_voxels(mask);
  if (voxels.empty()) throw InvalidArgument("cannot build a frame from an empty mask");
  Voxel lo = voxels.front(), hi = voxels.front();
  for (const Voxel& v : voxels) {
    lo = {std::min(lo.x, v.x), std::min(lo.y, v.y), std::min(lo.z, v.z)};
    hi = {std::max(hi.x, v.x), std::max(hi.y, v.y), std::max(hi.z, v.z)};
  }
  const Vec3& vs = mask.voxel_size();
  const Vec3 pmin(lo.x * vs.x(), lo.y * vs.y(), lo.z * vs.z());
  const Vec3 pmax((hi.x + 1) * vs.x(), (hi.y + 1) * vs.y(), (hi.z + 1) * vs.z());
  CoordFrame f;
  f.center = 0.5 * (pmin + pmax);
  f.scale = (0.5 * (pmax - pmin)).cwiseMax(1.0);
  return f;
}

void CoordFrame::validate() const {
  if (!center.allFinite()) throw InvalidArgument("frame center must be finite");
  if (!scale.allFinite() || !(scale.array() > 0.0).all())
    throw InvalidArgument("frame scale must be strictly positive");
}

Eigen::VectorXd eval_basis(const MonomialBasis& basis, const Vec3& p, const CoordFrame& frame) {
  return basis.evaluate(frame.normalize(p));
}

PolyField::PolyField(int order, CoeffMatrix coeffs, CoordFrame frame)
    : basis_(MonomialBasis::build(order)), coeffs_(std::move(coeffs)), frame_(frame) {
  frame_.validate();
  if (static_cast<std::size_t>(coeffs_.cols()) != basis_.size())
    throw InvalidArgument("coefficient matrix has " + std::to_string(coeffs_.cols()) +
                          " columns, order " + std::to_string(order) + " needs " +
                          std::to_string(basis_.size()));
  if (!coeffs_.allFinite()) throw InvalidArgument("coefficients must be finite");
}

PolyField PolyField::zero(int order, const CoordFrame& frame) {
  return PolyField(order, CoeffMatrix::Zero(3, static_cast<Eigen::Index>(term_count(order))),
                   frame);
}

Vec3 PolyField::operator()(const Vec3& p) const {
  std::array<double, kMaxTerms> buf;
  const std::size_t n = basis_.size();
  basis_.evaluate_into(frame_.normalize(p), std::span<double>(buf.data(), n));
  return coeffs_ * Eigen::Map<const Eigen::VectorXd>(buf.data(), static_cast<Eigen::Index>(n));
}

double PolyField::divergence(const Vec3& p) const {
  const Vec3 q = frame_.normalize(p);
  double div = 0.0;
  for (int a = 0; a < 3; ++a) div += coeffs_.row(a).dot(basis_.derivative(q, a)) / frame_.scale[a];
  return div;
}

Eigen::VectorXd PolyField::flattened() const {
  Eigen::VectorXd flat(3 * coeffs_.cols());
  for (int a = 0; a < 3; ++a) flat.segment(a * coeffs_.cols(), coeffs_.cols()) = coeffs_.row(a).transpose();
  return flat;
}

CoeffMatrix PolyField::unflatten(const Eigen::VectorXd& flat, std::size_t terms) {
  const auto t = static_cast<Eigen::Index>(terms);
  if (flat.size() != 3 * t) throw InvalidArgument("flattened coefficient length mismatch");
  CoeffMatrix a(3, t);
  for (int r = 0; r < 3; ++r) a.row(r) = flat.segment(r * t, t).transpose();
  return a;
}

Vec3 eval_field(const PolyField& field, const Vec3& p) { return field(p); }

double divergence_at(const PolyField& field, const Vec3& p) { return field.divergence(p); }

Eigen::VectorXd DivergenceMap::apply(const CoeffMatrix& coeffs) const {
  Eigen::VectorXd flat(3 * coeffs.cols());
  for (int a = 0; a < 3; ++a) flat.segment(a * coeffs.cols(), coeffs.cols()) = coeffs.row(a).transpose();
  return matrix * flat;
}

DivergenceMap divergence_map(int order) { return divergence_map(order, CoordFrame::identity()); }

DivergenceMap divergence_map(int order, const CoordFrame& frame) {
  const MonomialBasis full = MonomialBasis::build(order);
  const MonomialBasis image = MonomialBasis::divergence_basis(order);
  const auto terms = static_cast<Eigen::Index>(full.size());
  DivergenceMap map;
  map.order = order;
  map.matrix = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(image.size()), 3 * terms);
  for (std::size_t row = 0; row < image.size(); ++row) {
    const Exponent& e = image.term(row);
    // d/dx of a^x_{(i+1)jk} x^{i+1} y^j z^k contributes (i+1) to x^i y^j z^k, etc.
    const std::array<Exponent, 3> sources{{{e.i + 1, e.j, e.k}, {e.i, e.j + 1, e.k},
                                           {e.i, e.j, e.k + 1}}};
    const std::array<int, 3> factors{e.i + 1, e.j + 1, e.k + 1};
    for (int a = 0; a < 3; ++a) {
      const auto col = full.index_of(sources[a]);
      if (!col) continue;
      map.matrix(static_cast<Eigen::Index>(row), a * terms + static_cast<Eigen::Index>(*col)) =
          factors[a] / frame.scale[a];
    }
  }
  return map;
}

}  // namespace btd
