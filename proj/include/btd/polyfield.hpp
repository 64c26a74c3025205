#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "btd/grid.hpp"

namespace btd {

inline constexpr int kMinOrder = 1;
inline constexpr int kMaxOrder = 8;
inline constexpr std::size_t kMaxTerms = 165;

/// Exponent triple of the monomial x^i y^j z^k.
struct Exponent {
  int i = 0;
  int j = 0;
  int k = 0;

  int degree() const { return i + j + k; }
  bool operator==(const Exponent&) const = default;
};

/// binomial(order + 3, 3): number of monomials of total degree <= order.
std::size_t term_count(int order);

/// Ordered monomials of total degree <= order.
///
/// Terms are grouped by total degree from `order` down to 0. Inside a degree
/// block, terms with a larger leading exponent pattern come first (pure powers,
/// then one mixed factor, ...) and ties are broken by descending (i, j, k).
/// For order 2 this gives [x^2, y^2, z^2, xy, xz, yz, x, y, z, 1].
class MonomialBasis {
 public:
  /// Throws InvalidArgument unless 1 <= order <= 8.
  static MonomialBasis build(int order);
  /// Basis of degree <= order - 1 in which the divergence of an order-`order`
  /// field is expressed (the constant basis for order 1).
  static MonomialBasis divergence_basis(int order);

  int order() const { return order_; }
  std::size_t size() const { return terms_.size(); }
  std::span<const Exponent> terms() const { return terms_; }
  const Exponent& term(std::size_t index) const { return terms_[index]; }
  std::optional<std::size_t> index_of(const Exponent& e) const;

  /// Monomial vector at an already-normalized point.
  Eigen::VectorXd evaluate(const Vec3& q) const;
  /// Writes size() values into out.
  void evaluate_into(const Vec3& q, std::span<double> out) const;

  /// d/dq_axis of every monomial at q.
  Eigen::VectorXd derivative(const Vec3& q, int axis) const;

 private:
  static MonomialBasis build_unchecked(int order);

  int order_ = 0;
  std::vector<Exponent> terms_;
  std::vector<int> lookup_;  // (i, j, k) -> index, -1 when absent
};

/// Affine map from physical millimetres to the fitting frame: q = (p - center) / scale.
struct CoordFrame {
  Vec3 center = Vec3::Zero();
  Vec3 scale = Vec3::Ones();

  static CoordFrame identity() { return {}; }
  /// Maps the physical bounding box of the masked voxels onto [-1, 1]^3.
  /// Half-extents are floored at 1 mm per axis.
  static CoordFrame from_mask(const Mask& mask);

  Vec3 normalize(const Vec3& p) const { return (p - center).cwiseQuotient(scale); }
  Vec3 denormalize(const Vec3& q) const { return q.cwiseProduct(scale) + center; }
  void validate() const;
};

Eigen::VectorXd eval_basis(const MonomialBasis& basis, const Vec3& p, const CoordFrame& frame);

using CoeffMatrix = Eigen::Matrix<double, 3, Eigen::Dynamic>;

/// Polynomial vector field v(p) = A * C_n((p - center) / scale).
class PolyField {
 public:
  PolyField() = default;
  PolyField(int order, CoeffMatrix coeffs, CoordFrame frame);

  static PolyField zero(int order, const CoordFrame& frame = CoordFrame::identity());

  int order() const { return basis_.order(); }
  const MonomialBasis& basis() const { return basis_; }
  const CoeffMatrix& coeffs() const { return coeffs_; }
  const CoordFrame& frame() const { return frame_; }

  Vec3 operator()(const Vec3& p) const;
  double divergence(const Vec3& p) const;

  /// Row-major flattening [a^x..., a^y..., a^z...].
  Eigen::VectorXd flattened() const;
  static CoeffMatrix unflatten(const Eigen::VectorXd& flat, std::size_t terms);

 private:
  MonomialBasis basis_;
  CoeffMatrix coeffs_;
  CoordFrame frame_;
};

Vec3 eval_field(const PolyField& field, const Vec3& p);
double divergence_at(const PolyField& field, const Vec3& p);

/// Linear map from flattened coefficients to the coefficient vector of the
/// divergence, expressed in the order-(n-1) basis.
struct DivergenceMap {
  int order = 0;
  Eigen::MatrixXd matrix;  // M x 3*binomial(n+3,3), M = binomial(n+2,3)

  Eigen::VectorXd apply(const CoeffMatrix& coeffs) const;
  Eigen::VectorXd apply(const Eigen::VectorXd& flat) const { return matrix * flat; }
};

/// Divergence in the normalized coordinates q.
DivergenceMap divergence_map(int order);
/// Divergence with respect to physical coordinates: row entries carry 1/scale.
DivergenceMap divergence_map(int order, const CoordFrame& frame);

}  // namespace btd
