#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>

#include <cmath>
#include <random>
#include <set>
#include <tuple>

#include "btd/polyfield.hpp"

using namespace btd;

namespace {

std::vector<Exponent> terms_of(int order) {
  const MonomialBasis b = MonomialBasis::build(order);
  return {b.terms().begin(), b.terms().end()};
}

double monomial(const Exponent& e, const Vec3& q) {
  return std::pow(q.x(), e.i) * std::pow(q.y(), e.j) * std::pow(q.z(), e.k);
}

CoeffMatrix random_coeffs(int order, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  CoeffMatrix a(3, static_cast<Eigen::Index>(term_count(order)));
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = u(rng);
  return a;
}

Vec3 random_point(std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  return {u(rng), u(rng), u(rng)};
}

}  // namespace

TEST_CASE("order 2 ordering matches the worked example") {
  const std::vector<Exponent> want{{2, 0, 0}, {0, 2, 0}, {0, 0, 2}, {1, 1, 0}, {1, 0, 1},
                                   {0, 1, 1}, {1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {0, 0, 0}};
  CHECK(terms_of(2) == want);
}

TEST_CASE("order 1 is x, y, z, 1") {
  const std::vector<Exponent> want{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {0, 0, 0}};
  CHECK(terms_of(1) == want);
}

TEST_CASE("term counts and block sizes against brute-force enumeration") {
  for (int n = 1; n <= kMaxOrder; ++n) {
    std::set<std::tuple<int, int, int>> all;
    for (int i = 0; i <= n; ++i)
      for (int j = 0; i + j <= n; ++j)
        for (int k = 0; i + j + k <= n; ++k) all.insert({i, j, k});
    const auto terms = terms_of(n);
    CHECK(terms.size() == all.size());
    CHECK(term_count(n) == all.size());
    std::set<std::tuple<int, int, int>> seen;
    for (const auto& e : terms) seen.insert({e.i, e.j, e.k});
    CHECK(seen == all);  // no duplicates, nothing missing
    // Degree blocks descend from n to 0 with (d+1)(d+2)/2 members each.
    std::size_t pos = 0;
    for (int d = n; d >= 0; --d) {
      const std::size_t size = static_cast<std::size_t>((d + 1) * (d + 2) / 2);
      for (std::size_t t = pos; t < pos + size; ++t) CHECK(terms[t].degree() == d);
      pos += size;
    }
  }
  CHECK(term_count(5) == 56);
}

TEST_CASE("orders outside [1, 8] are rejected") {
  CHECK_THROWS_AS(MonomialBasis::build(0), InvalidArgument);
  CHECK_THROWS_AS(MonomialBasis::build(9), InvalidArgument);
  CHECK_NOTHROW(MonomialBasis::build(8));
}

TEST_CASE("index_of inverts term") {
  const MonomialBasis b = MonomialBasis::build(4);
  for (std::size_t t = 0; t < b.size(); ++t) CHECK(*b.index_of(b.term(t)) == t);
  CHECK_FALSE(b.index_of({5, 0, 0}));
}

TEST_CASE("basis evaluation examples") {
  const CoordFrame id = CoordFrame::identity();
  const Eigen::VectorXd v1 = eval_basis(MonomialBasis::build(1), {2, 3, 4}, id);
  CHECK(v1.isApprox(Eigen::Vector4d(2, 3, 4, 1)));
  CHECK(eval_basis(MonomialBasis::build(2), {1, 1, 1}, id).isApprox(Eigen::VectorXd::Ones(10)));
  CoordFrame shifted;
  shifted.center = Vec3::Ones();
  Eigen::VectorXd expect = Eigen::VectorXd::Zero(10);
  expect[9] = 1.0;
  CHECK(eval_basis(MonomialBasis::build(2), {1, 1, 1}, shifted) == expect);
}

TEST_CASE("basis evaluation matches std::pow") {
  std::mt19937_64 rng(11);
  for (int n : {1, 3, 6, 8}) {
    const MonomialBasis b = MonomialBasis::build(n);
    for (int trial = 0; trial < 20; ++trial) {
      const Vec3 q = random_point(rng);
      const Eigen::VectorXd v = b.evaluate(q);
      for (std::size_t t = 0; t < b.size(); ++t)
        CHECK(v[static_cast<Eigen::Index>(t)] == doctest::Approx(monomial(b.term(t), q)).epsilon(1e-13));
    }
  }
}

TEST_CASE("field evaluation examples") {
  const CoordFrame id = CoordFrame::identity();
  CoeffMatrix a = CoeffMatrix::Zero(3, 4);
  a(0, 3) = 1.0;
  CHECK(PolyField(1, a, id)({7, -3, 2}) == Vec3(1, 0, 0));
  CHECK(PolyField::zero(3)({1, 2, 3}) == Vec3::Zero());
  CoeffMatrix b = CoeffMatrix::Zero(3, 4);
  b(0, 1) = 1.0;  // v_x = y
  CHECK(PolyField(1, b, id)({5, 2, 7}).x() == 2.0);
}

TEST_CASE("field construction validates shape and values") {
  CHECK_THROWS_AS(PolyField(2, CoeffMatrix::Zero(3, 4), CoordFrame::identity()), InvalidArgument);
  CoeffMatrix bad = CoeffMatrix::Zero(3, 4);
  bad(1, 1) = NAN;
  CHECK_THROWS_AS(PolyField(1, bad, CoordFrame::identity()), InvalidArgument);
  CoordFrame f;
  f.scale = Vec3(1, 0, 1);
  CHECK_THROWS_AS(PolyField::zero(1, f), InvalidArgument);
}

TEST_CASE("property: evaluation is linear in the coefficients") {
  std::mt19937_64 rng(3);
  CoordFrame f;
  f.center = Vec3(10, 20, 3);
  f.scale = Vec3(10, 15, 3);
  for (int trial = 0; trial < 50; ++trial) {
    const CoeffMatrix a1 = random_coeffs(4, rng), a2 = random_coeffs(4, rng);
    const Vec3 p = random_point(rng, 0.0, 30.0);
    const Vec3 sum = PolyField(4, a1 + a2, f)(p);
    const Vec3 parts = PolyField(4, a1, f)(p) + PolyField(4, a2, f)(p);
    CHECK((sum - parts).norm() <= 1e-12 * (1.0 + sum.norm()));
  }
}

TEST_CASE("divergence examples") {
  const CoordFrame id = CoordFrame::identity();
  CoeffMatrix a = CoeffMatrix::Zero(3, 4);
  a(0, 0) = 1.0;
  a(1, 1) = -1.0;  // v = (x, -y, 0)
  CHECK(PolyField(1, a, id).divergence({3, -2, 9}) == 0.0);
  CoeffMatrix b = CoeffMatrix::Zero(3, 4);
  b(0, 0) = 1.0;  // v = (x, 0, 0)
  CHECK(PolyField(1, b, id).divergence({0.3, 4, -1}) == 1.0);
}

TEST_CASE("divergence matches central finite differences") {
  std::mt19937_64 rng(5);
  CoordFrame f;
  f.center = Vec3(30, 30, 3);
  f.scale = Vec3(30, 30, 3);
  const double h = 1e-4;
  for (int trial = 0; trial < 100; ++trial) {
    const PolyField field(5, random_coeffs(5, rng), f);
    const Vec3 q = random_point(rng);
    const Vec3 p = f.denormalize(q);
    double fd = 0.0;
    for (int a = 0; a < 3; ++a) {
      Vec3 dp = Vec3::Zero();
      dp[a] = h * f.scale[a];  // step 1e-4 in normalized coordinates
      fd += (field(p + dp)[a] - field(p - dp)[a]) / (2.0 * dp[a]);
    }
    const double exact = field.divergence(p);
    CHECK(std::abs(fd - exact) <= 1e-6 * std::max(1.0, std::abs(exact)));
  }
}

TEST_CASE("divergence map rows follow the coefficient pattern") {
  const DivergenceMap m1 = divergence_map(1);
  REQUIRE(m1.matrix.rows() == 1);
  REQUIRE(m1.matrix.cols() == 12);
  // a^x_100 is column 0, a^y_010 is column 4 + 1, a^z_001 is column 8 + 2.
  Eigen::RowVectorXd want = Eigen::RowVectorXd::Zero(12);
  want[0] = want[5] = want[10] = 1.0;
  CHECK(m1.matrix.row(0) == want);

  const DivergenceMap m2 = divergence_map(2);
  CHECK(m2.matrix.rows() == 4);
  CHECK(m2.matrix.cols() == 30);
  // First output monomial is x: 2 a^x_200 + a^y_110 + a^z_101.
  Eigen::RowVectorXd first = Eigen::RowVectorXd::Zero(30);
  first[0] = 2.0;       // x^2 in the x row
  first[10 + 3] = 1.0;  // xy in the y row
  first[20 + 4] = 1.0;  // xz in the z row
  CHECK(m2.matrix.row(0) == first);

  for (int n = 1; n <= 8; ++n) {
    const DivergenceMap m = divergence_map(n);
    CHECK(static_cast<std::size_t>(m.matrix.rows()) == term_count(n - 1));
    for (Eigen::Index r = 0; r < m.matrix.rows(); ++r) CHECK((m.matrix.row(r).array() != 0.0).count() <= 3);
    CHECK(m.apply(CoeffMatrix(CoeffMatrix::Zero(3, static_cast<Eigen::Index>(term_count(n))))).isZero());
  }
}

TEST_CASE("property: divergence map composed with the lower basis equals pointwise divergence") {
  std::mt19937_64 rng(9);
  for (int n = 1; n <= 6; ++n) {
    const CoordFrame id = CoordFrame::identity();
    const PolyField field(n, random_coeffs(n, rng), id);
    const Eigen::VectorXd h = divergence_map(n).apply(field.coeffs());
    const MonomialBasis lower = MonomialBasis::divergence_basis(n);
    for (int trial = 0; trial < 1000 / 6; ++trial) {
      const Vec3 q = random_point(rng);
      CHECK(std::abs(h.dot(lower.evaluate(q)) - field.divergence(q)) <= 1e-10);
    }
  }
}

TEST_CASE("property: fields in the null space of the map are divergence-free everywhere") {
  std::mt19937_64 rng(13);
  CoordFrame f;
  f.center = Vec3(5, -2, 1);
  f.scale = Vec3(4, 2, 1);
  const int n = 4;
  const DivergenceMap m = divergence_map(n, f);
  // Project random coefficients onto the null space.
  const Eigen::MatrixXd mt = m.matrix.transpose();
  for (int trial = 0; trial < 10; ++trial) {
    const PolyField raw(n, random_coeffs(n, rng), f);
    const Eigen::VectorXd flat = raw.flattened();
    const Eigen::VectorXd y = (m.matrix * mt).ldlt().solve(m.matrix * flat);
    const PolyField clean(n, PolyField::unflatten(flat - mt * y, term_count(n)), f);
    for (int k = 0; k < 50; ++k) CHECK(std::abs(clean.divergence(f.denormalize(random_point(rng)))) <= 1e-10);
  }
}

TEST_CASE("frame from mask maps the bounding box to the unit cube with a 1 mm floor") {
  Mask m({10, 10, 1}, Vec3::Ones());
  m.at({2, 3, 0}) = 1;
  m.at({7, 5, 0}) = 1;
  const CoordFrame f = CoordFrame::from_mask(m);
  CHECK(f.center.isApprox(Vec3(5.0, 4.5, 0.5)));
  CHECK(f.scale.isApprox(Vec3(3.0, 1.5, 1.0)));
  CHECK(f.normalize({8.0, 6.0, 0.5}).isApprox(Vec3(1, 1, 0)));
  CHECK(f.denormalize(f.normalize({1.2, 3.4, 5.6})).isApprox(Vec3(1.2, 3.4, 5.6)));
  CHECK_THROWS_AS(CoordFrame::from_mask(Mask({2, 2, 2}, Vec3::Ones())), InvalidArgument);
}

TEST_CASE("flatten and unflatten are inverse") {
  std::mt19937_64 rng(1);
  const CoeffMatrix a = random_coeffs(3, rng);
  const PolyField f(3, a, CoordFrame::identity());
  CHECK(PolyField::unflatten(f.flattened(), term_count(3)) == a);
  CHECK(f.flattened()[term_count(3)] == a(1, 0));
}
