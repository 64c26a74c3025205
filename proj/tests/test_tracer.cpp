#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "btd/tracer.hpp"

using namespace btd;

namespace {

PolyField constant_field(const Vec3& v) {
  CoeffMatrix a = CoeffMatrix::Zero(3, 4);
  a.col(3) = v;  // constant term is last for order 1
  return PolyField(1, a, CoordFrame::identity());
}

// v = (-y, x, 0): rigid rotation about the z axis.
PolyField rotation_field() {
  CoeffMatrix a = CoeffMatrix::Zero(3, 4);
  a(0, 1) = -1.0;
  a(1, 0) = 1.0;
  return PolyField(1, a, CoordFrame::identity());
}

Mask full(const Dims& d) { return Mask(d, Vec3::Ones(), 1, 1); }

}  // namespace

TEST_CASE("status names round trip") {
  for (auto s : {StreamlineStatus::exited_mask, StreamlineStatus::reached_target, StreamlineStatus::max_steps,
                 StreamlineStatus::stalled})
    CHECK(parse_status(to_string(s)) == s);
  CHECK_FALSE(parse_status("lost"));
}

TEST_CASE("config validation") {
  TraceConfig c;
  c.step_size = 0.0;
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
  c = {};
  c.max_steps = 0;
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
  c = {};
  c.min_length = -1;
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
}

TEST_CASE("constant field crosses a ten-voxel row and exits") {
  const Mask mask = full({10, 1, 1});
  const Vec3 seed(0.1, 0.5, 0.5);
  TraceConfig cfg;
  const Tractogram t = trace(constant_field(Vec3::UnitX()), std::span(&seed, 1), mask, cfg);
  REQUIRE(t.streamlines.size() == 1);
  const Streamline& s = t.streamlines[0];
  CHECK(s.status == StreamlineStatus::exited_mask);
  CHECK(s.length() == doctest::Approx(9.8).epsilon(1e-9));
  CHECK(s.points.size() == 50);
  for (const Vec3& p : s.points) CHECK(contains_point(mask, p));
  CHECK(t.step_size == 0.2);
}

TEST_CASE("unnormalized tracing scales the step with the field magnitude") {
  const Mask mask = full({10, 1, 1});
  const Vec3 seed(0.0, 0.5, 0.5);
  TraceConfig cfg;
  cfg.normalize_field = false;
  cfg.max_steps = 3;
  const Tractogram t = trace(constant_field(Vec3(2, 0, 0)), std::span(&seed, 1), mask, cfg);
  REQUIRE(t.streamlines.size() == 1);
  CHECK(t.streamlines[0].status == StreamlineStatus::max_steps);
  CHECK(t.streamlines[0].points.back().x() == doctest::Approx(1.2));
}

TEST_CASE("seeds outside the mask and short streamlines are dropped, order is kept") {
  const Mask mask = full({10, 3, 1});
  const std::vector<Vec3> seeds{{0.5, 0.5, 0.5}, {20, 0, 0}, {9.9, 1.5, 0.5}, {3.0, 2.5, 0.5}};
  TraceConfig cfg;
  cfg.min_length = 1.0;
  TraceStats stats;
  const Tractogram t = trace(constant_field(Vec3::UnitX()), seeds, mask, cfg, &stats);
  REQUIRE(t.streamlines.size() == 2);
  CHECK(t.streamlines[0].points[0] == seeds[0]);
  CHECK(t.streamlines[1].points[0] == seeds[3]);
  CHECK(stats.total_kept() == 2);
  CHECK(stats.total_discarded() == 2);
}

TEST_CASE("zero field stalls") {
  const Mask mask = full({3, 3, 3});
  const Vec3 seed(1.5, 1.5, 1.5);
  const Tractogram t = trace(PolyField::zero(2), std::span(&seed, 1), mask, TraceConfig{});
  REQUIRE(t.streamlines.size() == 1);
  CHECK(t.streamlines[0].status == StreamlineStatus::stalled);
  CHECK(t.streamlines[0].points.size() == 1);
}

TEST_CASE("RK4 global error on a circle decays with the fourth power of the step") {
  const PolyField f = rotation_field();
  const Vec3 start(1, 0, 0);
  auto error_at_quarter_turn = [&](double h) {
    // Unnormalized rotation: angle advances by h per step at radius 1.
    const int steps = static_cast<int>(std::lround(std::numbers::pi / 2 / h));
    Vec3 p = start;
    for (int i = 0; i < steps; ++i) p = *rk4_step(f, p, h, false);
    return (p - Vec3(0, 1, 0)).norm();
  };
  const double h = std::numbers::pi / 2 / 40;
  const double e1 = error_at_quarter_turn(h);
  const double e2 = error_at_quarter_turn(h / 2);
  const double rate = std::log2(e1 / e2);
  CHECK(rate == doctest::Approx(4.0).epsilon(0.05));
  CHECK_THROWS_AS(rk4_step(f, start, 0.0, true), InvalidArgument);
}

TEST_CASE("target stop semantics") {
  const Mask mask = full({10, 1, 1});
  Mask target(mask.dims(), mask.voxel_size());
  target.at({5, 0, 0}) = 1;
  target.at({6, 0, 0}) = 1;
  TraceConfig cfg;
  cfg.target_region = target;
  SUBCASE("streamline stops at the last point inside the target") {
    const Vec3 seed(0.5, 0.5, 0.5);
    const Tractogram t = trace(constant_field(Vec3::UnitX()), std::span(&seed, 1), mask, cfg);
    REQUIRE(t.streamlines.size() == 1);
    const Streamline& s = t.streamlines[0];
    CHECK(s.status == StreamlineStatus::reached_target);
    CHECK(contains_point(target, s.points.back()));
    CHECK(s.points.back().x() + cfg.step_size >= 7.0);
  }
  SUBCASE("seeding inside the target does not count as reaching it") {
    const Vec3 seed(5.5, 0.5, 0.5);
    const Tractogram t = trace(constant_field(Vec3::UnitX()), std::span(&seed, 1), mask, cfg);
    REQUIRE(t.streamlines.size() == 1);
    CHECK(t.streamlines[0].status == StreamlineStatus::exited_mask);
    CHECK(t.streamlines[0].points.back().x() > 9.0);
  }
  SUBCASE("target touching the mask boundary ends as reached") {
    target.at({9, 0, 0}) = 1;
    cfg.target_region = target;
    const Vec3 seed(7.5, 0.5, 0.5);
    const Tractogram t = trace(constant_field(Vec3::UnitX()), std::span(&seed, 1), mask, cfg);
    CHECK(t.streamlines[0].status == StreamlineStatus::reached_target);
  }
}

TEST_CASE("baseline follows peaks, flips signs and stalls on a sharp turn") {
  Mask mask = full({6, 6, 1});
  PeakVolume vol(mask);
  for (auto& p : vol.peaks) p = Vec3::UnitX();
  TraceConfig cfg;
  cfg.step_size = 0.5;
  SUBCASE("straight") {
    for (int x = 1; x < 6; x += 2)
      for (int y = 0; y < 6; ++y) vol.peak({x, y, 0}) = -Vec3::UnitX();
    const Vec3 seed(0.25, 2.5, 0.5);
    const Tractogram t = trace_baseline(vol, std::span(&seed, 1), mask, cfg);
    REQUIRE(t.streamlines.size() == 1);
    CHECK(t.streamlines[0].status == StreamlineStatus::exited_mask);
    CHECK(t.streamlines[0].points.back().x() > 5.5);
    for (const Vec3& p : t.streamlines[0].points) CHECK(p.y() == 2.5);
  }
  SUBCASE("right-angle turn") {
    for (int y = 0; y < 6; ++y) vol.peak({3, y, 0}) = Vec3::UnitY();
    const Vec3 seed(0.25, 2.5, 0.5);
    const Tractogram t = trace_baseline(vol, std::span(&seed, 1), mask, cfg);
    REQUIRE(t.streamlines.size() == 1);
    CHECK(t.streamlines[0].status == StreamlineStatus::stalled);
    CHECK(t.streamlines[0].points.back().x() < 4.0);
  }
  SUBCASE("a domain wider than the peak grid stalls outside it") {
    const Mask wide = dilate_unclipped(mask, 1);
    const Vec3 seed(5.25, 2.5, 0.5);
    const Tractogram t = trace_baseline(vol, std::span(&seed, 1), wide, cfg);
    CHECK(t.streamlines[0].status == StreamlineStatus::stalled);
  }
}

TEST_CASE("property: emitted points always lie inside the tracking domain") {
  const Mask base = full({8, 8, 2});
  const Mask domain = dilate_unclipped(base, 1);
  std::vector<Vec3> seeds;
  for (int i = 0; i < 8; ++i)
    for (int j = 0; j < 8; ++j) seeds.emplace_back(i + 0.5, j + 0.5, 1.0);
  CoordFrame frame;
  frame.center = Vec3(4, 4, 1);
  frame.scale = Vec3(4, 4, 1);
  CoeffMatrix a = CoeffMatrix::Zero(3, 10);
  a(0, 4) = 1.0;  // x z term pushes streamlines out through the slab faces
  a(0, 7) = -1.0;
  a(1, 6) = 1.0;
  a(2, 9) = 0.3;
  TraceConfig cfg;
  const Tractogram t = trace(PolyField(2, a, frame), seeds, domain, cfg);
  CHECK(t.streamlines.size() > 0);
  for (const Streamline& s : t.streamlines)
    for (const Vec3& p : s.points) CHECK(contains_point(domain, p));
}
