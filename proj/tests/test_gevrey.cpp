#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "doctest.h"
#include "ood/errors.hpp"
#include "ood/gevrey.hpp"
#include "ood/rng.hpp"

using namespace ood;

TEST_CASE("gc_add") {
  CHECK(gc_add({1, 2, 1}, {3, 1, 1}) == GevreyConstants{4, 2, 1});
  CHECK(gc_add({1.5, 0.7, 1.2}, {1.5, 0.7, 1.2}) == GevreyConstants{3.0, 0.7, 1.2});
  CHECK(gc_add({1, 1, 1}, {1, 1, 2}) == GevreyConstants{2, 1, 2});
}

TEST_CASE("gc_mul") {
  CHECK(gc_mul({1, 1, 1}, {1, 1, 1}) == GevreyConstants{2, 2, 1});
  CHECK(gc_mul({1, 1, 2}, {1, 1, 1}) == GevreyConstants{4, 2, 2});
  CHECK(gc_mul({3, 0.4, 1.5}, {1, 0, 1.5}).R == 0.4);
}

TEST_CASE("gc_product") {
  std::vector<GevreyConstants> v{{1, 2, 1}, {3, 1, 2}};
  CHECK(gc_product(v) == GevreyConstants{3, 2, 2});
  std::vector<GevreyConstants> one{{2.5, 0.3, 1.7}};
  CHECK(gc_product(one) == one[0]);
  CHECK_THROWS_AS(gc_product({}), ContractError);

  Rng rng(6);
  for (int t = 0; t < 20; ++t) {
    std::vector<GevreyConstants> xs(5);
    for (auto& x : xs) x = {rng.uniform(0.1, 5), rng.uniform(0.1, 2), rng.uniform(1, 3)};
    const auto ref = gc_product(xs);
    rng.shuffle(xs.begin(), xs.end());
    CHECK(gc_product(xs) == ref);
  }
}

TEST_CASE("gc_compose") {
  const auto h = gc_compose({1, 1, 1}, {1, 1, 1});
  CHECK(h.C == doctest::Approx(std::numbers::e).epsilon(1e-15));
  CHECK(h.R == 1.0);
  CHECK(h.s == 1.0);
  CHECK(gc_compose({1, 1, 2}, {1, 1, 3}).s == 6.0);
  CHECK(gc_compose({2, 0.7, 2.5}, {0.5, 2, 1}).R == 0.7);
}

TEST_CASE("family_order") {
  for (std::size_t n : {0u, 1u, 5u, 40u}) CHECK(family_order(1.0, n) == 1.0);
  CHECK(family_order(2.0, 3) == 8.0);
  for (double s : {1.0, 1.3, 2.0})
    for (std::size_t n = 0; n < 10; ++n) CHECK(family_order(s, n + 1) >= family_order(s, n));
}

TEST_CASE("modulus_constants") {
  auto m1 = modulus_constants(2.0, 0.5, 3.0, 1.0);
  CHECK(m1.B == 0.0);
  CHECK(m1.A == 6.0);
  CHECK(m1.vacuous);
  auto m2 = modulus_constants(1.0, 0.5, 1.0, 2.0);
  CHECK(m2.A == 1.0);
  CHECK(m2.B == doctest::Approx(0.50998919486790701852).epsilon(1e-15));
  CHECK_FALSE(m2.vacuous);
  CHECK(modulus_constants(3.0, 0.3, 1.7, 2.2).A ==
        doctest::Approx(3.0 * modulus_constants(1.0, 0.3, 1.7, 2.2).A).epsilon(1e-15));
  CHECK_THROWS_AS(modulus_constants(1, 1.0, 1, 2), ContractError);
  CHECK_THROWS_AS(modulus_constants(1, 0.5, 1, 0.5), ContractError);
}

TEST_CASE("phi") {
  CHECK(phi(0.3, 0.0, 2.0) == 1.0);
  CHECK(phi(1.0 - 1e-12, 1.0, 2.0) == doctest::Approx(1.0).epsilon(1e-10));
  CHECK(phi(1.0, 3.0, 2.0) == 1.0);
  CHECK(phi(2.0, 3.0, 2.0) == 1.0);
  CHECK(phi(0.25, 1.0, 1.0) == doctest::Approx(1.52587890625e-5).epsilon(1e-13));
  CHECK_THROWS_AS(phi(0.0, 1.0, 1.0), DomainError);
  CHECK_THROWS_AS(phi(-0.1, 1.0, 1.0), DomainError);

  for (double B : {0.1, 1.0, 4.0})
    for (double s : {1.0, 1.5, 3.0}) {
      double prev = INFINITY;
      for (int k = 1; k < 1000; ++k) {
        const double v = phi(k / 1000.0, B, s);
        REQUIRE(v >= 0.0);
        // Non-increasing in r means non-decreasing as we walk up the grid.
        REQUIRE((prev == INFINITY || v >= prev));
        prev = v;
      }
    }
}

TEST_CASE("tail_bound") {
  for (double r0 : {0.05, 0.3, 1.0}) {
    for (double D : {1.0, 2.5}) {
      if (r0 > D) continue;
      CHECK(tail_bound(0.0, 2.0, 0.4, r0, D) ==
            doctest::Approx(1.0 + 0.4 * (1.0 / r0 - 1.0 / D)).epsilon(1e-10));
    }
  }
  CHECK(tail_bound(1.0, 2.0, 0.0, 0.2, 1.0) == phi(0.2, 1.0, 2.0));

  // Midpoint rule with 10⁶ panels as an independent oracle.
  const double B = 1.0, s = 2.0, d = 0.1, r0 = 0.2, D = 1.0;
  const int n = 1000000;
  const double w = (D - r0) / n;
  double sum = 0.0;
  for (int k = 0; k < n; ++k) {
    const double r = r0 + (k + 0.5) * w;
    sum += std::exp(-2.0 * B * std::pow(r, -1.0 / s) * std::log(1.0 / r)) * d / (r * r) * w;
  }
  const double riemann = phi(r0, B, s) + sum;
  const double tb = tail_bound(B, s, d, r0, D);
  CHECK(std::abs(tb - riemann) < 1e-9);
  CHECK(tb == doctest::Approx(0.05183792387007042145).epsilon(1e-10));
  CHECK(tail_bound(B, s, d, r0, 3.0) == doctest::Approx(0.11850459053673708812).epsilon(1e-10));

  CHECK_THROWS_AS(tail_bound(1, 2, 0.1, 1.5, 1.0), ContractError);
  Rng rng(8);
  for (int t = 0; t < 50; ++t) {
    const double r = rng.uniform(0.01, 1.0);
    const double Bt = rng.uniform(0, 3), st = rng.uniform(1, 3);
    CHECK(tail_bound(Bt, st, rng.uniform(0, 1), r, 1.0) >= phi(r, Bt, st));
  }
}

TEST_CASE("r0_optimal") {
  CHECK(r0_optimal(0.01, 1.0).r0 == doctest::Approx(0.1).epsilon(1e-15));
  CHECK_FALSE(r0_optimal(0.01, 1.0).degenerate);
  CHECK(r0_optimal(1.0 - 1e-12, 2.0).r0 == doctest::Approx(1.0).epsilon(1e-10));
  for (double d : {1e-6, 0.01, 0.3, 0.9})
    for (double s : {1.0, 2.0, 5.0}) CHECK(r0_optimal(d, s).r0 >= d);
  auto dg = r0_optimal(3.0, 2.0, 0.7);
  CHECK(dg.degenerate);
  CHECK(dg.r0 == 0.7);
  CHECK_THROWS_AS(r0_optimal(0.0, 1.0), ContractError);
}

TEST_CASE("main_bound") {
  auto t1 = main_bound({1.7, 1.0, 2.0, 0.0, 0.0, 1.0});
  CHECK(t1.total == doctest::Approx(6.0 * 1.7 * 1.7).epsilon(1e-15));
  CHECK(t1.degenerate);
  auto t2 = main_bound({1.0, 1.0, 1.0, 0.0, 0.0, 0.1});
  CHECK(t2.total == doctest::Approx(0.0041292729404396658).epsilon(1e-13));
  CHECK_FALSE(t2.degenerate);
  auto t3 = main_bound({0.0, 1.0, 2.0, 0.5, 2.0, 0.3});
  CHECK(t3.total == doctest::Approx(2.58).epsilon(1e-14));
  CHECK(main_bound({1, 1, 1, 0, 0, 1e-6}).shift < 1e-12);

  Rng rng(10);
  for (int t = 0; t < 200; ++t) {
    BoundInputs in{rng.uniform(0, 3), rng.uniform(0.1, 3), rng.uniform(1, 4), rng.uniform(0, 2),
                   rng.uniform(0, 2), rng.uniform(1e-3, 30)};
    const auto b = main_bound(in);
    CHECK(b.total >= 3 * in.eps + 3 * in.L1 * in.L1 * in.d * in.d);
    CHECK(b.degenerate == (in.d >= 1.0));
  }
  // For d ≤ 1 the tail assembly φ(r0)(1 + d^{1/(s+1)}) stays within 2φ(r0).
  for (double d : {0.01, 0.2, 0.7, 1.0})
    for (double s : {1.0, 2.0}) {
      const double r0 = r0_optimal(std::min(d, 0.999999), s).r0;
      const double p = phi(r0, 1.0, s);
      CHECK(p * (1.0 + std::pow(d, 1.0 / (s + 1.0))) <= 2.0 * p);
    }
}

TEST_CASE("calibrate") {
  const double s = 2.0, ce = 1.0;
  std::vector<CalibrationPoint> one{{0.4, main_bound({1.3, ce, s, 0, 0, 0.4}).total}};
  CHECK(calibrate(one, s, ce).A == doctest::Approx(1.3).epsilon(1e-14));

  std::vector<CalibrationPoint> pts{{2, 0.5}, {6, 1.7}, {10, 3.1}, {14, 2.9}, {22, 8.0}};
  const auto c = calibrate(pts, s, ce);
  for (const auto& p : pts) CHECK(main_bound({c.A, ce, s, 0, 0, p.d}).total >= p.loss * (1 - 1e-12));
  const auto& bp = pts[c.binding];
  CHECK(std::abs(main_bound({c.A, ce, s, 0, 0, bp.d}).total - bp.loss) < 1e-9);

  auto scaled = pts;
  for (auto& p : scaled) p.loss *= 4.0;
  CHECK(calibrate(scaled, s, ce).A == doctest::Approx(2.0 * c.A).epsilon(1e-14));

  CHECK_THROWS_AS(calibrate({}, s, ce), ContractError);
  std::vector<CalibrationPoint> bad{{0.0, 1.0}};
  CHECK_THROWS_AS(calibrate(bad, s, ce), ContractError);

  const double sg[] = {1.0, 2.0, 3.0}, cg[] = {0.5, 1.0};
  const auto g = calibrate_grid(pts, sg, cg);
  for (const auto& p : pts)
    CHECK(main_bound({g.A, g.C_exp, g.s, 0, 0, p.d}).total >= p.loss * (1 - 1e-12));
}

TEST_CASE("bound_curve_csv") {
  const double ds[] = {0.1, 1.0, 2.0};
  const auto csv = bound_curve_csv(ds, {1.0, 1.0, 2.0, 0.1, 0.5, 0.0});
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  CHECK(line == "d,shift_term,eps_term,lip_term,total");
  int rows = 0;
  while (std::getline(in, line)) {
    double d, sh, e, l, t;
    REQUIRE(std::sscanf(line.c_str(), "%lf,%lf,%lf,%lf,%lf", &d, &sh, &e, &l, &t) == 5);
    const auto ref = main_bound({1.0, 1.0, 2.0, 0.1, 0.5, d});
    CHECK(t == ref.total);
    CHECK(sh == ref.shift);
    ++rows;
  }
  CHECK(rows == 3);
}
