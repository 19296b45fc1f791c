#include "ood/gevrey.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>

#include "ood/errors.hpp"

namespace ood {

GevreyConstants gc_add(const GevreyConstants& f, const GevreyConstants& g) {
  return {f.C + g.C, std::max(f.R, g.R), std::max(f.s, g.s)};
}

GevreyConstants gc_mul(const GevreyConstants& f, const GevreyConstants& g) {
  const double s = std::max(f.s, g.s);
  return {f.C * g.C * std::pow(2.0, s), f.R + g.R, s};
}

GevreyConstants gc_product(std::span<const GevreyConstants> components) {
  if (components.empty()) throw ContractError("product of no components");
  GevreyConstants h = components[0];
  for (const auto& c : components.subspan(1)) {
    h.C = std::max(h.C, c.C);
    h.R = std::max(h.R, c.R);
    h.s = std::max(h.s, c.s);
  }
  return h;
}

GevreyConstants gc_compose(const GevreyConstants& f, const GevreyConstants& g) {
  const double cr = g.C * g.R;
  return {f.C * std::exp(cr), f.R * std::pow(cr, f.s), f.s * g.s};
}

double family_order(double s, std::size_t n_out) {
  return std::pow(s, static_cast<double>(n_out));
}

ModulusConstants modulus_constants(double C, double R, double D, double s) {
  if (!(R > 0.0 && R < 1.0)) throw ContractError("modulus constants need 0 < R < 1");
  if (!(s >= 1.0)) throw ContractError("Gevrey order must be at least 1");
  ModulusConstants m;
  m.A = C * std::pow(D, s);
  m.B = (s - 1.0) / (std::numbers::e * R) * std::log(1.0 / R);
  m.s = s;
  m.vacuous = s == 1.0;
  return m;
}

double phi(double r, double B, double s) {
  if (!(r > 0.0)) throw DomainError("phi needs r > 0");
  if (r >= 1.0) return 1.0;
  return std::exp(-2.0 * B * std::pow(r, -1.0 / s) * std::log(1.0 / r));
}

namespace {

constexpr double kQuadTol = 1e-10;
constexpr int kQuadDepth = 60;

template <class F>
double simpson_step(F& f, double a, double b, double fa, double fm, double fb, double whole,
                    double tol, int depth) {
  const double m = 0.5 * (a + b);
  const double lm = 0.5 * (a + m), rm = 0.5 * (m + b);
  const double flm = f(lm), frm = f(rm);
  const double left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
  const double right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
  const double diff = left + right - whole;
  if (depth <= 0 || std::abs(diff) <= 15.0 * tol) return left + right + diff / 15.0;
  return simpson_step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) +
         simpson_step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1);
}

template <class F>
double adaptive_simpson(F f, double a, double b) {
  if (b <= a) return 0.0;
  const double fa = f(a), fb = f(b), fm = f(0.5 * (a + b));
  const double whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
  return simpson_step(f, a, b, fa, fm, fb, whole, kQuadTol, kQuadDepth);
}

}  // namespace

double tail_bound(double B, double s, double d, double r0, double D_K) {
  if (!(r0 > 0.0)) throw ContractError("tail cutoff r0 must be positive");
  if (r0 > D_K) throw ContractError("tail cutoff r0 exceeds the domain diameter");
  if (!(d >= 0.0)) throw ContractError("shift d must be nonnegative");
  const double head = phi(r0, B, s);
  if (d == 0.0) return head;
  auto integrand = [&](double r) { return phi(r, B, s) * d / (r * r); };
  double integral = 0.0;
  const double split = std::min(1.0, D_K);
  if (r0 < split) integral += adaptive_simpson(integrand, r0, split);
  // φ ≡ 1 beyond r = 1, so the remainder is exact.
  const double lo = std::max(r0, split);
  if (D_K > lo) integral += d * (1.0 / lo - 1.0 / D_K);
  return head + integral;
}

R0Choice r0_optimal(double d, double s, double D_K) {
  if (!(d > 0.0)) throw ContractError("shift d must be positive");
  if (d >= 1.0) return {std::min(D_K, 1.0), true};
  return {std::pow(d, s / (s + 1.0)), false};
}

double shift_factor(double d, double C_exp, double s) {
  if (!(d > 0.0)) throw ContractError("shift d must be positive");
  return std::exp(-C_exp * std::pow(d, -1.0 / (s + 1.0)) * std::log(1.0 / d));
}

BoundTerms main_bound(const BoundInputs& in) {
  BoundTerms t;
  t.shift = 6.0 * in.A * in.A * shift_factor(in.d, in.C_exp, in.s);
  t.eps_term = 3.0 * in.eps;
  t.lip_term = 3.0 * in.L1 * in.L1 * in.d * in.d;
  t.total = t.shift + t.eps_term + t.lip_term;
  t.degenerate = in.d >= 1.0;
  return t;
}

Calibration calibrate(std::span<const CalibrationPoint> points, double s, double C_exp) {
  if (points.empty()) throw ContractError("calibration needs at least one point");
  Calibration c;
  c.s = s;
  c.C_exp = C_exp;
  for (std::size_t j = 0; j < points.size(); ++j) {
    const auto& p = points[j];
    if (!(p.d > 0.0) || !(p.loss > 0.0))
      throw ContractError("calibration points need d > 0 and loss > 0");
    const double a = std::sqrt(p.loss / (6.0 * shift_factor(p.d, C_exp, s)));
    if (j == 0 || a > c.A) {
      c.A = a;
      c.binding = j;
    }
  }
  return c;
}

Calibration calibrate_grid(std::span<const CalibrationPoint> points,
                           std::span<const double> s_grid, std::span<const double> c_grid) {
  if (s_grid.empty() || c_grid.empty()) throw ContractError("empty calibration grid");
  Calibration best;
  double best_gap = std::numeric_limits<double>::infinity();
  for (double s : s_grid) {
    for (double ce : c_grid) {
      const auto c = calibrate(points, s, ce);
      double gap = 0.0;
      for (const auto& p : points)
        gap += std::log(6.0 * c.A * c.A * shift_factor(p.d, ce, s) / p.loss);
      gap /= static_cast<double>(points.size());
      if (gap < best_gap) {
        best_gap = gap;
        best = c;
      }
    }
  }
  return best;
}

std::string bound_curve_csv(std::span<const double> ds, const BoundInputs& base) {
  std::string out = "d,shift_term,eps_term,lip_term,total\n";
  char buf[160];
  for (double d : ds) {
    BoundInputs in = base;
    in.d = d;
    const auto t = main_bound(in);
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g,%.17g\n", d, t.shift, t.eps_term,
                  t.lip_term, t.total);
    out += buf;
  }
  return out;
}

}  // namespace ood
