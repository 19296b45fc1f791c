#pragma once

// Gevrey-class constant calculus and the shift-dependent generalization bound.

#include <span>
#include <string>
#include <vector>

namespace ood {

/// |∂^α f| ≤ C·R^|α|·(α!)^s.
struct GevreyConstants {
  double C = 1.0;
  double R = 1.0;
  double s = 1.0;
  bool operator==(const GevreyConstants&) const = default;
};

GevreyConstants gc_add(const GevreyConstants& f, const GevreyConstants& g);
GevreyConstants gc_mul(const GevreyConstants& f, const GevreyConstants& g);
/// Vector-valued map from its components; empty input is a contract error.
GevreyConstants gc_product(std::span<const GevreyConstants> components);
/// f ∘ g.
GevreyConstants gc_compose(const GevreyConstants& f, const GevreyConstants& g);
/// Gevrey order after n_out nested compositions: s^n_out.
double family_order(double s, std::size_t n_out);

struct ModulusConstants {
  double A = 0.0;
  double B = 0.0;
  double s = 1.0;
  bool vacuous = false;  // s = 1 gives B = 0
};

/// A = C·D^s, B = ((s−1)/(e·R))·ln(1/R). Requires 0 < R < 1 and s ≥ 1.
ModulusConstants modulus_constants(double C, double R, double D, double s);

/// exp(−2B·r^(−1/s)·ln(1/r)); 1 for r ≥ 1; domain error for r ≤ 0.
double phi(double r, double B, double s);

/// φ(r0) + ∫_{r0}^{D_K} φ(r)·d/r² dr by adaptive Simpson (abs tol 1e−10).
double tail_bound(double B, double s, double d, double r0, double D_K);

struct R0Choice {
  double r0 = 0.0;
  bool degenerate = false;  // d ≥ 1: clamped to min(D_K, 1)
};

/// r0 = d^(s/(s+1)) for 0 < d < 1.
R0Choice r0_optimal(double d, double s, double D_K = 1.0);

struct BoundInputs {
  double A = 1.0;
  double C_exp = 1.0;
  double s = 2.0;
  double eps = 0.0;
  double L1 = 0.0;
  double d = 1.0;
};

struct BoundTerms {
  double shift = 0.0;
  double eps_term = 0.0;
  double lip_term = 0.0;
  double total = 0.0;
  bool degenerate = false;  // d ≥ 1, where ln(1/d) ≤ 0
};

/// exp(−C_exp·d^(−1/(s+1))·ln(1/d)), the factor multiplying 6A².
double shift_factor(double d, double C_exp, double s);

/// 6A²·shift_factor + 3ε + 3L1²d².
BoundTerms main_bound(const BoundInputs& in);

struct CalibrationPoint {
  double d = 0.0;
  double loss = 0.0;
};

struct Calibration {
  double A = 0.0;
  double s = 2.0;
  double C_exp = 1.0;
  std::size_t binding = 0;  // index of the point where the curve touches
};

/// Smallest A whose ε = L1 = 0 curve dominates every point.
Calibration calibrate(std::span<const CalibrationPoint> points, double s, double C_exp);

/// Calibrates A for each (s, C_exp) pair and keeps the one with the smallest
/// mean log-gap between curve and points.
Calibration calibrate_grid(std::span<const CalibrationPoint> points,
                           std::span<const double> s_grid, std::span<const double> c_grid);

/// Bound curve over the given shifts as CSV (d,shift_term,eps_term,lip_term,total).
std::string bound_curve_csv(std::span<const double> ds, const BoundInputs& base);

}  // namespace ood
