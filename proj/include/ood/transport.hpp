#pragma once

// Exact Wasserstein-1 between equal-size empirical clouds via min-cost
// perfect matching, plus closed-form shift-size bounds.

#include <cstdint>
#include <string>
#include <vector>

namespace ood {

enum class Metric { kL1, kL2 };

std::string to_string(Metric m);
/// Accepts "l1"/"L1"/"l2"/"L2"; throws ConfigError otherwise.
Metric parse_metric(const std::string& s);

using Point = std::vector<double>;

struct EmpiricalDistribution {
  std::vector<Point> points;
  Metric metric = Metric::kL2;
};

double distance(const Point& a, const Point& b, Metric metric);

struct TransportPlan {
  std::vector<std::size_t> assignment;  // P point i ↦ Q point assignment[i]
  double cost = 0.0;                    // mean matched distance
};

struct W1Result {
  double distance = 0.0;
  TransportPlan plan;
};

/// Hungarian algorithm, O(N³). Shape error on size, dimension or metric mismatch.
W1Result w1_exact(const EmpiricalDistribution& p, const EmpiricalDistribution& q);

/// Exact min-cost assignment on a square cost matrix (row-major).
std::vector<std::size_t> min_cost_assignment(const std::vector<double>& cost, std::size_t n);

/// FNV-1a over the assignment indices as little-endian u64.
std::uint64_t plan_checksum(const TransportPlan& plan);

/// Largest pairwise distance within the union of two clouds.
double max_pairwise_distance(const EmpiricalDistribution& p, const EmpiricalDistribution& q);

double w1_bound_interval(std::size_t i);
/// 4·√((H+1)·n + 1) · r/(1+r).
double w1_bound_permutation(double r, std::size_t H, std::size_t n);
/// 4·√((H+1)·n + 1), the diameter term of the permutation bound.
double permutation_dmax(std::size_t H, std::size_t n);
double w1_bound_scaling(double delta, std::size_t dim);

/// {"distance", "metric", "n_points", "plan_checksum"} as one JSON object.
std::string w1_json(const W1Result& r, Metric metric);

}  // namespace ood
