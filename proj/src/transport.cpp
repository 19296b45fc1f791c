#include "ood/transport.hpp"

#include <cmath>
#include <json.hpp>
#include <limits>

#include "ood/errors.hpp"
#include "ood/rng.hpp"

namespace ood {

std::string to_string(Metric m) { return m == Metric::kL1 ? "l1" : "l2"; }

Metric parse_metric(const std::string& s) {
  if (s == "l1" || s == "L1") return Metric::kL1;
  if (s == "l2" || s == "L2") return Metric::kL2;
  throw ConfigError("unknown metric '" + s + "'");
}

double distance(const Point& a, const Point& b, Metric metric) {
  if (a.size() != b.size())
    throw ShapeError("points of dimension " + std::to_string(a.size()) + " and " +
                     std::to_string(b.size()));
  double acc = 0.0;
  if (metric == Metric::kL1) {
    for (std::size_t i = 0; i < a.size(); ++i) acc += std::abs(a[i] - b[i]);
    return acc;
  }
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return std::sqrt(acc);
}

// Shortest augmenting path with row/column potentials (Kuhn–Munkres).
std::vector<std::size_t> min_cost_assignment(const std::vector<double>& cost, std::size_t n) {
  if (cost.size() != n * n) throw ShapeError("cost matrix is not n×n");
  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<std::size_t> match(n + 1, 0), way(n + 1, 0);  // match[col] = row, 1-based
  std::vector<char> used(n + 1);
  for (std::size_t row = 1; row <= n; ++row) {
    match[0] = row;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), kInf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = match[j0];
      double delta = kInf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[match[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      match[j0] = match[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> assignment(n);
  for (std::size_t j = 1; j <= n; ++j) assignment[match[j] - 1] = j - 1;
  return assignment;
}

W1Result w1_exact(const EmpiricalDistribution& p, const EmpiricalDistribution& q) {
  const std::size_t n = p.points.size();
  if (n == 0) throw ShapeError("empty point cloud");
  if (q.points.size() != n)
    throw ShapeError("clouds of " + std::to_string(n) + " and " +
                     std::to_string(q.points.size()) + " points");
  if (p.metric != q.metric) throw ShapeError("clouds use different metrics");
  const std::size_t dim = p.points[0].size();
  for (const auto* cloud : {&p, &q})
    for (const auto& x : cloud->points)
      if (x.size() != dim) throw ShapeError("points of mixed dimension");

  std::vector<double> cost(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      cost[i * n + j] = distance(p.points[i], q.points[j], p.metric);

  W1Result r;
  r.plan.assignment = min_cost_assignment(cost, n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += cost[i * n + r.plan.assignment[i]];
  r.plan.cost = total / static_cast<double>(n);
  r.distance = r.plan.cost;
  return r;
}

std::uint64_t plan_checksum(const TransportPlan& plan) {
  std::string bytes;
  for (std::uint64_t a : plan.assignment)
    for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<char>((a >> (8 * i)) & 0xff));
  return fnv1a(bytes);
}

double max_pairwise_distance(const EmpiricalDistribution& p, const EmpiricalDistribution& q) {
  std::vector<const Point*> all;
  for (const auto& x : p.points) all.push_back(&x);
  for (const auto& x : q.points) all.push_back(&x);
  double best = 0.0;
  for (std::size_t i = 0; i < all.size(); ++i)
    for (std::size_t j = i + 1; j < all.size(); ++j)
      best = std::max(best, distance(*all[i], *all[j], p.metric));
  return best;
}

double w1_bound_interval(std::size_t i) { return 4.0 * (static_cast<double>(i) + 0.5); }

double permutation_dmax(std::size_t H, std::size_t n) {
  return 4.0 * std::sqrt(static_cast<double>((H + 1) * n + 1));
}

double w1_bound_permutation(double r, std::size_t H, std::size_t n) {
  return permutation_dmax(H, n) * r / (1.0 + r);
}

double w1_bound_scaling(double delta, std::size_t dim) {
  return 2.0 * delta * std::sqrt(static_cast<double>(dim));
}

std::string w1_json(const W1Result& r, Metric metric) {
  nlohmann::ordered_json j;
  j["distance"] = r.distance;
  j["metric"] = to_string(metric);
  j["n_points"] = r.plan.assignment.size();
  j["plan_checksum"] = plan_checksum(r.plan);
  return j.dump();
}

}  // namespace ood
