#pragma once

// Seeded generators for the mean-square task, latent-variable CoT chains,
// and the three structured shift constructions.

#include <array>
#include <compare>
#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "ood/rng.hpp"

namespace ood {

/// Discrete per-step latent values and chain length H (chains have H+1 scalars).
struct LatentSpace {
  std::vector<double> values{-2.0, -1.0, 1.0, 2.0};
  std::size_t H = 2;

  void validate() const;
  std::size_t M() const { return values.size(); }
  /// M^(H+1).
  std::size_t size() const;
};

struct LatentTask {
  std::vector<double> theta;  // H+1 entries

  auto operator<=>(const LatentTask&) const = default;
};

struct ChainSample {
  std::vector<double> z;  // z_0 … z_H
  double zeta = 0.0;
};

double leaky_relu(double x);

/// z_0 = lrelu(ζ + ϑ_0); z_h = lrelu(z_{h−1} + ϑ_h). ζ must lie in [−0.5, 0.5].
ChainSample gen_chain(const LatentTask& theta, double zeta);

/// All M^(H+1) tasks, lexicographic in value index.
std::vector<LatentTask> enumerate_theta_space(const LatentSpace& space);

using FlatPair = std::pair<double, std::size_t>;  // (value, position)
std::set<FlatPair> flatten_set(const LatentTask& theta);
std::set<FlatPair> flatten_union(std::span<const LatentTask> tasks);

struct Partition {
  std::vector<LatentTask> train;  // Θ
  std::vector<LatentTask> test;   // Θ̃
  double target_ratio = 0.0;
  double achieved_ratio() const {
    return static_cast<double>(test.size()) / static_cast<double>(train.size());
  }
};

/// Splits Θ⋆ into disjoint halves with |Θ̃| = round(|Θ⋆|·r/(1+r)) and equal
/// flatten-set unions. Throws ConstraintError when either side would hold
/// fewer than M tasks.
Partition partition_theta(const LatentSpace& space, double ratio, Rng& rng);

/// Checks disjointness, Θ ∪ Θ̃ = Θ⋆ and flatten-union equality.
bool partition_is_valid(const LatentSpace& space, const Partition& part);

struct ScaleViolation {
  double value;   // ϑ appearing in Θ
  double scaled;  // p·ϑ, which also appears in Θ
};

struct ScaledSet {
  std::vector<LatentTask> tasks;
  std::vector<ScaleViolation> violations;
};

/// Multiplies every latent by p and reports values with p·ϑ ∈ Φ. p = 1 is a
/// contract error; violations are returned, not thrown.
ScaledSet scale_theta_set(std::span<const LatentTask> tasks, double p);

// ---- mean-square task -----------------------------------------------------

enum class Split { kTrain, kTest };

struct MeanCalcSample {
  std::array<double, 4> x{};
  double y0 = 0.0;  // mean
  double y1 = 0.0;  // mean squared
};

MeanCalcSample make_mean_calc(const std::array<double, 4>& x);

/// Integer part uniform on [i, i+10); fractional part in [0, 0.5) for train
/// and [0.5, 1) for test. Train requires i = 0.
MeanCalcSample gen_mean_calc(std::size_t i, Split split, Rng& rng);

/// A train draw and the test draw at shift i built from the same random
/// numbers: x' = x + i + 0.5 coordinate-wise.
std::pair<MeanCalcSample, MeanCalcSample> gen_mean_calc_pair(std::size_t i, Rng& rng);

// ---- prompts ----------------------------------------------------------------

struct StepRole {
  std::size_t demo;  // n for the test chain
  std::size_t h;
  bool operator==(const StepRole&) const = default;
};

struct PromptSequence {
  std::vector<double> scalars;
  std::vector<StepRole> roles;
};

/// Demonstration chains in order followed by the test input z_0.
PromptSequence build_prompt(std::span<const ChainSample> demos, double z0_test);

/// n demonstrations plus one test chain, all drawn under the same task.
struct CotInstance {
  LatentTask theta;
  std::vector<ChainSample> chains;  // n + 1; the last is the test chain

  std::size_t n_demos() const { return chains.size() - 1; }
  /// Every scalar of every chain, in order: (n+1)(H+1) values.
  std::vector<double> flat() const;
  PromptSequence prompt() const;
};

/// Draws fresh ζ ~ U[−0.5, 0.5] per chain.
CotInstance gen_cot_instance(const LatentTask& theta, std::size_t n_demos, Rng& rng);

// ---- shift specification ------------------------------------------------------

struct IntervalShift {
  std::size_t i = 0;
};
struct PermutationShift {
  std::vector<LatentTask> theta_train;
  std::vector<LatentTask> theta_test;
};
struct ScalingShift {
  double p = 1.0;
  bool allow_violation = false;
};
using ShiftSpec = std::variant<std::monostate, IntervalShift, PermutationShift, ScalingShift>;

/// Enforces the per-variant invariants; throws ConstraintError.
void validate_shift(const ShiftSpec& spec, const LatentSpace& space);

// ---- dataset dump -----------------------------------------------------------

/// One JSON-lines record. Mean-square records carry an empty theta/zeta_list
/// and a single chain (x0, x1, x2, x3, y0, y1) with prompt (x0 … x3).
struct DatasetRecord {
  std::uint64_t task_id = 0;
  LatentTask theta;
  std::vector<double> zeta_list;
  std::vector<std::vector<double>> chains;
  std::vector<double> prompt;
  std::string split;
  ShiftSpec shift_spec;

  bool operator==(const DatasetRecord&) const;
};

DatasetRecord make_record(std::uint64_t task_id, const CotInstance& inst, std::string split,
                          ShiftSpec shift);
DatasetRecord make_record(std::uint64_t task_id, const MeanCalcSample& s, std::string split,
                          ShiftSpec shift);
std::string encode_record(const DatasetRecord& r);
DatasetRecord decode_record(std::string_view line);

}  // namespace ood
