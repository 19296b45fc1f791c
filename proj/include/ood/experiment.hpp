#pragma once

// Experiment orchestration: config resolution, training, evaluation sweeps,
// transport measurements, bound calibration and CSV emission.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ood/gevrey.hpp"
#include "ood/tasks.hpp"
#include "ood/trainer.hpp"
#include "ood/transformer.hpp"
#include "ood/transport.hpp"

namespace ood {

inline constexpr const char* kVersion = OOD_VERSION;

struct ExperimentConfig {
  std::string experiment;  // meancalc | permutation | scaling
  std::uint64_t seed = 0;
  std::string out;
  ModelConfig model;
  TrainConfig train;
  LatentSpace space;
  std::size_t n_demos = 20;
  std::vector<double> sweep;  // i | r | δ
  std::vector<int> p_signs;   // scaling only: +1 → p = 1+δ, −1 → p = 1−δ
  std::size_t n_test_instances = 500;
  std::size_t n_cloud_points = 64;
  double theory_s = 2.0;
  double theory_c_exp = 1.0;
};

/// Full default document for an experiment; ConfigError for unknown names.
nlohmann::ordered_json default_config(const std::string& experiment);

struct ConfigSources {
  std::optional<std::filesystem::path> path;
  std::optional<std::string> experiment;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::vector<std::string> overrides;  // KEY=VALUE with dotted keys
};

/// Defaults ← file ← flags ← overrides. Unknown keys are a ConfigError.
nlohmann::ordered_json resolve_config_json(const ConfigSources& src);
ExperimentConfig parse_config(const nlohmann::ordered_json& doc);
nlohmann::ordered_json to_json(const ExperimentConfig& cfg);
/// Applies one KEY=VALUE override; VALUE is parsed as JSON, falling back to a string.
void apply_override(nlohmann::ordered_json& doc, const std::string& assignment);

struct Seeds {
  std::uint64_t model, train, partition, eval, cloud;
};
Seeds derive_seeds(std::uint64_t seed);

struct ResultRow {
  std::string experiment;
  double x_param = 0.0;
  double x_achieved = 0.0;  // realized ratio for permutation, else x_param
  int p_sign = 0;
  std::string split;  // train | test_ID | test_OOD
  std::size_t h = 1;
  double loss = 0.0;
  double d_bound = NAN;
  double d_empirical = NAN;
  double theory_bound = NAN;
  std::uint64_t seed = 0;

  bool operator==(const ResultRow& o) const;
};

std::string results_csv(const std::vector<ResultRow>& rows);
std::vector<ResultRow> parse_results_csv(const std::string& text);

// ---- stages -------------------------------------------------------------------

/// One trained model per distinct training set: a single model for meancalc
/// and scaling, one per ratio for permutation.
struct TrainedModel {
  std::string tag;
  ModelParams params;
  TrainResult result;
};

std::vector<TrainedModel> train_models(const ExperimentConfig& cfg);
/// Writes model_<tag>.ckpt and loss_<tag>.csv into dir.
void save_models(const std::vector<TrainedModel>& models, const std::filesystem::path& dir);
std::vector<TrainedModel> load_models(const ExperimentConfig& cfg,
                                      const std::filesystem::path& dir);
std::string model_tag(const ExperimentConfig& cfg, std::size_t sweep_index);

/// Permutation split for sweep point k, reproducible from the config seed.
Partition experiment_partition(const ExperimentConfig& cfg, std::size_t sweep_index);

struct CloudMeasurement {
  double x_param = 0.0;
  int p_sign = 0;
  Metric metric = Metric::kL2;
  W1Result w1;
  double bound = 0.0;
  double realized_dmax = 0.0;  // largest pairwise distance in the two clouds
};

/// Empirical W1 between in-distribution and shifted clouds at every sweep point.
std::vector<CloudMeasurement> measure_clouds(const ExperimentConfig& cfg);

/// Loss rows (train, test_ID, test_OOD) with d_bound / d_empirical filled on OOD rows.
std::vector<ResultRow> evaluate_models(const ExperimentConfig& cfg,
                                       const std::vector<TrainedModel>& models,
                                       const std::vector<CloudMeasurement>& clouds);

struct CurveCalibration {
  int p_sign = 0;
  std::size_t h = 1;
  Calibration cal;
  std::size_t n_points = 0;
  std::size_t n_binding = 0;  // points where the curve meets the loss within 1e-9
};

/// Calibrates one curve per (p_sign, h) on the OOD rows against d_bound and
/// fills theory_bound on those rows.
std::vector<CurveCalibration> calibrate_rows(std::vector<ResultRow>& rows, double s,
                                             double c_exp);

/// Rows violating d_empirical ≤ d_bound + 1e-6 or theory ≥ OOD loss.
std::vector<std::string> check_domination(const std::vector<ResultRow>& rows);

// ---- plot data ----------------------------------------------------------------

struct PlotTable {
  std::string name;  // fig1 | fig2 | fig3
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;  // values held at 9 significant digits
};

/// Rounds to 9 significant digits, the precision of the plot files.
double round_sig9(double v);
std::vector<PlotTable> build_plot_tables(const std::vector<ResultRow>& rows);
std::string plot_csv(const PlotTable& table);
PlotTable parse_plot_csv(const std::string& name, const std::string& text);
/// Writes <name>.csv for every table; returns the paths written.
std::vector<std::filesystem::path> emit_plotdata(const std::vector<ResultRow>& rows,
                                                 const std::filesystem::path& dir);

// ---- whole run ------------------------------------------------------------------

struct ExperimentResult {
  std::vector<ResultRow> rows;
  std::vector<CurveCalibration> calibrations;
  std::vector<CloudMeasurement> clouds;
  std::vector<std::string> violations;
  nlohmann::ordered_json manifest;
};

/// Trains, evaluates, measures, calibrates and writes every artifact under cfg.out.
/// With `pretrained`, training is skipped and those models are evaluated.
ExperimentResult run_experiment(const ExperimentConfig& cfg,
                                const std::vector<TrainedModel>* pretrained = nullptr);

/// Writes the JSONL datasets (training pool and one test set per sweep point).
std::vector<std::filesystem::path> generate_datasets(const ExperimentConfig& cfg,
                                                     const std::filesystem::path& dir);

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace ood
