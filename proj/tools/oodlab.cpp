// oodlab: command-line front end for data generation, training, evaluation,
// transport distances and bound calibration.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "ood/errors.hpp"
#include "ood/experiment.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

struct CommonOpts {
  std::string config, experiment, out;
  std::uint64_t seed = 0;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("--config", o.config, "JSON config file")->check(CLI::ExistingFile);
  cmd->add_option("--experiment", o.experiment, "meancalc | permutation | scaling");
  cmd->add_option("--seed", o.seed, "root seed");
  cmd->add_option("--out", o.out, "output directory");
  cmd->add_option("--override", o.overrides, "KEY=VALUE, dotted keys; repeatable");
}

ood::ExperimentConfig resolve(CLI::App* cmd, const CommonOpts& o) {
  ood::ConfigSources src;
  if (!o.config.empty()) src.path = o.config;
  if (!o.experiment.empty()) src.experiment = o.experiment;
  if (cmd->count("--seed")) src.seed = o.seed;
  if (!o.out.empty()) src.out = o.out;
  src.overrides = o.overrides;
  return ood::parse_config(ood::resolve_config_json(src));
}

// One point per line, coordinates separated by commas or whitespace.
ood::EmpiricalDistribution read_cloud(const std::string& path, ood::Metric metric) {
  std::istringstream in(ood::read_text(path));
  ood::EmpiricalDistribution d{{}, metric};
  std::string line;
  while (std::getline(in, line)) {
    for (char& c : line)
      if (c == ',') c = ' ';
    std::istringstream ls(line);
    ood::Point p;
    double v;
    while (ls >> v) p.push_back(v);
    if (!ls.eof()) throw ood::Error("unparseable coordinate in " + path);
    if (!p.empty()) d.points.push_back(std::move(p));
  }
  return d;
}

void report(const ood::ExperimentResult& res, const fs::path& out) {
  for (const auto& c : res.calibrations)
    std::printf("calibration p_sign=%+d h=%zu A=%.6g binding_points=%zu\n", c.p_sign, c.h,
                c.cal.A, c.n_binding);
  for (const auto& v : res.violations) std::printf("violation: %s\n", v.c_str());
  std::printf("wrote %s\n", (out / "results.csv").string().c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"oodlab: distribution-shift experiments for small transformers"};
  app.set_version_flag("--version", std::string(ood::kVersion));
  app.require_subcommand(1);

  CommonOpts gen_o, train_o, eval_o, exp_o;
  auto* gen = app.add_subcommand("gen-data", "write JSONL datasets");
  add_common(gen, gen_o);
  auto* train = app.add_subcommand("train", "train models and write checkpoints");
  add_common(train, train_o);
  auto* eval = app.add_subcommand("eval", "evaluate checkpoints found in --out");
  add_common(eval, eval_o);
  bool eval_allow = false;
  eval->add_flag("--allow-violations", eval_allow, "exit 0 even if a bound is violated");
  auto* exp = app.add_subcommand("experiment", "train, evaluate, calibrate and emit");
  add_common(exp, exp_o);
  bool exp_allow = false;
  exp->add_flag("--allow-violations", exp_allow, "exit 0 even if a bound is violated");

  std::string cloud_a, cloud_b, metric_name = "l2";
  auto* w1 = app.add_subcommand("w1", "exact W1 between two equal-size point clouds");
  w1->add_option("a", cloud_a, "first cloud file")->required()->check(CLI::ExistingFile);
  w1->add_option("b", cloud_b, "second cloud file")->required()->check(CLI::ExistingFile);
  w1->add_option("--metric", metric_name, "l1 | l2");

  ood::BoundInputs bin{1.0, 1.0, 2.0, 0.0, 0.0, 0.0};
  std::vector<double> ds;
  auto* bound = app.add_subcommand("bound", "evaluate the shift bound over distances");
  bound->add_option("--A", bin.A, "smoothness constant")->required();
  bound->add_option("--C-exp", bin.C_exp, "exponent constant");
  bound->add_option("--s", bin.s, "Gevrey order");
  bound->add_option("--eps", bin.eps, "in-distribution error");
  bound->add_option("--L1", bin.L1, "Lipschitz constant");
  bound->add_option("d", ds, "distances")->required();

  std::string results_path;
  double cal_s = 2.0, cal_c = 1.0;
  auto* cal = app.add_subcommand("calibrate", "fit the bound to the OOD rows of a results file");
  cal->add_option("--results", results_path, "results.csv")->required()->check(CLI::ExistingFile);
  cal->add_option("--s", cal_s, "Gevrey order");
  cal->add_option("--C-exp", cal_c, "exponent constant");

  std::string plot_results, plot_out = ".";
  auto* emit = app.add_subcommand("emit-plotdata", "write figure CSVs from a results file");
  emit->add_option("--results", plot_results, "results.csv")->required()->check(CLI::ExistingFile);
  emit->add_option("--out", plot_out, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(ood::ExitCode::kConfig);
  }

  try {
    if (*gen) {
      const auto cfg = resolve(gen, gen_o);
      for (const auto& p : ood::generate_datasets(cfg, fs::path(cfg.out) / "data"))
        std::printf("wrote %s\n", p.string().c_str());
    } else if (*train) {
      const auto cfg = resolve(train, train_o);
      const auto models = ood::train_models(cfg);
      ood::save_models(models, cfg.out);
      for (const auto& m : models)
        std::printf("model %s final_loss=%.9g\n", m.tag.c_str(), m.result.final_loss);
    } else if (*eval || *exp) {
      const bool is_eval = static_cast<bool>(*eval);
      const auto cfg = is_eval ? resolve(eval, eval_o) : resolve(exp, exp_o);
      ood::ExperimentResult res;
      if (is_eval) {
        const auto models = ood::load_models(cfg, cfg.out);
        res = ood::run_experiment(cfg, &models);
      } else {
        res = ood::run_experiment(cfg);
      }
      report(res, cfg.out);
      if (!res.violations.empty() && !(is_eval ? eval_allow : exp_allow))
        throw ood::ConstraintError(std::to_string(res.violations.size()) +
                                   " bound violation(s); see manifest.json");
    } else if (*w1) {
      const auto metric = ood::parse_metric(metric_name);
      const auto r = ood::w1_exact(read_cloud(cloud_a, metric), read_cloud(cloud_b, metric));
      std::printf("%s\n", ood::w1_json(r, metric).c_str());
    } else if (*bound) {
      std::fputs(ood::bound_curve_csv(ds, bin).c_str(), stdout);
    } else if (*cal) {
      auto rows = ood::parse_results_csv(ood::read_text(results_path));
      ordered_json out = ordered_json::array();
      for (const auto& c : ood::calibrate_rows(rows, cal_s, cal_c))
        out.push_back({{"p_sign", c.p_sign},
                       {"h", c.h},
                       {"A", c.cal.A},
                       {"n_points", c.n_points},
                       {"n_binding", c.n_binding}});
      std::printf("%s\n", out.dump(2).c_str());
    } else if (*emit) {
      const auto rows = ood::parse_results_csv(ood::read_text(plot_results));
      for (const auto& p : ood::emit_plotdata(rows, plot_out))
        std::printf("wrote %s\n", p.string().c_str());
    }
  } catch (const ood::Error& e) {
    std::fprintf(stderr, "oodlab: %s\n", e.what());
    return static_cast<int>(e.code());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "oodlab: %s\n", e.what());
    return static_cast<int>(ood::ExitCode::kFailure);
  }
  return 0;
}
