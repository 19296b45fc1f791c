#include <cmath>
#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "ood/errors.hpp"
#include "ood/experiment.hpp"

using namespace ood;
namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("ood_test_experiment_" + name);
  fs::remove_all(p);
  return p;
}

ExperimentConfig tiny(const std::string& experiment, const fs::path& out) {
  ConfigSources src;
  src.experiment = experiment;
  src.out = out.string();
  src.seed = 11;
  const bool cot = experiment != "meancalc";
  src.overrides = {"model.n_layers=1", "model.d_model=8",   "model.n_heads=2",
                   "model.d_ff=16",    "train.n_steps=6",   "train.n_samples=24",
                   "train.batch_size=4", "train.log_every=2", "n_test_instances=10",
                   "n_cloud_points=6"};
  if (cot) {
    src.overrides.push_back("task.n_demos=3");
    src.overrides.push_back("model.max_seq_len=11");
  }
  if (experiment == "meancalc") src.overrides.push_back("sweep=[0,2,4]");
  if (experiment == "permutation") src.overrides.push_back("sweep=[1.0]");
  if (experiment == "scaling") src.overrides.push_back("sweep=[0.1,0.5]");
  return parse_config(resolve_config_json(src));
}

ResultRow ood_row(double d, double loss, std::size_t h = 1, int sign = 0) {
  ResultRow r;
  r.experiment = "scaling";
  r.x_param = d;
  r.x_achieved = d;
  r.p_sign = sign;
  r.split = "test_OOD";
  r.h = h;
  r.loss = loss;
  r.d_bound = d;
  r.d_empirical = d / 2;
  return r;
}

}  // namespace

TEST_CASE("defaults parse and serialize back unchanged") {
  for (const char* name : {"meancalc", "permutation", "scaling"}) {
    const auto doc = default_config(name);
    const auto cfg = parse_config(doc);
    CHECK(to_json(cfg) == doc);
    CHECK(cfg.experiment == name);
  }
  const auto mc = parse_config(default_config("meancalc"));
  CHECK(mc.sweep == std::vector<double>{0, 1, 2, 3, 4, 5});
  CHECK(mc.model.max_seq_len == 8);
  const auto sc = parse_config(default_config("scaling"));
  CHECK(sc.p_signs == std::vector<int>{1, -1});
  CHECK_THROWS_AS(default_config("nope"), ConfigError);
}

TEST_CASE("overrides and config errors") {
  auto doc = default_config("permutation");
  apply_override(doc, "train.n_steps=7");
  apply_override(doc, "sweep=[0.5]");
  apply_override(doc, "out=some/dir");
  const auto cfg = parse_config(doc);
  CHECK(cfg.train.n_steps == 7);
  CHECK(cfg.sweep == std::vector<double>{0.5});
  CHECK(cfg.out == "some/dir");

  CHECK_THROWS_AS(apply_override(doc, "train.nsteps=7"), ConfigError);
  CHECK_THROWS_AS(apply_override(doc, "train=7"), ConfigError);
  CHECK_THROWS_AS(apply_override(doc, "novalue"), ConfigError);

  auto bad = default_config("permutation");
  apply_override(bad, "sweep=[]");
  CHECK_THROWS_AS(parse_config(bad), ConfigError);
  bad = default_config("meancalc");
  apply_override(bad, "sweep=[1.5]");
  CHECK_THROWS_AS(parse_config(bad), ConfigError);
  bad = default_config("permutation");
  apply_override(bad, "model.max_seq_len=20");
  CHECK_THROWS_AS(parse_config(bad), ConfigError);
  bad = default_config("scaling");
  apply_override(bad, "p_signs=[2]");
  CHECK_THROWS_AS(parse_config(bad), ConfigError);
  bad = default_config("scaling");
  apply_override(bad, "train.learning_rate=\"fast\"");
  CHECK_THROWS_AS(parse_config(bad), ConfigError);
}

TEST_CASE("config files: layered over defaults, unknown keys rejected") {
  const auto dir = scratch("cfg");
  fs::create_directories(dir);
  {
    std::ofstream f(dir / "ok.json");
    f << R"({"experiment": "scaling", "seed": 5, "train": {"n_steps": 9}})";
    std::ofstream g(dir / "bad.json");
    g << R"({"experiment": "scaling", "train": {"n_stepz": 9}})";
  }
  ConfigSources src;
  src.path = dir / "ok.json";
  src.overrides = {"seed=6"};
  const auto cfg = parse_config(resolve_config_json(src));
  CHECK(cfg.experiment == "scaling");
  CHECK(cfg.seed == 6);
  CHECK(cfg.train.n_steps == 9);
  CHECK(cfg.train.batch_size == 32);

  src.path = dir / "bad.json";
  CHECK_THROWS_AS(resolve_config_json(src), ConfigError);
  src.path = dir / "missing.json";
  CHECK_THROWS_AS(resolve_config_json(src), ConfigError);
  CHECK_THROWS_AS(resolve_config_json(ConfigSources{}), ConfigError);
}

TEST_CASE("stage seeds are distinct and reproducible") {
  const auto a = derive_seeds(3), b = derive_seeds(3), c = derive_seeds(4);
  CHECK(a.model == b.model);
  CHECK(a.cloud == b.cloud);
  CHECK(a.model != c.model);
  const std::set<std::uint64_t> all{a.model, a.train, a.partition, a.eval, a.cloud};
  CHECK(all.size() == 5);
}

TEST_CASE("results CSV round trip is exact") {
  std::vector<ResultRow> rows;
  ResultRow r;
  r.experiment = "permutation";
  r.x_param = 0.25;
  r.x_achieved = 1.0 / 3.0;
  r.split = "train";
  r.h = 2;
  r.loss = 0.1 + 0.2;
  r.seed = 18446744073709551615ull;
  rows.push_back(r);
  r.split = "test_OOD";
  r.loss = 1e-300;
  r.d_bound = std::sqrt(2.0);
  r.d_empirical = 4.0 * std::atan(1.0);
  r.theory_bound = 6.02214076e23;
  r.p_sign = -1;
  rows.push_back(r);
  const auto text = results_csv(rows);
  const auto back = parse_results_csv(text);
  REQUIRE(back.size() == 2);
  CHECK(back[0] == rows[0]);
  CHECK(back[1] == rows[1]);
  CHECK(std::isnan(back[0].d_bound));
  CHECK(results_csv(back) == text);
  CHECK_THROWS(parse_results_csv("a,b\n"));
}

TEST_CASE("plot CSV holds nine significant digits and round-trips") {
  CHECK(round_sig9(1.0 / 3.0) == 0.333333333);
  CHECK(round_sig9(123456789012.0) == 123456789000.0);
  CHECK(std::isnan(round_sig9(NAN)));
  PlotTable t{"fig2", {"r", "h", "test_OOD"}, {}};
  t.rows.push_back({round_sig9(0.25), 1, round_sig9(std::exp(1.0))});
  t.rows.push_back({round_sig9(1.0), 2, NAN});
  const auto text = plot_csv(t);
  CHECK(text == "r,h,test_OOD\n0.25,1,2.71828183\n1,2,\n");
  const auto back = parse_plot_csv("fig2", text);
  CHECK(back.columns == t.columns);
  CHECK(back.rows[0] == t.rows[0]);
  CHECK(std::isnan(back.rows[1][2]));
  CHECK(plot_csv(back) == text);
}

TEST_CASE("calibrated curves dominate the losses and touch exactly once") {
  std::vector<ResultRow> rows;
  const double ds[] = {0.05, 0.1, 0.2, 0.3, 0.4};
  for (double d : ds) {
    rows.push_back(ood_row(d, 0.02 + d * d, 1, 1));
    rows.push_back(ood_row(d, 0.05 + 0.3 * d, 2, 1));
    rows.push_back(ood_row(d, 0.01 + d, 1, -1));
  }
  ResultRow tr = ood_row(0, 0.01);
  tr.split = "train";
  tr.d_bound = tr.d_empirical = NAN;
  rows.push_back(tr);
  const auto cals = calibrate_rows(rows, 2.0, 1.0);
  REQUIRE(cals.size() == 3);
  for (const auto& c : cals) {
    CHECK(c.n_points == 5);
    CHECK(c.n_binding == 1);
    CHECK(c.cal.A > 0.0);
  }
  for (const auto& r : rows) {
    if (r.split != "test_OOD") {
      CHECK(std::isnan(r.theory_bound));
      continue;
    }
    CHECK(r.theory_bound >= r.loss - 1e-9);
    // Independent evaluation of the calibrated curve.
    const auto it = std::find_if(cals.begin(), cals.end(), [&](const CurveCalibration& c) {
      return c.p_sign == r.p_sign && c.h == r.h;
    });
    CHECK(r.theory_bound == main_bound({it->cal.A, 1.0, 2.0, 0.0, 0.0, r.d_bound}).total);
  }
  CHECK(check_domination(rows).empty());
  rows[0].d_empirical = rows[0].d_bound * 2;
  rows[1].theory_bound = rows[1].loss / 2;
  CHECK(check_domination(rows).size() == 2);
}

TEST_CASE("meancalc clouds: coupled shift realizes the interval bound") {
  const auto cfg = tiny("meancalc", scratch("clouds"));
  const auto clouds = measure_clouds(cfg);
  REQUIRE(clouds.size() == 3);
  for (const auto& c : clouds) {
    CHECK(c.metric == Metric::kL1);
    CHECK(c.w1.distance == doctest::Approx(c.bound).epsilon(1e-12));
    CHECK(c.bound == 4.0 * (c.x_param + 0.5));
  }
}

TEST_CASE("scaling clouds stay under the closed-form bound") {
  const auto cfg = tiny("scaling", scratch("sclouds"));
  const auto clouds = measure_clouds(cfg);
  REQUIRE(clouds.size() == 4);
  for (const auto& c : clouds) {
    CHECK(c.metric == Metric::kL2);
    CHECK(c.w1.distance <= c.bound + 1e-9);
    CHECK(c.bound == doctest::Approx(2.0 * c.x_param * std::sqrt(10.0)));
  }
}

TEST_CASE("end to end: meancalc runs are byte-identical") {
  const auto d1 = scratch("mc1"), d2 = scratch("mc2");
  const auto a = run_experiment(tiny("meancalc", d1));
  const auto b = run_experiment(tiny("meancalc", d2));
  for (const char* f : {"results.csv", "eval.csv", "fig1.csv", "model_meancalc.ckpt",
                        "loss_meancalc.csv", "config.json", "manifest.json"})
    CHECK(fs::exists(d1 / f));
  CHECK(read_text(d1 / "results.csv") == read_text(d2 / "results.csv"));
  CHECK(read_text(d1 / "fig1.csv") == read_text(d2 / "fig1.csv"));
  CHECK(a.manifest["config_hash"] == b.manifest["config_hash"]);
  CHECK(a.manifest["files"] == b.manifest["files"]);
  // train, test_ID and one OOD row per sweep point.
  CHECK(a.rows.size() == 5);
  CHECK(parse_results_csv(read_text(d1 / "results.csv")) == a.rows);
  const auto plot = parse_plot_csv("fig1", read_text(d1 / "fig1.csv"));
  CHECK(plot.rows.size() == 3);
  CHECK(plot.rows[1][0] == 2.0);
  CHECK(plot.rows[1][3] == round_sig9(a.rows[3].loss));

  const auto reloaded = load_models(tiny("meancalc", d1), d1);
  REQUIRE(reloaded.size() == 1);
  CHECK(encode_checkpoint(reloaded[0].params) == read_text(d1 / "model_meancalc.ckpt"));
}

TEST_CASE("end to end: permutation and scaling row layout") {
  const auto dp = scratch("perm");
  const auto perm = run_experiment(tiny("permutation", dp));
  // (train, test_ID, test_OOD) × H.
  CHECK(perm.rows.size() == 6);
  CHECK(fs::exists(dp / "model_r0.ckpt"));
  CHECK(fs::exists(dp / "fig2.csv"));
  for (const auto& r : perm.rows) {
    CHECK(r.x_achieved == 1.0);
    CHECK(std::isfinite(r.loss));
  }
  CHECK(perm.manifest["diagnostics"]["partitions"][0]["n_train"] == 32);

  const auto ds = scratch("scale");
  const auto sc = run_experiment(tiny("scaling", ds));
  // train + test_ID per h, then OOD per (δ, sign, h).
  CHECK(sc.rows.size() == 2 * 2 + 2 * 2 * 2);
  CHECK(sc.calibrations.size() == 4);
  for (const auto& c : sc.calibrations) CHECK(c.n_binding == 1);
  CHECK(!sc.manifest["diagnostics"]["scale_violations"].empty());
  const auto plot = parse_plot_csv("fig3", read_text(ds / "fig3.csv"));
  CHECK(plot.rows.size() == 8);
}

TEST_CASE("stage failures are tagged and keep their exit code") {
  auto cfg = tiny("meancalc", scratch("fail"));
  cfg.train.learning_rate = 1e300;
  cfg.train.clip_norm = 0.0;
  try {
    run_experiment(cfg);
    FAIL("expected a training error");
  } catch (const Error& e) {
    CHECK(e.code() == TrainingError("x").code());
    CHECK(std::string(e.what()).rfind("[train]", 0) == 0);
  }
}

TEST_CASE("datasets: JSONL files decode back to records") {
  const auto dir = scratch("data");
  const auto paths = generate_datasets(tiny("scaling", dir), dir);
  // train, test_id and one file per (δ, sign).
  CHECK(paths.size() == 6);
  std::ifstream f(dir / "test_d1_plus.jsonl");
  std::string line;
  std::size_t n = 0;
  while (std::getline(f, line)) {
    const auto rec = decode_record(line);
    CHECK(encode_record(rec) == line);
    ++n;
  }
  CHECK(n == 10);
}
