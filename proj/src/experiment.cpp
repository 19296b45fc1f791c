#include "ood/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "ood/errors.hpp"
#include "ood/rng.hpp"

namespace ood {

using nlohmann::ordered_json;

namespace {

bool is_experiment(const std::string& name) {
  return name == "meancalc" || name == "permutation" || name == "scaling";
}

bool is_cot(const ExperimentConfig& cfg) { return cfg.experiment != "meancalc"; }

std::size_t prompt_dim(const ExperimentConfig& cfg) {
  return (cfg.space.H + 1) * cfg.n_demos + 1;
}

// Every key in `user` must already exist in `base`; arrays and scalars replace.
void merge_into(ordered_json& base, const ordered_json& user, const std::string& prefix) {
  if (!user.is_object()) throw ConfigError("config section '" + prefix + "' must be an object");
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
    auto& slot = base[it.key()];
    if (slot.is_object())
      merge_into(slot, it.value(), key);
    else
      slot = it.value();
  }
}

template <class T>
T get_field(const ordered_json& doc, const char* section, const char* key) {
  const ordered_json& node = section ? doc.at(section) : doc;
  try {
    return node.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(std::string("bad or missing value for '") + (section ? section : "") +
                      (section ? "." : "") + key + "'");
  }
}

std::string fmt17(double v) {
  if (std::isnan(v)) return "";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt9(double v) {
  if (std::isnan(v)) return "";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

double parse_num(const std::string& s) {
  if (s.empty()) return NAN;
  std::size_t used = 0;
  const double v = std::stod(s, &used);
  if (used != s.size()) throw Error("malformed number '" + s + "'");
  return v;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

bool same(double a, double b) { return (std::isnan(a) && std::isnan(b)) || a == b; }

std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

// ---- config -------------------------------------------------------------------

ordered_json default_config(const std::string& experiment) {
  if (!is_experiment(experiment))
    throw ConfigError("unknown experiment '" + experiment +
                      "' (expected meancalc, permutation or scaling)");
  const bool mc = experiment == "meancalc";
  ordered_json d;
  d["experiment"] = experiment;
  d["seed"] = 0;
  d["out"] = "runs/" + experiment;
  d["model"] = {{"n_layers", 2},   {"d_model", 32},      {"n_heads", 4},
                {"d_ff", 128},     {"max_seq_len", mc ? 8 : 64},
                {"ln_eps", 1e-5},  {"init_std", 0.02}};
  d["train"] = {{"batch_size", 32},
                {"n_steps", mc ? 2000 : 6250},
                {"n_samples", mc ? 20000 : 100000},
                {"learning_rate", 3e-4},
                {"adam_beta1", 0.9},
                {"adam_beta2", 0.999},
                {"adam_eps", 1e-8},
                {"clip_norm", 1.0},
                {"log_every", 10}};
  d["task"] = {{"values", {-2.0, -1.0, 1.0, 2.0}}, {"H", 2}, {"n_demos", 20}};
  if (mc)
    d["sweep"] = {0, 1, 2, 3, 4, 5};
  else if (experiment == "permutation")
    d["sweep"] = {0.25, 1.0};
  else
    d["sweep"] = {0.05, 0.1, 0.2, 0.3, 0.4, 0.5};
  d["p_signs"] = experiment == "scaling" ? ordered_json{1, -1} : ordered_json{1};
  d["n_test_instances"] = mc ? 1000 : 500;
  d["n_cloud_points"] = 64;
  d["theory"] = {{"s", 2.0}, {"C_exp", 1.0}};
  return d;
}

void apply_override(ordered_json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("override '" + assignment + "' is not KEY=VALUE");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  ordered_json value;
  try {
    value = ordered_json::parse(text);
  } catch (const nlohmann::json::exception&) {
    value = text;
  }
  ordered_json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? dot : dot - start);
    if (!node->is_object() || !node->contains(part))
      throw ConfigError("unknown config key '" + key + "'");
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  if (node->is_object()) throw ConfigError("override '" + key + "' names a section");
  *node = value;
}

ordered_json resolve_config_json(const ConfigSources& src) {
  ordered_json user = ordered_json::object();
  if (src.path) {
    std::ifstream f(*src.path);
    if (!f) throw ConfigError("cannot read config " + src.path->string());
    try {
      user = ordered_json::parse(f);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("invalid JSON in " + src.path->string() + ": " + e.what());
    }
  }
  std::string name;
  if (src.experiment)
    name = *src.experiment;
  else if (user.contains("experiment") && user["experiment"].is_string())
    name = user["experiment"].get<std::string>();
  else
    throw ConfigError("no experiment named (use --experiment or the config's \"experiment\")");
  ordered_json doc = default_config(name);
  merge_into(doc, user, "");
  doc["experiment"] = name;
  if (src.seed) doc["seed"] = *src.seed;
  if (src.out) doc["out"] = *src.out;
  for (const auto& o : src.overrides) apply_override(doc, o);
  return doc;
}

ExperimentConfig parse_config(const ordered_json& doc) {
  ExperimentConfig c;
  try {
    c.experiment = get_field<std::string>(doc, nullptr, "experiment");
    if (!is_experiment(c.experiment))
      throw ConfigError("unknown experiment '" + c.experiment + "'");
    c.seed = get_field<std::uint64_t>(doc, nullptr, "seed");
    c.out = get_field<std::string>(doc, nullptr, "out");

    c.model.n_layers = get_field<std::size_t>(doc, "model", "n_layers");
    c.model.d_model = get_field<std::size_t>(doc, "model", "d_model");
    c.model.n_heads = get_field<std::size_t>(doc, "model", "n_heads");
    c.model.d_ff = get_field<std::size_t>(doc, "model", "d_ff");
    c.model.max_seq_len = get_field<std::size_t>(doc, "model", "max_seq_len");
    c.model.ln_eps = get_field<double>(doc, "model", "ln_eps");
    c.model.init_std = get_field<double>(doc, "model", "init_std");

    c.train.batch_size = get_field<std::size_t>(doc, "train", "batch_size");
    c.train.n_steps = get_field<std::size_t>(doc, "train", "n_steps");
    c.train.n_samples = get_field<std::size_t>(doc, "train", "n_samples");
    c.train.learning_rate = get_field<double>(doc, "train", "learning_rate");
    c.train.adam_beta1 = get_field<double>(doc, "train", "adam_beta1");
    c.train.adam_beta2 = get_field<double>(doc, "train", "adam_beta2");
    c.train.adam_eps = get_field<double>(doc, "train", "adam_eps");
    c.train.clip_norm = get_field<double>(doc, "train", "clip_norm");
    c.train.log_every = get_field<std::size_t>(doc, "train", "log_every");

    c.space.values = get_field<std::vector<double>>(doc, "task", "values");
    c.space.H = get_field<std::size_t>(doc, "task", "H");
    c.n_demos = get_field<std::size_t>(doc, "task", "n_demos");

    c.sweep = get_field<std::vector<double>>(doc, nullptr, "sweep");
    c.p_signs = get_field<std::vector<int>>(doc, nullptr, "p_signs");
    c.n_test_instances = get_field<std::size_t>(doc, nullptr, "n_test_instances");
    c.n_cloud_points = get_field<std::size_t>(doc, nullptr, "n_cloud_points");
    c.theory_s = get_field<double>(doc, "theory", "s");
    c.theory_c_exp = get_field<double>(doc, "theory", "C_exp");
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }

  c.model.validate();
  c.train.validate();
  c.space.validate();
  if (c.sweep.empty()) throw ConfigError("sweep must not be empty");
  for (double x : c.sweep) {
    if (!std::isfinite(x)) throw ConfigError("sweep values must be finite");
    if (c.experiment == "meancalc" && (x < 0.0 || x != std::floor(x)))
      throw ConfigError("meancalc sweep values must be nonnegative integers");
    if (c.experiment != "meancalc" && !(x > 0.0))
      throw ConfigError(c.experiment + " sweep values must be positive");
  }
  if (c.experiment == "scaling") {
    if (c.p_signs.empty()) throw ConfigError("p_signs must not be empty");
    for (int s : c.p_signs)
      if (s != 1 && s != -1) throw ConfigError("p_signs entries must be 1 or -1");
  }
  if (c.n_test_instances == 0) throw ConfigError("n_test_instances must be positive");
  if (c.n_cloud_points == 0) throw ConfigError("n_cloud_points must be positive");
  if (!(c.theory_s >= 1.0)) throw ConfigError("theory.s must be at least 1");
  if (!(c.theory_c_exp > 0.0)) throw ConfigError("theory.C_exp must be positive");
  const std::size_t need = is_cot(c) ? (c.space.H + 1) * (c.n_demos + 1) - 1 : 5;
  if (c.model.max_seq_len < need)
    throw ConfigError("model.max_seq_len must be at least " + std::to_string(need));
  return c;
}

ordered_json to_json(const ExperimentConfig& c) {
  ordered_json d;
  d["experiment"] = c.experiment;
  d["seed"] = c.seed;
  d["out"] = c.out;
  d["model"] = {{"n_layers", c.model.n_layers}, {"d_model", c.model.d_model},
                {"n_heads", c.model.n_heads},   {"d_ff", c.model.d_ff},
                {"max_seq_len", c.model.max_seq_len}, {"ln_eps", c.model.ln_eps},
                {"init_std", c.model.init_std}};
  d["train"] = {{"batch_size", c.train.batch_size},
                {"n_steps", c.train.n_steps},
                {"n_samples", c.train.n_samples},
                {"learning_rate", c.train.learning_rate},
                {"adam_beta1", c.train.adam_beta1},
                {"adam_beta2", c.train.adam_beta2},
                {"adam_eps", c.train.adam_eps},
                {"clip_norm", c.train.clip_norm},
                {"log_every", c.train.log_every}};
  d["task"] = {{"values", c.space.values}, {"H", c.space.H}, {"n_demos", c.n_demos}};
  d["sweep"] = c.sweep;
  d["p_signs"] = c.p_signs;
  d["n_test_instances"] = c.n_test_instances;
  d["n_cloud_points"] = c.n_cloud_points;
  d["theory"] = {{"s", c.theory_s}, {"C_exp", c.theory_c_exp}};
  return d;
}

Seeds derive_seeds(std::uint64_t seed) {
  return {child_seed(seed, "model"), child_seed(seed, "train"), child_seed(seed, "partition"),
          child_seed(seed, "eval"), child_seed(seed, "cloud")};
}

// ---- result table ---------------------------------------------------------------

bool ResultRow::operator==(const ResultRow& o) const {
  return experiment == o.experiment && same(x_param, o.x_param) &&
         same(x_achieved, o.x_achieved) && p_sign == o.p_sign && split == o.split && h == o.h &&
         same(loss, o.loss) && same(d_bound, o.d_bound) && same(d_empirical, o.d_empirical) &&
         same(theory_bound, o.theory_bound) && seed == o.seed;
}

namespace {
constexpr const char* kResultsHeader =
    "experiment,x_param,x_achieved,p_sign,split,h,loss,d_bound,d_empirical,theory_bound,seed";
}

std::string results_csv(const std::vector<ResultRow>& rows) {
  std::string out = std::string(kResultsHeader) + "\n";
  for (const auto& r : rows) {
    out += r.experiment + "," + fmt17(r.x_param) + "," + fmt17(r.x_achieved) + "," +
           std::to_string(r.p_sign) + "," + r.split + "," + std::to_string(r.h) + "," +
           fmt17(r.loss) + "," + fmt17(r.d_bound) + "," + fmt17(r.d_empirical) + "," +
           fmt17(r.theory_bound) + "," + std::to_string(r.seed) + "\n";
  }
  return out;
}

std::vector<ResultRow> parse_results_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || split_csv_line(line) != split_csv_line(kResultsHeader))
    throw Error("results CSV has an unexpected header");
  std::vector<ResultRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 11) throw Error("results CSV row has " + std::to_string(f.size()) + " fields");
    ResultRow r;
    r.experiment = f[0];
    r.x_param = parse_num(f[1]);
    r.x_achieved = parse_num(f[2]);
    r.p_sign = std::stoi(f[3]);
    r.split = f[4];
    r.h = std::stoul(f[5]);
    r.loss = parse_num(f[6]);
    r.d_bound = parse_num(f[7]);
    r.d_empirical = parse_num(f[8]);
    r.theory_bound = parse_num(f[9]);
    r.seed = std::stoull(f[10]);
    rows.push_back(std::move(r));
  }
  return rows;
}

// ---- training -------------------------------------------------------------------

std::string model_tag(const ExperimentConfig& cfg, std::size_t sweep_index) {
  if (cfg.experiment == "permutation") return "r" + std::to_string(sweep_index);
  return cfg.experiment == "meancalc" ? "meancalc" : "all";
}

Partition experiment_partition(const ExperimentConfig& cfg, std::size_t sweep_index) {
  Rng rng(child_seed(derive_seeds(cfg.seed).partition, sweep_index));
  return partition_theta(cfg.space, cfg.sweep.at(sweep_index), rng);
}

namespace {

TrainConfig train_config(const ExperimentConfig& cfg) {
  TrainConfig t = cfg.train;
  t.seed = derive_seeds(cfg.seed).train;
  return t;
}

ModelConfig model_config(const ExperimentConfig& cfg) {
  ModelConfig m = cfg.model;
  m.seed = derive_seeds(cfg.seed).model;
  return m;
}

CotTask cot_task(const ExperimentConfig& cfg, std::size_t model_index) {
  CotTask t;
  t.space = cfg.space;
  t.n_demos = cfg.n_demos;
  t.theta = cfg.experiment == "permutation" ? experiment_partition(cfg, model_index).train
                                            : enumerate_theta_space(cfg.space);
  return t;
}

std::size_t model_count(const ExperimentConfig& cfg) {
  return cfg.experiment == "permutation" ? cfg.sweep.size() : 1;
}

}  // namespace

std::vector<TrainedModel> train_models(const ExperimentConfig& cfg) {
  std::vector<TrainedModel> out;
  for (std::size_t k = 0; k < model_count(cfg); ++k) {
    TrainedModel m;
    m.tag = model_tag(cfg, k);
    m.params = init_params(model_config(cfg));
    std::cerr << "[train] " << cfg.experiment << " model " << m.tag << " ("
              << cfg.train.n_steps << " steps)\n";
    m.result = cfg.experiment == "meancalc"
                   ? train_meancalc(m.params, train_config(cfg))
                   : train_cot(m.params, cot_task(cfg, k), train_config(cfg));
    std::cerr << "[train] " << m.tag << " final loss " << m.result.final_loss << "\n";
    out.push_back(std::move(m));
  }
  return out;
}

void save_models(const std::vector<TrainedModel>& models, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (const auto& m : models) {
    save_checkpoint(m.params, dir / ("model_" + m.tag + ".ckpt"));
    write_text(dir / ("loss_" + m.tag + ".csv"), loss_curve_csv(m.result.curve));
  }
}

std::vector<TrainedModel> load_models(const ExperimentConfig& cfg,
                                      const std::filesystem::path& dir) {
  std::vector<TrainedModel> out;
  for (std::size_t k = 0; k < model_count(cfg); ++k) {
    TrainedModel m;
    m.tag = model_tag(cfg, k);
    m.params = load_checkpoint(dir / ("model_" + m.tag + ".ckpt"));
    if (!(m.params.config == model_config(cfg)))
      throw ConfigError("checkpoint model_" + m.tag + " does not match the model config");
    out.push_back(std::move(m));
  }
  return out;
}

// ---- evaluation cases -----------------------------------------------------------

namespace {

struct EvalCase {
  std::string split;
  double x_param = 0.0;
  double x_achieved = 0.0;
  int p_sign = 0;
  std::size_t model = 0;
  std::uint64_t seed = 0;
  std::string file_tag;
  ShiftSpec shift;
  std::vector<MeanCalcSample> mc;
  std::vector<CotInstance> cot;
};

std::string signed_tag(std::size_t k, int sign) {
  return "d" + std::to_string(k) + (sign > 0 ? "_plus" : "_minus");
}

std::vector<EvalCase> build_eval_cases(const ExperimentConfig& cfg, bool include_train) {
  const Seeds seeds = derive_seeds(cfg.seed);
  const std::size_t n = cfg.n_test_instances;
  std::vector<EvalCase> cases;
  auto add = [&](EvalCase c) { cases.push_back(std::move(c)); };

  if (cfg.experiment == "meancalc") {
    if (include_train) {
      auto pool = meancalc_pool(train_config(cfg));
      pool.resize(std::min(pool.size(), n));
      add({"train", 0, 0, 0, 0, train_config(cfg).seed, "train", std::monostate{}, pool, {}});
    }
    EvalCase id{"test_ID", 0, 0, 0, 0, child_seed(seeds.eval, "id"), "id", std::monostate{}, {}, {}};
    Rng rid(id.seed);
    for (std::size_t k = 0; k < n; ++k) id.mc.push_back(gen_mean_calc(0, Split::kTrain, rid));
    add(std::move(id));
    for (std::size_t k = 0; k < cfg.sweep.size(); ++k) {
      const auto i = static_cast<std::size_t>(cfg.sweep[k]);
      EvalCase c{"test_OOD", cfg.sweep[k], cfg.sweep[k], 0, 0, child_seed(seeds.eval, k),
                 "i" + std::to_string(i), IntervalShift{i}, {}, {}};
      Rng r(c.seed);
      for (std::size_t j = 0; j < n; ++j) c.mc.push_back(gen_mean_calc(i, Split::kTest, r));
      add(std::move(c));
    }
    return cases;
  }

  if (cfg.experiment == "permutation") {
    for (std::size_t k = 0; k < cfg.sweep.size(); ++k) {
      const auto part = experiment_partition(cfg, k);
      const double r = cfg.sweep[k], ra = part.achieved_ratio();
      const std::string tag = "r" + std::to_string(k);
      if (include_train) {
        auto pool = cot_pool(cot_task(cfg, k), train_config(cfg));
        pool.resize(std::min(pool.size(), n));
        add({"train", r, ra, 0, k, train_config(cfg).seed, tag + "_train", std::monostate{}, {},
             pool});
      }
      EvalCase id{"test_ID", r, ra, 0, k, child_seed(seeds.eval, "id/" + std::to_string(k)),
                  tag + "_id", std::monostate{}, {}, {}};
      Rng rid(id.seed);
      id.cot = gen_cot_instances(part.train, cfg.n_demos, n, rid);
      add(std::move(id));
      EvalCase ood{"test_OOD", r, ra, 0, k, child_seed(seeds.eval, "ood/" + std::to_string(k)),
                   tag + "_ood", PermutationShift{part.train, part.test}, {}, {}};
      Rng rood(ood.seed);
      ood.cot = gen_cot_instances(part.test, cfg.n_demos, n, rood);
      add(std::move(ood));
    }
    return cases;
  }

  const auto all = enumerate_theta_space(cfg.space);
  if (include_train) {
    auto pool = cot_pool(cot_task(cfg, 0), train_config(cfg));
    pool.resize(std::min(pool.size(), n));
    add({"train", 0, 0, 0, 0, train_config(cfg).seed, "train", std::monostate{}, {}, pool});
  }
  EvalCase id{"test_ID", 0, 0, 0, 0, child_seed(seeds.eval, "id"), "id", std::monostate{}, {}, {}};
  Rng rid(id.seed);
  id.cot = gen_cot_instances(all, cfg.n_demos, n, rid);
  add(std::move(id));
  for (std::size_t k = 0; k < cfg.sweep.size(); ++k) {
    for (int sign : cfg.p_signs) {
      const double delta = cfg.sweep[k], p = 1.0 + sign * delta;
      const auto scaled = scale_theta_set(all, p);
      EvalCase c{"test_OOD", delta, delta, sign, 0,
                 child_seed(seeds.eval, "ood/" + signed_tag(k, sign)), signed_tag(k, sign),
                 ScalingShift{p, !scaled.violations.empty()}, {}, {}};
      Rng r(c.seed);
      c.cot = gen_cot_instances(scaled.tasks, cfg.n_demos, n, r);
      add(std::move(c));
    }
  }
  return cases;
}

}  // namespace

// ---- clouds -----------------------------------------------------------------------

std::vector<CloudMeasurement> measure_clouds(const ExperimentConfig& cfg) {
  const Seeds seeds = derive_seeds(cfg.seed);
  const std::size_t N = cfg.n_cloud_points;
  std::vector<CloudMeasurement> out;

  if (cfg.experiment == "meancalc") {
    for (std::size_t k = 0; k < cfg.sweep.size(); ++k) {
      const auto i = static_cast<std::size_t>(cfg.sweep[k]);
      Rng rng(child_seed(seeds.cloud, k));
      EmpiricalDistribution a{{}, Metric::kL1}, b{{}, Metric::kL1};
      for (std::size_t j = 0; j < N; ++j) {
        const auto [tr, te] = gen_mean_calc_pair(i, rng);
        a.points.emplace_back(tr.x.begin(), tr.x.end());
        b.points.emplace_back(te.x.begin(), te.x.end());
      }
      out.push_back({cfg.sweep[k], 0, Metric::kL1, w1_exact(a, b), w1_bound_interval(i),
                     max_pairwise_distance(a, b)});
    }
    return out;
  }

  // Paired prompts share their ζ draws; only the task differs.
  auto paired = [&](Rng& rng, auto pick_a, auto pick_b) {
    EmpiricalDistribution a{{}, Metric::kL2}, b{{}, Metric::kL2};
    for (std::size_t j = 0; j < N; ++j) {
      const auto [ta, tb] = std::pair{pick_a(rng), pick_b(rng)};
      const std::uint64_t s = rng.next_u64();
      Rng ra(s), rb(s);
      a.points.push_back(gen_cot_instance(ta, cfg.n_demos, ra).prompt().scalars);
      b.points.push_back(gen_cot_instance(tb, cfg.n_demos, rb).prompt().scalars);
    }
    return std::pair{a, b};
  };

  if (cfg.experiment == "permutation") {
    for (std::size_t k = 0; k < cfg.sweep.size(); ++k) {
      const auto part = experiment_partition(cfg, k);
      Rng rng(child_seed(seeds.cloud, k));
      auto [a, b] = paired(
          rng, [&](Rng& r) { return part.train[r.uniform_int(part.train.size())]; },
          [&](Rng& r) { return part.test[r.uniform_int(part.test.size())]; });
      out.push_back({cfg.sweep[k], 0, Metric::kL2, w1_exact(a, b),
                     w1_bound_permutation(part.achieved_ratio(), cfg.space.H, cfg.n_demos),
                     max_pairwise_distance(a, b)});
    }
    return out;
  }

  const auto all = enumerate_theta_space(cfg.space);
  for (std::size_t k = 0; k < cfg.sweep.size(); ++k) {
    for (int sign : cfg.p_signs) {
      const double delta = cfg.sweep[k];
      const auto scaled = scale_theta_set(all, 1.0 + sign * delta).tasks;
      Rng rng(child_seed(seeds.cloud, "scale/" + signed_tag(k, sign)));
      std::size_t idx = 0;
      auto [a, b] = paired(
          rng,
          [&](Rng& r) {
            idx = r.uniform_int(all.size());
            return all[idx];
          },
          [&](Rng&) { return scaled[idx]; });
      out.push_back({delta, sign, Metric::kL2, w1_exact(a, b),
                     w1_bound_scaling(delta, prompt_dim(cfg)), max_pairwise_distance(a, b)});
    }
  }
  return out;
}

// ---- evaluation -------------------------------------------------------------------

std::vector<ResultRow> evaluate_models(const ExperimentConfig& cfg,
                                       const std::vector<TrainedModel>& models,
                                       const std::vector<CloudMeasurement>& clouds) {
  std::vector<ResultRow> rows;
  for (const auto& c : build_eval_cases(cfg, true)) {
    const ModelParams& p = models.at(c.model).params;
    std::vector<double> losses;
    if (cfg.experiment == "meancalc")
      losses = {eval_meancalc(p, c.mc)};
    else
      losses = eval_stepwise(p, c.cot);

    const CloudMeasurement* cloud = nullptr;
    if (c.split == "test_OOD")
      for (const auto& m : clouds)
        if (m.x_param == c.x_param && m.p_sign == c.p_sign) cloud = &m;

    for (std::size_t h = 0; h < losses.size(); ++h) {
      ResultRow r;
      r.experiment = cfg.experiment;
      r.x_param = c.x_param;
      r.x_achieved = c.x_achieved;
      r.p_sign = c.p_sign;
      r.split = c.split;
      r.h = h + 1;
      r.loss = losses[h];
      if (cloud) {
        r.d_bound = cloud->bound;
        r.d_empirical = cloud->w1.distance;
      }
      r.seed = c.seed;
      rows.push_back(std::move(r));
    }
  }
  return rows;
}

std::vector<CurveCalibration> calibrate_rows(std::vector<ResultRow>& rows, double s,
                                             double c_exp) {
  std::map<std::pair<int, std::size_t>, std::vector<std::size_t>> curves;
  for (std::size_t k = 0; k < rows.size(); ++k)
    if (rows[k].split == "test_OOD") curves[{rows[k].p_sign, rows[k].h}].push_back(k);

  std::vector<CurveCalibration> out;
  for (const auto& [key, idx] : curves) {
    std::vector<CalibrationPoint> pts;
    for (std::size_t k : idx) pts.push_back({rows[k].d_bound, rows[k].loss});
    CurveCalibration cc;
    cc.p_sign = key.first;
    cc.h = key.second;
    cc.cal = calibrate(pts, s, c_exp);
    cc.n_points = pts.size();
    for (std::size_t k : idx) {
      rows[k].theory_bound = main_bound({cc.cal.A, c_exp, s, 0.0, 0.0, rows[k].d_bound}).total;
      if (std::abs(rows[k].theory_bound - rows[k].loss) <= 1e-9) ++cc.n_binding;
    }
    out.push_back(cc);
  }
  return out;
}

std::vector<std::string> check_domination(const std::vector<ResultRow>& rows) {
  std::vector<std::string> v;
  char buf[256];
  for (const auto& r : rows) {
    // The distance pair is shared by every h of a sweep point; report it once.
    if (r.h == 1 && !std::isnan(r.d_empirical) && !std::isnan(r.d_bound) &&
        r.d_empirical > r.d_bound + 1e-6) {
      std::snprintf(buf, sizeof buf,
                    "%s x=%.6g p_sign=%d: empirical W1 %.6g exceeds closed-form bound %.6g",
                    r.experiment.c_str(), r.x_param, r.p_sign, r.d_empirical, r.d_bound);
      v.emplace_back(buf);
    }
    if (!std::isnan(r.theory_bound) && r.theory_bound < r.loss - 1e-9) {
      std::snprintf(buf, sizeof buf, "%s x=%.6g p_sign=%d h=%zu: theory %.6g below loss %.6g",
                    r.experiment.c_str(), r.x_param, r.p_sign, r.h, r.theory_bound, r.loss);
      v.emplace_back(buf);
    }
  }
  return v;
}

// ---- plot data ----------------------------------------------------------------------

double round_sig9(double v) {
  if (std::isnan(v)) return v;
  return std::strtod(fmt9(v).c_str(), nullptr);
}

std::vector<PlotTable> build_plot_tables(const std::vector<ResultRow>& rows) {
  if (rows.empty()) throw ContractError("no result rows to plot");
  const std::string exp = rows[0].experiment;
  auto find = [&](const std::string& split, auto pred) -> double {
    for (const auto& r : rows)
      if (r.split == split && pred(r)) return r.loss;
    return NAN;
  };
  std::vector<PlotTable> out;
  auto push = [](PlotTable& t, std::vector<double> vals) {
    for (double& v : vals) v = round_sig9(v);
    t.rows.push_back(std::move(vals));
  };

  if (exp == "meancalc") {
    PlotTable t{"fig1", {"i", "train", "test_ID", "test_OOD", "theory"}, {}};
    const double tr = find("train", [](auto&) { return true; });
    const double id = find("test_ID", [](auto&) { return true; });
    for (const auto& r : rows)
      if (r.split == "test_OOD") push(t, {r.x_param, tr, id, r.loss, r.theory_bound});
    out.push_back(std::move(t));
  } else if (exp == "permutation") {
    PlotTable t{"fig2", {"r", "r_achieved", "h", "train", "test_ID", "test_OOD", "theory"}, {}};
    for (const auto& r : rows) {
      if (r.split != "test_OOD") continue;
      auto match = [&](const ResultRow& o) { return o.x_param == r.x_param && o.h == r.h; };
      push(t, {r.x_param, r.x_achieved, static_cast<double>(r.h), find("train", match),
               find("test_ID", match), r.loss, r.theory_bound});
    }
    out.push_back(std::move(t));
  } else {
    PlotTable t{"fig3", {"delta", "p", "h", "train", "test_ID", "test_OOD", "theory"}, {}};
    for (const auto& r : rows) {
      if (r.split != "test_OOD") continue;
      auto match = [&](const ResultRow& o) { return o.h == r.h; };
      push(t, {r.x_param, 1.0 + r.p_sign * r.x_param, static_cast<double>(r.h),
               find("train", match), find("test_ID", match), r.loss, r.theory_bound});
    }
    out.push_back(std::move(t));
  }
  return out;
}

std::string plot_csv(const PlotTable& table) {
  std::string out;
  for (std::size_t c = 0; c < table.columns.size(); ++c)
    out += (c ? "," : "") + table.columns[c];
  out += "\n";
  for (const auto& row : table.rows) {
    for (std::size_t c = 0; c < row.size(); ++c) out += (c ? "," : "") + fmt9(row[c]);
    out += "\n";
  }
  return out;
}

PlotTable parse_plot_csv(const std::string& name, const std::string& text) {
  std::istringstream in(text);
  std::string line;
  PlotTable t;
  t.name = name;
  if (!std::getline(in, line)) throw Error("empty plot CSV");
  t.columns = split_csv_line(line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    for (const auto& f : split_csv_line(line)) row.push_back(parse_num(f));
    if (row.size() != t.columns.size()) throw Error("plot CSV row width mismatch");
    t.rows.push_back(std::move(row));
  }
  return t;
}

std::vector<std::filesystem::path> emit_plotdata(const std::vector<ResultRow>& rows,
                                                 const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> paths;
  for (const auto& t : build_plot_tables(rows)) {
    const auto path = dir / (t.name + ".csv");
    write_text(path, plot_csv(t));
    paths.push_back(path);
  }
  return paths;
}

// ---- whole run ----------------------------------------------------------------------

namespace {

template <class F>
auto stage(const char* name, F&& f) {
  try {
    return f();
  } catch (const Error& e) {
    throw Error(std::string("[") + name + "] " + e.what(), e.code());
  } catch (const std::exception& e) {
    throw Error(std::string("[") + name + "] " + e.what());
  }
}

std::string eval_rows_csv(const std::vector<ResultRow>& rows, std::size_t n) {
  std::vector<EvalRecord> recs;
  for (const auto& r : rows) {
    if (r.split == "train") continue;
    const double x = r.p_sign != 0 ? 1.0 + r.p_sign * r.x_param : r.x_param;
    recs.push_back({x, r.h, r.loss, n, r.seed});
  }
  return eval_csv(recs);
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg,
                                const std::vector<TrainedModel>* pretrained) {
  const std::filesystem::path out(cfg.out);
  std::filesystem::create_directories(out);
  ordered_json resolved = to_json(cfg);
  write_text(out / "config.json", resolved.dump(2) + "\n");

  ExperimentResult res;
  const auto models =
      pretrained ? *pretrained : stage("train", [&] { return train_models(cfg); });
  if (!pretrained) {
    stage("checkpoint", [&] {
      save_models(models, out);
      return 0;
    });
  }
  std::cerr << "[measure] transport distances\n";
  res.clouds = stage("measure", [&] { return measure_clouds(cfg); });
  std::cerr << "[eval] " << cfg.experiment << "\n";
  res.rows = stage("eval", [&] { return evaluate_models(cfg, models, res.clouds); });
  res.calibrations = stage("calibrate", [&] {
    return calibrate_rows(res.rows, cfg.theory_s, cfg.theory_c_exp);
  });
  res.violations = check_domination(res.rows);

  const std::string results = results_csv(res.rows);
  const std::string evals = eval_rows_csv(res.rows, cfg.n_test_instances);
  write_text(out / "results.csv", results);
  write_text(out / "eval.csv", evals);
  const auto plots = stage("emit", [&] { return emit_plotdata(res.rows, out); });

  ordered_json m;
  m["version"] = kVersion;
  m["experiment"] = cfg.experiment;
  ordered_json hashed = resolved;
  hashed.erase("out");
  m["config_hash"] = hex64(fnv1a(hashed.dump()));
  const Seeds s = derive_seeds(cfg.seed);
  m["seeds"] = {{"root", cfg.seed},         {"model", s.model}, {"train", s.train},
                {"partition", s.partition}, {"eval", s.eval},   {"cloud", s.cloud}};
  ordered_json files = ordered_json::object();
  files["results.csv"] = hex64(fnv1a(results));
  files["eval.csv"] = hex64(fnv1a(evals));
  for (const auto& p : plots) files[p.filename().string()] = hex64(fnv1a(read_text(p)));
  ordered_json training = ordered_json::array();
  for (const auto& mdl : models) {
    files["model_" + mdl.tag + ".ckpt"] = hex64(fnv1a(encode_checkpoint(mdl.params)));
    if (pretrained) continue;
    files["loss_" + mdl.tag + ".csv"] = hex64(fnv1a(loss_curve_csv(mdl.result.curve)));
    training.push_back({{"model", mdl.tag}, {"final_loss", mdl.result.final_loss}});
  }
  m["files"] = files;
  m["training"] = training;

  ordered_json cals = ordered_json::array();
  for (const auto& c : res.calibrations)
    cals.push_back({{"p_sign", c.p_sign},
                    {"h", c.h},
                    {"A", c.cal.A},
                    {"s", c.cal.s},
                    {"C_exp", c.cal.C_exp},
                    {"n_points", c.n_points},
                    {"n_binding", c.n_binding}});
  m["calibration"] = cals;

  ordered_json clouds = ordered_json::array();
  for (const auto& c : res.clouds) {
    ordered_json j = {{"x_param", c.x_param},
                      {"p_sign", c.p_sign},
                      {"metric", to_string(c.metric)},
                      {"n_points", c.w1.plan.assignment.size()},
                      {"distance", c.w1.distance},
                      {"bound", c.bound},
                      {"plan_checksum", hex64(plan_checksum(c.w1.plan))},
                      {"realized_max_pairwise", c.realized_dmax}};
    if (cfg.experiment == "permutation")
      j["dmax_formula"] = permutation_dmax(cfg.space.H, cfg.n_demos);
    clouds.push_back(j);
  }
  m["transport"] = clouds;

  ordered_json diag = ordered_json::object();
  if (cfg.experiment == "permutation") {
    ordered_json parts = ordered_json::array();
    for (std::size_t k = 0; k < cfg.sweep.size(); ++k) {
      const auto part = experiment_partition(cfg, k);
      parts.push_back({{"target_ratio", cfg.sweep[k]},
                       {"achieved_ratio", part.achieved_ratio()},
                       {"n_train", part.train.size()},
                       {"n_test", part.test.size()}});
    }
    diag["partitions"] = parts;
  }
  if (cfg.experiment == "scaling") {
    ordered_json viol = ordered_json::array();
    const auto all = enumerate_theta_space(cfg.space);
    for (double delta : cfg.sweep)
      for (int sign : cfg.p_signs) {
        const double p = 1.0 + sign * delta;
        for (const auto& v : scale_theta_set(all, p).violations)
          viol.push_back({{"p", p}, {"value", v.value}, {"scaled", v.scaled}});
      }
    diag["scale_violations"] = viol;
  }
  if (cfg.experiment == "meancalc") diag["bound_degenerate_all_d_ge_1"] = true;
  m["diagnostics"] = diag;
  m["violations"] = res.violations;
  res.manifest = m;
  write_text(out / "manifest.json", m.dump(2) + "\n");
  return res;
}

std::vector<std::filesystem::path> generate_datasets(const ExperimentConfig& cfg,
                                                     const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> paths;
  std::uint64_t next_id = 0;
  auto open = [&](const std::string& name) {
    paths.push_back(dir / (name + ".jsonl"));
    std::ofstream f(paths.back());
    if (!f) throw Error("cannot write " + paths.back().string());
    return f;
  };

  if (cfg.experiment == "meancalc") {
    auto f = open("train");
    for (const auto& s : meancalc_pool(train_config(cfg)))
      f << encode_record(make_record(next_id++, s, "train", std::monostate{})) << "\n";
  } else {
    for (std::size_t k = 0; k < model_count(cfg); ++k) {
      auto f = open(cfg.experiment == "permutation" ? "train_r" + std::to_string(k) : "train");
      for (const auto& inst : cot_pool(cot_task(cfg, k), train_config(cfg)))
        f << encode_record(make_record(next_id++, inst, "train", std::monostate{})) << "\n";
    }
  }
  for (const auto& c : build_eval_cases(cfg, false)) {
    auto f = open("test_" + c.file_tag);
    const std::string split = c.split == "test_ID" ? "test_ID" : "test_OOD";
    for (const auto& s : c.mc) f << encode_record(make_record(next_id++, s, split, c.shift)) << "\n";
    for (const auto& inst : c.cot)
      f << encode_record(make_record(next_id++, inst, split, c.shift)) << "\n";
  }
  return paths;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot write " + path.string());
  f.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!f) throw Error("failed writing " + path.string());
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot read " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace ood
