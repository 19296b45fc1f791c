// Acceptance driver: one PASS/FAIL line per criterion. The trend criteria
// train the three desk experiments from the JSON configs, so a full run takes
// roughly twenty minutes on one core.

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <map>
#include <numeric>
#include <optional>
#include <set>

#include "fd_oracle.hpp"
#include "ood/errors.hpp"
#include "ood/experiment.hpp"

using namespace ood;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = true;
  std::string detail;
};

void note(Verdict& v, bool ok, const char* fmt, ...) __attribute__((format(printf, 3, 4)));
void note(Verdict& v, bool ok, const char* fmt, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, fmt);
  std::vsnprintf(buf, sizeof buf, fmt, ap);
  va_end(ap);
  v.pass = v.pass && ok;
  if (!v.detail.empty()) v.detail += "; ";
  v.detail += buf;
}

std::vector<double> ranks(const std::vector<double>& x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = 0.5 * static_cast<double>(i + j) + 1.0;
    i = j + 1;
  }
  return r;
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  const auto ra = ranks(a), rb = ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

// Loss averaged over h for the matching rows; NaN when nothing matches.
template <class Pred>
double mean_loss(const std::vector<ResultRow>& rows, Pred pred) {
  double acc = 0.0;
  std::size_t n = 0;
  for (const auto& r : rows)
    if (pred(r)) {
      acc += r.loss;
      ++n;
    }
  return n ? acc / static_cast<double>(n) : NAN;
}

// ---- 1-7: closed forms and numerics --------------------------------------------

Verdict golden_chain() {
  Verdict v;
  const auto c = gen_chain({{-2, 1, 2}}, 0.048);
  const double want[] = {-0.976, 0.024, 2.024};
  double worst = 0.0;
  for (std::size_t h = 0; h < 3; ++h) worst = std::max(worst, std::abs(c.z[h] - want[h]));
  note(v, c.z.size() == 3 && worst <= 1e-3, "z=(%.6g, %.6g, %.6g) max_err=%.3g", c.z[0], c.z[1],
       c.z[2], worst);
  return v;
}

Verdict closed_form_bounds() {
  Verdict v;
  const double a = w1_bound_interval(5), b = w1_bound_permutation(1.0, 2, 20),
               c = w1_bound_scaling(0.5, 61);
  note(v, a == 22.0, "interval(5)=%.17g", a);
  note(v, std::abs(b - 15.6205) <= 5e-4, "permutation(1,2,20)=%.6f", b);
  note(v, std::abs(c - 7.8102) <= 5e-4, "scaling(0.5,61)=%.6f", c);
  return v;
}

Verdict hungarian_vs_brute_force() {
  Verdict v;
  Rng rng(20240601);
  double worst = 0.0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 1 + rng.uniform_int(7), dim = 1 + rng.uniform_int(4);
    const Metric m = t % 2 ? Metric::kL1 : Metric::kL2;
    EmpiricalDistribution p{{}, m}, q{{}, m};
    for (std::size_t i = 0; i < n; ++i) {
      Point a(dim), b(dim);
      for (auto& x : a) x = rng.uniform(-3, 3);
      for (auto& x : b) x = rng.uniform(-3, 3);
      p.points.push_back(a);
      q.points.push_back(b);
    }
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    double best = INFINITY;
    do {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += distance(p.points[i], q.points[perm[i]], m);
      best = std::min(best, s / static_cast<double>(n));
    } while (std::next_permutation(perm.begin(), perm.end()));
    worst = std::max(worst, std::abs(w1_exact(p, q).distance - best));
  }
  note(v, worst <= 1e-12, "100 instances, max |hungarian - brute| = %.3g", worst);
  return v;
}

Verdict domination(const std::vector<ExperimentConfig>& cfgs) {
  Verdict v;
  for (const auto& cfg : cfgs) {
    std::size_t bad = 0;
    double worst = -INFINITY;
    for (const auto& c : measure_clouds(cfg)) {
      const bool ok = c.w1.distance <= c.bound + 1e-6;
      if (!ok) {
        ++bad;
        std::fprintf(stderr, "  %s x=%g sign=%+d: W1=%.6g bound=%.6g realized_dmax=%.6g\n",
                     cfg.experiment.c_str(), c.x_param, c.p_sign, c.w1.distance, c.bound,
                     c.realized_dmax);
      }
      worst = std::max(worst, c.w1.distance - c.bound);
    }
    note(v, bad == 0, "%s: %zu violation(s), max(W1-bound)=%.4g", cfg.experiment.c_str(), bad,
         worst);
  }
  return v;
}

Verdict gevrey_calculus() {
  Verdict v;
  bool ok = gc_add({1, 2, 1}, {3, 1, 1}) == GevreyConstants{4, 2, 1} &&
            gc_add({1, 1, 1}, {1, 1, 2}) == GevreyConstants{2, 1, 2} &&
            gc_mul({1, 1, 1}, {1, 1, 1}) == GevreyConstants{2, 2, 1} &&
            gc_mul({1, 1, 2}, {1, 1, 1}) == GevreyConstants{4, 2, 2};
  note(v, ok, "add/mul");
  std::vector<GevreyConstants> comp{{1, 2, 1}, {3, 1, 2}};
  note(v, gc_product(comp) == GevreyConstants{3, 2, 2}, "product");
  const auto h = gc_compose({1, 1, 1}, {1, 1, 1});
  note(v, h.C == std::exp(1.0) && h.R == 1.0 && h.s == 1.0 &&
              gc_compose({1, 1, 2}, {1, 1, 3}).s == 6.0,
       "compose");
  bool fam = true;
  for (std::size_t k = 0; k <= 10; ++k) fam = fam && family_order(1.0, k) == 1.0;
  note(v, fam && family_order(2.0, 3) == 8.0, "family_order(1,k<=10)=1");
  const auto m = modulus_constants(1.0, 0.5, 1.0, 2.0);
  const double b_ref = (1.0 / (std::exp(1.0) * 0.5)) * std::log(2.0);
  note(v, std::abs(m.B - b_ref) <= 1e-15 && m.A == 1.0, "modulus B=%.17g", m.B);
  return v;
}

Verdict bound_evaluator() {
  Verdict v;
  const double A = 1.7, eps = 0.03, L1 = 0.9;
  const auto t = main_bound({A, 1.3, 2.0, eps, L1, 1.0});
  note(v, t.total == 6 * A * A + 3 * eps + 3 * L1 * L1, "d=1 total=%.17g", t.total);
  const auto tiny = main_bound({1, 1, 1, 0, 0, 1e-6});
  note(v, tiny.shift < 1e-12, "shift(1e-6)=%.3g", tiny.shift);
  double worst = 0.0;
  for (double r0 : {0.05, 0.3, 1.0})
    for (double D : {1.0, 2.5})
      for (double d : {0.01, 0.4})
        worst = std::max(worst,
                         std::abs(tail_bound(0.0, 2.0, d, r0, D) - (1 + d * (1 / r0 - 1 / D))));
  note(v, worst <= 1e-10, "tail(B=0) max err=%.3g", worst);
  return v;
}

Verdict autodiff_fd() {
  Verdict v;
  double worst = 0.0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.d_ff = 32;
    cfg.max_seq_len = 9;
    cfg.init_std = 0.3;
    cfg.seed = seed;
    auto p = init_params(cfg);
    Rng rng(child_seed(seed, "fd"));
    std::vector<double> prompt(9);
    Tensor target({9, 1});
    for (double& x : prompt) x = rng.uniform(-2, 2);
    for (double& x : target.data) x = rng.uniform(-1, 1);
    p.zero_grad();
    {
      Tape tape;
      tape.backward(mse(forward_on_tape(tape, p, prompt), target));
    }
    auto params = p.tensors();
    const std::vector<Tensor*> ps(params.begin(), params.end());
    const auto num = testing::fd_gradients(ps, [&] {
      Tape tape;
      return mse(tape.reference(Tensor({9, 1}, forward(p, prompt))), target).value()[0];
    });
    worst = std::max(worst, testing::max_rel_err(ps, num));
  }
  note(v, worst <= 1e-4, "20 seeds, max relative error %.3g", worst);
  return v;
}

// ---- 8-12: trained experiments --------------------------------------------------

Verdict meancalc_trend(const ExperimentResult& res) {
  Verdict v;
  std::vector<double> is, ls;
  for (const auto& r : res.rows)
    if (r.split == "test_OOD") {
      is.push_back(r.x_param);
      ls.push_back(r.loss);
    }
  const double rho = spearman(is, ls);
  const auto at = [&](double i) { return mean_loss(res.rows, [&](auto& r) {
    return r.split == "test_OOD" && r.x_param == i; }); };
  const double ratio = at(5) / at(0);
  note(v, rho >= 0.9, "spearman=%.4f", rho);
  note(v, ratio >= 20.0, "L(5)/L(0)=%.4g/%.4g=%.1f", at(5), at(0), ratio);
  return v;
}

Verdict permutation_trend(const ExperimentResult& res) {
  Verdict v;
  auto pick = [&](const char* split, std::optional<std::size_t> h) {
    return mean_loss(res.rows, [&](auto& r) {
      return r.split == split && r.x_param == 1.0 && (!h || r.h == *h);
    });
  };
  const double ood = pick("test_OOD", {}), id = pick("test_ID", {});
  const double h1 = pick("test_OOD", 1), h2 = pick("test_OOD", 2);
  note(v, ood >= 5.0 * id, "r=1 OOD/ID=%.4g/%.4g=%.2f", ood, id, ood / id);
  note(v, h2 >= h1, "OOD h1=%.4g h2=%.4g", h1, h2);
  return v;
}

Verdict scaling_trend(const ExperimentResult& res) {
  Verdict v;
  auto pick = [&](double delta, int sign) {
    return mean_loss(res.rows, [&](auto& r) {
      return r.split == "test_OOD" && r.x_param == delta && r.p_sign == sign;
    });
  };
  const double lo = pick(0.05, 1), hi = pick(0.5, 1), minus = pick(0.5, -1);
  note(v, hi >= 5.0 * lo, "loss(p=1.5)/loss(p=1.05)=%.4g/%.4g=%.2f", hi, lo, hi / lo);
  note(v, hi >= minus, "loss(p=1.5)=%.4g vs loss(p=0.5)=%.4g", hi, minus);
  return v;
}

Verdict calibration(const std::vector<const ExperimentResult*>& runs) {
  Verdict v;
  for (const auto* res : runs) {
    std::size_t below = 0;
    for (const auto& r : res->rows)
      if (r.split == "test_OOD" && !(r.theory_bound >= r.loss - 1e-9)) ++below;
    std::size_t wrong_binding = 0;
    for (const auto& c : res->calibrations) wrong_binding += c.n_binding != 1;
    note(v, below == 0 && wrong_binding == 0 && !res->calibrations.empty(),
         "%s: %zu curves, %zu undominated points, %zu curves without a unique binding point",
         res->rows.at(0).experiment.c_str(), res->calibrations.size(), below, wrong_binding);
  }
  return v;
}

Verdict determinism(const ExperimentConfig& cfg, const fs::path& first) {
  Verdict v;
  ExperimentConfig again = cfg;
  again.out = (first.parent_path() / (first.filename().string() + "_rerun")).string();
  const auto res = run_experiment(again);
  std::size_t compared = 0, differ = 0;
  for (const auto& entry : fs::directory_iterator(first)) {
    if (entry.path().extension() != ".csv") continue;
    ++compared;
    if (read_text(entry.path()) != read_text(fs::path(again.out) / entry.path().filename())) {
      ++differ;
      std::fprintf(stderr, "  differs: %s\n", entry.path().filename().string().c_str());
    }
  }
  note(v, compared > 0 && differ == 0, "%s: %zu CSV files compared, %zu differ",
       cfg.experiment.c_str(), compared, differ);
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  std::string configs = "configs", work = "acceptance_runs";
  std::vector<int> only;
  app.add_option("--configs", configs, "directory holding the experiment configs");
  app.add_option("--work", work, "scratch directory for experiment outputs");
  app.add_option("--only", only, "run just these criteria");
  CLI11_PARSE(app, argc, argv);

  const std::set<int> wanted(only.begin(), only.end());
  auto want = [&](int k) { return wanted.empty() || wanted.count(k); };

  auto load = [&](const std::string& name) {
    ConfigSources src;
    src.path = fs::path(configs) / (name + ".json");
    src.out = (fs::path(work) / name).string();
    return parse_config(resolve_config_json(src));
  };

  bool all_pass = true;
  auto report = [&](int k, const char* title, auto&& fn) {
    if (!want(k)) return;
    Verdict v;
    try {
      v = fn();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    all_pass = all_pass && v.pass;
    std::printf("%s %2d %s: %s\n", v.pass ? "PASS" : "FAIL", k, title, v.detail.c_str());
    std::fflush(stdout);
  };

  std::vector<ExperimentConfig> cfgs;
  try {
    for (const char* n : {"meancalc", "permutation", "scaling"}) cfgs.push_back(load(n));
  } catch (const Error& e) {
    std::fprintf(stderr, "acceptance: %s\n", e.what());
    return 2;
  }

  report(1, "golden chain", golden_chain);
  report(2, "closed-form transport bounds", closed_form_bounds);
  report(3, "exact W1 against brute force", hungarian_vs_brute_force);
  report(4, "empirical W1 under closed-form bounds", [&] { return domination(cfgs); });
  report(5, "Gevrey constant calculus", gevrey_calculus);
  report(6, "bound evaluator", bound_evaluator);
  report(7, "end-to-end gradient check", autodiff_fd);

  std::map<std::string, ExperimentResult> runs;
  auto run = [&](const ExperimentConfig& cfg) -> const ExperimentResult& {
    auto it = runs.find(cfg.experiment);
    if (it == runs.end()) it = runs.emplace(cfg.experiment, run_experiment(cfg)).first;
    return it->second;
  };
  report(8, "mean-square interval trend", [&] { return meancalc_trend(run(cfgs[0])); });
  report(9, "permutation trend", [&] { return permutation_trend(run(cfgs[1])); });
  report(10, "scaling trend", [&] { return scaling_trend(run(cfgs[2])); });
  report(11, "calibrated bound dominates", [&] {
    return calibration({&run(cfgs[0]), &run(cfgs[1]), &run(cfgs[2])});
  });
  report(12, "byte-identical rerun", [&] {
    run(cfgs[0]);
    return determinism(cfgs[0], cfgs[0].out);
  });

  return all_pass ? 0 : 1;
}
