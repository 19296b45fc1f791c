#include "ood/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>

#include "ood/errors.hpp"

namespace ood {

void LatentSpace::validate() const {
  if (values.size() < 2) throw ConfigError("latent space needs at least two values");
  auto sorted = values;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
    throw ConfigError("latent values must be distinct");
}

std::size_t LatentSpace::size() const {
  std::size_t n = 1;
  for (std::size_t h = 0; h <= H; ++h) n *= values.size();
  return n;
}

double leaky_relu(double x) { return x > 0.0 ? x : 0.5 * x; }

ChainSample gen_chain(const LatentTask& theta, double zeta) {
  if (!(zeta >= -0.5 && zeta <= 0.5))
    throw ContractError("zeta " + std::to_string(zeta) + " outside [-0.5, 0.5]");
  if (theta.theta.empty()) throw ContractError("empty latent task");
  ChainSample s;
  s.zeta = zeta;
  s.z.resize(theta.theta.size());
  s.z[0] = leaky_relu(zeta + theta.theta[0]);
  for (std::size_t h = 1; h < s.z.size(); ++h) s.z[h] = leaky_relu(s.z[h - 1] + theta.theta[h]);
  return s;
}

std::vector<LatentTask> enumerate_theta_space(const LatentSpace& space) {
  space.validate();
  const std::size_t len = space.H + 1, M = space.M();
  std::vector<LatentTask> out;
  out.reserve(space.size());
  std::vector<std::size_t> idx(len, 0);
  for (std::size_t n = 0; n < space.size(); ++n) {
    LatentTask t;
    t.theta.reserve(len);
    for (std::size_t i : idx) t.theta.push_back(space.values[i]);
    out.push_back(std::move(t));
    for (std::size_t h = len; h-- > 0;) {
      if (++idx[h] < M) break;
      idx[h] = 0;
    }
  }
  return out;
}

std::set<FlatPair> flatten_set(const LatentTask& theta) {
  std::set<FlatPair> out;
  for (std::size_t h = 0; h < theta.theta.size(); ++h) out.emplace(theta.theta[h], h);
  return out;
}

std::set<FlatPair> flatten_union(std::span<const LatentTask> tasks) {
  std::set<FlatPair> out;
  for (const auto& t : tasks) out.merge(flatten_set(t));
  return out;
}

bool partition_is_valid(const LatentSpace& space, const Partition& part) {
  std::set<LatentTask> train(part.train.begin(), part.train.end());
  std::set<LatentTask> test(part.test.begin(), part.test.end());
  if (train.size() != part.train.size() || test.size() != part.test.size()) return false;
  for (const auto& t : test)
    if (train.contains(t)) return false;
  std::set<LatentTask> all = train;
  all.insert(test.begin(), test.end());
  const auto full = enumerate_theta_space(space);
  if (all != std::set<LatentTask>(full.begin(), full.end())) return false;
  return flatten_union(part.train) == flatten_union(part.test);
}

namespace {

constexpr int kMaxRejectionTries = 1000;

// One task per value index at every position, each side gets a disjoint family.
// Side A: (v_m, v_m, …); side B: (v_m, v_{m+1}, v_{m+2}, …) with indices mod M.
Partition seeded_partition(const LatentSpace& space, std::vector<LatentTask> pool,
                           std::size_t n_test, Rng& rng) {
  const std::size_t M = space.M(), len = space.H + 1;
  std::vector<LatentTask> a, b;
  for (std::size_t m = 0; m < M; ++m) {
    LatentTask ta, tb;
    for (std::size_t h = 0; h < len; ++h) {
      ta.theta.push_back(space.values[m]);
      tb.theta.push_back(space.values[(m + h) % M]);
    }
    a.push_back(std::move(ta));
    b.push_back(std::move(tb));
  }
  std::set<LatentTask> used(a.begin(), a.end());
  used.insert(b.begin(), b.end());
  std::erase_if(pool, [&](const LatentTask& t) { return used.contains(t); });
  rng.shuffle(pool.begin(), pool.end());

  Partition p;
  p.test = std::move(b);
  p.train = std::move(a);
  std::size_t k = 0;
  while (p.test.size() < n_test) p.test.push_back(pool[k++]);
  while (k < pool.size()) p.train.push_back(pool[k++]);
  return p;
}

}  // namespace

Partition partition_theta(const LatentSpace& space, double ratio, Rng& rng) {
  space.validate();
  if (!(ratio > 0.0) || !std::isfinite(ratio))
    throw ConstraintError("target ratio must be positive and finite");
  const auto full = enumerate_theta_space(space);
  const std::size_t N = full.size(), M = space.M();
  const auto n_test = static_cast<std::size_t>(std::llround(N * ratio / (1.0 + ratio)));
  if (n_test < M || N - n_test < M)
    throw ConstraintError("ratio " + std::to_string(ratio) + " gives sides of " +
                          std::to_string(N - n_test) + " and " + std::to_string(n_test) +
                          " tasks; each side needs at least " + std::to_string(M));

  Partition p;
  p.target_ratio = ratio;
  bool found = false;
  auto pool = full;
  for (int attempt = 0; attempt < kMaxRejectionTries && !found; ++attempt) {
    rng.shuffle(pool.begin(), pool.end());
    p.test.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n_test));
    p.train.assign(pool.begin() + static_cast<std::ptrdiff_t>(n_test), pool.end());
    found = flatten_union(p.train) == flatten_union(p.test);
  }
  if (!found) {
    p = seeded_partition(space, full, n_test, rng);
    p.target_ratio = ratio;
  }
  std::sort(p.train.begin(), p.train.end());
  std::sort(p.test.begin(), p.test.end());
  if (!partition_is_valid(space, p)) throw ConstraintError("partition failed validation");
  return p;
}

ScaledSet scale_theta_set(std::span<const LatentTask> tasks, double p) {
  if (p == 1.0) throw ContractError("scaling factor must differ from 1");
  std::set<double> phi;
  for (const auto& t : tasks) phi.insert(t.theta.begin(), t.theta.end());
  ScaledSet out;
  for (const auto& t : tasks) {
    LatentTask s;
    for (double v : t.theta) s.theta.push_back(p * v);
    out.tasks.push_back(std::move(s));
  }
  for (double v : phi)
    if (phi.contains(p * v)) out.violations.push_back({v, p * v});
  return out;
}

// ---- mean-square -------------------------------------------------------------

MeanCalcSample make_mean_calc(const std::array<double, 4>& x) {
  MeanCalcSample s;
  s.x = x;
  s.y0 = (x[0] + x[1] + x[2] + x[3]) / 4.0;
  s.y1 = s.y0 * s.y0;
  return s;
}

namespace {

// k + f with f in [lo, lo + 0.5); clamps the rare rounding onto the boundary.
double place(double k, double lo, double u) {
  double x = k + (lo + 0.5 * u);
  const double upper = k + lo + 0.5;
  if (x >= upper) x = std::nextafter(upper, k);
  return x;
}

}  // namespace

MeanCalcSample gen_mean_calc(std::size_t i, Split split, Rng& rng) {
  if (split == Split::kTrain && i != 0)
    throw ContractError("train mean-square samples use interval index 0");
  const double lo = split == Split::kTrain ? 0.0 : 0.5;
  std::array<double, 4> x{};
  for (double& v : x) {
    const double k = static_cast<double>(i + rng.uniform_int(10));
    v = place(k, lo, rng.uniform());
  }
  return make_mean_calc(x);
}

std::pair<MeanCalcSample, MeanCalcSample> gen_mean_calc_pair(std::size_t i, Rng& rng) {
  std::array<double, 4> x{}, xs{};
  for (std::size_t j = 0; j < 4; ++j) {
    const double k = static_cast<double>(rng.uniform_int(10));
    const double u = rng.uniform();
    x[j] = place(k, 0.0, u);
    xs[j] = place(k + static_cast<double>(i), 0.5, u);
  }
  return {make_mean_calc(x), make_mean_calc(xs)};
}

// ---- prompts -------------------------------------------------------------------

PromptSequence build_prompt(std::span<const ChainSample> demos, double z0_test) {
  PromptSequence p;
  const std::size_t len = demos.empty() ? 0 : demos[0].z.size();
  for (std::size_t d = 0; d < demos.size(); ++d) {
    if (demos[d].z.size() != len)
      throw ShapeError("demonstration " + std::to_string(d) + " has " +
                       std::to_string(demos[d].z.size()) + " steps, expected " +
                       std::to_string(len));
    for (std::size_t h = 0; h < len; ++h) {
      p.scalars.push_back(demos[d].z[h]);
      p.roles.push_back({d, h});
    }
  }
  p.scalars.push_back(z0_test);
  p.roles.push_back({demos.size(), 0});
  return p;
}

std::vector<double> CotInstance::flat() const {
  std::vector<double> out;
  for (const auto& c : chains) out.insert(out.end(), c.z.begin(), c.z.end());
  return out;
}

PromptSequence CotInstance::prompt() const {
  return build_prompt(std::span(chains).first(n_demos()), chains.back().z[0]);
}

CotInstance gen_cot_instance(const LatentTask& theta, std::size_t n_demos, Rng& rng) {
  CotInstance inst;
  inst.theta = theta;
  inst.chains.reserve(n_demos + 1);
  for (std::size_t i = 0; i <= n_demos; ++i)
    inst.chains.push_back(gen_chain(theta, rng.uniform(-0.5, 0.5)));
  return inst;
}

// ---- shift specification --------------------------------------------------------

void validate_shift(const ShiftSpec& spec, const LatentSpace& space) {
  if (const auto* perm = std::get_if<PermutationShift>(&spec)) {
    std::set<LatentTask> train(perm->theta_train.begin(), perm->theta_train.end());
    for (const auto& t : perm->theta_test)
      if (train.contains(t)) throw ConstraintError("train and test task sets overlap");
    if (flatten_union(perm->theta_train) != flatten_union(perm->theta_test))
      throw ConstraintError("train and test sets cover different (value, position) pairs");
  } else if (const auto* sc = std::get_if<ScalingShift>(&spec)) {
    if (sc->p == 1.0) throw ConstraintError("scaling factor must differ from 1");
    if (!sc->allow_violation)
      for (double v : space.values)
        if (std::find(space.values.begin(), space.values.end(), sc->p * v) !=
            space.values.end())
          throw ConstraintError("scaled value " + std::to_string(sc->p * v) +
                                " lies in the latent value set");
  }
}

// ---- dataset records ---------------------------------------------------------------

namespace {

using nlohmann::json;

json tasks_json(const std::vector<LatentTask>& ts) {
  json a = json::array();
  for (const auto& t : ts) a.push_back(t.theta);
  return a;
}

std::vector<LatentTask> tasks_from(const json& a) {
  std::vector<LatentTask> out;
  for (const auto& t : a) out.push_back({t.get<std::vector<double>>()});
  return out;
}

json shift_json(const ShiftSpec& s) {
  return std::visit(
      [](const auto& v) -> json {
        using V = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<V, std::monostate>) {
          return {{"kind", "none"}};
        } else if constexpr (std::is_same_v<V, IntervalShift>) {
          return {{"kind", "interval"}, {"i", v.i}};
        } else if constexpr (std::is_same_v<V, PermutationShift>) {
          return {{"kind", "permutation"},
                  {"theta_train", tasks_json(v.theta_train)},
                  {"theta_test", tasks_json(v.theta_test)}};
        } else {
          return {{"kind", "scaling"}, {"p", v.p}, {"allow_violation", v.allow_violation}};
        }
      },
      s);
}

ShiftSpec shift_from(const json& j) {
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "none") return std::monostate{};
  if (kind == "interval") return IntervalShift{j.at("i").get<std::size_t>()};
  if (kind == "permutation")
    return PermutationShift{tasks_from(j.at("theta_train")), tasks_from(j.at("theta_test"))};
  if (kind == "scaling")
    return ScalingShift{j.at("p").get<double>(), j.at("allow_violation").get<bool>()};
  throw Error("unknown shift kind '" + kind + "'");
}

bool same_shift(const ShiftSpec& a, const ShiftSpec& b) { return shift_json(a) == shift_json(b); }

}  // namespace

bool DatasetRecord::operator==(const DatasetRecord& o) const {
  return task_id == o.task_id && theta == o.theta && zeta_list == o.zeta_list &&
         chains == o.chains && prompt == o.prompt && split == o.split &&
         same_shift(shift_spec, o.shift_spec);
}

DatasetRecord make_record(std::uint64_t task_id, const CotInstance& inst, std::string split,
                          ShiftSpec shift) {
  DatasetRecord r;
  r.task_id = task_id;
  r.theta = inst.theta;
  for (const auto& c : inst.chains) {
    r.zeta_list.push_back(c.zeta);
    r.chains.push_back(c.z);
  }
  r.prompt = inst.prompt().scalars;
  r.split = std::move(split);
  r.shift_spec = std::move(shift);
  return r;
}

DatasetRecord make_record(std::uint64_t task_id, const MeanCalcSample& s, std::string split,
                          ShiftSpec shift) {
  DatasetRecord r;
  r.task_id = task_id;
  r.chains.push_back({s.x[0], s.x[1], s.x[2], s.x[3], s.y0, s.y1});
  r.prompt.assign(s.x.begin(), s.x.end());
  r.split = std::move(split);
  r.shift_spec = std::move(shift);
  return r;
}

std::string encode_record(const DatasetRecord& r) {
  json j;
  j["task_id"] = r.task_id;
  j["theta"] = r.theta.theta;
  j["zeta_list"] = r.zeta_list;
  j["chains"] = r.chains;
  j["prompt"] = r.prompt;
  j["split"] = r.split;
  j["shift_spec"] = shift_json(r.shift_spec);
  return j.dump();
}

DatasetRecord decode_record(std::string_view line) {
  const json j = json::parse(line);
  DatasetRecord r;
  r.task_id = j.at("task_id").get<std::uint64_t>();
  r.theta.theta = j.at("theta").get<std::vector<double>>();
  r.zeta_list = j.at("zeta_list").get<std::vector<double>>();
  r.chains = j.at("chains").get<std::vector<std::vector<double>>>();
  r.prompt = j.at("prompt").get<std::vector<double>>();
  r.split = j.at("split").get<std::string>();
  r.shift_spec = shift_from(j.at("shift_spec"));
  return r;
}

}  // namespace ood
