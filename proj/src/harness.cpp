#include "ksc/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"

namespace ksc {

namespace {

std::uint64_t mix(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string join(const std::vector<double>& xs, char sep = ';') {
  std::string out;
  for (size_t i = 0; i < xs.size(); ++i) {
    if (i) out += sep;
    out += fmt(xs[i]);
  }
  return out;
}

std::string join_int(const std::vector<int>& xs, char sep = ';') {
  std::string out;
  for (size_t i = 0; i < xs.size(); ++i) {
    if (i) out += sep;
    out += std::to_string(xs[i]);
  }
  return out;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

std::vector<double> parse_list(const std::string& s, char sep = ';') {
  std::vector<double> out;
  if (s.empty()) return out;
  for (const std::string& p : split(s, sep)) out.push_back(std::stod(p));
  return out;
}

std::vector<int> parse_int_list(const std::string& s, char sep = ';') {
  std::vector<int> out;
  if (s.empty()) return out;
  for (const std::string& p : split(s, sep)) out.push_back(std::stoi(p));
  return out;
}

}  // namespace

// json bindings

inline void to_json(nlohmann::json& j, const SurrogateVariant& v) {
  j = to_string(v);
}
inline void from_json(const nlohmann::json& j, SurrogateVariant& v) {
  v = variant_from_string(j.get<std::string>());
}
inline void to_json(nlohmann::json& j, const Ablation& a) { j = to_string(a); }
inline void from_json(const nlohmann::json& j, Ablation& a) {
  a = ablation_from_string(j.get<std::string>());
}

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PhysicsConfig, L, N, dt_sim,
                                                dtau, T_max, sigma, n_act,
                                                transient_T, init_amp)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(
    SurrogateConfig, width_beta, K_tf, K_max, variant, epochs_max, patience,
    batch_size, lr, grad_clip, val_fraction, curriculum_fraction, min_updates,
    max_updates, restore_best, physics)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(EnsembleConfig, L_ens, n_elite,
                                                bootstrap, surrogate)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(
    SacConfig, state_dim, action_dim, gamma, alpha, rho, lr,
    critic_updates_per_actor, hidden, n_layers, batch_size, state_scale,
    log_std_min, log_std_max)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(
    LoopConfig, N_model, L_updates, k_start, k_end, ramp_samples, P_min, P_max,
    retention_R, total_budget, model_mix, eval_episodes,
    exploitation_grad_steps, random_warmup_episodes, offline_pretrain_episodes,
    env_capacity, model_capacity, ablation, ensemble, sac)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ExperimentConfig, seed, out_dir,
                                                physics, surrogate, ensemble,
                                                sac, loop)

void ExperimentConfig::resolve() {
  physics.validate();
  surrogate.physics = physics;
  ensemble.surrogate = surrogate;
  sac.state_dim = physics.N;
  sac.action_dim = physics.n_act;
  loop.ensemble = ensemble;
  loop.sac = sac;
  loop.validate();
}

std::string experiment_to_json(const ExperimentConfig& cfg) {
  return nlohmann::json(cfg).dump(2) + "\n";
}

ExperimentConfig experiment_from_json(const std::string& text) {
  return nlohmann::json::parse(text).get<ExperimentConfig>();
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return experiment_from_json(ss.str());
}

void save_experiment_config(const ExperimentConfig& cfg,
                            const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write config: " + path);
  out << experiment_to_json(cfg);
}

// dataset io

namespace {

void write_f32(std::ostream& out, const std::vector<double>& xs) {
  for (double x : xs) {
    float f = static_cast<float>(x);
    out.write(reinterpret_cast<const char*>(&f), sizeof f);
  }
}

void write_f32(std::ostream& out, double x) {
  write_f32(out, std::vector<double>{x});
}

std::vector<double> read_f32(std::istream& in, int n) {
  std::vector<float> buf(n);
  in.read(reinterpret_cast<char*>(buf.data()),
          static_cast<std::streamsize>(n * sizeof(float)));
  if (!in) throw std::runtime_error("truncated dataset file");
  return std::vector<double>(buf.begin(), buf.end());
}

}  // namespace

void save_dataset(const Dataset& episodes, const PhysicsConfig& physics,
                  std::uint64_t seed, const std::string& path) {
  if (episodes.empty()) throw std::invalid_argument("empty dataset");
  const int steps = episodes.front().steps();
  for (const Episode& ep : episodes)
    if (ep.steps() != steps)
      throw std::invalid_argument("episodes have unequal lengths");

  nlohmann::json header;
  header["format"] = "ksd-1";
  header["physics"] = physics;
  header["seed"] = seed;
  header["n_episodes"] = episodes.size();
  header["steps"] = steps;

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write dataset: " + path);
  out << header.dump() << "\n";
  for (const Episode& ep : episodes) {
    for (int t = 0; t < steps; ++t) {
      write_f32(out, ep.states[t]);
      write_f32(out, ep.actions[t].a);
      write_f32(out, ep.rewards[t]);
    }
    write_f32(out, ep.states.back());
  }
  if (!out) throw std::runtime_error("write failure: " + path);
}

LoadedDataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open dataset: " + path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("missing header");
  nlohmann::json header = nlohmann::json::parse(line);
  if (header.value("format", "") != "ksd-1")
    throw std::runtime_error("unknown dataset format");

  LoadedDataset out;
  out.physics = header.at("physics").get<PhysicsConfig>();
  out.seed = header.at("seed").get<std::uint64_t>();
  const int n_ep = header.at("n_episodes").get<int>();
  const int steps = header.at("steps").get<int>();
  const int N = out.physics.N;
  const int A = out.physics.n_act;

  for (int e = 0; e < n_ep; ++e) {
    Episode ep;
    for (int t = 0; t < steps; ++t) {
      ep.states.push_back(read_f32(in, N));
      ep.actions.push_back(Action{read_f32(in, A)});
      ep.rewards.push_back(read_f32(in, 1)[0]);
    }
    ep.states.push_back(read_f32(in, N));
    out.episodes.push_back(std::move(ep));
  }
  return out;
}

Dataset generate_dataset(int n_episodes, const PhysicsConfig& physics,
                         std::uint64_t seed) {
  physics.validate();
  Dataset out;
  for (int e = 0; e < n_episodes; ++e) {
    EnvState env = reset(mix(seed, e), physics);
    std::mt19937_64 arng(mix(seed, 100000 + e));
    std::uniform_real_distribution<double> uni(-1.0, 1.0);
    Episode ep;
    ep.states.push_back(env.u);
    for (int t = 0; t < physics.steps_per_episode(); ++t) {
      Action a;
      for (int i = 0; i < physics.n_act; ++i) a.a.push_back(uni(arng));
      Transition tr = env_step(env, a, physics);
      ep.actions.push_back(a);
      ep.rewards.push_back(tr.reward);
      ep.states.push_back(tr.next_state);
    }
    out.push_back(std::move(ep));
  }
  return out;
}

// statistics

namespace {

double t_critical_95(int df) {
  static const double table[] = {
      12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228,
      2.201,  2.179, 2.160, 2.145, 2.131, 2.120, 2.110, 2.101, 2.093, 2.086,
      2.080,  2.074, 2.069, 2.064, 2.060, 2.056, 2.052, 2.048, 2.045, 2.042};
  if (df < 1) return 0.0;
  if (df <= 30) return table[df - 1];
  return 1.96;
}

// regularized incomplete beta via Lentz continued fraction
double betacf(double a, double b, double x) {
  const double eps = 3e-14, fpmin = 1e-300;
  double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0, d = 1.0 - qab * x / qap;
  if (std::fabs(d) < fpmin) d = fpmin;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= 300; ++m) {
    int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < fpmin) d = fpmin;
    c = 1.0 + aa / c;
    if (std::fabs(c) < fpmin) c = fpmin;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < fpmin) d = fpmin;
    c = 1.0 + aa / c;
    if (std::fabs(c) < fpmin) c = fpmin;
    d = 1.0 / d;
    double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < eps) break;
  }
  return h;
}

double ibeta(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  double ln = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
              a * std::log(x) + b * std::log(1.0 - x);
  double front = std::exp(ln);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * betacf(a, b, x) / a;
  return 1.0 - front * betacf(b, a, 1.0 - x) / b;
}

double student_t_cdf(double t, double df) {
  double x = df / (df + t * t);
  double p = 0.5 * ibeta(0.5 * df, 0.5, x);
  return t > 0.0 ? 1.0 - p : p;
}

}  // namespace

MeanCi t_interval(const std::vector<double>& xs) {
  MeanCi out;
  out.n = static_cast<int>(xs.size());
  if (out.n == 0) return out;
  out.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / out.n;
  if (out.n < 2) return out;
  double ss = 0.0;
  for (double x : xs) ss += (x - out.mean) * (x - out.mean);
  double sd = std::sqrt(ss / (out.n - 1));
  out.ci_half = t_critical_95(out.n - 1) * sd / std::sqrt(out.n);
  return out;
}

double paired_t_pvalue_less(const std::vector<double>& x,
                            const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2)
    throw std::invalid_argument("paired test needs equal-size samples, n >= 2");
  std::vector<double> d(x.size());
  for (size_t i = 0; i < x.size(); ++i) d[i] = x[i] - y[i];
  const int n = static_cast<int>(d.size());
  double mean = std::accumulate(d.begin(), d.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : d) ss += (v - mean) * (v - mean);
  double sd = std::sqrt(ss / (n - 1));
  if (sd == 0.0) return mean < 0.0 ? 0.0 : 1.0;
  double t = mean / (sd / std::sqrt(n));
  return student_t_cdf(t, n - 1);
}

// offline study

void StudySpec::validate() const {
  if (folds < 2) throw std::invalid_argument("folds must be >= 2");
  for (double f : fractions)
    if (f <= 0.0 || f > 1.0)
      throw std::invalid_argument("fractions must lie in (0, 1]");
  if (K_eval < 1) throw std::invalid_argument("K_eval must be positive");
  if (workers < 1) throw std::invalid_argument("workers must be positive");
  base.validate();
}

namespace {

ModelFactory default_factory() {
  return [](const SurrogateConfig& cfg, const Dataset& train,
            std::uint64_t seed) -> PredictFn {
    auto model = std::make_shared<Surrogate>(cfg, mix(seed, 1));
    train_surrogate(*model, train, mix(seed, 2));
    PredictFn inner = surrogate_predictor(*model);
    return [model, inner](const Episode& ep, int start, int K) {
      return inner(ep, start, K);
    };
  };
}

}  // namespace

StudyResult offline_study(const Dataset& dataset, const StudySpec& spec,
                          std::uint64_t seed, const ModelFactory& factory) {
  spec.validate();
  if (static_cast<int>(dataset.size()) < spec.folds)
    throw std::invalid_argument("dataset smaller than the fold count");
  const ModelFactory make = factory ? factory : default_factory();

  std::vector<int> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(mix(seed, 1));
  std::shuffle(order.begin(), order.end(), rng);

  struct CellSpec {
    double fraction;
    SurrogateVariant variant;
    double width;
  };
  std::vector<CellSpec> grid;
  for (double f : spec.fractions)
    for (SurrogateVariant v : spec.variants)
      grid.push_back({f, v, spec.base.width_beta});
  for (double w : spec.widths)
    grid.push_back({spec.width_fraction, SurrogateVariant::residual_conv, w});

  StudyResult result;
  result.spec = spec;
  for (const CellSpec& g : grid)
    for (int fold = 0; fold < spec.folds; ++fold) {
      StudyCell cell;
      cell.fraction = g.fraction;
      cell.variant = g.variant;
      cell.width = g.width;
      cell.fold = fold;
      result.cells.push_back(cell);
    }

  std::atomic<size_t> next{0};
  auto work = [&]() {
    for (;;) {
      size_t i = next.fetch_add(1);
      if (i >= result.cells.size()) return;
      StudyCell& cell = result.cells[i];

      Dataset train, test;
      std::vector<int> pool;
      for (size_t k = 0; k < order.size(); ++k) {
        if (static_cast<int>(k) % spec.folds == cell.fold)
          test.push_back(dataset[order[k]]);
        else
          pool.push_back(order[k]);
      }
      int n_train = std::max(
          1, static_cast<int>(std::lround(cell.fraction * pool.size())));
      n_train = std::min<int>(n_train, static_cast<int>(pool.size()));
      for (int k = 0; k < n_train; ++k) train.push_back(dataset[pool[k]]);

      SurrogateConfig cfg = spec.base;
      cfg.variant = cell.variant;
      cfg.width_beta = cell.width;
      const std::uint64_t cell_seed = mix(seed, 1000 + i);
      PredictFn predict = make(cfg, train, cell_seed);

      NmseCurve curve = evaluate_nmse(predict, test, spec.K_eval, cfg.physics,
                                      cfg.K_tf);
      cell.nmse_state = curve.state;
      cell.nmse_reward = curve.reward;
      for (double eps : spec.vpt_eps)
        cell.vpt.push_back(valid_prediction_time(curve, eps, cfg.physics.dtau));
    }
  };

  const int n_workers =
      std::min<int>(spec.workers, static_cast<int>(result.cells.size()));
  if (n_workers <= 1) {
    work();
  } else {
    std::vector<std::thread> threads;
    for (int t = 0; t < n_workers; ++t) threads.emplace_back(work);
    for (std::thread& t : threads) t.join();
  }
  return result;
}

void write_study_csv(const StudyResult& result, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write study csv: " + path);
  out << "# ksc-study schema=1 folds=" << result.spec.folds
      << " ci=t-interval-95\n";
  out << "fraction,variant,width,fold,nmse_state,nmse_reward,vpt\n";
  for (const StudyCell& c : result.cells)
    out << fmt(c.fraction) << ',' << to_string(c.variant) << ','
        << fmt(c.width) << ',' << c.fold << ',' << join(c.nmse_state) << ','
        << join(c.nmse_reward) << ',' << join(c.vpt) << "\n";
}

StudyResult read_study_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open study csv: " + path);
  StudyResult out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      auto pos = line.find("folds=");
      if (pos != std::string::npos)
        out.spec.folds = std::stoi(line.substr(pos + 6));
      continue;
    }
    if (line.rfind("fraction,", 0) == 0) continue;
    std::vector<std::string> f = split(line, ',');
    if (f.size() != 7) throw std::runtime_error("malformed study row");
    StudyCell c;
    c.fraction = std::stod(f[0]);
    c.variant = variant_from_string(f[1]);
    c.width = std::stod(f[2]);
    c.fold = std::stoi(f[3]);
    c.nmse_state = parse_list(f[4]);
    c.nmse_reward = parse_list(f[5]);
    c.vpt = parse_list(f[6]);
    out.cells.push_back(std::move(c));
  }
  return out;
}

namespace {

bool close(double a, double b) { return std::fabs(a - b) < 1e-9; }

}  // namespace

std::vector<double> study_fold_values(const StudyResult& r, double fraction,
                                      SurrogateVariant variant, double width,
                                      int step, bool reward) {
  std::vector<const StudyCell*> hits;
  for (const StudyCell& c : r.cells)
    if (close(c.fraction, fraction) && c.variant == variant &&
        close(c.width, width))
      hits.push_back(&c);
  std::sort(hits.begin(), hits.end(),
            [](const StudyCell* a, const StudyCell* b) { return a->fold < b->fold; });
  std::vector<double> out;
  for (const StudyCell* c : hits) {
    const std::vector<double>& v = reward ? c->nmse_reward : c->nmse_state;
    out.push_back(v.at(step));
  }
  return out;
}

std::vector<double> study_fold_vpt(const StudyResult& r, double fraction,
                                   SurrogateVariant variant, double width,
                                   int eps_index) {
  std::vector<const StudyCell*> hits;
  for (const StudyCell& c : r.cells)
    if (close(c.fraction, fraction) && c.variant == variant &&
        close(c.width, width))
      hits.push_back(&c);
  std::sort(hits.begin(), hits.end(),
            [](const StudyCell* a, const StudyCell* b) { return a->fold < b->fold; });
  std::vector<double> out;
  for (const StudyCell* c : hits) out.push_back(c->vpt.at(eps_index));
  return out;
}

// reports csv

void write_reports_csv(const std::vector<IterationReport>& reports,
                       const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write reports csv: " + path);
  out << "# ksc-reports schema=1\n";
  out << "iteration,env_samples,K_rll,eval_mean,eval_std,model_val_losses,"
         "elites,divergence_flagged,rollouts_aborted,rollouts_total\n";
  for (const IterationReport& r : reports)
    out << r.iteration << ',' << r.env_samples << ',' << r.K_rll << ','
        << fmt(r.eval_mean) << ',' << fmt(r.eval_std) << ','
        << join(r.model_val_losses) << ',' << join_int(r.elites) << ','
        << (r.divergence_flagged ? 1 : 0) << ',' << r.rollouts_aborted << ','
        << r.rollouts_total << "\n";
}

std::vector<IterationReport> read_reports_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open reports csv: " + path);
  std::vector<IterationReport> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#' || line.rfind("iteration,", 0) == 0)
      continue;
    std::vector<std::string> f = split(line, ',');
    if (f.size() != 10) throw std::runtime_error("malformed report row");
    IterationReport r;
    r.iteration = std::stoi(f[0]);
    r.env_samples = std::stol(f[1]);
    r.K_rll = std::stoi(f[2]);
    r.eval_mean = std::stod(f[3]);
    r.eval_std = std::stod(f[4]);
    r.model_val_losses = parse_list(f[5]);
    r.elites = parse_int_list(f[6]);
    r.divergence_flagged = f[7] == "1";
    r.rollouts_aborted = std::stoi(f[8]);
    r.rollouts_total = std::stoi(f[9]);
    out.push_back(std::move(r));
  }
  return out;
}

// baseline comparison

BaselineComparison baseline_comparison(const LoopConfig& base, long budget,
                                       std::uint64_t seed, int random_episodes,
                                       double margin) {
  const PhysicsConfig& phys = base.ensemble.surrogate.physics;
  BaselineComparison out;

  double sum = 0.0;
  for (int e = 0; e < random_episodes; ++e) {
    EnvState env = reset(mix(seed, 700000 + e), phys);
    std::mt19937_64 arng(mix(seed, 710000 + e));
    std::uniform_real_distribution<double> uni(-1.0, 1.0);
    double ret = 0.0;
    for (int t = 0; t < phys.steps_per_episode(); ++t) {
      Action a;
      for (int i = 0; i < phys.n_act; ++i) a.a.push_back(uni(arng));
      ret += env_step(env, a, phys).reward;
    }
    sum += ret;
  }
  out.random_return = sum / std::max(1, random_episodes);

  LoopConfig sac_cfg = base;
  sac_cfg.ablation = Ablation::model_free;
  sac_cfg.total_budget = budget;
  RunArtifacts sac_run = run_loop(sac_cfg, seed);

  LoopConfig mbrl_cfg = base;
  mbrl_cfg.total_budget = budget;
  RunArtifacts mbrl_run = run_loop(mbrl_cfg, seed);

  auto best = [](const std::vector<IterationReport>& rs) {
    double b = -std::numeric_limits<double>::infinity();
    for (const IterationReport& r : rs) b = std::max(b, r.eval_mean);
    return b;
  };
  out.sac_best_return = best(sac_run.reports);
  out.mbrl_best_return = best(mbrl_run.reports);
  out.sac_final_return =
      sac_run.reports.empty() ? 0.0 : sac_run.reports.back().eval_mean;
  out.mbrl_final_return =
      mbrl_run.reports.empty() ? 0.0 : mbrl_run.reports.back().eval_mean;

  out.target_return =
      out.random_return + margin * (out.sac_best_return - out.random_return);
  auto first_hit = [&](const std::vector<IterationReport>& rs) -> long {
    for (const IterationReport& r : rs)
      if (r.eval_mean >= out.target_return) return r.env_samples;
    return -1;
  };
  out.sac_samples_to_target = first_hit(sac_run.reports);
  out.mbrl_samples_to_target = first_hit(mbrl_run.reports);
  if (out.sac_samples_to_target > 0 && out.mbrl_samples_to_target > 0)
    out.sample_ratio = static_cast<double>(out.sac_samples_to_target) /
                       static_cast<double>(out.mbrl_samples_to_target);

  const double cost_random = -out.random_return;
  if (cost_random != 0.0)
    out.cost_reduction = 1.0 - (-out.mbrl_final_return) / cost_random;
  return out;
}

// plotting

std::vector<double> gaussian_filter(const std::vector<double>& xs,
                                    double sigma) {
  if (sigma <= 0.0 || xs.size() < 2) return xs;
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(2 * radius + 1);
  double norm = 0.0;
  for (int k = -radius; k <= radius; ++k) {
    kernel[k + radius] = std::exp(-0.5 * k * k / (sigma * sigma));
    norm += kernel[k + radius];
  }
  for (double& w : kernel) w /= norm;
  const int n = static_cast<int>(xs.size());
  std::vector<double> out(n, 0.0);
  for (int i = 0; i < n; ++i)
    for (int k = -radius; k <= radius; ++k) {
      int j = std::clamp(i + k, 0, n - 1);
      out[i] += kernel[k + radius] * xs[j];
    }
  return out;
}

namespace {

const char* palette(int i) {
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                 "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
                                 "#bcbd22", "#17becf"};
  return colors[i % 10];
}

std::string tick_label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

}  // namespace

std::string svg_line_plot(const std::vector<PlotSeries>& series,
                          const std::string& title, const std::string& xlabel,
                          const std::string& ylabel) {
  const double W = 640, H = 420, ml = 70, mr = 150, mt = 40, mb = 50;
  double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  bool any = false;
  for (const PlotSeries& s : series)
    for (size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      if (!any) {
        xmin = xmax = s.x[i];
        ymin = ymax = s.y[i];
        any = true;
      }
      xmin = std::min(xmin, s.x[i]);
      xmax = std::max(xmax, s.x[i]);
      ymin = std::min(ymin, s.y[i]);
      ymax = std::max(ymax, s.y[i]);
    }
  if (xmax == xmin) xmax = xmin + 1;
  if (ymax == ymin) ymax = ymin + 1;
  auto px = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * (W - ml - mr); };
  auto py = [&](double y) { return H - mb - (y - ymin) / (ymax - ymin) * (H - mt - mb); };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W
      << "\" height=\"" << H << "\" font-family=\"sans-serif\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" "
         "font-size=\"15\">" << title << "</text>\n";
  svg << "<line x1=\"" << ml << "\" y1=\"" << H - mb << "\" x2=\"" << W - mr
      << "\" y2=\"" << H - mb << "\" stroke=\"black\"/>\n";
  svg << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml
      << "\" y2=\"" << H - mb << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    double xv = xmin + k * (xmax - xmin) / 4;
    double yv = ymin + k * (ymax - ymin) / 4;
    svg << "<text x=\"" << px(xv) << "\" y=\"" << H - mb + 18
        << "\" text-anchor=\"middle\" font-size=\"11\">" << tick_label(xv)
        << "</text>\n";
    svg << "<text x=\"" << ml - 8 << "\" y=\"" << py(yv) + 4
        << "\" text-anchor=\"end\" font-size=\"11\">" << tick_label(yv)
        << "</text>\n";
  }
  svg << "<text x=\"" << (ml + W - mr) / 2 << "\" y=\"" << H - 12
      << "\" text-anchor=\"middle\" font-size=\"12\">" << xlabel << "</text>\n";
  svg << "<text x=\"18\" y=\"" << (mt + H - mb) / 2
      << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 18 "
      << (mt + H - mb) / 2 << ")\">" << ylabel << "</text>\n";

  for (size_t s = 0; s < series.size(); ++s) {
    svg << "<polyline fill=\"none\" stroke=\"" << palette(static_cast<int>(s))
        << "\" stroke-width=\"1.5\" points=\"";
    for (size_t i = 0; i < series[s].x.size() && i < series[s].y.size(); ++i)
      svg << px(series[s].x[i]) << ',' << py(series[s].y[i]) << ' ';
    svg << "\"/>\n";
    double ly = mt + 16 * (static_cast<double>(s) + 1);
    svg << "<line x1=\"" << W - mr + 10 << "\" y1=\"" << ly << "\" x2=\""
        << W - mr + 30 << "\" y2=\"" << ly << "\" stroke=\""
        << palette(static_cast<int>(s)) << "\" stroke-width=\"2\"/>\n";
    svg << "<text x=\"" << W - mr + 36 << "\" y=\"" << ly + 4
        << "\" font-size=\"11\">" << series[s].label << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

std::string svg_heatmap(const std::vector<std::vector<double>>& rows,
                        const std::string& title) {
  const int nr = static_cast<int>(rows.size());
  const int nc = nr ? static_cast<int>(rows.front().size()) : 0;
  double vmin = 0, vmax = 1;
  bool any = false;
  for (const auto& row : rows)
    for (double v : row) {
      if (!std::isfinite(v)) continue;
      if (!any) {
        vmin = vmax = v;
        any = true;
      }
      vmin = std::min(vmin, v);
      vmax = std::max(vmax, v);
    }
  if (vmax == vmin) vmax = vmin + 1;
  const double cell = 24, ml = 40, mt = 40;
  const double W = ml + nc * cell + 20, H = mt + nr * cell + 20;
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W
      << "\" height=\"" << H << "\" font-family=\"sans-serif\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" "
         "font-size=\"14\">" << title << "</text>\n";
  for (int r = 0; r < nr; ++r)
    for (int c = 0; c < nc; ++c) {
      double t = (rows[r][c] - vmin) / (vmax - vmin);
      if (!std::isfinite(t)) t = 0.0;
      int red = static_cast<int>(255 * t);
      int blue = static_cast<int>(255 * (1.0 - t));
      svg << "<rect x=\"" << ml + c * cell << "\" y=\"" << mt + r * cell
          << "\" width=\"" << cell << "\" height=\"" << cell << "\" fill=\"rgb("
          << red << ",64," << blue << ")\"/>\n";
    }
  svg << "</svg>\n";
  return svg.str();
}

// cli

namespace {

namespace fs = std::filesystem;

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write: " + path);
  out << text;
}

ExperimentConfig resolved_config(const std::string& config_path,
                                 std::uint64_t seed_override, bool has_seed,
                                 const std::string& out_override) {
  ExperimentConfig cfg;
  if (!config_path.empty()) cfg = load_experiment_config(config_path);
  if (has_seed) cfg.seed = seed_override;
  if (!out_override.empty()) cfg.out_dir = out_override;
  cfg.resolve();
  return cfg;
}

void begin_run(const ExperimentConfig& cfg) {
  fs::create_directories(cfg.out_dir);
  save_experiment_config(cfg, cfg.out_dir + "/config.json");
}

std::vector<double> fold_means_over_steps(const StudyResult& r, double fraction,
                                          SurrogateVariant variant,
                                          double width, int n_steps) {
  std::vector<double> out;
  for (int s = 0; s < n_steps; ++s) {
    std::vector<double> xs = study_fold_values(r, fraction, variant, width, s);
    if (xs.empty()) break;
    out.push_back(t_interval(xs).mean);
  }
  return out;
}

void plot_study(const StudyResult& r, const std::string& out_dir) {
  struct Key {
    SurrogateVariant v;
    double w;
  };
  std::vector<Key> keys;
  std::vector<double> fractions;
  for (const StudyCell& c : r.cells) {
    bool seen = false;
    for (const Key& k : keys)
      if (k.v == c.variant && close(k.w, c.width)) seen = true;
    if (!seen) keys.push_back({c.variant, c.width});
    bool fseen = false;
    for (double f : fractions)
      if (close(f, c.fraction)) fseen = true;
    if (!fseen) fractions.push_back(c.fraction);
  }
  std::sort(fractions.begin(), fractions.end());

  for (const Key& k : keys) {
    int n_steps = 0;
    for (const StudyCell& c : r.cells)
      if (c.variant == k.v && close(c.width, k.w))
        n_steps = std::max(n_steps, static_cast<int>(c.nmse_state.size()));
    std::vector<PlotSeries> series;
    for (double f : fractions) {
      std::vector<double> ys =
          fold_means_over_steps(r, f, k.v, k.w, n_steps);
      if (ys.empty()) continue;
      PlotSeries s;
      s.label = "fraction " + tick_label(f);
      for (size_t i = 0; i < ys.size(); ++i) {
        s.x.push_back(static_cast<double>(i + 1));
        s.y.push_back(ys[i]);
      }
      series.push_back(std::move(s));
    }
    if (series.empty()) continue;
    char wbuf[16];
    std::snprintf(wbuf, sizeof wbuf, "%g", k.w);
    std::string name = "nmse_" + to_string(k.v) + "_b" + wbuf;
    write_text(out_dir + "/" + name + ".svg",
               svg_line_plot(series, name, "prediction step", "state NMSE"));
  }
}

void plot_reports(const std::vector<IterationReport>& reports,
                  const std::string& out_dir, double sigma) {
  std::vector<double> x, y;
  for (const IterationReport& r : reports) {
    x.push_back(static_cast<double>(r.env_samples));
    y.push_back(r.eval_mean);
  }
  PlotSeries raw{"return", x, y};
  PlotSeries smooth{"smoothed", x, gaussian_filter(y, sigma)};
  write_text(out_dir + "/returns.svg",
             svg_line_plot({raw, smooth}, "evaluation return", "env samples",
                           "mean return"));
}

int cli_main(int argc, const char* const* argv) {
  CLI::App app{"Kuramoto-Sivashinsky control experiments"};
  app.require_subcommand(1);

  std::string config_path, out_dir, data_path, csv_path, checkpoint;
  std::uint64_t seed = 0;
  bool has_seed = false;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "experiment config (JSON)");
    sub->add_option("--seed", seed, "global seed")
        ->each([&](const std::string&) { has_seed = true; });
    sub->add_option("--out", out_dir, "output directory");
  };

  auto* gen = app.add_subcommand("generate-data", "sample random-action episodes");
  int n_episodes = 100;
  add_common(gen);
  gen->add_option("--episodes", n_episodes, "episode count");

  auto* tr = app.add_subcommand("train-surrogate", "fit one dynamics model");
  add_common(tr);
  tr->add_option("--data", data_path, "input .ksd dataset")->required();

  auto* study = app.add_subcommand("offline-study", "cross-validated data study");
  add_common(study);
  study->add_option("--data", data_path, "input .ksd dataset")->required();
  int folds = 5, workers = 1, k_eval = 15;
  std::vector<double> fractions, widths, eps;
  std::vector<std::string> variant_names;
  bool full = false;
  study->add_option("--folds", folds);
  study->add_option("--workers", workers);
  study->add_option("--k-eval", k_eval);
  study->add_option("--fractions", fractions)->delimiter(',');
  study->add_option("--widths", widths)->delimiter(',');
  study->add_option("--eps", eps)->delimiter(',');
  study->add_option("--variants", variant_names)->delimiter(',');
  study->add_flag("--full", full, "full-scale horizons and training budgets");

  auto* mbrl = app.add_subcommand("train-mbrl", "run the planning loop");
  add_common(mbrl);
  std::string ablation_name = "none";
  long budget = -1;
  mbrl->add_option("--ablation", ablation_name, "loop variant");
  mbrl->add_option("--budget", budget, "env-sample budget");

  auto* eval = app.add_subcommand("evaluate", "deterministic policy rollouts");
  add_common(eval);
  int eval_episodes = 10;
  eval->add_option("--checkpoint", checkpoint, "agent checkpoint dir")
      ->required();
  eval->add_option("--episodes", eval_episodes);

  auto* plot = app.add_subcommand("plot", "render CSV metrics as SVG");
  add_common(plot);
  double sigma = 1.0;
  plot->add_option("--csv", csv_path, "study or reports CSV")->required();
  plot->add_option("--sigma", sigma, "plot-time smoothing width");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (gen->parsed()) {
      ExperimentConfig cfg = resolved_config(config_path, seed, has_seed, out_dir);
      begin_run(cfg);
      Dataset data = generate_dataset(n_episodes, cfg.physics, cfg.seed);
      save_dataset(data, cfg.physics, cfg.seed, cfg.out_dir + "/dataset.ksd");
      std::ofstream rep(cfg.out_dir + "/reports.csv");
      rep << "# ksc-dataset schema=1\nepisode,return\n";
      for (size_t e = 0; e < data.size(); ++e) {
        double ret = std::accumulate(data[e].rewards.begin(),
                                     data[e].rewards.end(), 0.0);
        rep << e << ',' << fmt(ret) << "\n";
      }
      std::printf("wrote %zu episodes (%zu transitions) to %s\n", data.size(),
                  data.size() * data.front().steps(),
                  (cfg.out_dir + "/dataset.ksd").c_str());
    } else if (tr->parsed()) {
      ExperimentConfig cfg = resolved_config(config_path, seed, has_seed, out_dir);
      LoadedDataset data = load_dataset(data_path);
      cfg.physics = data.physics;
      cfg.resolve();
      begin_run(cfg);
      Surrogate model(cfg.surrogate, mix(cfg.seed, 1));
      TrainResult res = train_surrogate(model, data.episodes, mix(cfg.seed, 2));
      save_surrogate(model, cfg.out_dir + "/model");
      std::ofstream rep(cfg.out_dir + "/reports.csv");
      rep << "# ksc-training schema=1\nepoch,train_loss,val_loss,K_seq\n";
      for (const TrainHistoryRow& row : res.history)
        rep << row.epoch << ',' << fmt(row.train_loss) << ','
            << fmt(row.val_loss) << ',' << row.K_seq << "\n";
      std::printf("best val loss %.6g at epoch %d\n", res.best_val,
                  res.best_epoch);
    } else if (study->parsed()) {
      ExperimentConfig cfg = resolved_config(config_path, seed, has_seed, out_dir);
      LoadedDataset data = load_dataset(data_path);
      cfg.physics = data.physics;
      cfg.resolve();
      begin_run(cfg);
      StudySpec spec;
      spec.base = cfg.surrogate;
      spec.folds = folds;
      spec.workers = workers;
      spec.K_eval = full ? 30 : k_eval;
      if (!full && cfg.surrogate.epochs_max > 40) spec.base.epochs_max = 40;
      if (!fractions.empty()) spec.fractions = fractions;
      if (!widths.empty()) spec.widths = widths;
      if (!eps.empty()) spec.vpt_eps = eps;
      if (!variant_names.empty()) {
        spec.variants.clear();
        for (const std::string& v : variant_names)
          spec.variants.push_back(variant_from_string(v));
      }
      StudyResult result = offline_study(data.episodes, spec, cfg.seed);
      write_study_csv(result, cfg.out_dir + "/reports.csv");
      std::printf("study finished: %zu cells -> %s\n", result.cells.size(),
                  (cfg.out_dir + "/reports.csv").c_str());
    } else if (mbrl->parsed()) {
      ExperimentConfig cfg = resolved_config(config_path, seed, has_seed, out_dir);
      cfg.loop.ablation = ablation_from_string(ablation_name);
      if (budget >= 0) cfg.loop.total_budget = budget;
      cfg.loop.validate();
      begin_run(cfg);
      RunArtifacts art = run_loop(cfg.loop, cfg.seed, [](const IterationReport& r) {
        std::printf("iter %d: samples %ld K_rll %d eval %.4f +- %.4f\n",
                    r.iteration, r.env_samples, r.K_rll, r.eval_mean, r.eval_std);
      });
      write_reports_csv(art.reports, cfg.out_dir + "/reports.csv");
      if (art.agent) art.agent->save(cfg.out_dir + "/agent");
      if (art.ensemble) save_ensemble(*art.ensemble, cfg.out_dir + "/ensemble");
    } else if (eval->parsed()) {
      ExperimentConfig cfg = resolved_config(config_path, seed, has_seed, out_dir);
      SacAgent agent(cfg.loop.sac, 0);
      agent.load(checkpoint);
      std::vector<double> returns;
      for (int e = 0; e < eval_episodes; ++e)
        returns.push_back(evaluate_policy_episode(agent, cfg.physics,
                                                  mix(cfg.seed, 800000 + e)));
      MeanCi ci = t_interval(returns);
      double ss = 0.0;
      for (double r : returns) ss += (r - ci.mean) * (r - ci.mean);
      double sd = returns.size() > 1 ? std::sqrt(ss / (returns.size() - 1)) : 0.0;
      if (!out_dir.empty()) {
        begin_run(cfg);
        std::ofstream rep(cfg.out_dir + "/reports.csv");
        rep << "# ksc-evaluation schema=1\nepisode,return\n";
        for (size_t e = 0; e < returns.size(); ++e)
          rep << e << ',' << fmt(returns[e]) << "\n";
      }
      std::printf("return over %d episodes: %.6g +- %.6g\n", eval_episodes,
                  ci.mean, sd);
    } else if (plot->parsed()) {
      std::string dir = out_dir.empty() ? "." : out_dir;
      fs::create_directories(dir);
      std::ifstream in(csv_path);
      if (!in) throw std::runtime_error("cannot open csv: " + csv_path);
      std::string first;
      std::getline(in, first);
      in.close();
      if (first.find("ksc-study") != std::string::npos) {
        plot_study(read_study_csv(csv_path), dir);
      } else if (first.find("ksc-reports") != std::string::npos) {
        plot_reports(read_reports_csv(csv_path), dir, sigma);
      } else {
        throw std::runtime_error("unrecognized csv schema: " + csv_path);
      }
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv) { return cli_main(argc, argv); }

}  // namespace ksc
