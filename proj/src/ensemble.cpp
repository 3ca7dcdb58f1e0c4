#include "ksc/ensemble.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "json.hpp"

namespace ksc {

void EnsembleConfig::validate() const {
  if (L_ens < 1) throw std::invalid_argument("L_ens must be >= 1");
  if (n_elite < 1 || n_elite > L_ens)
    throw std::invalid_argument("need 1 <= n_elite <= L_ens");
  surrogate.validate();
}

std::vector<int> elite_indices(const std::vector<double>& losses, int n) {
  std::vector<int> order(losses.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return losses[a] < losses[b]; });
  order.resize(std::min<size_t>(n, order.size()));
  return order;
}

namespace {

std::uint64_t mix(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

void draw_split(const Dataset& data, const EnsembleConfig& cfg,
                std::uint64_t member_seed, std::vector<int>& train,
                std::vector<int>& val) {
  const int n = static_cast<int>(data.size());
  std::mt19937_64 rng(member_seed);
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  int n_val = std::max(n > 1 ? 1 : 0,
                       static_cast<int>(std::lround(cfg.surrogate.val_fraction * n)));
  n_val = std::min(n_val, n - 1);
  n_val = std::max(n_val, 0);
  val.assign(order.begin(), order.begin() + n_val);
  std::vector<int> pool(order.begin() + n_val, order.end());
  if (val.empty()) val = pool;
  if (cfg.bootstrap) {
    std::uniform_int_distribution<int> pick(0, static_cast<int>(pool.size()) - 1);
    train.clear();
    for (size_t i = 0; i < pool.size(); ++i) train.push_back(pool[pick(rng)]);
  } else {
    train = pool;
  }
}

void fit_member(EnsembleState& state, int m, const Dataset& dataset,
                std::uint64_t seed, bool fresh) {
  const EnsembleConfig& cfg = state.cfg;
  const std::uint64_t member_seed = cfg.bootstrap ? mix(seed, m) : seed;
  std::vector<int> train, val;
  draw_split(dataset, cfg, member_seed, train, val);
  if (fresh)
    state.members[m] = std::make_unique<Surrogate>(cfg.surrogate, member_seed);
  TrainResult r = train_surrogate(*state.members[m], dataset, member_seed,
                                  &train, &val);
  state.train_sets[m] = std::move(train);
  state.val_sets[m] = std::move(val);
  state.val_losses[m] = r.best_val;
}

}  // namespace

EnsembleState fit_ensemble(const Dataset& dataset, const EnsembleConfig& cfg,
                           std::uint64_t seed) {
  cfg.validate();
  if (dataset.empty()) throw std::invalid_argument("fit_ensemble: empty dataset");
  EnsembleState state;
  state.cfg = cfg;
  state.members.resize(cfg.L_ens);
  state.train_sets.resize(cfg.L_ens);
  state.val_sets.resize(cfg.L_ens);
  state.val_losses.resize(cfg.L_ens);
  for (int m = 0; m < cfg.L_ens; ++m) fit_member(state, m, dataset, seed, true);
  state.elites = elite_indices(state.val_losses, cfg.n_elite);
  return state;
}

void refit_ensemble(EnsembleState& state, const Dataset& dataset,
                    std::uint64_t seed) {
  for (int m = 0; m < state.size(); ++m) fit_member(state, m, dataset, seed, false);
  state.elites = elite_indices(state.val_losses, state.cfg.n_elite);
}

int select_rollout_model(const EnsembleState& state, std::mt19937_64& rng) {
  if (state.elites.empty())
    throw std::logic_error("select_rollout_model: no elites");
  std::uniform_int_distribution<int> pick(0, static_cast<int>(state.elites.size()) - 1);
  return state.elites[pick(rng)];
}

std::vector<double> disagreement(const EnsembleState& state,
                                 const RolloutSeed& seed,
                                 const std::vector<Action>& actions, int K) {
  if (state.size() < 2)
    throw std::invalid_argument("disagreement: need at least two members");
  std::vector<std::vector<GridField>> preds;
  for (const auto& m : state.members) preds.push_back(m->rollout(seed, actions, K));
  const int L = state.size();
  const int N = static_cast<int>(preds[0][0].size());
  std::vector<double> spread;
  for (int k = 0; k <= K; ++k) {
    double acc = 0.0;
    for (int j = 0; j < N; ++j) {
      double s = 0.0;
      for (int m = 0; m < L; ++m) s += preds[m][k][j];
      const double mean = s / L;
      double sq = 0.0;
      for (int m = 0; m < L; ++m) {
        const double d = preds[m][k][j] - mean;
        sq += d * d;
      }
      acc += std::sqrt(sq / L);
    }
    spread.push_back(acc / N);
  }
  return spread;
}

void save_ensemble(const EnsembleState& state, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json manifest;
  manifest["L_ens"] = state.size();
  manifest["train_sets"] = state.train_sets;
  manifest["val_sets"] = state.val_sets;
  manifest["val_losses"] = state.val_losses;
  manifest["elites"] = state.elites;
  for (int m = 0; m < state.size(); ++m)
    save_surrogate(*state.members[m], dir + "/member_" + std::to_string(m));
  std::ofstream(fs::path(dir) / "ensemble.json") << manifest.dump(2) << "\n";
}

EnsembleState load_ensemble(const std::string& dir, const EnsembleConfig& cfg) {
  std::ifstream in(std::filesystem::path(dir) / "ensemble.json");
  if (!in) throw std::runtime_error("load_ensemble: missing manifest in " + dir);
  nlohmann::json manifest = nlohmann::json::parse(in);
  EnsembleState state;
  state.cfg = cfg;
  const int L = manifest["L_ens"].get<int>();
  state.train_sets = manifest["train_sets"].get<std::vector<std::vector<int>>>();
  state.val_sets = manifest["val_sets"].get<std::vector<std::vector<int>>>();
  state.val_losses = manifest["val_losses"].get<std::vector<double>>();
  state.elites = manifest["elites"].get<std::vector<int>>();
  for (int m = 0; m < L; ++m) {
    state.members.push_back(std::make_unique<Surrogate>(cfg.surrogate, 0));
    load_surrogate(*state.members.back(), dir + "/member_" + std::to_string(m));
  }
  return state;
}

}  // namespace ksc
