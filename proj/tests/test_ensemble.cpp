#include "doctest.h"
#include "ksc/ensemble.hpp"

#include <algorithm>
#include <cmath>

using namespace ksc;

namespace {

PhysicsConfig short_physics() {
  PhysicsConfig p;
  p.T_max = 10.0;
  p.transient_T = 5.0;
  return p;
}

Episode make_episode(std::uint64_t seed, const PhysicsConfig& phys) {
  EnvState env = reset(seed, phys);
  std::mt19937_64 rng(seed * 2654435761ULL + 1);
  std::uniform_real_distribution<double> act(-1.0, 1.0);
  Episode ep;
  ep.states.push_back(env.u);
  for (int t = 0; t < phys.steps_per_episode(); ++t) {
    Action a;
    for (int i = 0; i < phys.n_act; ++i) a.a.push_back(act(rng));
    Transition tr = env_step(env, a, phys);
    ep.actions.push_back(a);
    ep.rewards.push_back(tr.reward);
    ep.states.push_back(tr.next_state);
  }
  return ep;
}

const Dataset& cached_dataset() {
  static Dataset d = [] {
    PhysicsConfig phys = short_physics();
    Dataset out;
    for (int i = 0; i < 12; ++i) out.push_back(make_episode(300 + i, phys));
    return out;
  }();
  return d;
}

EnsembleConfig small_cfg(bool bootstrap, int L, int elites) {
  EnsembleConfig cfg;
  cfg.L_ens = L;
  cfg.n_elite = elites;
  cfg.bootstrap = bootstrap;
  cfg.surrogate.physics = short_physics();
  cfg.surrogate.width_beta = 1.0;
  cfg.surrogate.K_tf = 2;
  cfg.surrogate.K_max = 1;
  cfg.surrogate.epochs_max = 6;
  cfg.surrogate.patience = 6;
  cfg.surrogate.batch_size = 8;
  cfg.surrogate.lr = 3e-3;
  return cfg;
}

const EnsembleState& cached_ensemble() {
  static EnsembleState s = fit_ensemble(cached_dataset(), small_cfg(true, 5, 3), 7);
  return s;
}

}  // namespace

TEST_CASE("bootstrap off with a shared seed gives identical members") {
  EnsembleConfig cfg = small_cfg(false, 3, 2);
  cfg.surrogate.epochs_max = 2;
  Dataset four(cached_dataset().begin(), cached_dataset().begin() + 4);
  EnsembleState s = fit_ensemble(four, cfg, 5);
  for (int m = 1; m < s.size(); ++m) {
    CHECK(s.train_sets[m] == s.train_sets[0]);
    CHECK(s.val_sets[m] == s.val_sets[0]);
    for (size_t p = 0; p < s.members[0]->ps.params.size(); ++p) {
      const auto& a = s.members[0]->ps.params[p].second->value.data;
      const auto& b = s.members[m]->ps.params[p].second->value.data;
      CHECK(a == b);
    }
  }
}

TEST_CASE("bootstrap resamples whole episodes to the original count") {
  const EnsembleState& s = cached_ensemble();
  const int n = static_cast<int>(cached_dataset().size());
  const int n_val = static_cast<int>(std::lround(0.2 * n));
  for (int m = 0; m < s.size(); ++m) {
    CHECK(static_cast<int>(s.train_sets[m].size()) == n - n_val);
    // train draws never touch that member's validation episodes
    for (int e : s.train_sets[m])
      CHECK(std::find(s.val_sets[m].begin(), s.val_sets[m].end(), e) ==
            s.val_sets[m].end());
  }
  // the five multisets are pairwise distinct
  std::vector<std::vector<int>> sorted;
  for (int m = 0; m < s.size(); ++m) {
    auto t = s.train_sets[m];
    std::sort(t.begin(), t.end());
    sorted.push_back(t);
  }
  for (int a = 0; a < s.size(); ++a)
    for (int b = a + 1; b < s.size(); ++b) CHECK(sorted[a] != sorted[b]);
}

TEST_CASE("elites are the argsort of validation losses") {
  const EnsembleState& s = cached_ensemble();
  auto order = elite_indices(s.val_losses, s.cfg.n_elite);
  CHECK(s.elites == order);
  for (size_t i = 1; i < order.size(); ++i)
    CHECK(s.val_losses[order[i - 1]] <= s.val_losses[order[i]]);
  for (int m = 0; m < s.size(); ++m) {
    if (std::find(order.begin(), order.end(), m) != order.end()) continue;
    for (int e : order) CHECK(s.val_losses[e] <= s.val_losses[m]);
  }

  CHECK(elite_indices({3.0, 1.0, 2.0, 0.5}, 2) == std::vector<int>{3, 1});
  CHECK(elite_indices({1.0, 1.0, 0.0}, 2) == std::vector<int>{2, 0});  // tie by index
}

TEST_CASE("rollout model selection draws uniformly among elites") {
  EnsembleState s;
  s.val_losses = {0.5, 0.1, 0.9, 0.2, 0.3};
  s.cfg.n_elite = 3;
  s.elites = elite_indices(s.val_losses, 3);  // {1, 3, 4}
  REQUIRE(s.elites == std::vector<int>{1, 3, 4});

  std::mt19937_64 rng(11);
  std::vector<int> counts(5, 0);
  const int n = 10000;
  for (int i = 0; i < n; ++i) counts[select_rollout_model(s, rng)]++;
  CHECK(counts[0] == 0);
  CHECK(counts[2] == 0);
  const double expect = n / 3.0;
  const double sigma = std::sqrt(n * (1.0 / 3.0) * (2.0 / 3.0));
  for (int e : s.elites) CHECK(std::fabs(counts[e] - expect) <= 3.0 * sigma);

  s.cfg.n_elite = 1;
  s.elites = elite_indices(s.val_losses, 1);
  for (int i = 0; i < 100; ++i) CHECK(select_rollout_model(s, rng) == 1);
}

TEST_CASE("disagreement: zero for identical members, grows along rollouts") {
  const Dataset& data = cached_dataset();
  const PhysicsConfig phys = short_physics();
  const int K = 6, K_tf = 2;

  EnsembleConfig cfg = small_cfg(false, 3, 2);
  cfg.surrogate.epochs_max = 2;
  Dataset four(data.begin(), data.begin() + 4);
  EnsembleState twin = fit_ensemble(four, cfg, 5);

  auto make_seed = [&](const Episode& ep, int t) {
    RolloutSeed s;
    for (int i = t - K_tf + 1; i <= t; ++i) {
      s.states.push_back(ep.states[i]);
      s.actions.push_back(ep.actions[i]);
    }
    return s;
  };
  const Episode& ep = data[11];
  std::vector<Action> acts(ep.actions.begin() + K_tf, ep.actions.begin() + K_tf + K);

  auto zero_spread = disagreement(twin, make_seed(ep, K_tf - 1), acts, K);
  // ulp-level rounding of the member mean is the only admissible residue
  for (double v : zero_spread) CHECK(v <= 1e-15);

  const EnsembleState& s = cached_ensemble();
  std::vector<double> growth;
  for (int start = K_tf - 1; start + K < ep.steps(); start += K) {
    std::vector<Action> a(ep.actions.begin() + start + 1,
                          ep.actions.begin() + start + 1 + K);
    auto sp = disagreement(s, make_seed(ep, start), a, K);
    for (double v : sp) CHECK(v >= 0.0);
    growth.push_back(sp.back() - sp.front());
  }
  std::sort(growth.begin(), growth.end());
  CHECK(growth[growth.size() / 2] > 0.0);
}

TEST_CASE("refit keeps member count and recomputes elites") {
  EnsembleConfig cfg = small_cfg(true, 3, 2);
  cfg.surrogate.epochs_max = 2;
  cfg.surrogate.max_updates = 5;
  Dataset six(cached_dataset().begin(), cached_dataset().begin() + 6);
  EnsembleState s = fit_ensemble(six, cfg, 21);
  const auto before = s.val_losses;
  Dataset eight(cached_dataset().begin(), cached_dataset().begin() + 8);
  refit_ensemble(s, eight, 22);
  CHECK(s.size() == 3);
  CHECK(s.elites == elite_indices(s.val_losses, 2));
  CHECK(s.val_losses != before);
}

TEST_CASE("ensemble checkpoint round trip") {
  EnsembleConfig cfg = small_cfg(true, 2, 1);
  cfg.surrogate.epochs_max = 2;
  Dataset four(cached_dataset().begin(), cached_dataset().begin() + 4);
  EnsembleState s = fit_ensemble(four, cfg, 31);
  save_ensemble(s, "/tmp/ksc_ensemble_ckpt");
  EnsembleState r = load_ensemble("/tmp/ksc_ensemble_ckpt", cfg);
  CHECK(r.size() == 2);
  CHECK(r.elites == s.elites);
  CHECK(r.train_sets == s.train_sets);
  for (size_t i = 0; i < s.val_losses.size(); ++i)
    CHECK(r.val_losses[i] == doctest::Approx(s.val_losses[i]));
  for (size_t p = 0; p < s.members[0]->ps.params.size(); ++p)
    for (long j = 0; j < s.members[0]->ps.params[p].second->value.size(); ++j)
      CHECK(r.members[0]->ps.params[p].second->value[j] ==
            doctest::Approx(s.members[0]->ps.params[p].second->value[j]).epsilon(1e-6));
}
