#include "doctest.h"
#include "ksc/mbrl.hpp"

#include <cmath>

using namespace ksc;

namespace {

PhysicsConfig tiny_physics() {
  PhysicsConfig p;
  p.T_max = 2.5;       // 10 control steps per episode
  p.transient_T = 2.0;
  return p;
}

LoopConfig tiny_loop(Ablation ab = Ablation::none) {
  LoopConfig cfg;
  cfg.ablation = ab;
  cfg.total_budget = 30;  // three episodes
  cfg.N_model = 5;
  cfg.L_updates = 2;
  cfg.k_start = 1;
  cfg.k_end = 4;
  cfg.ramp_samples = 40;
  cfg.P_min = 2;
  cfg.P_max = 5;
  cfg.eval_episodes = 1;
  cfg.random_warmup_episodes = 1;
  cfg.offline_pretrain_episodes = 2;
  cfg.exploitation_grad_steps = 4;

  cfg.ensemble.L_ens = 2;
  cfg.ensemble.n_elite = 2;
  cfg.ensemble.surrogate.physics = tiny_physics();
  cfg.ensemble.surrogate.width_beta = 1.0;
  cfg.ensemble.surrogate.K_tf = 2;
  cfg.ensemble.surrogate.K_max = 1;
  cfg.ensemble.surrogate.epochs_max = 10;
  cfg.ensemble.surrogate.patience = 10;
  cfg.ensemble.surrogate.batch_size = 4;
  cfg.ensemble.surrogate.lr = 3e-3;

  cfg.sac.hidden = 32;
  cfg.sac.n_layers = 2;
  cfg.sac.batch_size = 32;
  return cfg;
}

// true-dynamics stand-in for a learned member
class OracleModel : public ModelInterface {
 public:
  explicit OracleModel(const PhysicsConfig& phys) : phys_(phys) {}

  int begin_rollout(const RolloutSeed& seed, std::mt19937_64&) override {
    cur_ = integrate(seed.states.back(), seed.actions.back());
    return 0;
  }
  const GridField& state() const override { return cur_; }
  void step(const Action& a) override { cur_ = integrate(cur_, a); }

  GridField integrate(const GridField& u, const Action& a) const {
    EnvState st;
    st.u = u;
    return env_step(st, a, phys_).next_state;
  }

 private:
  PhysicsConfig phys_;
  GridField cur_;
};

Dataset two_episodes() {
  static Dataset d = [] {
    PhysicsConfig phys = tiny_physics();
    Dataset out;
    std::mt19937_64 rng(77);
    std::uniform_real_distribution<double> uni(-1.0, 1.0);
    for (int e = 0; e < 2; ++e) {
      EnvState env = reset(600 + e, phys);
      Episode ep;
      ep.states.push_back(env.u);
      for (int t = 0; t < phys.steps_per_episode(); ++t) {
        Action a;
        for (int i = 0; i < phys.n_act; ++i) a.a.push_back(uni(rng));
        Transition tr = env_step(env, a, phys);
        ep.actions.push_back(a);
        ep.rewards.push_back(tr.reward);
        ep.states.push_back(tr.next_state);
      }
      out.push_back(ep);
    }
    return out;
  }();
  return d;
}

}  // namespace

TEST_CASE("rollout length schedule") {
  LoopConfig cfg;  // defaults: 1 -> 13 over 20000 samples
  CHECK(rollout_length(0, cfg) == 1);
  CHECK(rollout_length(10000, cfg) == 7);
  CHECK(rollout_length(20000, cfg) == 13);
  CHECK(rollout_length(1000000, cfg) == 13);
  for (long s = 0; s < 20000; s += 500)
    CHECK(rollout_length(s + 500, cfg) >= rollout_length(s, cfg));
}

TEST_CASE("zero budget produces no iterations") {
  LoopConfig cfg = tiny_loop();
  cfg.total_budget = 0;
  RunArtifacts art = run_loop(cfg, 1);
  CHECK(art.reports.empty());
  CHECK(art.env_episodes.empty());
  CHECK(art.ensemble == nullptr);
}

TEST_CASE("model rollouts: oracle stub reproduces the true environment") {
  PhysicsConfig phys = tiny_physics();
  OracleModel oracle(phys);
  SacConfig scfg;
  scfg.state_dim = phys.N;
  scfg.action_dim = phys.n_act;
  scfg.hidden = 16;
  scfg.n_layers = 2;
  SacAgent agent(scfg, 3);
  std::mt19937_64 rng(4);

  std::vector<BufferEntry> out;
  const int K = 4;
  CHECK(model_rollout(oracle, agent, two_episodes(), K, 2, phys, 7, rng, out));
  REQUIRE(out.size() == K);
  for (int k = 0; k < K; ++k) {
    const Transition& t = out[k].t;
    // chained states
    if (k > 0)
      CHECK(t.state == out[k - 1].t.next_state);
    // the oracle step is exactly the true env step
    GridField truth = oracle.integrate(t.state, t.action);
    for (int i = 0; i < phys.N; ++i) CHECK(t.next_state[i] == truth[i]);
    // reward relabeled through the known reward function
    const double r = step_reward(t.state, forcing_field(t.action, phys), phys);
    CHECK(t.reward == doctest::Approx(r).epsilon(1e-10));
    CHECK(out[k].prov.from_model);
    CHECK(out[k].prov.iteration == 7);
    CHECK(out[k].prov.member == out[0].prov.member);
  }

  std::vector<BufferEntry> none;
  CHECK(model_rollout(oracle, agent, two_episodes(), 0, 2, phys, 0, rng, none));
  CHECK(none.empty());
}

TEST_CASE("rollout seeds are contiguous in-episode slices") {
  std::mt19937_64 rng(5);
  const Dataset data = two_episodes();
  for (int trial = 0; trial < 50; ++trial) {
    RolloutSeed s = sample_rollout_seed(data, 3, rng);
    CHECK(s.states.size() >= 1);
    CHECK(s.states.size() <= 3);
    CHECK(s.states.size() == s.actions.size());
    // every pair appears in some episode at consecutive offsets
    bool found = false;
    for (const Episode& ep : data)
      for (int t = 0; t + static_cast<int>(s.states.size()) <= ep.steps() + 1; ++t) {
        bool match = true;
        for (size_t i = 0; i < s.states.size() && match; ++i)
          match = (ep.states[t + i] == s.states[i]);
        if (match) found = true;
      }
    CHECK(found);
  }
}

TEST_CASE("divergent member aborts the rollout and keeps the partial prefix") {
  LoopConfig cfg = tiny_loop();
  EnsembleState ens = fit_ensemble(two_episodes(), cfg.ensemble, 6);
  // poison one member so the other is never at fault
  ens.elites = {0};
  for (auto& [path, var] : ens.members[0]->ps.params)
    if (path == "dec/out/b")
      for (double& v : var->value.data)
        v = std::numeric_limits<double>::infinity();

  EnsembleModel model(ens);
  SacConfig scfg;
  scfg.state_dim = cfg.ensemble.surrogate.physics.N;
  scfg.action_dim = 4;
  scfg.hidden = 16;
  scfg.n_layers = 2;
  SacAgent agent(scfg, 7);
  std::mt19937_64 rng(8);
  std::vector<BufferEntry> out;
  const bool ok = model_rollout(model, agent, two_episodes(), 5, 2,
                                cfg.ensemble.surrogate.physics, 0, rng, out);
  CHECK_FALSE(ok);
  CHECK(out.empty());  // diverges during warmup, before any transition
}

TEST_CASE("full loop: iterates to budget, reports are deterministic") {
  LoopConfig cfg = tiny_loop();
  RunArtifacts a = run_loop(cfg, 42);
  RunArtifacts b = run_loop(cfg, 42);

  REQUIRE(a.reports.size() == 3);
  CHECK(a.env_episodes.size() == 3);
  CHECK(a.reports.back().env_samples == 30);
  for (size_t i = 0; i < a.reports.size(); ++i) {
    const IterationReport &x = a.reports[i], &y = b.reports[i];
    CHECK(x.iteration == y.iteration);
    CHECK(x.env_samples == y.env_samples);
    CHECK(x.K_rll == y.K_rll);
    CHECK(x.model_val_losses == y.model_val_losses);
    CHECK(x.elites == y.elites);
    CHECK(x.eval_mean == y.eval_mean);
    CHECK(x.eval_std == y.eval_std);
    CHECK(x.rollouts_total == y.rollouts_total);
    CHECK(x.rollouts_aborted == y.rollouts_aborted);
  }
  // models were fit and rollouts generated
  CHECK(a.ensemble != nullptr);
  for (const auto& rep : a.reports) {
    CHECK(rep.model_val_losses.size() == 2);
    CHECK(rep.rollouts_total > 0);
    CHECK(rep.K_rll >= cfg.k_start);
    CHECK(rep.K_rll <= cfg.k_end);
  }
}

TEST_CASE("model-free ablation never builds a model") {
  LoopConfig cfg = tiny_loop(Ablation::model_free);
  cfg.total_budget = 20;
  RunArtifacts art = run_loop(cfg, 9);
  CHECK(art.ensemble == nullptr);
  for (const auto& rep : art.reports) {
    CHECK(rep.model_val_losses.empty());
    CHECK(rep.rollouts_total == 0);
  }
}

TEST_CASE("offline ablation pretrains once and freezes the model") {
  LoopConfig cfg = tiny_loop(Ablation::offline_model);
  cfg.total_budget = 20;
  RunArtifacts art = run_loop(cfg, 10);
  REQUIRE(art.reports.size() == 2);
  REQUIRE(art.ensemble != nullptr);
  // frozen: identical validation losses in every report
  CHECK(art.reports[0].model_val_losses == art.reports[1].model_val_losses);
  for (const auto& rep : art.reports) CHECK(rep.rollouts_total > 0);
}

TEST_CASE("exploitation ablation runs a single fixed-budget model") {
  LoopConfig cfg = tiny_loop(Ablation::exploitation);
  cfg.total_budget = 20;
  RunArtifacts art = run_loop(cfg, 11);
  REQUIRE(art.ensemble != nullptr);
  CHECK(art.ensemble->size() == 1);
  for (const auto& rep : art.reports) {
    CHECK(rep.model_val_losses.size() == 1);
    CHECK(rep.elites == std::vector<int>{0});
    // no rollout schedule: the length stays pinned at k_end
    CHECK(rep.K_rll == cfg.k_end);
  }
}

TEST_CASE("surrogate ablations swap the model variant") {
  LoopConfig cfg = tiny_loop(Ablation::dense_surrogate);
  cfg.total_budget = 10;
  RunArtifacts art = run_loop(cfg, 12);
  REQUIRE(art.ensemble != nullptr);
  CHECK(art.ensemble->members[0]->cfg.variant == SurrogateVariant::residual_dense);

  LoopConfig cfg2 = tiny_loop(Ablation::fullstate_surrogate);
  cfg2.total_budget = 10;
  RunArtifacts art2 = run_loop(cfg2, 13);
  CHECK(art2.ensemble->members[0]->cfg.variant == SurrogateVariant::fullstate_conv);
}

TEST_CASE("evaluation is isolated from the training stream") {
  LoopConfig cfg = tiny_loop();
  cfg.total_budget = 20;
  cfg.eval_episodes = 0;
  RunArtifacts a = run_loop(cfg, 14);
  cfg.eval_episodes = 2;
  RunArtifacts b = run_loop(cfg, 14);
  REQUIRE(a.reports.size() == b.reports.size());
  for (size_t i = 0; i < a.reports.size(); ++i) {
    CHECK(a.reports[i].model_val_losses == b.reports[i].model_val_losses);
    CHECK(a.reports[i].K_rll == b.reports[i].K_rll);
    CHECK(a.reports[i].rollouts_total == b.reports[i].rollouts_total);
  }
}

TEST_CASE("model-origin batches equal env-origin batches for identical data") {
  // oracle-generated model transitions placed in a second buffer reproduce
  // the exact same SAC batch tensors as their env-side twins
  PhysicsConfig phys = tiny_physics();
  OracleModel oracle(phys);
  SacConfig scfg;
  scfg.state_dim = phys.N;
  scfg.action_dim = phys.n_act;
  scfg.hidden = 16;
  scfg.n_layers = 2;
  SacAgent agent(scfg, 15);
  std::mt19937_64 rng(16);
  std::vector<BufferEntry> rolled;
  model_rollout(oracle, agent, two_episodes(), 6, 2, phys, 0, rng, rolled);

  ReplayBuffer as_model(100), as_env(100);
  for (const BufferEntry& e : rolled) {
    as_model.push(e.t, {true, e.prov.member, 0});
    as_env.push(e.t, {false, -1, 0});
  }
  std::mt19937_64 r1(17), r2(17);
  SacBatch m = make_batch(as_model, as_model.sample_indices(8, r1));
  SacBatch v = make_batch(as_env, as_env.sample_indices(8, r2));
  CHECK(m.states.data == v.states.data);
  CHECK(m.actions.data == v.actions.data);
  CHECK(m.rewards.data == v.rewards.data);
  CHECK(m.next_states.data == v.next_states.data);
}
