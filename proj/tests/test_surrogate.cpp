#include "doctest.h"
#include "ksc/surrogate.hpp"

#include <cmath>

using namespace ksc;

namespace {

PhysicsConfig short_physics() {
  PhysicsConfig p;
  p.T_max = 10.0;      // 40 control steps per episode
  p.transient_T = 5.0; // enough to leave the uniform-noise init
  return p;
}

Episode make_episode(std::uint64_t seed, const PhysicsConfig& phys) {
  EnvState env = reset(seed, phys);
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
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

SurrogateConfig small_cfg(SurrogateVariant v = SurrogateVariant::residual_conv) {
  SurrogateConfig cfg;
  cfg.physics = short_physics();
  cfg.width_beta = 2.0;
  cfg.K_tf = 2;
  cfg.K_max = 5;
  cfg.epochs_max = 50;
  cfg.patience = 50;
  cfg.batch_size = 4;
  cfg.lr = 3e-3;
  cfg.variant = v;
  return cfg;
}

const Dataset& cached_dataset() {
  static Dataset d = [] {
    PhysicsConfig phys = short_physics();
    Dataset out;
    for (int i = 0; i < 3; ++i) out.push_back(make_episode(100 + i, phys));
    return out;
  }();
  return d;
}

void zero_decoder(Surrogate& m) {
  for (auto& [path, var] : m.ps.params)
    if (path.rfind("dec/out/", 0) == 0)
      for (double& v : var->value.data) v = 0.0;
}

RolloutSeed seed_from(const Episode& ep, int t, int k_tf) {
  RolloutSeed s;
  for (int i = std::max(0, t - k_tf + 1); i <= t; ++i) {
    s.states.push_back(ep.states[i]);
    s.actions.push_back(ep.actions[i]);
  }
  return s;
}

}  // namespace

TEST_CASE("encoders produce the documented latent geometry") {
  SurrogateConfig cfg;
  cfg.physics.validate();
  Surrogate m(cfg, 1);
  CHECK(m.cs == 16);
  CHECK(m.ca == 6);
  CHECK(m.latent_width() == 16);

  Tensor u({1, 1, 64});
  for (int i = 0; i < 64; ++i) u.data[i] = std::sin(2.0 * M_PI * i / 64.0);
  Var zs = m.encode_state(constant(u));
  CHECK(zs->value.shape == Shape{1, 16, 16});

  Action a{{0.3, -0.2, 0.8, 0.1}};
  Tensor phi({1, 1, 64});
  phi.data = forcing_field(a, cfg.physics);
  Var za = m.encode_action(constant(phi));
  CHECK(za->value.shape == Shape{1, 6, 16});
}

TEST_CASE("state encoder: shift by 4 grid points shifts latent by 1") {
  SurrogateConfig cfg;
  Surrogate m(cfg, 2);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> d(-1, 1);
  Tensor u({1, 1, 64}), us({1, 1, 64});
  for (int i = 0; i < 64; ++i) u.data[i] = d(rng);
  for (int i = 0; i < 64; ++i) us.data[(i + 4) % 64] = u.data[i];
  Var z1 = m.encode_state(constant(u));
  Var z2 = m.encode_state(constant(us));
  for (int c = 0; c < 16; ++c)
    for (int i = 0; i < 16; ++i)
      CHECK(z2->value[c * 16 + (i + 1) % 16] ==
            doctest::Approx(z1->value[c * 16 + i]).epsilon(1e-10));
}

TEST_CASE("rollout commutes with actuator-spacing shifts") {
  SurrogateConfig cfg = small_cfg();
  Surrogate m(cfg, 4);
  m.stats.std_u = 0.8;
  m.stats.mean_t = 0.01;
  const Episode& ep = cached_dataset()[0];
  const int N = cfg.physics.N, shift = N / cfg.physics.n_act;  // 16 grid points

  RolloutSeed seed = seed_from(ep, cfg.K_tf - 1, cfg.K_tf);
  std::vector<Action> acts(ep.actions.begin() + cfg.K_tf,
                           ep.actions.begin() + cfg.K_tf + 4);
  auto base = m.rollout(seed, acts, 4);

  auto shift_field = [&](const GridField& f) {
    GridField g(N);
    for (int i = 0; i < N; ++i) g[(i + shift) % N] = f[i];
    return g;
  };
  auto shift_action = [&](const Action& a) {
    Action b = a;
    std::rotate(b.a.rbegin(), b.a.rbegin() + 1, b.a.rend());
    return b;
  };
  RolloutSeed sseed;
  for (size_t i = 0; i < seed.states.size(); ++i) {
    sseed.states.push_back(shift_field(seed.states[i]));
    sseed.actions.push_back(shift_action(seed.actions[i]));
  }
  std::vector<Action> sacts;
  for (const Action& a : acts) sacts.push_back(shift_action(a));
  auto shifted = m.rollout(sseed, sacts, 4);

  for (size_t k = 0; k < base.size(); ++k) {
    GridField expect = shift_field(base[k]);
    for (int i = 0; i < N; ++i)
      CHECK(shifted[k][i] == doctest::Approx(expect[i]).epsilon(1e-5));
  }
}

TEST_CASE("residual identity when the decoder outputs zero") {
  SurrogateConfig cfg = small_cfg();
  Surrogate m(cfg, 5);
  zero_decoder(m);
  const Episode& ep = cached_dataset()[0];
  RolloutSeed seed = seed_from(ep, cfg.K_tf - 1, cfg.K_tf);
  std::vector<Action> acts(ep.actions.begin() + cfg.K_tf,
                           ep.actions.begin() + cfg.K_tf + 3);
  auto preds = m.rollout(seed, acts, 3);
  // predictions stay pinned to the seeded initial state, bit for bit
  for (const GridField& p : preds)
    for (int i = 0; i < cfg.physics.N; ++i) CHECK(p[i] == seed.states.back()[i]);
}

TEST_CASE("rollout: K=0, padding and determinism contracts") {
  SurrogateConfig cfg = small_cfg();
  Surrogate m(cfg, 6);
  const Episode& ep = cached_dataset()[1];

  RolloutSeed full = seed_from(ep, cfg.K_tf - 1, cfg.K_tf);
  auto p0 = m.rollout(full, {}, 0);
  CHECK(p0.size() == 1);

  // a length-1 history equals its explicit K_tf-fold repetition
  RolloutSeed one;
  one.states.push_back(ep.states[0]);
  one.actions.push_back(ep.actions[0]);
  RolloutSeed repeated;
  for (int i = 0; i < cfg.K_tf; ++i) {
    repeated.states.push_back(ep.states[0]);
    repeated.actions.push_back(ep.actions[0]);
  }
  std::vector<Action> acts(ep.actions.begin() + 1, ep.actions.begin() + 4);
  auto a1 = m.rollout(one, acts, 3);
  auto a2 = m.rollout(repeated, acts, 3);
  REQUIRE(a1.size() == a2.size());
  for (size_t k = 0; k < a1.size(); ++k)
    for (int i = 0; i < cfg.physics.N; ++i) CHECK(a1[k][i] == a2[k][i]);

  auto b1 = m.rollout(full, acts, 3);
  auto b2 = m.rollout(full, acts, 3);
  for (size_t k = 0; k < b1.size(); ++k)
    for (int i = 0; i < cfg.physics.N; ++i) CHECK(b1[k][i] == b2[k][i]);
}

TEST_CASE("divergent predictions raise the divergence error") {
  SurrogateConfig cfg = small_cfg();
  Surrogate m(cfg, 7);
  for (auto& [path, var] : m.ps.params)
    if (path == "dec/out/b")
      for (double& v : var->value.data) v = std::numeric_limits<double>::infinity();
  const Episode& ep = cached_dataset()[0];
  RolloutSeed seed = seed_from(ep, cfg.K_tf - 1, cfg.K_tf);
  std::vector<Action> acts(ep.actions.begin() + cfg.K_tf,
                           ep.actions.begin() + cfg.K_tf + 2);
  CHECK_THROWS_AS(m.rollout(seed, acts, 2), ModelDivergence);
}

TEST_CASE("curriculum endpoints") {
  SurrogateConfig cfg;
  cfg.K_tf = 5;
  cfg.K_max = 30;
  cfg.epochs_max = 250;
  CHECK(curriculum_steps(cfg, 0) == cfg.K_tf + 1);
  const int ramp = static_cast<int>(0.4 * cfg.epochs_max);
  CHECK(curriculum_steps(cfg, ramp - 1) == cfg.K_tf + cfg.K_max);
  CHECK(curriculum_steps(cfg, cfg.epochs_max - 1) == cfg.K_tf + cfg.K_max);
  // non-decreasing
  for (int e = 1; e < cfg.epochs_max; ++e)
    CHECK(curriculum_steps(cfg, e) >= curriculum_steps(cfg, e - 1));
}

TEST_CASE("dense variant lands within 10% of the conv parameter budget") {
  SurrogateConfig cc = small_cfg(SurrogateVariant::residual_conv);
  cc.width_beta = 3.0;
  SurrogateConfig dc = small_cfg(SurrogateVariant::residual_dense);
  dc.width_beta = 3.0;
  Surrogate conv(cc, 8), dense(dc, 8);
  const double rel = std::fabs(static_cast<double>(dense.param_count(false)) -
                               conv.param_count(false)) /
                     conv.param_count(false);
  CHECK(rel <= 0.10);
}

TEST_CASE("training: loss halves on a 2-episode smoke run, best-val returned") {
  Dataset two(cached_dataset().begin(), cached_dataset().begin() + 2);
  SurrogateConfig cfg = small_cfg();
  cfg.K_max = 1;  // one-step smoke run, no curriculum confound
  Surrogate m(cfg, 9);
  TrainResult r = train_surrogate(m, two, 42);

  REQUIRE(r.history.size() >= 10);
  double first = r.history.front().train_loss;
  double best_train = first;
  for (const auto& row : r.history) best_train = std::min(best_train, row.train_loss);
  CHECK(best_train <= 0.5 * first);

  // best-val bookkeeping: recorded minimum, first occurrence wins
  double vmin = std::numeric_limits<double>::infinity();
  int argmin = -1;
  for (const auto& row : r.history)
    if (row.val_loss < vmin) {
      vmin = row.val_loss;
      argmin = row.epoch;
    }
  CHECK(r.best_val == vmin);
  CHECK(r.best_epoch == argmin);

  // returned parameters reproduce the recorded best validation loss
  std::vector<int> tr{0}, va{1};
  // (recompute on the fixed validation layout used inside training is not
  // exposed; instead check the model is finite and better than untrained)
  for (const auto& [p, var] : m.ps.params)
    for (double v : var->value.data) CHECK(std::isfinite(v));

  // held-out single-step skill: beats the mean predictor
  Dataset heldout{cached_dataset()[2]};
  NmseCurve curve = evaluate_nmse(surrogate_predictor(m), heldout, 3,
                                  cfg.physics, cfg.K_tf);
  CHECK(curve.state[0] < 1.0);
}

TEST_CASE("early stopping respects patience") {
  Dataset two(cached_dataset().begin(), cached_dataset().begin() + 2);
  SurrogateConfig cfg = small_cfg();
  cfg.epochs_max = 40;
  cfg.patience = 3;
  Surrogate m(cfg, 10);
  TrainResult r = train_surrogate(m, two, 43);
  const int last = r.history.back().epoch;
  CHECK(last - r.best_epoch <= cfg.patience);
}

TEST_CASE("nmse: oracle and mean-predictor stubs, valid prediction time") {
  const Dataset& data = cached_dataset();
  Dataset test{data[2]};
  PhysicsConfig phys = short_physics();

  PredictFn oracle = [](const Episode& ep, int start, int K) {
    std::vector<GridField> out;
    for (int k = 1; k <= K; ++k) out.push_back(ep.states[start + k]);
    return out;
  };
  NmseCurve oc = evaluate_nmse(oracle, test, 5, phys, 2);
  for (double v : oc.state) CHECK(v == doctest::Approx(0.0));
  for (double v : oc.reward) CHECK(v == doctest::Approx(0.0));
  CHECK(valid_prediction_time(oc, 0.25, phys.dtau) ==
        doctest::Approx(5 * phys.dtau));

  // mean of the test set
  GridField mean(phys.N, 0.0);
  long n = 0;
  for (const Episode& ep : test)
    for (const GridField& u : ep.states) {
      for (int i = 0; i < phys.N; ++i) mean[i] += u[i];
      ++n;
    }
  for (double& v : mean) v /= n;
  double grand = 0.0;
  for (double v : mean) grand += v / phys.N;
  GridField flat(phys.N, grand);
  PredictFn mean_stub = [flat](const Episode&, int, int K) {
    return std::vector<GridField>(K, flat);
  };
  NmseCurve mc = evaluate_nmse(mean_stub, test, 5, phys, 2);
  for (double v : mc.state) CHECK(v == doctest::Approx(1.0).epsilon(0.15));

  // imperfect model at eps = 0
  SurrogateConfig cfg = small_cfg();
  Surrogate m(cfg, 11);
  m.stats.std_u = 1.0;
  NmseCurve ic = evaluate_nmse(surrogate_predictor(m), test, 3, phys, cfg.K_tf);
  CHECK(valid_prediction_time(ic, 0.0, phys.dtau) == 0.0);

  // T_vpt monotone in eps
  double prev = 0.0;
  for (double eps : {0.01, 0.1, 0.5, 1.0, 10.0}) {
    double t = valid_prediction_time(ic, eps, phys.dtau);
    CHECK(t >= prev);
    prev = t;
  }
}

TEST_CASE("residual variant beats full-state variant at step 1") {
  Dataset two(cached_dataset().begin(), cached_dataset().begin() + 2);
  Dataset heldout{cached_dataset()[2]};

  SurrogateConfig rc = small_cfg(SurrogateVariant::residual_conv);
  rc.epochs_max = 30;
  rc.K_max = 1;
  SurrogateConfig fc = small_cfg(SurrogateVariant::fullstate_conv);
  fc.epochs_max = 30;
  fc.K_max = 1;
  Surrogate mr(rc, 12), mf(fc, 12);
  train_surrogate(mr, two, 44);
  train_surrogate(mf, two, 44);
  NmseCurve cr = evaluate_nmse(surrogate_predictor(mr), heldout, 1, rc.physics, rc.K_tf);
  NmseCurve cf = evaluate_nmse(surrogate_predictor(mf), heldout, 1, fc.physics, fc.K_tf);
  CHECK(cr.state[0] < cf.state[0]);
}

TEST_CASE("targets are standardized temporal residuals") {
  // one teacher-forced step: sequence loss equals the decoder MSE against
  // ((s' - s)/dtau - mean_t)/std_t by construction; verify numerically
  SurrogateConfig cfg = small_cfg();
  Surrogate m(cfg, 13);
  Dataset two(cached_dataset().begin(), cached_dataset().begin() + 2);
  Dataset train_eps(two.begin(), two.end());
  m.set_stats_from(train_eps);
  CHECK(m.stats.std_u > 0);
  CHECK(m.stats.std_t > 0);

  const Episode& ep = two[0];
  SequenceBatch b;
  b.states.push_back({ep.states[0], ep.states[1]});
  b.actions.push_back({ep.actions[0], ep.actions[0]});
  b.starts.emplace_back(0, 0);
  double loss = sequence_loss(m, b)->value[0];

  // replicate via predict_step and the closed-form rescaling
  auto [h, c] = m.initial_cell(1);
  Tensor u({1, 1, cfg.physics.N});
  u.data = ep.states[0];
  Tensor phi({1, 1, cfg.physics.N});
  phi.data = forcing_field(ep.actions[0], cfg.physics);
  auto out = m.predict_step(constant(u), constant(phi), h, c);
  double acc = 0.0;
  for (int i = 0; i < cfg.physics.N; ++i) {
    const double e = (out.u_next->value[i] - ep.states[1][i]) /
                     (cfg.physics.dtau * m.stats.std_t);
    acc += e * e;
  }
  CHECK(loss == doctest::Approx(acc / cfg.physics.N).epsilon(1e-10));
}

TEST_CASE("checkpoint round trip restores predictions") {
  SurrogateConfig cfg = small_cfg();
  Surrogate m(cfg, 14);
  Dataset two(cached_dataset().begin(), cached_dataset().begin() + 2);
  m.set_stats_from(two);
  save_surrogate(m, "/tmp/ksc_surrogate_ckpt");

  Surrogate m2(cfg, 999);
  load_surrogate(m2, "/tmp/ksc_surrogate_ckpt");
  CHECK(m2.stats.std_u == doctest::Approx(m.stats.std_u));

  const Episode& ep = two[0];
  RolloutSeed seed = seed_from(ep, cfg.K_tf - 1, cfg.K_tf);
  std::vector<Action> acts(ep.actions.begin() + cfg.K_tf,
                           ep.actions.begin() + cfg.K_tf + 2);
  auto p1 = m.rollout(seed, acts, 2);
  auto p2 = m2.rollout(seed, acts, 2);
  for (size_t k = 0; k < p1.size(); ++k)
    for (int i = 0; i < cfg.physics.N; ++i)
      CHECK(p2[k][i] == doctest::Approx(p1[k][i]).epsilon(1e-5));
}
