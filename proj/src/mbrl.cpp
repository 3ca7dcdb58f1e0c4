#include "ksc/mbrl.hpp"

#include <chrono>
#include <cmath>

namespace ksc {

Ablation ablation_from_string(const std::string& s) {
  if (s == "none") return Ablation::none;
  if (s == "model_free") return Ablation::model_free;
  if (s == "offline_model") return Ablation::offline_model;
  if (s == "exploitation") return Ablation::exploitation;
  if (s == "fullstate_surrogate") return Ablation::fullstate_surrogate;
  if (s == "dense_surrogate") return Ablation::dense_surrogate;
  throw std::invalid_argument("unknown ablation: " + s);
}

std::string to_string(Ablation a) {
  switch (a) {
    case Ablation::none: return "none";
    case Ablation::model_free: return "model_free";
    case Ablation::offline_model: return "offline_model";
    case Ablation::exploitation: return "exploitation";
    case Ablation::fullstate_surrogate: return "fullstate_surrogate";
    case Ablation::dense_surrogate: return "dense_surrogate";
  }
  return "?";
}

void LoopConfig::validate() const {
  if (k_start > k_end) throw std::invalid_argument("need k_start <= k_end");
  if (total_budget < 0 || N_model < 0 || L_updates < 0)
    throw std::invalid_argument("budgets must be nonnegative");
  if (P_min > P_max) throw std::invalid_argument("need P_min <= P_max");
  if (retention_R < 1) throw std::invalid_argument("retention_R must be >= 1");
  if (model_mix < 0.0 || model_mix > 1.0)
    throw std::invalid_argument("model_mix must be in [0,1]");
  ensemble.validate();
}

int rollout_length(long env_samples, const LoopConfig& cfg) {
  if (cfg.ramp_samples <= 0 || env_samples >= cfg.ramp_samples) return cfg.k_end;
  const double f = static_cast<double>(env_samples) / cfg.ramp_samples;
  return cfg.k_start +
         static_cast<int>(std::floor((cfg.k_end - cfg.k_start) * f));
}

namespace {

std::uint64_t mix(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

int EnsembleModel::begin_rollout(const RolloutSeed& seed, std::mt19937_64& rng) {
  const int idx = select_rollout_model(ens_, rng);
  member_ = ens_.members[idx].get();
  const SurrogateConfig& cfg = member_->cfg;
  const int N = cfg.physics.N;

  std::vector<const GridField*> hs;
  std::vector<const Action*> ha;
  const int pad = std::max(0, cfg.K_tf - static_cast<int>(seed.states.size()));
  for (int i = 0; i < cfg.K_tf; ++i) {
    const int j = std::max(0, i - pad);
    hs.push_back(&seed.states[j]);
    ha.push_back(&seed.actions[j]);
  }

  auto cell = member_->initial_cell(1);
  h_ = cell.first;
  c_ = cell.second;
  GridField pred;
  for (int i = 0; i < cfg.K_tf; ++i) {
    Tensor u({1, 1, N}), phi({1, 1, N});
    u.data = *hs[i];
    phi.data = forcing_field(*ha[i], cfg.physics);
    auto out = member_->predict_step(constant(u), constant(phi), h_, c_);
    h_ = constant(out.h->value);
    c_ = constant(out.c->value);
    pred = out.u_next->value.data;
  }
  for (double v : pred)
    if (!std::isfinite(v)) throw ModelDivergence();
  cur_ = std::move(pred);
  return idx;
}

void EnsembleModel::step(const Action& a) {
  const SurrogateConfig& cfg = member_->cfg;
  Tensor u({1, 1, cfg.physics.N}), phi({1, 1, cfg.physics.N});
  u.data = cur_;
  phi.data = forcing_field(a, cfg.physics);
  auto out = member_->predict_step(constant(u), constant(phi), h_, c_);
  h_ = constant(out.h->value);
  c_ = constant(out.c->value);
  for (double v : out.u_next->value.data)
    if (!std::isfinite(v)) throw ModelDivergence();
  cur_ = out.u_next->value.data;
}

RolloutSeed sample_rollout_seed(const Dataset& episodes, int K_tf,
                                std::mt19937_64& rng) {
  if (episodes.empty())
    throw std::invalid_argument("sample_rollout_seed: no episodes");
  std::uniform_int_distribution<int> pick_ep(0, static_cast<int>(episodes.size()) - 1);
  const Episode& ep = episodes[pick_ep(rng)];
  std::uniform_int_distribution<int> pick_t(0, ep.steps() - 1);
  const int t = pick_t(rng);
  RolloutSeed seed;
  for (int i = std::max(0, t - K_tf + 1); i <= t; ++i) {
    seed.states.push_back(ep.states[i]);
    seed.actions.push_back(ep.actions[i]);
  }
  return seed;
}

bool model_rollout(ModelInterface& model, const SacAgent& agent,
                   const Dataset& episodes, int K_rll, int K_tf,
                   const PhysicsConfig& physics, int iteration,
                   std::mt19937_64& rng, std::vector<BufferEntry>& out) {
  RolloutSeed seed = sample_rollout_seed(episodes, K_tf, rng);
  int member;
  try {
    member = model.begin_rollout(seed, rng);
  } catch (const ModelDivergence&) {
    return false;
  }
  for (int k = 0; k < K_rll; ++k) {
    const GridField s = model.state();
    const Action a = agent.act(s, false, rng);
    const GridField phi = forcing_field(a, physics);
    const double r = step_reward(s, phi, physics);
    try {
      model.step(a);
    } catch (const ModelDivergence&) {
      return false;
    }
    Transition t;
    t.state = s;
    t.action = a;
    t.reward = r;
    t.next_state = model.state();
    t.done = false;
    out.push_back({std::move(t), {true, member, iteration}});
  }
  return true;
}

double evaluate_policy_episode(const SacAgent& agent, const PhysicsConfig& physics,
                               std::uint64_t reset_seed) {
  EnvState env = reset(reset_seed, physics);
  std::mt19937_64 rng(reset_seed);
  double ret = 0.0;
  for (int t = 0; t < physics.steps_per_episode(); ++t)
    ret += env_step(env, agent.act(env.u, true, rng), physics).reward;
  return ret;
}

namespace {

SacBatch mixed_batch(const ReplayBuffer& d_env, const ReplayBuffer& d_model,
                     int n_env, int n_model, std::mt19937_64& rng) {
  std::vector<const BufferEntry*> entries;
  if (n_env > 0)
    for (size_t i : d_env.sample_indices(n_env, rng)) entries.push_back(&d_env.at(i));
  if (n_model > 0)
    for (size_t i : d_model.sample_indices(n_model, rng))
      entries.push_back(&d_model.at(i));
  const int B = static_cast<int>(entries.size());
  const int S = static_cast<int>(entries[0]->t.state.size());
  const int A = static_cast<int>(entries[0]->t.action.a.size());
  SacBatch b{Tensor({B, S}), Tensor({B, A}), Tensor({B, 1}), Tensor({B, S}),
             Tensor({B, 1})};
  for (int i = 0; i < B; ++i) {
    const Transition& t = entries[i]->t;
    std::copy(t.state.begin(), t.state.end(), b.states.data.begin() + i * S);
    std::copy(t.action.a.begin(), t.action.a.end(), b.actions.data.begin() + i * A);
    std::copy(t.next_state.begin(), t.next_state.end(),
              b.next_states.data.begin() + i * S);
    b.rewards[i] = t.reward;
    b.done[i] = t.done ? 1.0 : 0.0;
  }
  return b;
}

Episode collect_episode(const PhysicsConfig& phys, std::uint64_t reset_seed,
                        const SacAgent* agent, std::mt19937_64& rng,
                        ReplayBuffer* sink, int iteration) {
  EnvState env = reset(reset_seed, phys);
  std::uniform_real_distribution<double> uni(-1.0, 1.0);
  Episode ep;
  ep.states.push_back(env.u);
  for (int t = 0; t < phys.steps_per_episode(); ++t) {
    Action a;
    if (agent) {
      a = agent->act(env.u, false, rng);
    } else {
      for (int i = 0; i < phys.n_act; ++i) a.a.push_back(uni(rng));
    }
    Transition tr = env_step(env, a, phys);
    if (sink) sink->push(tr, {false, -1, iteration});
    ep.actions.push_back(a);
    ep.rewards.push_back(tr.reward);
    ep.states.push_back(tr.next_state);
  }
  return ep;
}

}  // namespace

RunArtifacts run_loop(const LoopConfig& cfg, std::uint64_t seed,
                      const ReportSink& sink) {
  cfg.validate();
  const PhysicsConfig phys = cfg.ensemble.surrogate.physics;

  EnsembleConfig ecfg = cfg.ensemble;
  ecfg.surrogate.min_updates = cfg.P_min;
  ecfg.surrogate.max_updates = cfg.P_max;
  switch (cfg.ablation) {
    case Ablation::exploitation:
      ecfg.L_ens = 1;
      ecfg.n_elite = 1;
      ecfg.surrogate.min_updates = cfg.exploitation_grad_steps;
      ecfg.surrogate.max_updates = cfg.exploitation_grad_steps;
      ecfg.surrogate.restore_best = false;
      break;
    case Ablation::fullstate_surrogate:
      ecfg.surrogate.variant = SurrogateVariant::fullstate_conv;
      break;
    case Ablation::dense_surrogate:
      ecfg.surrogate.variant = SurrogateVariant::residual_dense;
      break;
    default:
      break;
  }

  SacConfig sac_cfg = cfg.sac;
  sac_cfg.state_dim = phys.N;
  sac_cfg.action_dim = phys.n_act;

  RunArtifacts art;
  art.agent = std::make_unique<SacAgent>(sac_cfg, mix(seed, 1));
  ReplayBuffer d_env(cfg.env_capacity), d_model(cfg.model_capacity);
  std::mt19937_64 rng(mix(seed, 2));

  const bool uses_model = cfg.ablation != Ablation::model_free;
  const bool frozen_model = cfg.ablation == Ablation::offline_model;

  if (uses_model && frozen_model && cfg.total_budget > 0) {
    // random-exploration pretraining corpus; the model never refits after
    Dataset pretrain;
    std::mt19937_64 prng(mix(seed, 4));
    for (int i = 0; i < cfg.offline_pretrain_episodes; ++i)
      pretrain.push_back(
          collect_episode(phys, mix(seed, 5000 + i), nullptr, prng, nullptr, -1));
    EnsembleConfig pcfg = ecfg;
    pcfg.surrogate.min_updates = 0;
    pcfg.surrogate.max_updates = 0;
    art.ensemble = std::make_unique<EnsembleState>(
        fit_ensemble(pretrain, pcfg, mix(seed, 3)));
  }

  long env_samples = 0;
  int iter = 0;
  int forced_K = -1;

  while (env_samples < cfg.total_budget) {
    const auto t0 = std::chrono::steady_clock::now();
    IterationReport rep;
    rep.iteration = iter;
    // the exploitation ablation forgoes rollout scheduling entirely
    const bool fixed_rollout = cfg.ablation == Ablation::exploitation;
    rep.K_rll = fixed_rollout ? cfg.k_end
                : forced_K > 0 ? forced_K
                               : rollout_length(env_samples, cfg);
    forced_K = -1;

    const bool random_policy = iter < cfg.random_warmup_episodes;
    Episode ep = collect_episode(phys, mix(seed, 100 + iter),
                                 random_policy ? nullptr : art.agent.get(), rng,
                                 &d_env, iter);
    const int samples_this_iter = ep.steps();
    env_samples += samples_this_iter;
    art.env_episodes.push_back(std::move(ep));

    if (uses_model && !frozen_model) {
      if (!art.ensemble)
        art.ensemble = std::make_unique<EnsembleState>(
            fit_ensemble(art.env_episodes, ecfg, mix(seed, 3)));
      else
        refit_ensemble(*art.ensemble, art.env_episodes, mix(seed, 200 + iter));
    }
    if (art.ensemble) {
      rep.model_val_losses = art.ensemble->val_losses;
      rep.elites = art.ensemble->elites;
    }

    if (art.ensemble && rep.K_rll > 0 && cfg.N_model > 0) {
      EnsembleModel model(*art.ensemble);
      const long target = static_cast<long>(cfg.N_model) * samples_this_iter;
      std::vector<BufferEntry> collected;
      const long rollout_guard = 4 * target / std::max(1, rep.K_rll) + 100;
      while (static_cast<long>(collected.size()) < target &&
             rep.rollouts_total < rollout_guard) {
        ++rep.rollouts_total;
        if (!model_rollout(model, *art.agent, art.env_episodes, rep.K_rll,
                           ecfg.surrogate.K_tf, phys, iter, rng, collected))
          ++rep.rollouts_aborted;
      }
      for (BufferEntry& e : collected) d_model.push(std::move(e.t), e.prov);
      d_model.evict_before(iter - cfg.retention_R + 1);
      rep.divergence_flagged =
          rep.rollouts_total > 0 && 2 * rep.rollouts_aborted > rep.rollouts_total;
      if (rep.divergence_flagged && !fixed_rollout)
        forced_K = std::max(1, rep.K_rll / 2);
    }

    const long n_updates = static_cast<long>(cfg.L_updates) * samples_this_iter;
    for (long u = 0; u < n_updates; ++u) {
      int n_model = d_model.size() > 0
                        ? static_cast<int>(std::lround(sac_cfg.batch_size * cfg.model_mix))
                        : 0;
      const int n_env = sac_cfg.batch_size - n_model;
      SacBatch batch = mixed_batch(d_env, d_model, n_env, n_model, rng);
      art.agent->update_critics(batch, rng);
      if ((u + 1) % sac_cfg.critic_updates_per_actor == 0) {
        art.agent->update_actor(batch, rng);
        art.agent->soft_update_targets();
      }
    }

    double sum = 0.0, sq = 0.0;
    for (int e = 0; e < cfg.eval_episodes; ++e) {
      const double r = evaluate_policy_episode(
          *art.agent, phys, mix(seed, 900000 + 100ULL * iter + e));
      sum += r;
      sq += r * r;
    }
    if (cfg.eval_episodes > 0) {
      rep.eval_mean = sum / cfg.eval_episodes;
      rep.eval_std = std::sqrt(
          std::max(sq / cfg.eval_episodes - rep.eval_mean * rep.eval_mean, 0.0));
    }

    rep.env_samples = env_samples;
    rep.wall_clock_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (sink) sink(rep);
    art.reports.push_back(std::move(rep));
    ++iter;
  }
  return art;
}

}  // namespace ksc
