#include "ksc/sac.hpp"

#include <cmath>

namespace ksc {

void SacConfig::validate() const {
  if (gamma < 0.0 || gamma >= 1.0) throw std::invalid_argument("gamma must be in [0,1)");
  if (rho < 0.0 || rho > 1.0) throw std::invalid_argument("rho must be in [0,1]");
  if (alpha <= 0.0) throw std::invalid_argument("alpha must be positive");
  if (state_dim < 1 || action_dim < 1 || hidden < 1 || n_layers < 1)
    throw std::invalid_argument("network dimensions must be positive");
}

void ReplayBuffer::push(Transition t, Provenance prov) {
  data_.push_back({std::move(t), prov});
  while (data_.size() > capacity_) data_.pop_front();
}

void ReplayBuffer::evict_before(int iteration) {
  while (!data_.empty() && data_.front().prov.iteration < iteration)
    data_.pop_front();
}

std::vector<size_t> ReplayBuffer::sample_indices(int n, std::mt19937_64& rng) const {
  if (data_.empty()) throw std::logic_error("sample from empty replay buffer");
  std::uniform_int_distribution<size_t> pick(0, data_.size() - 1);
  std::vector<size_t> idx(n);
  for (size_t& i : idx) i = pick(rng);
  return idx;
}

SacBatch make_batch(const ReplayBuffer& buf, const std::vector<size_t>& idx) {
  const int B = static_cast<int>(idx.size());
  const int S = static_cast<int>(buf.at(idx[0]).t.state.size());
  const int A = static_cast<int>(buf.at(idx[0]).t.action.a.size());
  SacBatch b{Tensor({B, S}), Tensor({B, A}), Tensor({B, 1}), Tensor({B, S}),
             Tensor({B, 1})};
  for (int i = 0; i < B; ++i) {
    const Transition& t = buf.at(idx[i]).t;
    std::copy(t.state.begin(), t.state.end(), b.states.data.begin() + i * S);
    std::copy(t.action.a.begin(), t.action.a.end(), b.actions.data.begin() + i * A);
    std::copy(t.next_state.begin(), t.next_state.end(),
              b.next_states.data.begin() + i * S);
    b.rewards[i] = t.reward;
    b.done[i] = t.done ? 1.0 : 0.0;
  }
  return b;
}

Mlp::Mlp(ParamStore& ps, const std::string& prefix, int in, int hidden,
         int n_layers, int out, std::mt19937_64& rng) {
  int prev = in;
  for (int l = 0; l < n_layers; ++l) {
    layers.emplace_back(ps, prefix + "/h" + std::to_string(l), prev, hidden,
                        Activation::silu, rng);
    prev = hidden;
  }
  layers.emplace_back(ps, prefix + "/out", prev, out, Activation::linear, rng);
}

Var Mlp::forward(const Var& x) const {
  Var z = x;
  for (const Dense& d : layers) z = d.forward(z);
  return z;
}

namespace {

// (B,F) column slice via a temporary channel view
Var slice_cols(const Var& x, int c0, int c1) {
  const int B = x->value.shape[0], F = x->value.shape[1];
  return reshape(slice_channels(reshape(x, {B, F, 1}), c0, c1), {B, c1 - c0});
}

}  // namespace

SacAgent::SacAgent(const SacConfig& cfg_, std::uint64_t seed) : cfg(cfg_) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  actor = Mlp(actor_ps, "actor", cfg.state_dim, cfg.hidden, cfg.n_layers,
              2 * cfg.action_dim, rng);
  q1 = Mlp(q1_ps, "q1", cfg.state_dim + cfg.action_dim, cfg.hidden, cfg.n_layers,
           1, rng);
  q2 = Mlp(q2_ps, "q2", cfg.state_dim + cfg.action_dim, cfg.hidden, cfg.n_layers,
           1, rng);
  q1_target = Mlp(q1_target_ps, "q1t", cfg.state_dim + cfg.action_dim, cfg.hidden,
                  cfg.n_layers, 1, rng);
  q2_target = Mlp(q2_target_ps, "q2t", cfg.state_dim + cfg.action_dim, cfg.hidden,
                  cfg.n_layers, 1, rng);
  q1_target_ps.copy_values_from(q1_ps);
  q2_target_ps.copy_values_from(q2_ps);
  actor_opt = Adam(AdamConfig{.lr = cfg.lr});
  q1_opt = Adam(AdamConfig{.lr = cfg.lr});
  q2_opt = Adam(AdamConfig{.lr = cfg.lr});
}

PolicySample SacAgent::sample_policy(const Var& states, std::mt19937_64& rng,
                                     bool deterministic) const {
  const int B = states->value.shape[0], A = cfg.action_dim;
  Var scaled = scale(states, 1.0 / cfg.state_scale);
  Var out = actor.forward(scaled);
  Var mu = slice_cols(out, 0, A);
  Var log_std = clamp_op(slice_cols(out, A, 2 * A), cfg.log_std_min, cfg.log_std_max);
  Var std_v = exp_op(log_std);

  Tensor eps({B, A});
  if (!deterministic) {
    std::normal_distribution<double> normal(0.0, 1.0);
    for (double& e : eps.data) e = normal(rng);
  }
  Var eps_c = constant(eps);
  Var z = add(mu, mul(std_v, eps_c));
  Var a = tanh_op(z);

  // log N(z; mu, std) with z = mu + std*eps reduces to -eps^2/2 - log_std - c
  const double c = 0.5 * std::log(2.0 * M_PI);
  Var gauss = scale(add_scalar(add(scale(square(eps_c), 0.5), log_std), c), -1.0);
  // log(1 - tanh(z)^2) = 2*(log 2 - z + log sigmoid(2z))
  Var corr = scale(add_scalar(sub(log_op(sigmoid_op(scale(z, 2.0))), z),
                              std::log(2.0)),
                   2.0);
  Var log_prob = sum_rows(sub(gauss, corr));

  PolicySample s;
  s.action = a;
  s.log_prob = log_prob;
  s.mean = mu->value;
  s.std = std_v->value;
  s.z = z->value;
  return s;
}

Action SacAgent::act(const GridField& state, bool deterministic,
                     std::mt19937_64& rng) const {
  Tensor st({1, cfg.state_dim});
  st.data = state;
  PolicySample s = sample_policy(constant(st), rng, deterministic);
  Action a;
  a.a.assign(s.action->value.data.begin(), s.action->value.data.end());
  for (double v : a.a)
    if (!std::isfinite(v)) throw std::runtime_error("act: non-finite policy output");
  return a;
}

Var SacAgent::critic_value(const Mlp& q, const Var& states, const Var& actions) const {
  Var scaled = scale(states, 1.0 / cfg.state_scale);
  return q.forward(concat_features(scaled, actions));
}

std::pair<double, double> SacAgent::update_critics(const SacBatch& batch,
                                                   std::mt19937_64& rng) {
  const int B = batch.size();
  Var next_states = constant(batch.next_states);
  PolicySample next = sample_policy(next_states, rng);
  Var q1t = critic_value(q1_target, next_states, next.action);
  Var q2t = critic_value(q2_target, next_states, next.action);

  Tensor y({B, 1});
  for (int i = 0; i < B; ++i) {
    const double qmin = std::min(q1t->value[i], q2t->value[i]);
    const double soft = qmin - cfg.alpha * next.log_prob->value[i];
    y[i] = batch.rewards[i] + cfg.gamma * (1.0 - batch.done[i]) * soft;
    if (!std::isfinite(y[i]))
      throw std::runtime_error("update_critics: non-finite target");
  }

  Var states = constant(batch.states);
  Var actions = constant(batch.actions);
  Var target = constant(y);
  double losses[2];
  Mlp* nets[2] = {&q1, &q2};
  ParamStore* stores[2] = {&q1_ps, &q2_ps};
  Adam* opts[2] = {&q1_opt, &q2_opt};
  for (int k = 0; k < 2; ++k) {
    Var loss = mse(critic_value(*nets[k], states, actions), target);
    losses[k] = loss->value[0];
    if (!std::isfinite(losses[k]))
      throw std::runtime_error("update_critics: non-finite loss");
    backward(loss);
    opts[k]->step(*stores[k]);
  }
  // the target computation never backpropagates; drop any stray actor grads
  actor_ps.zero_grads();
  return {losses[0], losses[1]};
}

double SacAgent::update_actor(const SacBatch& batch, std::mt19937_64& rng) {
  Var states = constant(batch.states);
  PolicySample s = sample_policy(states, rng);
  Var qmin = min_op(critic_value(q1, states, s.action),
                    critic_value(q2, states, s.action));
  Var loss = mean_all(sub(scale(s.log_prob, cfg.alpha), qmin));
  if (!std::isfinite(loss->value[0]))
    throw std::runtime_error("update_actor: non-finite loss");
  backward(loss);
  actor_opt.step(actor_ps);
  // critics served only as a fixed landscape here
  q1_ps.zero_grads();
  q2_ps.zero_grads();
  return loss->value[0];
}

void SacAgent::soft_update_targets() {
  auto blend = [&](ParamStore& target, const ParamStore& src) {
    for (size_t i = 0; i < target.params.size(); ++i) {
      auto& tv = target.params[i].second->value.data;
      const auto& sv = src.params[i].second->value.data;
      for (size_t j = 0; j < tv.size(); ++j)
        tv[j] = cfg.rho * tv[j] + (1.0 - cfg.rho) * sv[j];
    }
  };
  blend(q1_target_ps, q1_ps);
  blend(q2_target_ps, q2_ps);
}

void SacAgent::update(const SacBatch& batch, std::mt19937_64& rng) {
  for (int i = 0; i < cfg.critic_updates_per_actor; ++i)
    update_critics(batch, rng);
  update_actor(batch, rng);
  soft_update_targets();
}

void SacAgent::save(const std::string& dir) const {
  save_checkpoint(actor_ps, dir + "/actor", "{}");
  save_checkpoint(q1_ps, dir + "/q1", "{}");
  save_checkpoint(q2_ps, dir + "/q2", "{}");
  save_checkpoint(q1_target_ps, dir + "/q1_target", "{}");
  save_checkpoint(q2_target_ps, dir + "/q2_target", "{}");
}

void SacAgent::load(const std::string& dir) {
  load_checkpoint(actor_ps, dir + "/actor");
  load_checkpoint(q1_ps, dir + "/q1");
  load_checkpoint(q2_ps, dir + "/q2");
  load_checkpoint(q1_target_ps, dir + "/q1_target");
  load_checkpoint(q2_target_ps, dir + "/q2_target");
}

}  // namespace ksc
