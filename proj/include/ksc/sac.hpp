#pragma once

#include <deque>

#include "ksc/data.hpp"
#include "ksc/nn.hpp"

namespace ksc {

struct SacConfig {
  int state_dim = 64;
  int action_dim = 4;
  double gamma = 0.99;
  double alpha = 0.1;   // fixed temperature, no automatic tuning
  double rho = 0.995;   // polyak factor for target critics
  double lr = 3e-4;
  int critic_updates_per_actor = 2;
  int hidden = 256;
  int n_layers = 3;
  int batch_size = 256;
  double state_scale = 1.0;  // critic/actor inputs divided by this
  double log_std_min = -10.0;
  double log_std_max = 2.0;

  void validate() const;
};

struct Provenance {
  bool from_model = false;
  int member = -1;     // elite index that generated a model transition
  int iteration = 0;   // planning-loop iteration of origin
};

struct BufferEntry {
  Transition t;
  Provenance prov;
};

// FIFO transition store with uniform sampling. Capacity eviction drops the
// oldest entries; evict_before drops whole older iterations.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(size_t capacity) : capacity_(capacity) {}

  void push(Transition t, Provenance prov = {});
  void evict_before(int iteration);
  size_t size() const { return data_.size(); }
  const BufferEntry& at(size_t i) const { return data_[i]; }
  std::vector<size_t> sample_indices(int n, std::mt19937_64& rng) const;

 private:
  size_t capacity_;
  std::deque<BufferEntry> data_;
};

struct SacBatch {
  Tensor states;       // (B, S)
  Tensor actions;      // (B, A)
  Tensor rewards;      // (B, 1)
  Tensor next_states;  // (B, S)
  Tensor done;         // (B, 1)

  int size() const { return states.shape[0]; }
};

SacBatch make_batch(const ReplayBuffer& buf, const std::vector<size_t>& idx);

// simple MLP with SiLU hidden activations and a linear head
struct Mlp {
  std::vector<Dense> layers;

  Mlp() = default;
  Mlp(ParamStore& ps, const std::string& prefix, int in, int hidden, int layers,
      int out, std::mt19937_64& rng);
  Var forward(const Var& x) const;
};

struct PolicySample {
  Var action;   // tanh-squashed, (B, A)
  Var log_prob; // (B, 1)
  Tensor mean, std, z;  // diagnostics
};

class SacAgent {
 public:
  SacAgent(const SacConfig& cfg, std::uint64_t seed);

  SacConfig cfg;
  ParamStore actor_ps, q1_ps, q2_ps, q1_target_ps, q2_target_ps;
  Mlp actor, q1, q2, q1_target, q2_target;
  Adam actor_opt, q1_opt, q2_opt;

  Action act(const GridField& state, bool deterministic, std::mt19937_64& rng) const;

  // reparameterized sample with the tanh-corrected log density
  PolicySample sample_policy(const Var& states, std::mt19937_64& rng,
                             bool deterministic = false) const;

  Var critic_value(const Mlp& q, const Var& states, const Var& actions) const;

  // one gradient step on each critic against the soft Bellman target
  std::pair<double, double> update_critics(const SacBatch& batch,
                                           std::mt19937_64& rng);
  double update_actor(const SacBatch& batch, std::mt19937_64& rng);
  void soft_update_targets();

  // critic_updates_per_actor critic steps, one actor step, one target update
  void update(const SacBatch& batch, std::mt19937_64& rng);

  void save(const std::string& dir) const;
  void load(const std::string& dir);
};

}  // namespace ksc
