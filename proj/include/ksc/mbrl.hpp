#pragma once

#include "ksc/ensemble.hpp"
#include "ksc/sac.hpp"

namespace ksc {

enum class Ablation {
  none,
  model_free,
  offline_model,
  exploitation,
  fullstate_surrogate,
  dense_surrogate,
};

Ablation ablation_from_string(const std::string& s);
std::string to_string(Ablation a);

struct LoopConfig {
  int N_model = 400;     // model transitions generated per env sample
  int L_updates = 20;    // SAC updates per env sample
  int k_start = 1;
  int k_end = 13;
  long ramp_samples = 20000;
  int P_min = 20;
  int P_max = 200;
  int retention_R = 3;   // D_model keeps rollouts of the last R iterations
  long total_budget = 50000;
  double model_mix = 0.95;  // model fraction in SAC batches
  int eval_episodes = 3;
  int exploitation_grad_steps = 100;
  int random_warmup_episodes = 1;
  int offline_pretrain_episodes = 125;  // ~50k snapshots at 400 steps/episode
  size_t env_capacity = 1000000;
  size_t model_capacity = 2000000;
  Ablation ablation = Ablation::none;
  EnsembleConfig ensemble;
  SacConfig sac;

  void validate() const;
};

struct IterationReport {
  int iteration = 0;
  long env_samples = 0;
  int K_rll = 0;
  std::vector<double> model_val_losses;
  std::vector<int> elites;
  double eval_mean = 0.0;
  double eval_std = 0.0;
  double wall_clock_s = 0.0;
  bool divergence_flagged = false;
  int rollouts_aborted = 0;
  int rollouts_total = 0;
};

// scheduled model-rollout length after `env_samples` collected samples
int rollout_length(long env_samples, const LoopConfig& cfg);

// Stateful single-rollout predictor; lets tests swap an oracle for the
// learned ensemble.
class ModelInterface {
 public:
  virtual ~ModelInterface() = default;
  // warm-starts from the seed; returns the member index serving this rollout
  virtual int begin_rollout(const RolloutSeed& seed, std::mt19937_64& rng) = 0;
  virtual const GridField& state() const = 0;
  virtual void step(const Action& a) = 0;  // throws ModelDivergence
};

class EnsembleModel : public ModelInterface {
 public:
  explicit EnsembleModel(const EnsembleState& state) : ens_(state) {}
  int begin_rollout(const RolloutSeed& seed, std::mt19937_64& rng) override;
  const GridField& state() const override { return cur_; }
  void step(const Action& a) override;

 private:
  const EnsembleState& ens_;
  const Surrogate* member_ = nullptr;
  Var h_, c_;
  GridField cur_;
};

// draws a contiguous in-episode slice ending at a uniform position
RolloutSeed sample_rollout_seed(const Dataset& episodes, int K_tf,
                                std::mt19937_64& rng);

// One branched rollout: K_rll policy steps in the model, rewards relabeled
// from predicted states and actual forcing. Returns false when aborted by
// divergence; transitions produced so far are kept.
bool model_rollout(ModelInterface& model, const SacAgent& agent,
                   const Dataset& episodes, int K_rll, int K_tf,
                   const PhysicsConfig& physics, int iteration,
                   std::mt19937_64& rng, std::vector<BufferEntry>& out);

struct RunArtifacts {
  std::vector<IterationReport> reports;
  std::unique_ptr<SacAgent> agent;
  std::unique_ptr<EnsembleState> ensemble;
  Dataset env_episodes;
};

using ReportSink = std::function<void(const IterationReport&)>;

RunArtifacts run_loop(const LoopConfig& cfg, std::uint64_t seed,
                      const ReportSink& sink = {});

// deterministic-policy return over one env episode
double evaluate_policy_episode(const SacAgent& agent, const PhysicsConfig& physics,
                               std::uint64_t reset_seed);

}  // namespace ksc
