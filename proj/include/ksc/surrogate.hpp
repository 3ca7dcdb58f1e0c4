#pragma once

#include <functional>
#include <optional>

#include "ksc/data.hpp"
#include "ksc/nn.hpp"

namespace ksc {

enum class SurrogateVariant {
  residual_conv,
  fullstate_conv,
  residual_dense,
  fullstate_dense,
};

SurrogateVariant variant_from_string(const std::string& s);
std::string to_string(SurrogateVariant v);

struct SurrogateConfig {
  double width_beta = 3.0;
  int K_tf = 5;
  int K_max = 30;
  SurrogateVariant variant = SurrogateVariant::residual_conv;
  int epochs_max = 250;
  int patience = 25;
  int batch_size = 16;
  double lr = 1e-3;
  double grad_clip = 0.5;
  double val_fraction = 0.2;
  double curriculum_fraction = 0.4;
  // optimizer-step budget for online refits; 0 means unbounded
  int min_updates = 0;
  int max_updates = 0;
  // keep the best-validation parameters (off: keep the last)
  bool restore_best = true;
  PhysicsConfig physics;

  void validate() const;
  // channel count of a layer whose width at beta = 3 is `base`
  int scaled(int base) const;
};

// Global per-field statistics: one mean/std for the state, the forcing field
// and the temporal-residual target each.
struct NormStats {
  double mean_u = 0.0, std_u = 1.0;
  double mean_phi = 0.0, std_phi = 1.0;
  double mean_t = 0.0, std_t = 1.0;
};

// Thrown when a model prediction goes non-finite; the planning loop catches
// it and truncates the rollout.
struct ModelDivergence : std::runtime_error {
  ModelDivergence() : std::runtime_error("surrogate prediction diverged") {}
};

struct SequenceBatch {
  // (B, K_seq+1, N) and (B, K_seq+1, n_act); the final action is padding
  std::vector<std::vector<GridField>> states;
  std::vector<std::vector<Action>> actions;
  std::vector<std::pair<int, int>> starts;  // (episode, offset)

  int size() const { return static_cast<int>(states.size()); }
  int seq_len() const { return static_cast<int>(states.front().size()) - 1; }
};

// warm-start history for free-running prediction; shorter-than-K_tf
// histories are left-padded by repeating the first pair
struct RolloutSeed {
  std::vector<GridField> states;
  std::vector<Action> actions;
};

class Surrogate {
 public:
  Surrogate(const SurrogateConfig& cfg, std::uint64_t init_seed);

  SurrogateConfig cfg;
  ParamStore ps;
  NormStats stats;

  // conv stack
  std::vector<ResidualBlock> enc_blocks, act_blocks;
  Deconv1d dec_up1, dec_up2;
  ResidualBlock dec_res;
  Conv1d dec_final;
  // dense stack
  Dense enc_d1, enc_d2, act_d1, act_d2, dec_d1, dec_d2;
  ConvLSTM lstm;
  int cs = 0, ca = 0, ch = 0;  // latent channel counts

  bool is_dense() const {
    return cfg.variant == SurrogateVariant::residual_dense ||
           cfg.variant == SurrogateVariant::fullstate_dense;
  }
  bool is_residual() const {
    return cfg.variant == SurrogateVariant::residual_conv ||
           cfg.variant == SurrogateVariant::residual_dense;
  }

  // latent spatial width (grid width / 4)
  int latent_width() const { return cfg.physics.N / 4; }
  long param_count(bool include_aux = false) const;

  // (B,1,N) normalized state -> (B,Cs,N/4); requires stats to be set
  Var encode_state(const Var& u_norm) const;
  // (B,1,N) normalized forcing -> (B,Ca,N/4)
  Var encode_action(const Var& phi_norm) const;
  Var decode(const Var& o) const;

  // zero-initialized cell for batch size B
  std::pair<Var, Var> initial_cell(int B) const;

  // One model step in raw state units. u is (B,1,N) raw, phi (B,1,N) raw.
  // Returns the predicted next state and the advanced cell.
  struct StepOut {
    Var u_next;
    Var h, c;
  };
  StepOut predict_step(const Var& u_raw, const Var& phi_raw, const Var& h,
                       const Var& c) const;

  // K_tf teacher-forced warmup steps then K free-running steps; returns the
  // K+1 predictions starting with the final warmup prediction. Throws
  // ModelDivergence on non-finite output.
  std::vector<GridField> rollout(const RolloutSeed& seed,
                                 const std::vector<Action>& actions, int K) const;

  void set_stats_from(const Dataset& train_episodes);
};

struct TrainHistoryRow {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  int K_seq = 0;
};

struct TrainResult {
  std::vector<TrainHistoryRow> history;
  int best_epoch = 0;
  double best_val = 0.0;
};

// sequence length trained at `epoch` under the linear curriculum
int curriculum_steps(const SurrogateConfig& cfg, int epoch);

// Splits episodes 80/20, fits normalization statistics on the training part
// and minimizes sequence MSE with teacher forcing and the length curriculum.
// On return the surrogate holds the best-validation parameters.
TrainResult train_surrogate(Surrogate& model, const Dataset& dataset,
                            std::uint64_t seed,
                            const std::vector<int>* train_idx = nullptr,
                            const std::vector<int>* val_idx = nullptr);

// differentiable sequence loss used by both training and validation
Var sequence_loss(const Surrogate& model, const SequenceBatch& batch);

// predicted states for steps start+1 .. start+K of an episode
using PredictFn = std::function<std::vector<GridField>(
    const Episode&, int start, int K)>;

PredictFn surrogate_predictor(const Surrogate& model);

struct NmseCurve {
  std::vector<double> state;   // per-step normalized MSE
  std::vector<double> reward;  // same for rewards recomputed from states
};

// Per-step MSE over test subsequences divided by the per-step variance of
// the ground truth across the test set.
NmseCurve evaluate_nmse(const PredictFn& predict, const Dataset& test,
                        int K, const PhysicsConfig& physics, int K_tf);

// Largest t = k*dtau with state and reward NMSE below eps for every step <= k.
double valid_prediction_time(const NmseCurve& curve, double eps, double dtau);

void save_surrogate(const Surrogate& model, const std::string& dir);
void load_surrogate(Surrogate& model, const std::string& dir);

}  // namespace ksc
