#pragma once

#include <memory>

#include "ksc/surrogate.hpp"

namespace ksc {

struct EnsembleConfig {
  int L_ens = 5;
  int n_elite = 3;
  // each member bootstrap-resamples its training episodes and draws its own
  // validation split; off, every member sees the identical split and seed
  bool bootstrap = true;
  SurrogateConfig surrogate;

  void validate() const;
};

struct EnsembleState {
  EnsembleConfig cfg;
  std::vector<std::unique_ptr<Surrogate>> members;
  std::vector<std::vector<int>> train_sets;  // multisets, bootstrap draws
  std::vector<std::vector<int>> val_sets;
  std::vector<double> val_losses;
  std::vector<int> elites;  // indices of the n_elite smallest val losses

  int size() const { return static_cast<int>(members.size()); }
};

// indices of the n smallest losses, ties broken by index
std::vector<int> elite_indices(const std::vector<double>& losses, int n);

EnsembleState fit_ensemble(const Dataset& dataset, const EnsembleConfig& cfg,
                           std::uint64_t seed);

// Continues training every member on the grown dataset under the configured
// update budget, then recomputes elites. Splits are redrawn from `seed`.
void refit_ensemble(EnsembleState& state, const Dataset& dataset,
                    std::uint64_t seed);

// Uniform draw among elites; the chosen member serves a whole rollout.
int select_rollout_model(const EnsembleState& state, std::mt19937_64& rng);

// Mean-over-grid standard deviation across member predictions, per step.
std::vector<double> disagreement(const EnsembleState& state,
                                 const RolloutSeed& seed,
                                 const std::vector<Action>& actions, int K);

void save_ensemble(const EnsembleState& state, const std::string& dir);
EnsembleState load_ensemble(const std::string& dir, const EnsembleConfig& cfg);

}  // namespace ksc
