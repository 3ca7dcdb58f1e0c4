#pragma once

#include <iosfwd>

#include "ksc/mbrl.hpp"

namespace ksc {

// One experiment = one resolved config. The physics section is authoritative:
// on resolve() it is copied into the surrogate config and the SAC dimensions,
// and the surrogate/ensemble/sac sections are wired into the loop config.
struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string out_dir = "out";
  PhysicsConfig physics;
  SurrogateConfig surrogate;
  EnsembleConfig ensemble;
  SacConfig sac;
  LoopConfig loop;

  void resolve();
};

std::string experiment_to_json(const ExperimentConfig& cfg);
ExperimentConfig experiment_from_json(const std::string& text);
ExperimentConfig load_experiment_config(const std::string& path);
void save_experiment_config(const ExperimentConfig& cfg, const std::string& path);

// .ksd episode files: JSON header line (physics, seed, counts), then per
// episode steps_per_episode little-endian float32 records of
// (u: N floats, a: n_act floats, r: 1 float) followed by the terminal state
// as N floats.
void save_dataset(const Dataset& episodes, const PhysicsConfig& physics,
                  std::uint64_t seed, const std::string& path);

struct LoadedDataset {
  Dataset episodes;
  PhysicsConfig physics;
  std::uint64_t seed = 0;
};
LoadedDataset load_dataset(const std::string& path);

// Full episodes under i.i.d. Uniform[-1,1] actions.
Dataset generate_dataset(int n_episodes, const PhysicsConfig& physics,
                         std::uint64_t seed);

struct StudySpec {
  std::vector<double> fractions = {0.1, 0.2, 0.3, 0.4, 0.5,
                                   0.6, 0.7, 0.8, 0.9, 1.0};
  int folds = 5;
  std::vector<SurrogateVariant> variants = {
      SurrogateVariant::residual_conv, SurrogateVariant::fullstate_conv,
      SurrogateVariant::residual_dense, SurrogateVariant::fullstate_dense};
  std::vector<double> widths = {1.5, 2.0, 2.5, 3.0, 3.5, 4.0};
  double width_fraction = 1.0;  // widths are swept at this single fraction
  std::vector<double> vpt_eps = {0.1};
  int K_eval = 15;
  int workers = 1;
  SurrogateConfig base;  // training knobs; physics must be set

  void validate() const;
};

struct StudyCell {
  double fraction = 1.0;
  SurrogateVariant variant = SurrogateVariant::residual_conv;
  double width = 3.0;
  int fold = 0;
  std::vector<double> nmse_state;
  std::vector<double> nmse_reward;
  std::vector<double> vpt;  // one entry per threshold in vpt_eps
};

struct StudyResult {
  StudySpec spec;
  std::vector<StudyCell> cells;
};

// Mean and half-width of the 95% Student-t interval.
struct MeanCi {
  double mean = 0.0;
  double ci_half = 0.0;
  int n = 0;
};
MeanCi t_interval(const std::vector<double>& xs);

// One-sided paired t-test p-value for mean(x - y) < 0.
double paired_t_pvalue_less(const std::vector<double>& x,
                            const std::vector<double>& y);

// Builds a predictor from a training subset; swapping in an oracle factory
// short-circuits model training in tests.
using ModelFactory = std::function<PredictFn(
    const SurrogateConfig& cfg, const Dataset& train, std::uint64_t seed)>;

// K-fold cross-validated data-efficiency study. Folds partition the episodes
// after a seeded shuffle; each cell trains on a fraction of the non-test
// episodes and reports NMSE/VPT on its fold.
StudyResult offline_study(const Dataset& dataset, const StudySpec& spec,
                          std::uint64_t seed, const ModelFactory& factory = {});

void write_study_csv(const StudyResult& result, const std::string& path);
StudyResult read_study_csv(const std::string& path);

// fold-mean NMSE at step `step` for a (variant, width, fraction) slice
std::vector<double> study_fold_values(const StudyResult& r, double fraction,
                                      SurrogateVariant variant, double width,
                                      int step, bool reward = false);
std::vector<double> study_fold_vpt(const StudyResult& r, double fraction,
                                   SurrogateVariant variant, double width,
                                   int eps_index = 0);

void write_reports_csv(const std::vector<IterationReport>& reports,
                       const std::string& path);
std::vector<IterationReport> read_reports_csv(const std::string& path);

struct BaselineComparison {
  double random_return = 0.0;    // mean over the random-policy episodes
  double target_return = 0.0;
  double mbrl_final_return = 0.0;
  double sac_final_return = 0.0;
  double mbrl_best_return = 0.0;
  double sac_best_return = 0.0;
  long mbrl_samples_to_target = -1;  // -1: target never reached
  long sac_samples_to_target = -1;
  double sample_ratio = 0.0;      // sac / mbrl, 0 when either arm missed
  double cost_reduction = 0.0;    // 1 - mbrl_cost/random_cost, cost = -return
};

// Model-based and model-free arms at a matched budget and matched seed,
// anchored by a random-policy baseline. The target return sits `margin`
// of the way from the random baseline to the model-free arm's best return.
BaselineComparison baseline_comparison(const LoopConfig& base, long budget,
                                       std::uint64_t seed,
                                       int random_episodes = 20,
                                       double margin = 0.5);

struct PlotSeries {
  std::string label;
  std::vector<double> x, y;
};

// Self-contained line plot with axes, ticks and a legend.
std::string svg_line_plot(const std::vector<PlotSeries>& series,
                          const std::string& title, const std::string& xlabel,
                          const std::string& ylabel);
// Row-major heatmap with a linear two-color ramp.
std::string svg_heatmap(const std::vector<std::vector<double>>& rows,
                        const std::string& title);

// Gaussian smoothing used only at plot time.
std::vector<double> gaussian_filter(const std::vector<double>& xs, double sigma);

int run_cli(int argc, const char* const* argv);

}  // namespace ksc
