#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

namespace ksc {

// Solution or forcing values sampled on the periodic grid x_j = j*L/N.
using GridField = std::vector<double>;

struct PhysicsConfig {
  double L = 22.0;
  int N = 64;
  double dt_sim = 0.001;
  double dtau = 0.25;
  double T_max = 100.0;
  double sigma = 0.4;
  int n_act = 4;
  double transient_T = 200.0;
  double init_amp = 0.4;

  int substeps_per_control() const;
  int steps_per_episode() const;
  double dx() const { return L / N; }
  void validate() const;  // throws std::invalid_argument
};

struct Action {
  std::vector<double> a;  // each component in [-1, 1]
};

struct Transition {
  GridField state;
  Action action;
  double reward = 0.0;
  GridField next_state;
  bool done = false;
};

struct EnvState {
  GridField u;
  double t = 0.0;
  int step_index = 0;
  std::mt19937_64 rng;
};

// Thrown when the integrator produces non-finite values.
struct BlowupError : std::runtime_error {
  double time;
  explicit BlowupError(double t);
};

// Gaussian actuation field of the action, minimum-image periodic distances.
// Normalizer is 1/sqrt(2*pi*sigma), kept in one place on purpose.
GridField forcing_field(const Action& action, const PhysicsConfig& cfg);

// Periodic finite-difference stencils used by both the dynamics and the
// reward terms. 6th-order central for d/dx, d2/dx2, d4/dx4; the convection
// derivative is 2nd-order upwind with the direction picked by sign(u_j).
void d1_central6(const double* f, double* out, int n, double dx);
void d2_central6(const double* f, double* out, int n, double dx);
void d4_central6(const double* f, double* out, int n, double dx);
void d1_upwind2(const double* f, double* out, int n, double dx);

// du/dt = -u_xx - u_xxxx - (1/2) u u_x + phi
GridField rhs(const GridField& u, const GridField& phi, const PhysicsConfig& cfg);

// Classical 4-stage Runge-Kutta update of `rhs` with phi frozen.
GridField rk4_step(const GridField& u, const GridField& phi, double dt,
                   const PhysicsConfig& cfg);

// Dissipation D = <(u_xx)^2> and power P = <(u_x)^2> + <u*phi>.
struct DissipationPower {
  double D = 0.0;
  double P = 0.0;
};
DissipationPower instantaneous_dp(const GridField& u, const GridField& phi,
                                  const PhysicsConfig& cfg);

// Advances one control interval (dtau/dt_sim RK4 sub-steps) under constant
// forcing. Reward is the left-endpoint Riemann sum of -(D+P) over sub-steps.
Transition env_step(EnvState& state, const Action& action, const PhysicsConfig& cfg);

// Draws u0 ~ U[-init_amp, init_amp] per grid point, integrates the unforced
// transient, and returns the state at t=0 of the controlled episode.
EnvState reset(std::uint64_t seed, const PhysicsConfig& cfg);

// Reward of a single control step recomputed from a state and a forcing
// field without touching an EnvState; used to relabel model rollouts.
double step_reward(const GridField& u_start, const GridField& phi,
                   const PhysicsConfig& cfg);

}  // namespace ksc
