#include "ksc/ks_env.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace ksc {

int PhysicsConfig::substeps_per_control() const {
  return static_cast<int>(std::llround(dtau / dt_sim));
}

int PhysicsConfig::steps_per_episode() const {
  return static_cast<int>(std::llround(T_max / dtau));
}

void PhysicsConfig::validate() const {
  if (L <= 0) throw std::invalid_argument("PhysicsConfig: L must be positive");
  if (N < 8 || N % 2 != 0)
    throw std::invalid_argument("PhysicsConfig: N must be even and >= 8");
  const double sub = dtau / dt_sim;
  if (std::abs(sub - std::llround(sub)) > 1e-9 * sub)
    throw std::invalid_argument("PhysicsConfig: dtau must be a multiple of dt_sim");
  const double steps = T_max / dtau;
  if (std::abs(steps - std::llround(steps)) > 1e-9 * steps)
    throw std::invalid_argument("PhysicsConfig: T_max must be a multiple of dtau");
  if (n_act < 1) throw std::invalid_argument("PhysicsConfig: n_act must be >= 1");
  if (sigma <= 0) throw std::invalid_argument("PhysicsConfig: sigma must be positive");
}

BlowupError::BlowupError(double t)
    : std::runtime_error("integrator blow-up at t = " + std::to_string(t)), time(t) {}

GridField forcing_field(const Action& action, const PhysicsConfig& cfg) {
  if (static_cast<int>(action.a.size()) != cfg.n_act)
    throw std::invalid_argument("forcing_field: action size mismatch");
  for (double ai : action.a)
    if (!(ai >= -1.0 && ai <= 1.0))
      throw std::domain_error("forcing_field: action component outside [-1, 1]");

  const double norm = 1.0 / std::sqrt(2.0 * M_PI * cfg.sigma);
  const double dx = cfg.dx();
  GridField phi(cfg.N, 0.0);
  for (int i = 0; i < cfg.n_act; ++i) {
    if (action.a[i] == 0.0) continue;
    const double center = i * cfg.L / cfg.n_act;
    const double amp = action.a[i] * norm;
    for (int j = 0; j < cfg.N; ++j) {
      double d = std::fabs(j * dx - center);
      d = std::min(d, cfg.L - d);  // minimum-image wrap
      phi[j] += amp * std::exp(-d * d / (2.0 * cfg.sigma * cfg.sigma));
    }
  }
  return phi;
}

namespace {
inline int wrap(int i, int n) { return (i % n + n) % n; }
}  // namespace

void d1_central6(const double* f, double* out, int n, double dx) {
  const double c = 1.0 / (60.0 * dx);
#pragma omp parallel for schedule(static) if (n > 4096)
  for (int j = 0; j < n; ++j) {
    const int jm3 = wrap(j - 3, n), jm2 = wrap(j - 2, n), jm1 = wrap(j - 1, n);
    const int jp1 = wrap(j + 1, n), jp2 = wrap(j + 2, n), jp3 = wrap(j + 3, n);
    out[j] = c * (-f[jm3] + 9.0 * f[jm2] - 45.0 * f[jm1] + 45.0 * f[jp1] -
                  9.0 * f[jp2] + f[jp3]);
  }
}

void d2_central6(const double* f, double* out, int n, double dx) {
  const double c = 1.0 / (180.0 * dx * dx);
#pragma omp parallel for schedule(static) if (n > 4096)
  for (int j = 0; j < n; ++j) {
    const int jm3 = wrap(j - 3, n), jm2 = wrap(j - 2, n), jm1 = wrap(j - 1, n);
    const int jp1 = wrap(j + 1, n), jp2 = wrap(j + 2, n), jp3 = wrap(j + 3, n);
    out[j] = c * (2.0 * f[jm3] - 27.0 * f[jm2] + 270.0 * f[jm1] - 490.0 * f[j] +
                  270.0 * f[jp1] - 27.0 * f[jp2] + 2.0 * f[jp3]);
  }
}

void d4_central6(const double* f, double* out, int n, double dx) {
  const double dx2 = dx * dx;
  const double c = 1.0 / (dx2 * dx2);
#pragma omp parallel for schedule(static) if (n > 4096)
  for (int j = 0; j < n; ++j) {
    const int jm4 = wrap(j - 4, n), jm3 = wrap(j - 3, n), jm2 = wrap(j - 2, n),
              jm1 = wrap(j - 1, n);
    const int jp1 = wrap(j + 1, n), jp2 = wrap(j + 2, n), jp3 = wrap(j + 3, n),
              jp4 = wrap(j + 4, n);
    out[j] = c * ((7.0 / 240.0) * (f[jm4] + f[jp4]) -
                  (2.0 / 5.0) * (f[jm3] + f[jp3]) +
                  (169.0 / 60.0) * (f[jm2] + f[jp2]) -
                  (122.0 / 15.0) * (f[jm1] + f[jp1]) + (91.0 / 8.0) * f[j]);
  }
}

void d1_upwind2(const double* f, double* out, int n, double dx) {
  const double c = 1.0 / (2.0 * dx);
#pragma omp parallel for schedule(static) if (n > 4096)
  for (int j = 0; j < n; ++j) {
    if (f[j] > 0.0) {
      const int jm1 = wrap(j - 1, n), jm2 = wrap(j - 2, n);
      out[j] = c * (3.0 * f[j] - 4.0 * f[jm1] + f[jm2]);
    } else {
      const int jp1 = wrap(j + 1, n), jp2 = wrap(j + 2, n);
      out[j] = c * (-3.0 * f[j] + 4.0 * f[jp1] - f[jp2]);
    }
  }
}

namespace {

void rhs_into(const double* u, const double* phi, double* out, int n,
              const PhysicsConfig& cfg, double* scratch) {
  const double dx = cfg.dx();
  double* d2 = scratch;
  double* d4 = scratch + n;
  double* up = scratch + 2 * n;
  d2_central6(u, d2, n, dx);
  d4_central6(u, d4, n, dx);
  d1_upwind2(u, up, n, dx);
  for (int j = 0; j < n; ++j)
    out[j] = -d2[j] - d4[j] - 0.5 * u[j] * up[j] + phi[j];
}

// One RK4 step without allocations; buffers sized 3n (rhs scratch) + 2n.
void rk4_into(double* u, const double* phi, double dt, int n,
              const PhysicsConfig& cfg, double* k, double* tmp, double* acc,
              double* scratch) {
  rhs_into(u, phi, k, n, cfg, scratch);
  for (int j = 0; j < n; ++j) {
    acc[j] = k[j];
    tmp[j] = u[j] + 0.5 * dt * k[j];
  }
  rhs_into(tmp, phi, k, n, cfg, scratch);
  for (int j = 0; j < n; ++j) {
    acc[j] += 2.0 * k[j];
    tmp[j] = u[j] + 0.5 * dt * k[j];
  }
  rhs_into(tmp, phi, k, n, cfg, scratch);
  for (int j = 0; j < n; ++j) {
    acc[j] += 2.0 * k[j];
    tmp[j] = u[j] + dt * k[j];
  }
  rhs_into(tmp, phi, k, n, cfg, scratch);
  for (int j = 0; j < n; ++j) u[j] += dt / 6.0 * (acc[j] + k[j]);
}

bool all_finite(const double* u, int n) {
  for (int j = 0; j < n; ++j)
    if (!std::isfinite(u[j])) return false;
  return true;
}

}  // namespace

GridField rhs(const GridField& u, const GridField& phi, const PhysicsConfig& cfg) {
  if (u.size() != phi.size() || static_cast<int>(u.size()) != cfg.N)
    throw std::invalid_argument("rhs: grid size mismatch");
  GridField out(cfg.N);
  std::vector<double> scratch(3 * cfg.N);
  rhs_into(u.data(), phi.data(), out.data(), cfg.N, cfg, scratch.data());
  return out;
}

GridField rk4_step(const GridField& u, const GridField& phi, double dt,
                   const PhysicsConfig& cfg) {
  GridField out = u;
  std::vector<double> buf(5 * cfg.N), scratch(3 * cfg.N);
  rk4_into(out.data(), phi.data(), dt, cfg.N, cfg, buf.data(),
           buf.data() + cfg.N, buf.data() + 2 * cfg.N, scratch.data());
  if (!all_finite(out.data(), cfg.N)) throw BlowupError(0.0);
  return out;
}

DissipationPower instantaneous_dp(const GridField& u, const GridField& phi,
                                  const PhysicsConfig& cfg) {
  const int n = cfg.N;
  const double dx = cfg.dx();
  std::vector<double> d1(n), d2(n);
  d1_central6(u.data(), d1.data(), n, dx);
  d2_central6(u.data(), d2.data(), n, dx);
  double sum_d = 0.0, sum_grad = 0.0, sum_work = 0.0;
  for (int j = 0; j < n; ++j) {
    sum_d += d2[j] * d2[j];
    sum_grad += d1[j] * d1[j];
    sum_work += u[j] * phi[j];
  }
  return {sum_d / n, (sum_grad + sum_work) / n};
}

Transition env_step(EnvState& state, const Action& action, const PhysicsConfig& cfg) {
  if (state.step_index >= cfg.steps_per_episode())
    throw std::logic_error("env_step: episode already done");
  const int n = cfg.N;
  const GridField phi = forcing_field(action, cfg);

  Transition tr;
  tr.state = state.u;
  tr.action = action;

  std::vector<double> buf(5 * n), scratch(3 * n), dp1(n), dp2(n);
  double reward = 0.0;
  const int substeps = cfg.substeps_per_control();
  double* u = state.u.data();
  for (int s = 0; s < substeps; ++s) {
    // left-endpoint quadrature of the D+P integrand
    d1_central6(u, dp1.data(), n, cfg.dx());
    d2_central6(u, dp2.data(), n, cfg.dx());
    double sum = 0.0;
    for (int j = 0; j < n; ++j)
      sum += dp2[j] * dp2[j] + dp1[j] * dp1[j] + u[j] * phi[j];
    reward -= (sum / n) * cfg.dt_sim;
    rk4_into(u, phi.data(), cfg.dt_sim, n, cfg, buf.data(), buf.data() + n,
             buf.data() + 2 * n, scratch.data());
    if (!all_finite(u, n)) throw BlowupError(state.t + (s + 1) * cfg.dt_sim);
  }

  state.step_index += 1;
  state.t = state.step_index * cfg.dtau;
  tr.reward = reward;
  tr.next_state = state.u;
  tr.done = state.step_index == cfg.steps_per_episode();
  return tr;
}

EnvState reset(std::uint64_t seed, const PhysicsConfig& cfg) {
  cfg.validate();
  EnvState st;
  st.rng.seed(seed);
  st.u.resize(cfg.N);
  std::uniform_real_distribution<double> dist(-cfg.init_amp, cfg.init_amp);
  for (int j = 0; j < cfg.N; ++j) st.u[j] = dist(st.rng);

  const int n = cfg.N;
  std::vector<double> buf(5 * n), scratch(3 * n);
  const GridField phi(n, 0.0);
  const long steps = std::llround(cfg.transient_T / cfg.dt_sim);
  double* u = st.u.data();
  for (long s = 0; s < steps; ++s) {
    rk4_into(u, phi.data(), cfg.dt_sim, n, cfg, buf.data(), buf.data() + n,
             buf.data() + 2 * n, scratch.data());
    if (!all_finite(u, n)) throw BlowupError((s + 1) * cfg.dt_sim - cfg.transient_T);
  }
  st.t = 0.0;
  st.step_index = 0;
  return st;
}

double step_reward(const GridField& u_start, const GridField& phi,
                   const PhysicsConfig& cfg) {
  const DissipationPower dp = instantaneous_dp(u_start, phi, cfg);
  return -(dp.D + dp.P) * cfg.dtau;
}

}  // namespace ksc
