#include "ksc/surrogate.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "json.hpp"

namespace ksc {

SurrogateVariant variant_from_string(const std::string& s) {
  if (s == "residual_conv") return SurrogateVariant::residual_conv;
  if (s == "fullstate_conv") return SurrogateVariant::fullstate_conv;
  if (s == "residual_dense") return SurrogateVariant::residual_dense;
  if (s == "fullstate_dense") return SurrogateVariant::fullstate_dense;
  throw std::invalid_argument("unknown surrogate variant: " + s);
}

std::string to_string(SurrogateVariant v) {
  switch (v) {
    case SurrogateVariant::residual_conv: return "residual_conv";
    case SurrogateVariant::fullstate_conv: return "fullstate_conv";
    case SurrogateVariant::residual_dense: return "residual_dense";
    case SurrogateVariant::fullstate_dense: return "fullstate_dense";
  }
  return "?";
}

void SurrogateConfig::validate() const {
  if (K_tf < 1 || K_max < 1) throw std::invalid_argument("K_tf and K_max must be >= 1");
  if (width_beta <= 0.0) throw std::invalid_argument("width_beta must be positive");
  if (physics.N % 4 != 0) throw std::invalid_argument("grid width must be divisible by 4");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
}

int SurrogateConfig::scaled(int base) const {
  return std::max(1, static_cast<int>(std::lround(base * width_beta / 3.0)));
}

namespace {

long res_block_count(int cin, int cout, int k) {
  return static_cast<long>(k) * cin * cout + static_cast<long>(k) * cout * cout +
         static_cast<long>(cin) * cout;
}

// weights+biases of the convolutional stack, used to size the dense variant
long conv_stack_count(const SurrogateConfig& cfg, int cs, int ca, int ch) {
  const int s4 = cfg.scaled(4), s2 = cfg.scaled(2), a4 = cfg.scaled(4);
  const int d16 = cfg.scaled(16), d8 = cfg.scaled(8), d4 = cfg.scaled(4);
  long n = 0;
  n += res_block_count(1, s4, 3) + res_block_count(s4, cfg.scaled(8), 3) +
       res_block_count(cfg.scaled(8), cs, 3);
  n += res_block_count(1, s2, 3) + res_block_count(s2, a4, 3) +
       res_block_count(a4, ca, 3);
  n += 4L * ch * (cs + ca + ch) * 3 + 4L * ch;
  n += static_cast<long>(ch) * d16 * 3 + d16;
  n += static_cast<long>(d16) * d8 * 3 + d8;
  n += res_block_count(d8, d4, 5);
  n += static_cast<long>(d4) * 7 + 1;
  return n;
}

}  // namespace

Surrogate::Surrogate(const SurrogateConfig& cfg_, std::uint64_t init_seed)
    : cfg(cfg_) {
  cfg.validate();
  std::mt19937_64 rng(init_seed);
  const int N = cfg.physics.N, W = N / 4;
  cs = cfg.scaled(16);
  ca = cfg.scaled(6);
  ch = cfg.scaled(16);

  if (!is_dense()) {
    enc_blocks.emplace_back(ps, "enc/b0", 1, cfg.scaled(4), 3, 1, rng);
    enc_blocks.emplace_back(ps, "enc/b1", cfg.scaled(4), cfg.scaled(8), 3, 2, rng);
    enc_blocks.emplace_back(ps, "enc/b2", cfg.scaled(8), cs, 3, 2, rng);
    act_blocks.emplace_back(ps, "act/b0", 1, cfg.scaled(2), 3, 1, rng);
    act_blocks.emplace_back(ps, "act/b1", cfg.scaled(2), cfg.scaled(4), 3, 2, rng);
    act_blocks.emplace_back(ps, "act/b2", cfg.scaled(4), ca, 3, 2, rng);
    lstm = ConvLSTM(ps, "fwd/lstm", cs + ca, ch, 3, rng);
    dec_up1 = Deconv1d(ps, "dec/up1", ch, cfg.scaled(16), 3, 2, true, rng);
    dec_up2 = Deconv1d(ps, "dec/up2", cfg.scaled(16), cfg.scaled(8), 3, 2, true, rng);
    dec_res = ResidualBlock(ps, "dec/res", cfg.scaled(8), cfg.scaled(4), 5, 1, rng);
    dec_final = Conv1d(ps, "dec/out", cfg.scaled(4), 1, 7, 1, true, false, rng);
  } else {
    // hidden width chosen so the total matches the conv stack within 10%
    const long target = conv_stack_count(cfg, cs, ca, ch);
    const long lstm_n = 4L * ch * (cs + ca + ch) * 3 + 4L * ch;
    long best_h = 1;
    long best_err = std::numeric_limits<long>::max();
    for (long h = 1; h <= 4096; ++h) {
      const long n = lstm_n + (N * h + h + h * (cs * W) + cs * W) +
                     (N * h + h + h * (ca * W) + ca * W) +
                     ((ch * W) * h + h + h * N + N);
      const long err = std::labs(n - target);
      if (err < best_err) {
        best_err = err;
        best_h = h;
      }
    }
    const int h = static_cast<int>(best_h);
    enc_d1 = Dense(ps, "enc/d0", N, h, Activation::silu, rng);
    enc_d2 = Dense(ps, "enc/d1", h, cs * W, Activation::linear, rng);
    act_d1 = Dense(ps, "act/d0", N, h, Activation::silu, rng);
    act_d2 = Dense(ps, "act/d1", h, ca * W, Activation::linear, rng);
    lstm = ConvLSTM(ps, "fwd/lstm", cs + ca, ch, 3, rng);
    dec_d1 = Dense(ps, "dec/d0", ch * W, h, Activation::silu, rng);
    dec_d2 = Dense(ps, "dec/d1", h, N, Activation::linear, rng);
  }
}

long Surrogate::param_count(bool include_aux) const {
  long n = 0;
  if (!is_dense()) {
    for (const auto& b : enc_blocks) n += b.count(include_aux);
    for (const auto& b : act_blocks) n += b.count(include_aux);
    n += lstm.count(include_aux) + dec_up1.count(include_aux) +
         dec_up2.count(include_aux) + dec_res.count(include_aux) +
         dec_final.count(include_aux);
  } else {
    n = ps.total_scalars();
  }
  return n;
}

Var Surrogate::encode_state(const Var& u_norm) const {
  const int B = u_norm->value.shape[0];
  if (is_dense()) {
    Var flat = reshape(u_norm, {B, cfg.physics.N});
    return reshape(enc_d2.forward(enc_d1.forward(flat)), {B, cs, latent_width()});
  }
  Var z = u_norm;
  for (const auto& b : enc_blocks) z = b.forward(z);
  return z;
}

Var Surrogate::encode_action(const Var& phi_norm) const {
  const int B = phi_norm->value.shape[0];
  if (is_dense()) {
    Var flat = reshape(phi_norm, {B, cfg.physics.N});
    return reshape(act_d2.forward(act_d1.forward(flat)), {B, ca, latent_width()});
  }
  Var z = phi_norm;
  for (const auto& b : act_blocks) z = b.forward(z);
  return z;
}

Var Surrogate::decode(const Var& o) const {
  const int B = o->value.shape[0];
  if (is_dense()) {
    Var flat = reshape(o, {B, ch * latent_width()});
    return reshape(dec_d2.forward(dec_d1.forward(flat)), {B, 1, cfg.physics.N});
  }
  Var z = silu(dec_up1.forward(o));
  z = silu(dec_up2.forward(z));
  z = dec_res.forward(z);
  return dec_final.forward(z);
}

std::pair<Var, Var> Surrogate::initial_cell(int B) const {
  Tensor zero({B, ch, latent_width()});
  return {constant(zero), constant(zero)};
}

Surrogate::StepOut Surrogate::predict_step(const Var& u_raw, const Var& phi_raw,
                                           const Var& h, const Var& c) const {
  Var u_n = scale(add_scalar(u_raw, -stats.mean_u), 1.0 / stats.std_u);
  Var p_n = scale(add_scalar(phi_raw, -stats.mean_phi), 1.0 / stats.std_phi);
  Var z = concat_channels(encode_state(u_n), encode_action(p_n));
  auto [h2, c2] = lstm.step(z, h, c);
  Var d = decode(h2);
  Var u_next;
  if (is_residual()) {
    Var resid = add_scalar(scale(d, stats.std_t), stats.mean_t);
    u_next = add(u_raw, scale(resid, cfg.physics.dtau));
  } else {
    u_next = add_scalar(scale(d, stats.std_u), stats.mean_u);
  }
  return {u_next, h2, c2};
}

namespace {

Tensor field_tensor(const GridField& u) {
  Tensor t({1, 1, static_cast<int>(u.size())});
  t.data = u;
  return t;
}

void check_finite(const Tensor& t) {
  for (double v : t.data)
    if (!std::isfinite(v)) throw ModelDivergence();
}

}  // namespace

std::vector<GridField> Surrogate::rollout(const RolloutSeed& seed,
                                          const std::vector<Action>& actions,
                                          int K) const {
  if (seed.states.empty() || seed.states.size() != seed.actions.size())
    throw std::invalid_argument("rollout: seed must hold matched state/action pairs");
  if (static_cast<int>(actions.size()) < K)
    throw std::invalid_argument("rollout: not enough actions");

  // left-pad short histories by repeating the first pair
  std::vector<const GridField*> hs;
  std::vector<const Action*> ha;
  const int pad = std::max(0, cfg.K_tf - static_cast<int>(seed.states.size()));
  for (int i = 0; i < cfg.K_tf; ++i) {
    const int j = std::max(0, i - pad);
    hs.push_back(&seed.states[j]);
    ha.push_back(&seed.actions[j]);
  }

  auto [h, c] = initial_cell(1);
  Var pred;
  for (int i = 0; i < cfg.K_tf; ++i) {
    Var u = constant(field_tensor(*hs[i]));
    Var phi = constant(field_tensor(forcing_field(*ha[i], cfg.physics)));
    auto out = predict_step(u, phi, h, c);
    h = out.h;
    c = out.c;
    pred = out.u_next;
  }
  check_finite(pred->value);

  std::vector<GridField> result;
  result.push_back(pred->value.data);
  for (int k = 0; k < K; ++k) {
    Var phi = constant(field_tensor(forcing_field(actions[k], cfg.physics)));
    auto out = predict_step(constant(pred->value), phi, h, c);
    h = out.h;
    c = out.c;
    pred = out.u_next;
    check_finite(pred->value);
    result.push_back(pred->value.data);
  }
  return result;
}

void Surrogate::set_stats_from(const Dataset& train_episodes) {
  if (train_episodes.empty())
    throw std::invalid_argument("set_stats_from: empty dataset");
  double su = 0, squ = 0, sp = 0, sqp = 0, st = 0, sqt = 0;
  long nu = 0, np = 0, nt = 0;
  for (const Episode& ep : train_episodes) {
    for (const GridField& u : ep.states)
      for (double v : u) {
        su += v;
        squ += v * v;
        ++nu;
      }
    for (const Action& a : ep.actions) {
      GridField phi = forcing_field(a, cfg.physics);
      for (double v : phi) {
        sp += v;
        sqp += v * v;
        ++np;
      }
    }
    for (int t = 0; t < ep.steps(); ++t)
      for (size_t j = 0; j < ep.states[t].size(); ++j) {
        const double v = (ep.states[t + 1][j] - ep.states[t][j]) / cfg.physics.dtau;
        st += v;
        sqt += v * v;
        ++nt;
      }
  }
  auto finish = [](double s, double sq, long n, double& mean, double& sd) {
    mean = s / n;
    sd = std::sqrt(std::max(sq / n - mean * mean, 0.0));
    sd = std::max(sd, 1e-8);
  };
  finish(su, squ, nu, stats.mean_u, stats.std_u);
  finish(sp, sqp, np, stats.mean_phi, stats.std_phi);
  if (nt > 0) finish(st, sqt, nt, stats.mean_t, stats.std_t);
}

int curriculum_steps(const SurrogateConfig& cfg, int epoch) {
  const int ramp = std::max(
      1, static_cast<int>(std::floor(cfg.curriculum_fraction * cfg.epochs_max)));
  int k_free;
  if (epoch >= ramp - 1 || ramp == 1) {
    k_free = cfg.K_max;
  } else {
    k_free = 1 + static_cast<int>(std::lround(
                     (cfg.K_max - 1) * static_cast<double>(epoch) / (ramp - 1)));
  }
  return cfg.K_tf + k_free;
}

Var sequence_loss(const Surrogate& model, const SequenceBatch& batch) {
  const SurrogateConfig& cfg = model.cfg;
  const int B = batch.size(), K_seq = batch.seq_len(), N = cfg.physics.N;

  auto step_tensor = [&](int t, bool action) {
    Tensor x({B, 1, N});
    for (int b = 0; b < B; ++b) {
      const GridField src = action
          ? forcing_field(batch.actions[b][t], cfg.physics)
          : batch.states[b][t];
      std::copy(src.begin(), src.end(), x.data.begin() + static_cast<long>(b) * N);
    }
    return constant(std::move(x));
  };

  const double unit = model.is_residual()
                          ? 1.0 / (cfg.physics.dtau * model.stats.std_t)
                          : 1.0 / model.stats.std_u;

  auto [h, c] = model.initial_cell(B);
  Var pred;  // raw-units prediction of the current step's successor
  Var loss;
  for (int t = 0; t < K_seq; ++t) {
    Var u_in = (t < cfg.K_tf || !pred) ? step_tensor(t, false) : pred;
    auto out = model.predict_step(u_in, step_tensor(t, true), h, c);
    h = out.h;
    c = out.c;
    pred = out.u_next;
    Var err = square(scale(sub(pred, step_tensor(t + 1, false)), unit));
    loss = loss ? add(loss, mean_all(err)) : mean_all(err);
  }
  return scale(loss, 1.0 / K_seq);
}

namespace {

SequenceBatch draw_sequences(const Dataset& data, const std::vector<int>& idx,
                             int K_seq, int count, std::mt19937_64& rng) {
  SequenceBatch b;
  std::uniform_int_distribution<int> pick(0, static_cast<int>(idx.size()) - 1);
  int guard = 0;
  while (b.size() < count && guard < 100 * count) {
    ++guard;
    const int ei = idx[pick(rng)];
    const Episode& ep = data[ei];
    if (ep.steps() < K_seq) continue;
    std::uniform_int_distribution<int> off(0, ep.steps() - K_seq);
    const int o = off(rng);
    std::vector<GridField> ss(ep.states.begin() + o, ep.states.begin() + o + K_seq + 1);
    std::vector<Action> aa(ep.actions.begin() + o, ep.actions.begin() + o + K_seq);
    aa.push_back(aa.back());  // padding entry, unused
    b.states.push_back(std::move(ss));
    b.actions.push_back(std::move(aa));
    b.starts.emplace_back(ei, o);
  }
  if (b.size() == 0)
    throw std::invalid_argument("draw_sequences: no episode long enough for K_seq");
  return b;
}

std::vector<SequenceBatch> fixed_validation(const Dataset& data,
                                            const std::vector<int>& idx,
                                            int K_seq, int batch_size) {
  // non-overlapping segments, deterministic layout
  std::vector<SequenceBatch> out;
  SequenceBatch cur;
  for (int ei : idx) {
    const Episode& ep = data[ei];
    for (int o = 0; o + K_seq <= ep.steps(); o += K_seq) {
      std::vector<GridField> ss(ep.states.begin() + o,
                                ep.states.begin() + o + K_seq + 1);
      std::vector<Action> aa(ep.actions.begin() + o, ep.actions.begin() + o + K_seq);
      aa.push_back(aa.back());
      cur.states.push_back(std::move(ss));
      cur.actions.push_back(std::move(aa));
      cur.starts.emplace_back(ei, o);
      if (cur.size() == batch_size) {
        out.push_back(std::move(cur));
        cur = {};
      }
    }
  }
  if (cur.size() > 0) out.push_back(std::move(cur));
  return out;
}

}  // namespace

TrainResult train_surrogate(Surrogate& model, const Dataset& dataset,
                            std::uint64_t seed, const std::vector<int>* train_idx,
                            const std::vector<int>* val_idx) {
  if (dataset.empty()) throw std::invalid_argument("train_surrogate: empty dataset");
  const SurrogateConfig& cfg = model.cfg;
  std::mt19937_64 rng(seed);

  std::vector<int> tr, va;
  if (train_idx && val_idx) {
    tr = *train_idx;
    va = *val_idx;
  } else {
    std::vector<int> order(dataset.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    int n_val = std::max<int>(
        dataset.size() > 1 ? 1 : 0,
        static_cast<int>(std::lround(cfg.val_fraction * dataset.size())));
    n_val = std::min<int>(n_val, static_cast<int>(dataset.size()) - 1);
    va.assign(order.begin(), order.begin() + std::max(0, n_val));
    tr.assign(order.begin() + std::max(0, n_val), order.end());
    if (va.empty()) va = tr;  // single-episode degenerate case
  }

  Dataset train_eps;
  for (int i : tr) train_eps.push_back(dataset[i]);
  model.set_stats_from(train_eps);

  long total_train_steps = 0;
  int shortest = std::numeric_limits<int>::max();
  for (int i : tr) total_train_steps += dataset[i].steps();
  for (int i : va) shortest = std::min(shortest, dataset[i].steps());
  const int K_val = std::min(cfg.K_tf + cfg.K_max, shortest);
  const auto val_batches = fixed_validation(dataset, va, K_val, cfg.batch_size);

  Adam opt(AdamConfig{.lr = cfg.lr});
  TrainResult result;
  double best_val = std::numeric_limits<double>::infinity();
  int best_epoch = -1;
  std::vector<Tensor> best_params;
  int updates = 0;

  for (int epoch = 0; epoch < cfg.epochs_max; ++epoch) {
    const int K_seq = std::min(curriculum_steps(cfg, epoch), shortest);
    const int n_seqs = std::max<int>(1, static_cast<int>(total_train_steps / K_seq));

    double train_loss = 0.0;
    int n_batches = 0;
    int remaining = n_seqs;
    while (remaining > 0 && (cfg.max_updates == 0 || updates < cfg.max_updates)) {
      const int bsz = std::min(remaining, cfg.batch_size);
      remaining -= bsz;
      SequenceBatch batch = draw_sequences(dataset, tr, K_seq, bsz, rng);
      model.ps.zero_grads();
      Var loss = sequence_loss(model, batch);
      if (!std::isfinite(loss->value[0]))
        throw std::runtime_error("train_surrogate: non-finite training loss");
      backward(loss);
      clip_grad_norm(model.ps, cfg.grad_clip);
      opt.step(model.ps);
      train_loss += loss->value[0];
      ++n_batches;
      ++updates;
    }
    train_loss /= std::max(1, n_batches);

    double val_loss = 0.0;
    long val_n = 0;
    for (const SequenceBatch& vb : val_batches) {
      val_loss += sequence_loss(model, vb)->value[0] * vb.size();
      val_n += vb.size();
    }
    val_loss /= val_n;

    result.history.push_back({epoch, train_loss, val_loss, K_seq});
    if (val_loss < best_val) {
      best_val = val_loss;
      best_epoch = epoch;
      best_params.clear();
      for (const auto& [p, var] : model.ps.params) best_params.push_back(var->value);
    }
    if (epoch - best_epoch >= cfg.patience && updates >= cfg.min_updates) break;
    if (cfg.max_updates > 0 && updates >= cfg.max_updates) break;
  }

  if (cfg.restore_best && !best_params.empty())
    for (size_t i = 0; i < model.ps.params.size(); ++i)
      model.ps.params[i].second->value = best_params[i];
  result.best_epoch = best_epoch;
  result.best_val = best_val;
  return result;
}

PredictFn surrogate_predictor(const Surrogate& model) {
  return [&model](const Episode& ep, int start, int K) {
    RolloutSeed seed;
    const int first = std::max(0, start - model.cfg.K_tf + 1);
    for (int i = first; i <= start; ++i) {
      seed.states.push_back(ep.states[i]);
      seed.actions.push_back(ep.actions[i]);
    }
    std::vector<Action> acts(ep.actions.begin() + start + 1,
                             ep.actions.begin() + start + K);
    return model.rollout(seed, acts, K - 1);
  };
}

NmseCurve evaluate_nmse(const PredictFn& predict, const Dataset& test, int K,
                        const PhysicsConfig& physics, int K_tf) {
  struct Sample {
    const Episode* ep;
    int start;
    std::vector<GridField> pred;
  };
  std::vector<Sample> samples;
  for (const Episode& ep : test)
    for (int start = K_tf - 1; start + K < ep.steps(); start += K)
      samples.push_back({&ep, start, predict(ep, start, K)});
  if (samples.empty())
    throw std::invalid_argument("evaluate_nmse: no test subsequence fits horizon");

  NmseCurve curve;
  for (int k = 1; k <= K; ++k) {
    double mse = 0.0, s1 = 0.0, s2 = 0.0;
    long n = 0;
    double rmse = 0.0, r1 = 0.0, r2 = 0.0;
    for (const Sample& s : samples) {
      const GridField& truth = s.ep->states[s.start + k];
      const GridField& pred = s.pred[k - 1];
      double se = 0.0;
      for (size_t j = 0; j < truth.size(); ++j) {
        const double d = pred[j] - truth[j];
        se += d * d;
        s1 += truth[j];
        s2 += truth[j] * truth[j];
        ++n;
      }
      mse += se / truth.size();

      const GridField phi = forcing_field(s.ep->actions[s.start + k], physics);
      const double r_true = step_reward(truth, phi, physics);
      const double r_pred = step_reward(pred, phi, physics);
      rmse += (r_pred - r_true) * (r_pred - r_true);
      r1 += r_true;
      r2 += r_true * r_true;
    }
    const double m = static_cast<double>(samples.size());
    const double var_u = std::max(s2 / n - (s1 / n) * (s1 / n), 1e-12);
    const double var_r = std::max(r2 / m - (r1 / m) * (r1 / m), 1e-12);
    curve.state.push_back(mse / m / var_u);
    curve.reward.push_back(rmse / m / var_r);
  }
  return curve;
}

double valid_prediction_time(const NmseCurve& curve, double eps, double dtau) {
  int k = 0;
  while (k < static_cast<int>(curve.state.size()) && curve.state[k] < eps &&
         curve.reward[k] < eps)
    ++k;
  return k * dtau;
}

void save_surrogate(const Surrogate& model, const std::string& dir) {
  nlohmann::json meta;
  meta["variant"] = to_string(model.cfg.variant);
  meta["width_beta"] = model.cfg.width_beta;
  meta["stats"] = {{"mean_u", model.stats.mean_u},   {"std_u", model.stats.std_u},
                   {"mean_phi", model.stats.mean_phi}, {"std_phi", model.stats.std_phi},
                   {"mean_t", model.stats.mean_t},   {"std_t", model.stats.std_t}};
  save_checkpoint(model.ps, dir, meta.dump());
}

void load_surrogate(Surrogate& model, const std::string& dir) {
  nlohmann::json meta = nlohmann::json::parse(load_checkpoint(model.ps, dir));
  if (meta.contains("variant") &&
      variant_from_string(meta["variant"].get<std::string>()) != model.cfg.variant)
    throw std::runtime_error("load_surrogate: variant mismatch");
  const auto& s = meta.at("stats");
  model.stats = {s["mean_u"], s["std_u"], s["mean_phi"],
                 s["std_phi"], s["mean_t"], s["std_t"]};
}

}  // namespace ksc
