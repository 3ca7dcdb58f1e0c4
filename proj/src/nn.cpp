#include "ksc/nn.hpp"

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace ksc {

Var ParamStore::find(const std::string& path) const {
  for (const auto& [p, var] : params)
    if (p == path) return var;
  return nullptr;
}

long ParamStore::total_scalars() const {
  long n = 0;
  for (const auto& [p, var] : params) n += var->value.size();
  return n;
}

void ParamStore::zero_grads() const {
  for (const auto& [p, var] : params) var->zero_grad();
}

void ParamStore::copy_values_from(const ParamStore& other) {
  if (params.size() != other.params.size())
    throw std::invalid_argument("copy_values_from: store size mismatch");
  for (size_t i = 0; i < params.size(); ++i) {
    if (params[i].second->value.shape != other.params[i].second->value.shape)
      throw std::invalid_argument("copy_values_from: shape mismatch at " +
                                  params[i].first);
    params[i].second->value.data = other.params[i].second->value.data;
  }
}

Tensor he_uniform(Shape shape, long fan_in, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-limit, limit);
  for (double& v : t.data) v = dist(rng);
  return t;
}

Conv1d::Conv1d(ParamStore& ps, const std::string& prefix, int cin, int cout,
               int k, int stride_, bool has_bias, bool weight_normalized,
               std::mt19937_64& rng)
    : stride(stride_) {
  v = ps.add(prefix + "/w", he_uniform({cout, cin, k}, static_cast<long>(cin) * k, rng));
  if (weight_normalized) {
    Tensor gains({cout});
    const long per = static_cast<long>(cin) * k;
    for (int o = 0; o < cout; ++o) {
      double nrm = 0.0;
      for (long r = 0; r < per; ++r) nrm += v->value.data[o * per + r] * v->value.data[o * per + r];
      gains.data[o] = std::sqrt(nrm);  // w == v at init
    }
    g = ps.add(prefix + "/g", std::move(gains));
  }
  if (has_bias) bias = ps.add(prefix + "/b", Tensor({cout}));
}

long Conv1d::count(bool include_aux) const {
  long n = v->value.size() + (bias ? bias->value.size() : 0);
  if (include_aux && g) n += g->value.size();
  return n;
}

Deconv1d::Deconv1d(ParamStore& ps, const std::string& prefix, int cl, int cout,
                   int k, int factor_, bool has_bias, std::mt19937_64& rng)
    : factor(factor_) {
  w = ps.add(prefix + "/w", he_uniform({cl, cout, k}, static_cast<long>(cl) * k, rng));
  if (has_bias) bias = ps.add(prefix + "/b", Tensor({cout}));
}

long Deconv1d::count(bool) const {
  return w->value.size() + (bias ? bias->value.size() : 0);
}

LayerNorm::LayerNorm(ParamStore& ps, const std::string& prefix, int channels) {
  gain = ps.add(prefix + "/gain", Tensor({channels}, 1.0));
  shift = ps.add(prefix + "/shift", Tensor({channels}));
}

ResidualBlock::ResidualBlock(ParamStore& ps, const std::string& prefix, int cin,
                             int cout, int k, int stride, std::mt19937_64& rng)
    : conv1(ps, prefix + "/conv1", cin, cout, k, stride, false, true, rng),
      conv2(ps, prefix + "/conv2", cout, cout, k, 1, false, true, rng),
      shortcut(ps, prefix + "/shortcut", cin, cout, 1, stride, false, true, rng),
      norm1(ps, prefix + "/norm1", cout),
      norm2(ps, prefix + "/norm2", cout) {}

Var ResidualBlock::forward(const Var& x) const {
  Var main = conv1.forward(x);
  main = silu(norm1.forward(main));
  main = norm2.forward(conv2.forward(main));
  return silu(add(main, shortcut.forward(x)));
}

long ResidualBlock::count(bool include_aux) const {
  return conv1.count(include_aux) + conv2.count(include_aux) +
         shortcut.count(include_aux) + norm1.count(include_aux) +
         norm2.count(include_aux);
}

Dense::Dense(ParamStore& ps, const std::string& prefix, int fin, int fout,
             Activation act_, std::mt19937_64& rng)
    : act(act_) {
  w = ps.add(prefix + "/w", he_uniform({fin, fout}, fin, rng));
  b = ps.add(prefix + "/b", Tensor({fout}));
}

Var Dense::forward(const Var& x) const {
  Var y = dense(x, w, b);
  switch (act) {
    case Activation::silu: return silu(y);
    case Activation::tanh: return tanh_op(y);
    case Activation::linear: return y;
  }
  return y;
}

ConvLSTM::ConvLSTM(ParamStore& ps, const std::string& prefix, int cx, int ch,
                   int k, std::mt19937_64& rng)
    : hidden_channels(ch) {
  w = ps.add(prefix + "/w",
             he_uniform({4 * ch, cx + ch, k}, static_cast<long>(cx + ch) * k, rng));
  Tensor b({4 * ch});
  for (int c = ch; c < 2 * ch; ++c) b.data[c] = 1.0;  // forget gate
  bias = ps.add(prefix + "/b", std::move(b));
}

std::pair<Var, Var> ConvLSTM::step(const Var& x, const Var& h, const Var& c) const {
  const int ch = hidden_channels;
  Var z = conv1d(concat_channels(x, h), w, bias, 1);
  Var i_gate = sigmoid_op(slice_channels(z, 0, ch));
  Var f_gate = sigmoid_op(slice_channels(z, ch, 2 * ch));
  Var o_gate = sigmoid_op(slice_channels(z, 2 * ch, 3 * ch));
  Var g_gate = tanh_op(slice_channels(z, 3 * ch, 4 * ch));
  Var c_next = add(mul(f_gate, c), mul(i_gate, g_gate));
  Var h_next = mul(o_gate, tanh_op(c_next));
  return {h_next, c_next};
}

long ConvLSTM::count(bool) const { return w->value.size() + bias->value.size(); }

void Adam::step(ParamStore& ps) {
  if (m.empty()) {
    for (const auto& [p, var] : ps.params) {
      m.emplace_back(var->value.shape);
      v.emplace_back(var->value.shape);
    }
  }
  step_count += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, step_count);
  const double bc2 = 1.0 - std::pow(cfg.beta2, step_count);
  for (size_t pi = 0; pi < ps.params.size(); ++pi) {
    auto& [path, var] = ps.params[pi];
    var->ensure_grad();
    for (long i = 0; i < var->value.size(); ++i) {
      const double g = var->grad[i];
      if (!std::isfinite(g))
        throw std::runtime_error("adam: non-finite gradient in " + path);
      m[pi][i] = cfg.beta1 * m[pi][i] + (1.0 - cfg.beta1) * g;
      v[pi][i] = cfg.beta2 * v[pi][i] + (1.0 - cfg.beta2) * g * g;
      const double mhat = m[pi][i] / bc1;
      const double vhat = v[pi][i] / bc2;
      var->value[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.epsilon);
    }
    var->zero_grad();
  }
}

double clip_grad_norm(ParamStore& ps, double threshold) {
  double sq = 0.0;
  for (const auto& [path, var] : ps.params) {
    var->ensure_grad();
    for (double g : var->grad.data) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (norm > threshold) {
    const double s = threshold / norm;
    for (const auto& [path, var] : ps.params)
      for (double& g : var->grad.data) g *= s;
  }
  return norm;
}

void save_checkpoint(const ParamStore& ps, const std::string& dir,
                     const std::string& extra_json) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "ksc-checkpoint-v1";
  manifest["metadata"] =
      extra_json.empty() ? nlohmann::json::object() : nlohmann::json::parse(extra_json);
  long offset = 0;
  std::ofstream blob(fs::path(dir) / "params.bin", std::ios::binary);
  for (const auto& [path, var] : ps.params) {
    nlohmann::json entry;
    entry["path"] = path;
    entry["shape"] = var->value.shape;
    entry["offset"] = offset;
    entry["count"] = var->value.size();
    manifest["params"].push_back(entry);
    for (double d : var->value.data) {
      const float f = static_cast<float>(d);
      blob.write(reinterpret_cast<const char*>(&f), sizeof(float));
    }
    offset += var->value.size();
  }
  std::ofstream(fs::path(dir) / "manifest.json") << manifest.dump(2) << "\n";
}

std::string load_checkpoint(ParamStore& ps, const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream mf(fs::path(dir) / "manifest.json");
  if (!mf) throw std::runtime_error("load_checkpoint: missing manifest in " + dir);
  nlohmann::json manifest = nlohmann::json::parse(mf);
  std::ifstream blob(fs::path(dir) / "params.bin", std::ios::binary);
  if (!blob) throw std::runtime_error("load_checkpoint: missing params.bin in " + dir);
  for (const auto& entry : manifest["params"]) {
    Var var = ps.find(entry["path"].get<std::string>());
    if (!var)
      throw std::runtime_error("load_checkpoint: unknown parameter " +
                               entry["path"].get<std::string>());
    const long count = entry["count"].get<long>();
    if (count != var->value.size())
      throw std::runtime_error("load_checkpoint: size mismatch for " +
                               entry["path"].get<std::string>());
    blob.seekg(entry["offset"].get<long>() * static_cast<long>(sizeof(float)));
    for (long i = 0; i < count; ++i) {
      float f;
      blob.read(reinterpret_cast<char*>(&f), sizeof(float));
      var->value[i] = static_cast<double>(f);
    }
  }
  return manifest["metadata"].dump();
}

}  // namespace ksc
