#pragma once

#include <random>
#include <string>

#include "ksc/autodiff.hpp"

namespace ksc {

enum class Activation { silu, tanh, linear };

struct LayerSpec {
  std::string kind;  // conv1d | deconv1d | residual_block | conv_lstm | dense | layer_norm
  int in_channels = 0;
  int out_channels = 0;
  int kernel_size = 1;
  int stride = 1;
  Activation activation = Activation::linear;
  bool has_bias = false;
  bool weight_normalized = false;
};

// Named parameter registry; the order of registration defines the optimizer
// state layout and the checkpoint blob layout.
struct ParamStore {
  std::vector<std::pair<std::string, Var>> params;

  Var add(const std::string& path, Tensor init) {
    params.emplace_back(path, leaf(std::move(init), true));
    return params.back().second;
  }
  Var find(const std::string& path) const;
  long total_scalars() const;
  void zero_grads() const;
  void copy_values_from(const ParamStore& other);  // shapes must match
};

// He-uniform fan-in initialization.
Tensor he_uniform(Shape shape, long fan_in, std::mt19937_64& rng);

struct Conv1d {
  Var v;     // raw weights (Cout, Cin, K)
  Var g;     // weight-norm gains, null when not normalized
  Var bias;  // null when bias-free
  int stride = 1;

  Conv1d() = default;
  Conv1d(ParamStore& ps, const std::string& prefix, int cin, int cout, int k,
         int stride, bool has_bias, bool weight_normalized, std::mt19937_64& rng);
  Var weights() const { return g ? weight_norm(v, g) : v; }
  Var forward(const Var& x) const { return conv1d(x, weights(), bias, stride); }
  long count(bool include_aux) const;
};

struct Deconv1d {
  Var w;  // (Cl, Cout, K)
  Var bias;
  int factor = 2;

  Deconv1d() = default;
  Deconv1d(ParamStore& ps, const std::string& prefix, int cl, int cout, int k,
           int factor, bool has_bias, std::mt19937_64& rng);
  Var forward(const Var& x) const { return deconv1d(x, w, bias, factor); }
  long count(bool include_aux) const;
};

struct LayerNorm {
  Var gain;
  Var shift;

  LayerNorm() = default;
  LayerNorm(ParamStore& ps, const std::string& prefix, int channels);
  Var forward(const Var& x) const { return layer_norm_channels(x, gain, shift); }
  long count(bool include_aux) const { return include_aux ? 2 * gain->value.size() : 0; }
};

// conv(3,s) -> norm -> SiLU -> conv(3,1) -> norm, plus 1x1 stride-s shortcut;
// output SiLU(main + shortcut); convolutions bias-free and weight-normalized.
struct ResidualBlock {
  Conv1d conv1, conv2, shortcut;
  LayerNorm norm1, norm2;

  ResidualBlock() = default;
  ResidualBlock(ParamStore& ps, const std::string& prefix, int cin, int cout,
                int k, int stride, std::mt19937_64& rng);
  Var forward(const Var& x) const;
  long count(bool include_aux) const;
};

struct Dense {
  Var w;  // (Fin, Fout)
  Var b;
  Activation act = Activation::linear;

  Dense() = default;
  Dense(ParamStore& ps, const std::string& prefix, int fin, int fout,
        Activation act, std::mt19937_64& rng);
  Var forward(const Var& x) const;
  long count(bool) const { return w->value.size() + (b ? b->value.size() : 0); }
};

// Convolutional LSTM cell; gates from one circular convolution of [x; h].
struct ConvLSTM {
  Var w;     // (4*Ch, Cx+Ch, K)
  Var bias;  // (4*Ch), forget-gate slice initialized to +1
  int hidden_channels = 0;

  ConvLSTM() = default;
  ConvLSTM(ParamStore& ps, const std::string& prefix, int cx, int ch, int k,
           std::mt19937_64& rng);
  // returns (h', c')
  std::pair<Var, Var> step(const Var& x, const Var& h, const Var& c) const;
  long count(bool include_aux) const;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Standard Adam with bias correction over a ParamStore. Consumes and clears
// gradients on step(). Throws std::runtime_error naming the parameter on
// non-finite gradients.
struct Adam {
  AdamConfig cfg;
  long step_count = 0;
  std::vector<Tensor> m, v;

  explicit Adam(AdamConfig c = {}) : cfg(c) {}
  void step(ParamStore& ps);
};

// Rescales all gradients by threshold/norm when the global L2 norm exceeds
// the threshold; returns the pre-clip norm.
double clip_grad_norm(ParamStore& ps, double threshold = 0.5);

// Checkpoints: JSON manifest (shapes, offsets, caller-supplied metadata) plus
// one little-endian float32 blob file addressed by parameter path.
void save_checkpoint(const ParamStore& ps, const std::string& dir,
                     const std::string& extra_json);
std::string load_checkpoint(ParamStore& ps, const std::string& dir);  // returns metadata

}  // namespace ksc
