#include "ksc/autodiff.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace ksc {

namespace {

Var make_node(Tensor value, std::vector<Var> parents) {
  bool rg = false;
  for (const auto& p : parents) rg = rg || p->requires_grad;
  auto n = std::make_shared<Node>(std::move(value), rg);
  n->parents = std::move(parents);
  return n;
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a->value.shape != b->value.shape)
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

// unary elementwise: y = f(x), dx += dy * dfdx(x, y)
Var unary(const Var& x, double (*f)(double),
          double (*dfdx)(double /*x*/, double /*y*/)) {
  Tensor out(x->value.shape);
  for (long i = 0; i < out.size(); ++i) out[i] = f(x->value[i]);
  Var n = make_node(std::move(out), {x});
  if (n->requires_grad) {
    Node* np = n.get();
    Var xs = x;
    n->backprop = [np, xs, dfdx]() {
      xs->ensure_grad();
      for (long i = 0; i < np->value.size(); ++i)
        xs->grad[i] += np->grad[i] * dfdx(xs->value[i], np->value[i]);
    };
  }
  return n;
}

}  // namespace

Var leaf(Tensor t, bool requires_grad) {
  return std::make_shared<Node>(std::move(t), requires_grad);
}

Var constant(Tensor t) { return std::make_shared<Node>(std::move(t), false); }

Var detach(const Var& x) { return constant(x->value); }

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  Tensor out(a->value.shape);
  for (long i = 0; i < out.size(); ++i) out[i] = a->value[i] + b->value[i];
  Var n = make_node(std::move(out), {a, b});
  if (n->requires_grad) {
    Node* np = n.get();
    Var as = a, bs = b;
    n->backprop = [np, as, bs]() {
      if (as->requires_grad) {
        as->ensure_grad();
        for (long i = 0; i < np->value.size(); ++i) as->grad[i] += np->grad[i];
      }
      if (bs->requires_grad) {
        bs->ensure_grad();
        for (long i = 0; i < np->value.size(); ++i) bs->grad[i] += np->grad[i];
      }
    };
  }
  return n;
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  Tensor out(a->value.shape);
  for (long i = 0; i < out.size(); ++i) out[i] = a->value[i] - b->value[i];
  Var n = make_node(std::move(out), {a, b});
  if (n->requires_grad) {
    Node* np = n.get();
    Var as = a, bs = b;
    n->backprop = [np, as, bs]() {
      if (as->requires_grad) {
        as->ensure_grad();
        for (long i = 0; i < np->value.size(); ++i) as->grad[i] += np->grad[i];
      }
      if (bs->requires_grad) {
        bs->ensure_grad();
        for (long i = 0; i < np->value.size(); ++i) bs->grad[i] -= np->grad[i];
      }
    };
  }
  return n;
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  Tensor out(a->value.shape);
  for (long i = 0; i < out.size(); ++i) out[i] = a->value[i] * b->value[i];
  Var n = make_node(std::move(out), {a, b});
  if (n->requires_grad) {
    Node* np = n.get();
    Var as = a, bs = b;
    n->backprop = [np, as, bs]() {
      if (as->requires_grad) {
        as->ensure_grad();
        for (long i = 0; i < np->value.size(); ++i)
          as->grad[i] += np->grad[i] * bs->value[i];
      }
      if (bs->requires_grad) {
        bs->ensure_grad();
        for (long i = 0; i < np->value.size(); ++i)
          bs->grad[i] += np->grad[i] * as->value[i];
      }
    };
  }
  return n;
}

Var scale(const Var& a, double s) {
  Tensor out(a->value.shape);
  for (long i = 0; i < out.size(); ++i) out[i] = a->value[i] * s;
  Var n = make_node(std::move(out), {a});
  if (n->requires_grad) {
    Node* np = n.get();
    Var as = a;
    n->backprop = [np, as, s]() {
      as->ensure_grad();
      for (long i = 0; i < np->value.size(); ++i) as->grad[i] += np->grad[i] * s;
    };
  }
  return n;
}

Var add_scalar(const Var& a, double s) {
  Tensor out(a->value.shape);
  for (long i = 0; i < out.size(); ++i) out[i] = a->value[i] + s;
  Var n = make_node(std::move(out), {a});
  if (n->requires_grad) {
    Node* np = n.get();
    Var as = a;
    n->backprop = [np, as]() {
      as->ensure_grad();
      for (long i = 0; i < np->value.size(); ++i) as->grad[i] += np->grad[i];
    };
  }
  return n;
}

Var silu(const Var& a) {
  return unary(
      a, [](double x) { return x / (1.0 + std::exp(-x)); },
      [](double x, double) {
        const double s = 1.0 / (1.0 + std::exp(-x));
        return s * (1.0 + x * (1.0 - s));
      });
}

Var tanh_op(const Var& a) {
  return unary(a, [](double x) { return std::tanh(x); },
               [](double, double y) { return 1.0 - y * y; });
}

Var sigmoid_op(const Var& a) {
  return unary(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
               [](double, double y) { return y * (1.0 - y); });
}

Var exp_op(const Var& a) {
  return unary(a, [](double x) { return std::exp(x); },
               [](double, double y) { return y; });
}

Var log_op(const Var& a) {
  return unary(a, [](double x) { return std::log(x); },
               [](double x, double) { return 1.0 / x; });
}

Var square(const Var& a) {
  return unary(a, [](double x) { return x * x; },
               [](double x, double) { return 2.0 * x; });
}

Var clamp_op(const Var& a, double lo, double hi) {
  Tensor out(a->value.shape);
  for (long i = 0; i < out.size(); ++i)
    out[i] = std::min(hi, std::max(lo, a->value[i]));
  Var n = make_node(std::move(out), {a});
  if (n->requires_grad) {
    Node* np = n.get();
    Var as = a;
    n->backprop = [np, as, lo, hi]() {
      as->ensure_grad();
      for (long i = 0; i < np->value.size(); ++i)
        if (as->value[i] > lo && as->value[i] < hi) as->grad[i] += np->grad[i];
    };
  }
  return n;
}

Var min_op(const Var& a, const Var& b) {
  check_same_shape(a, b, "min_op");
  Tensor out(a->value.shape);
  for (long i = 0; i < out.size(); ++i) out[i] = std::min(a->value[i], b->value[i]);
  Var n = make_node(std::move(out), {a, b});
  if (n->requires_grad) {
    Node* np = n.get();
    Var as = a, bs = b;
    n->backprop = [np, as, bs]() {
      as->ensure_grad();
      bs->ensure_grad();
      for (long i = 0; i < np->value.size(); ++i) {
        if (as->value[i] <= bs->value[i])
          as->grad[i] += np->grad[i];
        else
          bs->grad[i] += np->grad[i];
      }
    };
  }
  return n;
}

Var reshape(const Var& a, Shape s) {
  if (numel(s) != a->value.size())
    throw std::invalid_argument("reshape: element count mismatch");
  Tensor out(std::move(s));
  out.data = a->value.data;
  Var n = make_node(std::move(out), {a});
  if (n->requires_grad) {
    Node* np = n.get();
    Var as = a;
    n->backprop = [np, as]() {
      as->ensure_grad();
      for (long i = 0; i < np->value.size(); ++i) as->grad[i] += np->grad[i];
    };
  }
  return n;
}

namespace {

// concat along dim `d` of two 2- or 3-d tensors with matching other dims
Var concat_dim(const Var& a, const Var& b, int d) {
  const Shape& sa = a->value.shape;
  const Shape& sb = b->value.shape;
  if (sa.size() != sb.size()) throw std::invalid_argument("concat: rank mismatch");
  for (size_t i = 0; i < sa.size(); ++i)
    if (static_cast<int>(i) != d && sa[i] != sb[i])
      throw std::invalid_argument("concat: shape mismatch");
  Shape so = sa;
  so[d] += sb[d];

  long outer = 1;
  for (int i = 0; i < d; ++i) outer *= sa[i];
  long inner = 1;
  for (size_t i = d + 1; i < sa.size(); ++i) inner *= sa[i];
  const long blk_a = sa[d] * inner, blk_b = sb[d] * inner;

  Tensor out(so);
  for (long o = 0; o < outer; ++o) {
    std::copy_n(a->value.data.begin() + o * blk_a, blk_a,
                out.data.begin() + o * (blk_a + blk_b));
    std::copy_n(b->value.data.begin() + o * blk_b, blk_b,
                out.data.begin() + o * (blk_a + blk_b) + blk_a);
  }
  Var n = make_node(std::move(out), {a, b});
  if (n->requires_grad) {
    Node* np = n.get();
    Var as = a, bs = b;
    n->backprop = [np, as, bs, outer, blk_a, blk_b]() {
      if (as->requires_grad) {
        as->ensure_grad();
        for (long o = 0; o < outer; ++o)
          for (long i = 0; i < blk_a; ++i)
            as->grad.data[o * blk_a + i] += np->grad.data[o * (blk_a + blk_b) + i];
      }
      if (bs->requires_grad) {
        bs->ensure_grad();
        for (long o = 0; o < outer; ++o)
          for (long i = 0; i < blk_b; ++i)
            bs->grad.data[o * blk_b + i] +=
                np->grad.data[o * (blk_a + blk_b) + blk_a + i];
      }
    };
  }
  return n;
}

}  // namespace

Var concat_channels(const Var& a, const Var& b) { return concat_dim(a, b, 1); }
Var concat_features(const Var& a, const Var& b) { return concat_dim(a, b, 1); }

Var slice_channels(const Var& a, int c0, int c1) {
  const Shape& s = a->value.shape;
  if (s.size() != 3 || c0 < 0 || c1 > s[1] || c0 >= c1)
    throw std::invalid_argument("slice_channels: bad range");
  const int B = s[0], C = s[1], W = s[2];
  Tensor out({B, c1 - c0, W});
  for (int b = 0; b < B; ++b)
    std::copy_n(a->value.data.begin() + (static_cast<long>(b) * C + c0) * W,
                static_cast<long>(c1 - c0) * W,
                out.data.begin() + static_cast<long>(b) * (c1 - c0) * W);
  Var n = make_node(std::move(out), {a});
  if (n->requires_grad) {
    Node* np = n.get();
    Var as = a;
    n->backprop = [np, as, B, C, W, c0, c1]() {
      as->ensure_grad();
      for (int b = 0; b < B; ++b)
        for (long i = 0; i < static_cast<long>(c1 - c0) * W; ++i)
          as->grad.data[(static_cast<long>(b) * C + c0) * W + i] +=
              np->grad.data[static_cast<long>(b) * (c1 - c0) * W + i];
    };
  }
  return n;
}

Var sum_all(const Var& a) {
  double s = 0.0;
  for (double v : a->value.data) s += v;
  Var n = make_node(Tensor::scalar(s), {a});
  if (n->requires_grad) {
    Node* np = n.get();
    Var as = a;
    n->backprop = [np, as]() {
      as->ensure_grad();
      const double g = np->grad[0];
      for (long i = 0; i < as->value.size(); ++i) as->grad[i] += g;
    };
  }
  return n;
}

Var mean_all(const Var& a) { return scale(sum_all(a), 1.0 / a->value.size()); }

Var sum_rows(const Var& a) {
  const Shape& s = a->value.shape;
  if (s.size() != 2) throw std::invalid_argument("sum_rows: rank-2 input expected");
  const int B = s[0], F = s[1];
  Tensor out({B, 1});
  for (int b = 0; b < B; ++b) {
    double acc = 0.0;
    for (int f = 0; f < F; ++f) acc += a->value.data[static_cast<long>(b) * F + f];
    out.data[b] = acc;
  }
  Var n = make_node(std::move(out), {a});
  if (n->requires_grad) {
    Node* np = n.get();
    Var as = a;
    n->backprop = [np, as, B, F]() {
      as->ensure_grad();
      for (int b = 0; b < B; ++b)
        for (int f = 0; f < F; ++f)
          as->grad.data[static_cast<long>(b) * F + f] += np->grad.data[b];
    };
  }
  return n;
}

Var mse(const Var& a, const Var& b) { return mean_all(square(sub(a, b))); }

Var dense(const Var& x, const Var& w, const Var& bias) {
  const Shape& sx = x->value.shape;
  const Shape& sw = w->value.shape;
  if (sx.size() != 2 || sw.size() != 2 || sx[1] != sw[0])
    throw std::invalid_argument("dense: shape mismatch");
  const int B = sx[0], Fin = sx[1], Fout = sw[1];
  Tensor out({B, Fout});
  kernels::matmul(x->value.data.data(), w->value.data.data(),
                  bias ? bias->value.data.data() : nullptr, out.data.data(), B,
                  Fin, Fout);
  std::vector<Var> parents = {x, w};
  if (bias) parents.push_back(bias);
  Var n = make_node(std::move(out), std::move(parents));
  if (n->requires_grad) {
    Node* np = n.get();
    Var xs = x, ws = w, bs = bias;
    n->backprop = [np, xs, ws, bs, B, Fin, Fout]() {
      double* gx = nullptr;
      double* gw = nullptr;
      double* gb = nullptr;
      if (xs->requires_grad) {
        xs->ensure_grad();
        gx = xs->grad.data.data();
      }
      if (ws->requires_grad) {
        ws->ensure_grad();
        gw = ws->grad.data.data();
      }
      if (bs && bs->requires_grad) {
        bs->ensure_grad();
        gb = bs->grad.data.data();
      }
      kernels::matmul_grad(xs->value.data.data(), ws->value.data.data(),
                           np->grad.data.data(), gx, gw, gb, B, Fin, Fout);
    };
  }
  return n;
}

Var conv1d(const Var& x, const Var& w, const Var& bias, int stride) {
  const Shape& sx = x->value.shape;
  const Shape& sw = w->value.shape;
  if (sx.size() != 3 || sw.size() != 3 || sx[1] != sw[1])
    throw std::invalid_argument("conv1d: shape mismatch");
  if (sx[2] % stride != 0)
    throw std::invalid_argument("conv1d: width not divisible by stride");
  const int B = sx[0], Cin = sx[1], W = sx[2], Cout = sw[0], K = sw[2];
  Tensor out({B, Cout, W / stride});
  kernels::conv1d_circular(x->value.data.data(), w->value.data.data(),
                           bias ? bias->value.data.data() : nullptr,
                           out.data.data(), B, Cin, W, Cout, K, stride);
  std::vector<Var> parents = {x, w};
  if (bias) parents.push_back(bias);
  Var n = make_node(std::move(out), std::move(parents));
  if (n->requires_grad) {
    Node* np = n.get();
    Var xs = x, ws = w, bs = bias;
    n->backprop = [np, xs, ws, bs, B, Cin, W, Cout, K, stride]() {
      double* gx = nullptr;
      double* gw = nullptr;
      double* gb = nullptr;
      if (xs->requires_grad) {
        xs->ensure_grad();
        gx = xs->grad.data.data();
      }
      if (ws->requires_grad) {
        ws->ensure_grad();
        gw = ws->grad.data.data();
      }
      if (bs && bs->requires_grad) {
        bs->ensure_grad();
        gb = bs->grad.data.data();
      }
      kernels::conv1d_circular_grad(xs->value.data.data(), ws->value.data.data(),
                                    np->grad.data.data(), gx, gw, gb, B, Cin, W,
                                    Cout, K, stride);
    };
  }
  return n;
}

Var deconv1d(const Var& x, const Var& w, const Var& bias, int factor) {
  const Shape& sx = x->value.shape;
  const Shape& sw = w->value.shape;
  if (sx.size() != 3 || sw.size() != 3 || sx[1] != sw[0])
    throw std::invalid_argument("deconv1d: shape mismatch");
  const int B = sx[0], Cl = sx[1], W = sx[2], Cout = sw[1], K = sw[2];
  Tensor out({B, Cout, W * factor});
  kernels::deconv1d_circular(x->value.data.data(), w->value.data.data(),
                             bias ? bias->value.data.data() : nullptr,
                             out.data.data(), B, Cl, W, Cout, K, factor);
  std::vector<Var> parents = {x, w};
  if (bias) parents.push_back(bias);
  Var n = make_node(std::move(out), std::move(parents));
  if (n->requires_grad) {
    Node* np = n.get();
    Var xs = x, ws = w, bs = bias;
    n->backprop = [np, xs, ws, bs, B, Cl, W, Cout, K, factor]() {
      double* gx = nullptr;
      double* gw = nullptr;
      double* gb = nullptr;
      if (xs->requires_grad) {
        xs->ensure_grad();
        gx = xs->grad.data.data();
      }
      if (ws->requires_grad) {
        ws->ensure_grad();
        gw = ws->grad.data.data();
      }
      if (bs && bs->requires_grad) {
        bs->ensure_grad();
        gb = bs->grad.data.data();
      }
      kernels::deconv1d_circular_grad(xs->value.data.data(),
                                      ws->value.data.data(),
                                      np->grad.data.data(), gx, gw, gb, B, Cl, W,
                                      Cout, K, factor);
    };
  }
  return n;
}

Var layer_norm_channels(const Var& x, const Var& gain, const Var& shift) {
  const Shape& s = x->value.shape;
  if (s.size() != 3) throw std::invalid_argument("layer_norm: rank-3 input expected");
  const int B = s[0], C = s[1], W = s[2];
  if (gain->value.size() != C || shift->value.size() != C)
    throw std::invalid_argument("layer_norm: affine size mismatch");
  constexpr double kEps = 1e-5;

  Tensor out({B, C, W});
  Tensor xhat({B, C, W});
  std::vector<double> inv_std(static_cast<long>(B) * W);
  for (int b = 0; b < B; ++b)
    for (int i = 0; i < W; ++i) {
      double mean = 0.0;
      for (int c = 0; c < C; ++c) mean += x->value.data[(static_cast<long>(b) * C + c) * W + i];
      mean /= C;
      double var = 0.0;
      for (int c = 0; c < C; ++c) {
        const double d = x->value.data[(static_cast<long>(b) * C + c) * W + i] - mean;
        var += d * d;
      }
      var /= C;
      const double is = 1.0 / std::sqrt(var + kEps);
      inv_std[static_cast<long>(b) * W + i] = is;
      for (int c = 0; c < C; ++c) {
        const long idx = (static_cast<long>(b) * C + c) * W + i;
        xhat.data[idx] = (x->value.data[idx] - mean) * is;
        out.data[idx] = gain->value.data[c] * xhat.data[idx] + shift->value.data[c];
      }
    }

  Var n = make_node(std::move(out), {x, gain, shift});
  if (n->requires_grad) {
    Node* np = n.get();
    Var xs = x, gs = gain, ss = shift;
    auto xh = std::make_shared<Tensor>(std::move(xhat));
    auto istd = std::make_shared<std::vector<double>>(std::move(inv_std));
    n->backprop = [np, xs, gs, ss, xh, istd, B, C, W]() {
      if (gs->requires_grad) gs->ensure_grad();
      if (ss->requires_grad) ss->ensure_grad();
      if (xs->requires_grad) xs->ensure_grad();
      for (int b = 0; b < B; ++b)
        for (int i = 0; i < W; ++i) {
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (int c = 0; c < C; ++c) {
            const long idx = (static_cast<long>(b) * C + c) * W + i;
            const double dy = np->grad.data[idx] * gs->value.data[c];
            sum_dy += dy;
            sum_dy_xhat += dy * xh->data[idx];
          }
          for (int c = 0; c < C; ++c) {
            const long idx = (static_cast<long>(b) * C + c) * W + i;
            if (gs->requires_grad)
              gs->grad.data[c] += np->grad.data[idx] * xh->data[idx];
            if (ss->requires_grad) ss->grad.data[c] += np->grad.data[idx];
            if (xs->requires_grad) {
              const double dy = np->grad.data[idx] * gs->value.data[c];
              xs->grad.data[idx] +=
                  (*istd)[static_cast<long>(b) * W + i] *
                  (dy - sum_dy / C - xh->data[idx] * sum_dy_xhat / C);
            }
          }
        }
    };
  }
  return n;
}

Var weight_norm(const Var& v, const Var& g) {
  const Shape& s = v->value.shape;
  const int Cout = s[0];
  const long per = v->value.size() / Cout;
  if (g->value.size() != Cout)
    throw std::invalid_argument("weight_norm: gain size mismatch");

  Tensor out(s);
  std::vector<double> norms(Cout);
  for (int o = 0; o < Cout; ++o) {
    double nrm = 0.0;
    for (long r = 0; r < per; ++r) {
      const double vv = v->value.data[o * per + r];
      nrm += vv * vv;
    }
    nrm = std::sqrt(nrm);
    norms[o] = nrm;
    const double sc = g->value.data[o] / nrm;
    for (long r = 0; r < per; ++r) out.data[o * per + r] = sc * v->value.data[o * per + r];
  }
  Var n = make_node(std::move(out), {v, g});
  if (n->requires_grad) {
    Node* np = n.get();
    Var vs = v, gs = g;
    auto nr = std::make_shared<std::vector<double>>(std::move(norms));
    n->backprop = [np, vs, gs, nr, Cout, per]() {
      if (vs->requires_grad) vs->ensure_grad();
      if (gs->requires_grad) gs->ensure_grad();
      for (int o = 0; o < Cout; ++o) {
        const double nrm = (*nr)[o];
        double dot = 0.0;  // <gw, v>
        for (long r = 0; r < per; ++r)
          dot += np->grad.data[o * per + r] * vs->value.data[o * per + r];
        if (gs->requires_grad) gs->grad.data[o] += dot / nrm;
        if (vs->requires_grad) {
          const double sc = gs->value.data[o] / nrm;
          for (long r = 0; r < per; ++r)
            vs->grad.data[o * per + r] +=
                sc * (np->grad.data[o * per + r] -
                      vs->value.data[o * per + r] * dot / (nrm * nrm));
        }
      }
    };
  }
  return n;
}

void backward(const Var& loss) {
  if (loss->value.size() != 1)
    throw std::invalid_argument("backward: loss must be scalar");
  // iterative post-order topological sort
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Var, size_t>> stack;
  stack.emplace_back(loss, 0);
  visited.insert(loss.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Var p = node->parents[idx++];
      if (p->requires_grad && !visited.count(p.get())) {
        visited.insert(p.get());
        stack.emplace_back(std::move(p), 0);
      }
    } else {
      order.push_back(node.get());
      stack.pop_back();
    }
  }
  loss->ensure_grad();
  loss->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backprop && n->requires_grad) {
      n->ensure_grad();
      n->backprop();
    }
  }
}

}  // namespace ksc
