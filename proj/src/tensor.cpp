#include "ksc/tensor.hpp"

namespace ksc::kernels {

namespace {
inline int wrap(int i, int n) { return (i % n + n) % n; }
}  // namespace

void conv1d_circular_serial(const double* x, const double* w, const double* bias,
                            double* out, int B, int Cin, int W, int Cout, int K,
                            int stride) {
  const int Wo = W / stride;
  const int off = K / 2;
  for (int b = 0; b < B; ++b)
    for (int co = 0; co < Cout; ++co)
      for (int i = 0; i < Wo; ++i) {
        double s = bias ? bias[co] : 0.0;
        for (int ci = 0; ci < Cin; ++ci) {
          const double* xr = x + (static_cast<long>(b) * Cin + ci) * W;
          const double* wr = w + (static_cast<long>(co) * Cin + ci) * K;
          for (int k = 0; k < K; ++k) s += wr[k] * xr[wrap(i * stride + k - off, W)];
        }
        out[(static_cast<long>(b) * Cout + co) * Wo + i] = s;
      }
}

void conv1d_circular(const double* x, const double* w, const double* bias,
                     double* out, int B, int Cin, int W, int Cout, int K,
                     int stride) {
  const int Wo = W / stride;
  const int off = K / 2;
#pragma omp parallel for collapse(2) schedule(static) if (B * Cout > 8)
  for (int b = 0; b < B; ++b)
    for (int co = 0; co < Cout; ++co) {
      double* orow = out + (static_cast<long>(b) * Cout + co) * Wo;
      for (int i = 0; i < Wo; ++i) orow[i] = bias ? bias[co] : 0.0;
      for (int ci = 0; ci < Cin; ++ci) {
        const double* xr = x + (static_cast<long>(b) * Cin + ci) * W;
        const double* wr = w + (static_cast<long>(co) * Cin + ci) * K;
        for (int k = 0; k < K; ++k) {
          const double wk = wr[k];
          const int shift = k - off;
          for (int i = 0; i < Wo; ++i) orow[i] += wk * xr[wrap(i * stride + shift, W)];
        }
      }
    }
}

void conv1d_circular_grad(const double* x, const double* w, const double* gy,
                          double* gx, double* gw, double* gbias, int B, int Cin,
                          int W, int Cout, int K, int stride) {
  const int Wo = W / stride;
  const int off = K / 2;
  if (gx) {
    for (int b = 0; b < B; ++b)
      for (int co = 0; co < Cout; ++co) {
        const double* gyr = gy + (static_cast<long>(b) * Cout + co) * Wo;
        for (int ci = 0; ci < Cin; ++ci) {
          double* gxr = gx + (static_cast<long>(b) * Cin + ci) * W;
          const double* wr = w + (static_cast<long>(co) * Cin + ci) * K;
          for (int k = 0; k < K; ++k) {
            const double wk = wr[k];
            const int shift = k - off;
            for (int i = 0; i < Wo; ++i) gxr[wrap(i * stride + shift, W)] += wk * gyr[i];
          }
        }
      }
  }
  if (gw) {
#pragma omp parallel for schedule(static) if (Cout > 8)
    for (int co = 0; co < Cout; ++co)
      for (int ci = 0; ci < Cin; ++ci) {
        double* gwr = gw + (static_cast<long>(co) * Cin + ci) * K;
        for (int b = 0; b < B; ++b) {
          const double* gyr = gy + (static_cast<long>(b) * Cout + co) * Wo;
          const double* xr = x + (static_cast<long>(b) * Cin + ci) * W;
          for (int k = 0; k < K; ++k) {
            const int shift = k - off;
            double s = 0.0;
            for (int i = 0; i < Wo; ++i) s += gyr[i] * xr[wrap(i * stride + shift, W)];
            gwr[k] += s;
          }
        }
      }
  }
  if (gbias) {
    for (int b = 0; b < B; ++b)
      for (int co = 0; co < Cout; ++co) {
        const double* gyr = gy + (static_cast<long>(b) * Cout + co) * Wo;
        double s = 0.0;
        for (int i = 0; i < Wo; ++i) s += gyr[i];
        gbias[co] += s;
      }
  }
}

void deconv1d_circular_serial(const double* x, const double* w, const double* bias,
                              double* out, int B, int Cl, int W, int Cout, int K,
                              int factor) {
  const int Wo = W * factor;
  const int off = K / 2;
  for (int b = 0; b < B; ++b) {
    for (int co = 0; co < Cout; ++co) {
      double* orow = out + (static_cast<long>(b) * Cout + co) * Wo;
      for (int j = 0; j < Wo; ++j) orow[j] = bias ? bias[co] : 0.0;
    }
    for (int cl = 0; cl < Cl; ++cl) {
      const double* xr = x + (static_cast<long>(b) * Cl + cl) * W;
      for (int co = 0; co < Cout; ++co) {
        double* orow = out + (static_cast<long>(b) * Cout + co) * Wo;
        const double* wr = w + (static_cast<long>(cl) * Cout + co) * K;
        for (int i = 0; i < W; ++i)
          for (int k = 0; k < K; ++k)
            orow[wrap(i * factor + k - off, Wo)] += wr[k] * xr[i];
      }
    }
  }
}

void deconv1d_circular(const double* x, const double* w, const double* bias,
                       double* out, int B, int Cl, int W, int Cout, int K,
                       int factor) {
  const int Wo = W * factor;
  const int off = K / 2;
#pragma omp parallel for collapse(2) schedule(static) if (B * Cout > 8)
  for (int b = 0; b < B; ++b)
    for (int co = 0; co < Cout; ++co) {
      double* orow = out + (static_cast<long>(b) * Cout + co) * Wo;
      for (int j = 0; j < Wo; ++j) orow[j] = bias ? bias[co] : 0.0;
      for (int cl = 0; cl < Cl; ++cl) {
        const double* xr = x + (static_cast<long>(b) * Cl + cl) * W;
        const double* wr = w + (static_cast<long>(cl) * Cout + co) * K;
        for (int k = 0; k < K; ++k) {
          const double wk = wr[k];
          const int shift = k - off;
          for (int i = 0; i < W; ++i) orow[wrap(i * factor + shift, Wo)] += wk * xr[i];
        }
      }
    }
}

void deconv1d_circular_grad(const double* x, const double* w, const double* gy,
                            double* gx, double* gw, double* gbias, int B, int Cl,
                            int W, int Cout, int K, int factor) {
  const int Wo = W * factor;
  const int off = K / 2;
  // gx is a (circular) convolution of gy with the shared weights
  for (int b = 0; b < B; ++b)
    for (int cl = 0; cl < Cl; ++cl) {
      double* gxr = gx ? gx + (static_cast<long>(b) * Cl + cl) * W : nullptr;
      for (int co = 0; co < Cout; ++co) {
        const double* gyr = gy + (static_cast<long>(b) * Cout + co) * Wo;
        const double* wr = w + (static_cast<long>(cl) * Cout + co) * K;
        const double* xr = x + (static_cast<long>(b) * Cl + cl) * W;
        double* gwr = gw ? gw + (static_cast<long>(cl) * Cout + co) * K : nullptr;
        for (int k = 0; k < K; ++k) {
          const int shift = k - off;
          if (gxr) {
            const double wk = wr[k];
            for (int i = 0; i < W; ++i) gxr[i] += wk * gyr[wrap(i * factor + shift, Wo)];
          }
          if (gwr) {
            double s = 0.0;
            for (int i = 0; i < W; ++i) s += xr[i] * gyr[wrap(i * factor + shift, Wo)];
            gwr[k] += s;
          }
        }
      }
    }
  if (gbias) {
    for (int b = 0; b < B; ++b)
      for (int co = 0; co < Cout; ++co) {
        const double* gyr = gy + (static_cast<long>(b) * Cout + co) * Wo;
        double s = 0.0;
        for (int j = 0; j < Wo; ++j) s += gyr[j];
        gbias[co] += s;
      }
  }
}

void matmul_serial(const double* x, const double* w, const double* bias,
                   double* out, int B, int Fin, int Fout) {
  for (int b = 0; b < B; ++b)
    for (int j = 0; j < Fout; ++j) {
      double s = bias ? bias[j] : 0.0;
      for (int i = 0; i < Fin; ++i) s += x[static_cast<long>(b) * Fin + i] * w[static_cast<long>(i) * Fout + j];
      out[static_cast<long>(b) * Fout + j] = s;
    }
}

void matmul(const double* x, const double* w, const double* bias, double* out,
            int B, int Fin, int Fout) {
#pragma omp parallel for schedule(static) if (B > 16)
  for (int b = 0; b < B; ++b) {
    double* orow = out + static_cast<long>(b) * Fout;
    const double* xrow = x + static_cast<long>(b) * Fin;
    if (bias)
      for (int j = 0; j < Fout; ++j) orow[j] = bias[j];
    else
      for (int j = 0; j < Fout; ++j) orow[j] = 0.0;
    for (int i = 0; i < Fin; ++i) {
      const double xv = xrow[i];
      const double* wr = w + static_cast<long>(i) * Fout;
      for (int j = 0; j < Fout; ++j) orow[j] += xv * wr[j];
    }
  }
}

void matmul_grad(const double* x, const double* w, const double* gy, double* gx,
                 double* gw, double* gbias, int B, int Fin, int Fout) {
  if (gx) {
    for (int b = 0; b < B; ++b) {
      const double* gyr = gy + static_cast<long>(b) * Fout;
      double* gxr = gx + static_cast<long>(b) * Fin;
      for (int i = 0; i < Fin; ++i) {
        const double* wr = w + static_cast<long>(i) * Fout;
        double s = 0.0;
        for (int j = 0; j < Fout; ++j) s += wr[j] * gyr[j];
        gxr[i] += s;
      }
    }
  }
  if (gw) {
    for (int b = 0; b < B; ++b) {
      const double* gyr = gy + static_cast<long>(b) * Fout;
      const double* xr = x + static_cast<long>(b) * Fin;
      for (int i = 0; i < Fin; ++i) {
        const double xv = xr[i];
        double* gwr = gw + static_cast<long>(i) * Fout;
        for (int j = 0; j < Fout; ++j) gwr[j] += xv * gyr[j];
      }
    }
  }
  if (gbias) {
    for (int b = 0; b < B; ++b) {
      const double* gyr = gy + static_cast<long>(b) * Fout;
      for (int j = 0; j < Fout; ++j) gbias[j] += gyr[j];
    }
  }
}

}  // namespace ksc::kernels
