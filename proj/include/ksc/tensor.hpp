#pragma once

#include <cstddef>
#include <vector>

namespace ksc {

using Shape = std::vector<int>;

inline long numel(const Shape& s) {
  long n = 1;
  for (int d : s) n *= d;
  return n;
}

// Dense row-major value container. (B, C, W) for batched fields,
// (B, F) for batched feature vectors, (1) for scalars.
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), data(numel(shape), 0.0) {}
  Tensor(Shape s, double fill) : shape(std::move(s)), data(numel(shape), fill) {}

  long size() const { return static_cast<long>(data.size()); }
  double& operator[](long i) { return data[i]; }
  double operator[](long i) const { return data[i]; }

  static Tensor scalar(double v) {
    Tensor t({1});
    t.data[0] = v;
    return t;
  }
};

// Raw compute kernels behind the differentiable ops. Each hot kernel has an
// OpenMP-parallel implementation and a plain serial reference; tests pin one
// against the other and the benchmark tool compares their throughput.
namespace kernels {

// out[b,co,i] = sum_{ci,k} w[co,ci,k] * x[b,ci,(i*stride+k-K/2) mod W]
void conv1d_circular(const double* x, const double* w, const double* bias,
                     double* out, int B, int Cin, int W, int Cout, int K,
                     int stride);
void conv1d_circular_serial(const double* x, const double* w, const double* bias,
                            double* out, int B, int Cin, int W, int Cout, int K,
                            int stride);
// gradients of the above; gx/gw/gbias may be null to skip
void conv1d_circular_grad(const double* x, const double* w, const double* gy,
                          double* gx, double* gw, double* gbias, int B, int Cin,
                          int W, int Cout, int K, int stride);

// scatter adjoint of the stride-`factor` conv with weight w[Cl,Cout,K]:
// out[b,cout,(i*factor+k-K/2) mod (W*factor)] += w[cl,cout,k] * x[b,cl,i]
void deconv1d_circular(const double* x, const double* w, const double* bias,
                       double* out, int B, int Cl, int W, int Cout, int K,
                       int factor);
void deconv1d_circular_serial(const double* x, const double* w, const double* bias,
                              double* out, int B, int Cl, int W, int Cout, int K,
                              int factor);
void deconv1d_circular_grad(const double* x, const double* w, const double* gy,
                            double* gx, double* gw, double* gbias, int B, int Cl,
                            int W, int Cout, int K, int factor);

// out[b,j] = sum_i x[b,i] * w[i,j] + bias[j]
void matmul(const double* x, const double* w, const double* bias, double* out,
            int B, int Fin, int Fout);
void matmul_serial(const double* x, const double* w, const double* bias,
                   double* out, int B, int Fin, int Fout);
void matmul_grad(const double* x, const double* w, const double* gy, double* gx,
                 double* gw, double* gbias, int B, int Fin, int Fout);

}  // namespace kernels

}  // namespace ksc
