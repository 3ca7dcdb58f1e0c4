// Throughput comparison of the parallel compute kernels against their serial
// reference implementations.
#include <chrono>
#include <cstdio>
#include <functional>
#include <random>
#include <vector>

#include "ksc/tensor.hpp"

using namespace ksc;

namespace {

double time_ms(const std::function<void()>& fn, int reps) {
  fn();  // warm up
  auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < reps; ++i) fn();
  auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

std::vector<double> randn(size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> out(n);
  for (double& v : out) v = g(rng);
  return out;
}

void report(const char* name, double serial_ms, double parallel_ms) {
  std::printf("%-24s serial %8.3f ms   parallel %8.3f ms   speedup %.2fx\n",
              name, serial_ms, parallel_ms, serial_ms / parallel_ms);
}

}  // namespace

int main() {
  std::mt19937_64 rng(1);
  const int reps = 20;

  {
    const int B = 16, Cin = 32, W = 64, Cout = 32, K = 5, stride = 1;
    auto x = randn(static_cast<size_t>(B) * Cin * W, rng);
    auto w = randn(static_cast<size_t>(Cout) * Cin * K, rng);
    auto b = randn(Cout, rng);
    std::vector<double> out(static_cast<size_t>(B) * Cout * W);
    double ts = time_ms([&] {
      kernels::conv1d_circular_serial(x.data(), w.data(), b.data(), out.data(),
                                      B, Cin, W, Cout, K, stride);
    }, reps);
    double tp = time_ms([&] {
      kernels::conv1d_circular(x.data(), w.data(), b.data(), out.data(), B,
                               Cin, W, Cout, K, stride);
    }, reps);
    report("conv1d_circular", ts, tp);
  }

  {
    const int B = 16, Cl = 32, W = 16, Cout = 16, K = 6, factor = 2;
    auto x = randn(static_cast<size_t>(B) * Cl * W, rng);
    auto w = randn(static_cast<size_t>(Cl) * Cout * K, rng);
    auto b = randn(Cout, rng);
    std::vector<double> out(static_cast<size_t>(B) * Cout * W * factor);
    double ts = time_ms([&] {
      kernels::deconv1d_circular_serial(x.data(), w.data(), b.data(),
                                        out.data(), B, Cl, W, Cout, K, factor);
    }, reps);
    double tp = time_ms([&] {
      kernels::deconv1d_circular(x.data(), w.data(), b.data(), out.data(), B,
                                 Cl, W, Cout, K, factor);
    }, reps);
    report("deconv1d_circular", ts, tp);
  }

  {
    const int B = 256, Fin = 256, Fout = 256;
    auto x = randn(static_cast<size_t>(B) * Fin, rng);
    auto w = randn(static_cast<size_t>(Fin) * Fout, rng);
    auto b = randn(Fout, rng);
    std::vector<double> out(static_cast<size_t>(B) * Fout);
    double ts = time_ms([&] {
      kernels::matmul_serial(x.data(), w.data(), b.data(), out.data(), B, Fin,
                             Fout);
    }, reps);
    double tp = time_ms([&] {
      kernels::matmul(x.data(), w.data(), b.data(), out.data(), B, Fin, Fout);
    }, reps);
    report("matmul", ts, tp);
  }
  return 0;
}
