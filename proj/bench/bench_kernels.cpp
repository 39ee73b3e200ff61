// Times the OpenMP dense kernels against their serial reference
// implementations on training-shaped problems and checks that both produce
// bit-identical output.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <functional>
#include <vector>

#include <omp.h>

#include "atvc/common.hpp"
#include "atvc/nn.hpp"

using namespace atvc;

namespace {

using KernelFn = void (*)(const double*, const double*, double*, int, int, int, bool);
using SerialFn = void (*)(const double*, const double*, double*, int, int, int);

struct Shape {
  int n, k, m;
};

double time_ms(const std::function<void()>& fn, int reps) {
  double best = 1e300;
  for (int r = 0; r < reps; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    const auto t1 = std::chrono::steady_clock::now();
    best = std::min(best, std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  return best;
}

void run_case(const char* name, KernelFn kernel, SerialFn serial, const Shape& s, Rng& rng) {
  // a holds n*k doubles and b holds k*m in every layout: the transposed
  // variants only reinterpret the same element counts.
  std::vector<double> a(static_cast<std::size_t>(s.n) * s.k);
  std::vector<double> b(static_cast<std::size_t>(s.k) * s.m);
  for (double& v : a) v = rng.normal();
  for (double& v : b) v = rng.normal();
  std::vector<double> c_serial(static_cast<std::size_t>(s.n) * s.m);
  std::vector<double> c_parallel(c_serial.size());

  const int reps = c_serial.size() > 200000 ? 5 : 20;
  const double t_serial =
      time_ms([&] { serial(a.data(), b.data(), c_serial.data(), s.n, s.k, s.m); }, reps);
  const double t_parallel = time_ms(
      [&] { kernel(a.data(), b.data(), c_parallel.data(), s.n, s.k, s.m, true); }, reps);

  const bool match =
      std::memcmp(c_serial.data(), c_parallel.data(), c_serial.size() * sizeof(double)) == 0;
  std::printf("%-8s  %5d x %5d x %5d  %10.3f  %10.3f  %7.2fx  %s\n", name, s.n, s.k, s.m,
              t_serial, t_parallel, t_serial / t_parallel, match ? "identical" : "DIFFER");
}

}  // namespace

int main(int argc, char** argv) {
  std::uint64_t seed = 42;
  if (argc > 1) seed = std::strtoull(argv[1], nullptr, 10);

  std::printf("threads: %d\n", omp_get_max_threads());
  std::printf("%-8s  %21s  %10s  %10s  %8s  %s\n", "kernel", "n x k x m", "serial ms",
              "omp ms", "speedup", "outputs");

  // Row counts span a single decision step, one training minibatch, and a
  // deliberately oversized problem where threading should clearly win.
  const std::vector<Shape> shapes{
      {3, 12, 64}, {129, 12, 64}, {129, 64, 64}, {516, 64, 64}, {4096, 128, 128}};

  Rng rng(seed);
  for (const Shape& s : shapes) {
    run_case("dense_nn", dense_nn, dense_nn_serial, s, rng);
    run_case("dense_nt", dense_nt, dense_nt_serial, s, rng);
    run_case("dense_tn", dense_tn, dense_tn_serial, s, rng);
  }
  return 0;
}
