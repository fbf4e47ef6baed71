// Serial reference vs OpenMP kernels. Arg(0) = serial, Arg(1) = parallel.

#include <benchmark/benchmark.h>

#include <vector>

#include "nimg/kernels.hpp"
#include "nimg/rng.hpp"

namespace k = nimg::kernels;

namespace {

std::vector<double> random_vec(std::size_t n, std::uint64_t seed) {
  nimg::Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

k::Exec exec_of(const benchmark::State& st) { return st.range(0) ? k::Exec::Parallel : k::Exec::Serial; }

void BM_MatmulNT(benchmark::State& st) {
  const std::int64_t m = 256, kk = 256, n = 256;
  const auto a = random_vec(m * kk, 1), b = random_vec(n * kk, 2);
  std::vector<double> c(m * n);
  for (auto _ : st) {
    k::matmul_nt(a, b, c, m, kk, n, exec_of(st));
    benchmark::DoNotOptimize(c.data());
  }
  st.SetItemsProcessed(st.iterations() * 2 * m * kk * n);
}

void BM_GroupedSwiGLU(benchmark::State& st) {
  const k::GroupedSwiGLUDims dims{8, 64, 128};
  const std::int64_t rows_per = 64, N = dims.experts * rows_per;
  std::vector<std::int64_t> offsets;
  for (std::int64_t e = 0; e <= dims.experts; ++e) offsets.push_back(e * rows_per);
  const auto x = random_vec(N * dims.d, 3);
  const auto w1 = random_vec(dims.experts * dims.h * dims.d, 4), w3 = random_vec(dims.experts * dims.h * dims.d, 5),
             w2 = random_vec(dims.experts * dims.d * dims.h, 6);
  std::vector<double> pg(N * dims.h), pu(N * dims.h), out(N * dims.d);
  for (auto _ : st) {
    k::grouped_swiglu_forward(x, offsets, w1, w3, w2, dims, pg, pu, out, exec_of(st));
    benchmark::DoNotOptimize(out.data());
  }
  st.SetItemsProcessed(st.iterations() * 6 * N * dims.d * dims.h);
}

void BM_Attention(benchmark::State& st) {
  const k::AttentionDims dims{2, 256, 256, 8, 2, 32};
  const auto q = random_vec(dims.batch * dims.sq * dims.hq * dims.head_dim, 7);
  const auto kv = random_vec(dims.batch * dims.sk * dims.hkv * dims.head_dim, 8);
  std::vector<double> probs(dims.batch * dims.hq * dims.sq * dims.sk), out(q.size());
  for (auto _ : st) {
    k::attention_forward(q, kv, kv, {}, dims, probs, out, exec_of(st));
    benchmark::DoNotOptimize(out.data());
  }
  st.SetItemsProcessed(st.iterations() * 4 * dims.batch * dims.hq * dims.sq * dims.sk * dims.head_dim);
}

}  // namespace

BENCHMARK(BM_MatmulNT)->Arg(0)->Arg(1)->ArgName("parallel")->Unit(benchmark::kMillisecond);
BENCHMARK(BM_GroupedSwiGLU)->Arg(0)->Arg(1)->ArgName("parallel")->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Attention)->Arg(0)->Arg(1)->ArgName("parallel")->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
