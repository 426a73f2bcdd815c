#include <magic/kernels.hpp>

#include <chrono>
#include <cstdio>
#include <cstring>
#include <random>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

using namespace magic::kern;
using clock_type = std::chrono::steady_clock;

namespace {

double time_ms(int reps, auto&& fn) {
  fn();  // warm up
  const auto t0 = clock_type::now();
  for (int i = 0; i < reps; ++i) fn();
  const auto t1 = clock_type::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

struct Row {
  std::string name;
  double serial_ms;
  double parallel_ms;
  bool identical;
};

}  // namespace

int main(int argc, char** argv) {
  int reps = 5;
  if (argc > 1) reps = std::atoi(argv[1]);

  std::mt19937_64 rng(1234);
  std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
  auto fill = [&](std::vector<float>& v) {
    for (auto& x : v) x = dist(rng);
  };

  std::vector<Row> rows;

  {
    const std::size_t n = 512, p = 512, q = 512;
    std::vector<float> a(n * p), b(p * q), c_s(n * q), c_p(n * q);
    fill(a);
    fill(b);
    set_backend(Backend::serial);
    const double ts = time_ms(reps, [&] { matmul_nn(a.data(), b.data(), c_s.data(), n, p, q); });
    set_backend(Backend::parallel);
    const double tp = time_ms(reps, [&] { matmul_nn(a.data(), b.data(), c_p.data(), n, p, q); });
    rows.push_back({"matmul_nn 512x512x512", ts, tp,
                    std::memcmp(c_s.data(), c_p.data(), c_s.size() * sizeof(float)) == 0});
  }

  {
    const std::size_t batch = 16, seq = 64, heads = 8, hidden = 256;
    const std::size_t nrows = batch * seq;
    std::vector<float> q(nrows * hidden), k(nrows * hidden), v(nrows * hidden);
    std::vector<float> ctx_s(nrows * hidden), ctx_p(nrows * hidden);
    std::vector<float> attn_s(batch * heads * seq * seq), attn_p(attn_s.size());
    std::vector<std::uint8_t> valid(nrows, 1);
    fill(q);
    fill(k);
    fill(v);
    for (std::size_t i = 0; i < nrows; i += 9) valid[i] = 0;
    for (bool canonical : {false, true}) {
      set_backend(Backend::serial);
      const double ts = time_ms(reps, [&] {
        mha_fwd(q.data(), k.data(), v.data(), valid.data(), ctx_s.data(), attn_s.data(), batch,
                seq, heads, hidden, canonical);
      });
      set_backend(Backend::parallel);
      const double tp = time_ms(reps, [&] {
        mha_fwd(q.data(), k.data(), v.data(), valid.data(), ctx_p.data(), attn_p.data(), batch,
                seq, heads, hidden, canonical);
      });
      rows.push_back({std::string("mha_fwd b16 s64 h8 d256") + (canonical ? " canonical" : ""),
                      ts, tp,
                      std::memcmp(ctx_s.data(), ctx_p.data(), ctx_s.size() * sizeof(float)) == 0});
    }
    std::vector<float> dctx(nrows * hidden), dq_s(nrows * hidden), dk_s(nrows * hidden),
        dv_s(nrows * hidden), dq_p(nrows * hidden), dk_p(nrows * hidden), dv_p(nrows * hidden);
    fill(dctx);
    set_backend(Backend::serial);
    const double ts = time_ms(reps, [&] {
      std::fill(dq_s.begin(), dq_s.end(), 0.0f);
      std::fill(dk_s.begin(), dk_s.end(), 0.0f);
      std::fill(dv_s.begin(), dv_s.end(), 0.0f);
      mha_bwd(q.data(), k.data(), v.data(), valid.data(), attn_s.data(), dctx.data(), dq_s.data(),
              dk_s.data(), dv_s.data(), batch, seq, heads, hidden);
    });
    set_backend(Backend::parallel);
    const double tp = time_ms(reps, [&] {
      std::fill(dq_p.begin(), dq_p.end(), 0.0f);
      std::fill(dk_p.begin(), dk_p.end(), 0.0f);
      std::fill(dv_p.begin(), dv_p.end(), 0.0f);
      mha_bwd(q.data(), k.data(), v.data(), valid.data(), attn_p.data(), dctx.data(), dq_p.data(),
              dk_p.data(), dv_p.data(), batch, seq, heads, hidden);
    });
    rows.push_back({"mha_bwd b16 s64 h8 d256", ts, tp,
                    std::memcmp(dq_s.data(), dq_p.data(), dq_s.size() * sizeof(float)) == 0 &&
                        std::memcmp(dk_s.data(), dk_p.data(), dk_s.size() * sizeof(float)) == 0 &&
                        std::memcmp(dv_s.data(), dv_p.data(), dv_s.size() * sizeof(float)) == 0});
  }

  {
    const std::size_t nrows = 4096, cols = 256;
    std::vector<float> x(nrows * cols), gamma(cols, 1.0f), beta(cols, 0.0f);
    std::vector<float> y_s(nrows * cols), y_p(nrows * cols), mean(nrows), rstd(nrows);
    fill(x);
    set_backend(Backend::serial);
    const double ts = time_ms(reps, [&] {
      layer_norm_rows_fwd(x.data(), gamma.data(), beta.data(), 1e-5f, y_s.data(), mean.data(),
                          rstd.data(), nrows, cols);
    });
    set_backend(Backend::parallel);
    const double tp = time_ms(reps, [&] {
      layer_norm_rows_fwd(x.data(), gamma.data(), beta.data(), 1e-5f, y_p.data(), mean.data(),
                          rstd.data(), nrows, cols);
    });
    rows.push_back({"layer_norm 4096x256", ts, tp,
                    std::memcmp(y_s.data(), y_p.data(), y_s.size() * sizeof(float)) == 0});
  }

#ifdef _OPENMP
  std::printf("openmp threads: %d\n", omp_get_max_threads());
#else
  std::printf("openmp: not enabled\n");
#endif
  std::printf("%-36s %12s %12s %9s %10s\n", "kernel", "serial ms", "parallel ms", "speedup",
              "identical");
  bool all_ok = true;
  for (const auto& r : rows) {
    std::printf("%-36s %12.3f %12.3f %8.2fx %10s\n", r.name.c_str(), r.serial_ms, r.parallel_ms,
                r.serial_ms / r.parallel_ms, r.identical ? "yes" : "NO");
    all_ok = all_ok && r.identical;
  }
  if (!all_ok) {
    std::fprintf(stderr, "serial and parallel outputs diverged\n");
    return 1;
  }
  return 0;
}
