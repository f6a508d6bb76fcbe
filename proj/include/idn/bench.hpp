#pragma once

// Per-frame timing of a specialised network.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <string>
#include <thread>
#include <vector>

#include "idn/network.hpp"
#include "idn/random.hpp"

namespace idn {

struct BenchReport {
  std::size_t input_size = 0;
  std::size_t frames = 0;
  std::size_t threads = 1;
  std::uint64_t params_static = 0;
  std::uint64_t params_dynamic = 0;
  std::uint64_t params_fusion = 0;
  std::uint64_t params_total = 0;
  std::uint64_t macs = 0;          // per frame, counted during the timed run
  double specialize_time = 0;      // seconds; 0 when the network was loaded pre-specialised
  double frame_mean = 0;           // seconds
  double frame_median = 0;
  double frame_p95 = 0;
  double fps = 0;                  // 1 / frame_mean

  std::string text() const {
    char buf[512];
    std::snprintf(buf, sizeof buf,
                  "input        %zux%zu, %zu frames, %zu thread(s)\n"
                  "params       static %llu, dynamic %llu, fusion %llu, total %llu\n"
                  "macs/frame   %llu (%.4f G)\n"
                  "specialize   %.3f ms\n"
                  "frame time   mean %.3f ms, median %.3f ms, p95 %.3f ms\n"
                  "fps          %.2f\n",
                  input_size, input_size, frames, threads, (unsigned long long)params_static,
                  (unsigned long long)params_dynamic, (unsigned long long)params_fusion,
                  (unsigned long long)params_total, (unsigned long long)macs, macs / 1e9, specialize_time * 1e3,
                  frame_mean * 1e3, frame_median * 1e3, frame_p95 * 1e3, fps);
    return buf;
  }

  // One key=value per line.
  std::string machine() const {
    char buf[512];
    std::snprintf(buf, sizeof buf,
                  "input_size=%zu\nframes=%zu\nthreads=%zu\nparams_static=%llu\nparams_dynamic=%llu\n"
                  "params_fusion=%llu\nparams_total=%llu\nmacs=%llu\nspecialize_time=%.9g\nframe_mean=%.9g\n"
                  "frame_median=%.9g\nframe_p95=%.9g\nfps=%.9g\n",
                  input_size, frames, threads, (unsigned long long)params_static, (unsigned long long)params_dynamic,
                  (unsigned long long)params_fusion, (unsigned long long)params_total, (unsigned long long)macs,
                  specialize_time, frame_mean, frame_median, frame_p95, fps);
    return buf;
  }
};

struct BenchOptions {
  std::size_t size = 0;  // 0: the network's configured input size
  std::size_t frames = 200;
  std::size_t warmup = 5;
  std::size_t threads = 1;
  std::uint64_t seed = 1;
};

// Times net.swap on random frames. With threads > 1, frames run in rounds of
// `threads` concurrent calls and each frame is charged round_time / threads.
inline BenchReport bench(const SpecializedIdn& net, const BenchOptions& o, double specialize_time = 0) {
  if (o.frames == 0) throw std::invalid_argument("bench needs at least one frame");
  if (o.threads == 0) throw std::invalid_argument("bench needs at least one thread");
  const IdnArchitecture& arch = net.architecture();
  const std::size_t size = o.size ? o.size : arch.config.input_size;
  const Dims d{1, arch.config.in_channels, size, size};
  arch.check_input(d);

  BenchReport r;
  const Accounting acc = account(arch, size);
  r.input_size = size;
  r.frames = o.frames;
  r.threads = o.threads;
  r.params_static = acc.params_static;
  r.params_dynamic = acc.params_dynamic;
  r.params_fusion = acc.params_fusion;
  r.params_total = acc.params_total;
  r.specialize_time = specialize_time;

  Rng rng(o.seed);
  std::vector<Tensor> inputs;
  for (std::size_t i = 0; i < std::max<std::size_t>(o.threads, 4); ++i) inputs.push_back(rand_uniform<float>(d, rng));

  for (std::size_t i = 0; i < o.warmup; ++i) net.swap(inputs[i % inputs.size()]);

  using clock = std::chrono::steady_clock;
  std::vector<double> times;
  times.reserve(o.frames);
  MacCounter macs;
  std::size_t done = 0;
  while (done < o.frames) {
    const std::size_t n = std::min(o.threads, o.frames - done);
    const auto t0 = clock::now();
    if (n == 1) {
      MacCounter m;
      net.swap(inputs[done % inputs.size()], &m);
      if (done == 0) macs = m;
    } else {
      std::vector<std::thread> pool;
      std::vector<MacCounter> ms(n);
      for (std::size_t k = 0; k < n; ++k) {
        pool.emplace_back([&, k] { net.swap(inputs[(done + k) % inputs.size()], &ms[k]); });
      }
      for (auto& t : pool) t.join();
      if (done == 0) macs = ms[0];
    }
    const double dt = std::chrono::duration<double>(clock::now() - t0).count() / static_cast<double>(n);
    times.insert(times.end(), n, dt);
    done += n;
  }
  r.macs = macs.macs;

  double sum = 0;
  for (double t : times) sum += t;
  r.frame_mean = sum / static_cast<double>(times.size());
  std::sort(times.begin(), times.end());
  const std::size_t m = times.size();
  r.frame_median = m % 2 ? times[m / 2] : 0.5 * (times[m / 2 - 1] + times[m / 2]);
  r.frame_p95 = times[std::min(m - 1, static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(m))) - 1)];
  r.fps = 1.0 / r.frame_mean;
  return r;
}

}  // namespace idn
