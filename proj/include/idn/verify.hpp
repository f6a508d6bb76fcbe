#pragma once

// Self-check suite behind `idn verify`. Each check is quick and
// self-contained; failures carry a short diagnostic.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "idn/injection.hpp"
#include "idn/losses.hpp"
#include "idn/model_io.hpp"

namespace idn {

struct CheckResult {
  std::string name;
  bool ok = false;
  std::string detail;
};

namespace verify_detail {

inline std::string fmt(double v) {
  char b[32];
  std::snprintf(b, sizeof b, "%.3g", v);
  return b;
}

inline double direct_conv_maxdiff(Rng& rng) {
  double worst = 0;
  for (int rep = 0; rep < 60; ++rep) {
    const std::size_t n = 1 + rng.index(2), c = 1 + rng.index(8), h = 3 + rng.index(14), w = 3 + rng.index(14);
    const std::size_t co = 1 + rng.index(8), k = 1 + 2 * rng.index(2), s = 1 + rng.index(2), p = rng.index(2);
    const Tensor x = rand_uniform<float>({n, c, h, w}, rng);
    const std::size_t oh = (h + 2 * p - k) / s + 1, ow = (w + 2 * p - k) / s + 1;
    auto in = [&](std::size_t b, std::size_t ch, long y, long xx) -> double {
      if (y < 0 || xx < 0 || y >= static_cast<long>(h) || xx >= static_cast<long>(w)) return 0;
      return x.at(b, ch, static_cast<std::size_t>(y), static_cast<std::size_t>(xx));
    };
    // standard
    const Tensor ws = rand_uniform<float>({co, c, k, k}, rng), bs = rand_uniform<float>({1, co, 1, 1}, rng);
    const Tensor ys = ops::conv2d_standard<float>(x, ws, bs.values(), ConvArgs{s, p});
    // depthwise
    const Tensor wd = rand_uniform<float>({c, 1, k, k}, rng);
    const Tensor yd = ops::conv2d_depthwise<float>(x, wd, {}, ConvArgs{s, p});
    // pointwise
    const Tensor wp = rand_uniform<float>({co, c, 1, 1}, rng);
    const Tensor yp = ops::conv2d_pointwise<float>(x, wp, {});
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t xx = 0; xx < ow; ++xx) {
          for (std::size_t o = 0; o < co; ++o) {
            double acc = bs[o];
            for (std::size_t i = 0; i < c; ++i)
              for (std::size_t u = 0; u < k; ++u)
                for (std::size_t v = 0; v < k; ++v)
                  acc += ws.at(o, i, u, v) * in(b, i, long(y * s + u) - long(p), long(xx * s + v) - long(p));
            worst = std::max(worst, std::abs(acc - ys.at(b, o, y, xx)));
          }
          for (std::size_t i = 0; i < c; ++i) {
            double acc = 0;
            for (std::size_t u = 0; u < k; ++u)
              for (std::size_t v = 0; v < k; ++v)
                acc += wd.at(i, 0, u, v) * in(b, i, long(y * s + u) - long(p), long(xx * s + v) - long(p));
            worst = std::max(worst, std::abs(acc - yd.at(b, i, y, xx)));
          }
        }
      }
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t xx = 0; xx < w; ++xx)
          for (std::size_t o = 0; o < co; ++o) {
            double acc = 0;
            for (std::size_t i = 0; i < c; ++i) acc += wp.at(o, i, 0, 0) * x.at(b, i, y, xx);
            worst = std::max(worst, std::abs(acc - yp.at(b, o, y, xx)));
          }
    }
  }
  return worst;
}

using DGraph = std::function<Var<double>(const std::vector<Var<double>>&)>;

// Max over inputs of max|analytic - numeric| / max(max|numeric|, 1e-6),
// central differences with h = 1e-4.
inline double fd_error(const DGraph& f, std::vector<Tensor64> inputs) {
  std::vector<Var<double>> vs;
  for (auto& t : inputs) vs.push_back(Var<double>::parameter(t));
  backward(f(vs));
  double worst = 0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor64 g = vs[k].grad();
    double num_max = 0, diff_max = 0;
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      auto eval = [&](double delta) {
        std::vector<Var<double>> cs;
        for (std::size_t j = 0; j < inputs.size(); ++j) {
          Tensor64 t = inputs[j];
          if (j == k) t[i] += delta;
          cs.push_back(Var<double>::constant(t));
        }
        return f(cs).value().item();
      };
      const double num = (eval(1e-4) - eval(-1e-4)) / 2e-4;
      num_max = std::max(num_max, std::abs(num));
      diff_max = std::max(diff_max, std::abs(num - g[i]));
    }
    worst = std::max(worst, diff_max / std::max(num_max, 1e-6));
  }
  return worst;
}

}  // namespace verify_detail

// `config_dir` holds the shipped configs (idn_default.json, idn_toy64.json).
inline std::vector<CheckResult> run_verification(const std::string& config_dir) {
  using namespace verify_detail;
  std::vector<CheckResult> out;
  auto run = [&](const std::string& name, const std::function<std::string()>& body) {
    CheckResult r{name, true, ""};
    try {
      r.detail = body();
      if (r.detail.rfind("FAIL", 0) == 0) r.ok = false;
    } catch (const std::exception& e) {
      r.ok = false;
      r.detail = std::string("FAIL: ") + e.what();
    }
    out.push_back(r);
  };

  run("default config budget", [&] {
    const ArchConfig cfg = load_config(config_dir + "/idn_default.json");
    const Accounting a = account(IdnArchitecture::build(cfg), 224);
    const bool ok = a.params_total >= 490000 && a.params_total <= 500000 &&
                    std::abs(double(a.params_idn) - 413000) <= 0.02 * 413000 &&
                    std::abs(double(a.params_fusion) - 83000) <= 0.02 * 83000 &&
                    std::abs(double(a.macs_total) - 333e6) <= 0.15 * 333e6;
    return std::string(ok ? "" : "FAIL: ") + "params " + std::to_string(a.params_total) + " (idn " +
           std::to_string(a.params_idn) + ", fusion " + std::to_string(a.params_fusion) + "), macs " +
           std::to_string(a.macs_total);
  });

  run("demodulation identity", [&] {
    Rng rng(101);
    double worst = 0, worst_scale = 0;
    for (int rep = 0; rep < 200; ++rep) {
      const std::size_t ci = 1 + rng.index(32), co = 1 + rng.index(32);
      const Tensor w = randn<float>({ci, co, 1, 1}, rng);
      const Tensor d = demodulate(w, DemodEpsilon{});
      for (std::size_t j = 0; j < co; ++j) {
        double s = 0, sd = 0;
        for (std::size_t i = 0; i < ci; ++i) {
          s += double(w.at(i, j, 0, 0)) * w.at(i, j, 0, 0);
          sd += double(d.at(i, j, 0, 0)) * d.at(i, j, 0, 0);
        }
        const double expect = s / (s + DemodEpsilon::kDefault);
        worst = std::max(worst, std::abs(sd - expect) / expect);
      }
      const float c = static_cast<float>(rng.uniform(0.1, 10.0));
      Tensor wc = w;
      for (auto& v : wc.values()) v *= c;
      worst_scale = std::max(worst_scale, double(max_abs_diff(demodulate(wc, DemodEpsilon::exact()),
                                                              demodulate(w, DemodEpsilon::exact()))));
    }
    const bool ok = worst <= 1e-6 && worst_scale <= 1e-6;
    return std::string(ok ? "" : "FAIL: ") + "norm rel err " + fmt(worst) + ", scale diff " + fmt(worst_scale);
  });

  run("convolution oracles", [&] {
    Rng rng(202);
    const double d = direct_conv_maxdiff(rng);
    return std::string(d <= 1e-5 ? "" : "FAIL: ") + "max abs diff " + fmt(d);
  });

  run("gradients", [&] {
    Rng rng(303);
    auto r = [&](Dims d) {
      Tensor64 t = randn<double>(d, rng);
      for (auto& v : t.values())
        if (std::abs(v) < 1e-2) v += 0.05;  // keep away from activation kinks
      return t;
    };
    struct Case {
      const char* name;
      DGraph f;
      std::vector<Tensor64> in;
    };
    const DemodEpsilon eps{1e-3};
    std::vector<Case> cases = {
        {"conv_depthwise", [](auto& v) { return ag::mean(ag::square(ag::conv_depthwise(v[0], v[1], v[2], {2, 1}))); },
         {r({1, 3, 6, 6}), r({3, 1, 3, 3}), r({1, 3, 1, 1})}},
        {"conv_pointwise", [](auto& v) { return ag::mean(ag::square(ag::conv_pointwise(v[0], v[1], v[2]))); },
         {r({1, 3, 4, 4}), r({5, 3, 1, 1}), r({1, 5, 1, 1})}},
        {"conv_standard", [](auto& v) { return ag::mean(ag::square(ag::conv_standard(v[0], v[1], v[2], {1, 1}))); },
         {r({1, 2, 5, 5}), r({3, 2, 3, 3}), r({1, 3, 1, 1})}},
        {"leaky_relu", [](auto& v) { return ag::mean(ag::square(ag::act(v[0], Activation::leaky_relu))); },
         {r({1, 2, 3, 3})}},
        {"demodulate", [eps](auto& v) { return ag::mean(ag::square(ag::demodulate(ag::modulate(v[0], v[1]), eps))); },
         {r({4, 3, 1, 1}), r({1, 4, 1, 1})}},
        {"blend", [](auto& v) { return ag::mean(ag::square(ag::blend(v[0], v[1], v[2]))); },
         {r({1, 3, 2, 2}), r({1, 3, 2, 2}), r({1, 1, 2, 2})}},
        {"cosine", [](auto& v) { return ag::cosine_similarity(v[0], v[1]); }, {r({1, 6, 1, 1}), r({1, 6, 1, 1})}},
        {"total_loss", [](auto& v) {
           return total_loss_graph<double>(ag::mean_abs_diff(v[0], v[1]), ag::mean_sq_diff(v[0], v[1]),
                                           ag::mean(ag::square(v[0])), ag::mean(v[1]), ag::mean(v[0]), {}, 0.37);
         },
         {r({1, 2, 3, 3}), r({1, 2, 3, 3})}},
    };
    std::string worst_name;
    double worst = 0;
    for (const auto& c : cases) {
      const double e = fd_error(c.f, c.in);
      if (e > worst) worst = e, worst_name = c.name;
    }
    return std::string(worst <= 1e-4 ? "" : "FAIL: ") + "worst rel err " + fmt(worst) + " (" + worst_name + ")";
  });

  run("loss arithmetic", [&] {
    const LossBundle b = total_loss({0.2, 0.3, 0.4, 0.5, 0.1}, LossWeights{}, 0.5);
    const double e = std::abs(b.total - 10.05);
    return std::string(e <= 1e-6 ? "" : "FAIL: ") + "total " + fmt(b.total);
  });

  // The remaining checks share a toy network.
  const ArchConfig toy = load_config(config_dir + "/idn_toy64.json");
  const IdnTemplate tmpl = build_template(toy);
  const IinParams<float> iin = IinParams<float>::init(*tmpl.arch, 5);
  Rng rng(404);
  const IdentityEmbedding z = IdentityEmbedding::normalize(randn<float>({1, 512, 1, 1}, rng));
  const Tensor frame = rand_uniform<float>({1, 3, toy.input_size, toy.input_size}, rng);

  run("weight file round trip", [&] {
    const TensorMap m = checkpoint_to_tensors(tmpl, iin);
    const auto bytes = encode_idnw(m);
    const TensorMap back = decode_idnw(bytes);
    if (back.size() != m.size()) return std::string("FAIL: tensor count changed");
    for (const auto& [k, t] : m) {
      const Tensor& u = back.at(k);
      if (u.dims() != t.dims() || std::memcmp(u.data(), t.data(), 4 * t.size()) != 0) return "FAIL: '" + k + "' changed";
    }
    if (encode_idnw(back) != bytes) return std::string("FAIL: re-encoding differs");
    return std::to_string(m.size()) + " tensors, " + std::to_string(bytes.size()) + " bytes";
  });

  run("amortization", [&] {
    const std::uint64_t c0 = instrument::iin_evaluations();
    const SpecializedIdn net = specialize(tmpl, run_iin(z, iin));
    const std::uint64_t c1 = instrument::iin_evaluations();
    MacCounter m1, m2;
    net.swap(frame, &m1);
    const SpecializedIdn reloaded = specialized_from_tensors(decode_idnw(encode_idnw(specialized_to_tensors(net))));
    reloaded.swap(frame, &m2);
    const std::uint64_t c2 = instrument::iin_evaluations();
    const std::uint64_t points = tmpl.arch->injection_points().size();
    const std::uint64_t expect = account(*tmpl.arch, toy.input_size).macs_total;
    const bool ok = c1 - c0 == points && c2 == c1 && m1.macs == expect && m2.macs == expect;
    return std::string(ok ? "" : "FAIL: ") + "IIN stacks run " + std::to_string(c1 - c0) + " for " +
           std::to_string(points) + " points, " + std::to_string(c2 - c1) + " during frames; macs " +
           std::to_string(m1.macs) + " / " + std::to_string(m2.macs);
  });

  run("determinism", [&] {
    const SpecializedIdn a = specialize(tmpl, run_iin(z, iin));
    const SpecializedIdn b = specialize(tmpl, run_iin(z, iin));
    const Tensor ya = a.swap(frame), yb = b.swap(frame);
    const bool same = std::memcmp(ya.data(), yb.data(), 4 * ya.size()) == 0 &&
                      encode_idnw(specialized_to_tensors(a)) == encode_idnw(specialized_to_tensors(b));
    return std::string(same ? "" : "FAIL: ") + "repeated specialise + swap " + (same ? "identical" : "differ");
  });

  return out;
}

}  // namespace idn
