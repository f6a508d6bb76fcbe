#pragma once

// Identity-aware dynamic network: a U-Net of depthwise-separable stages whose
// synthesis-side kernels are installed per identity, plus a light fusion head
// that predicts a soft blend mask from reused feature maps.

#include <map>
#include <memory>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "idn/accounting.hpp"
#include "idn/autograd.hpp"
#include "idn/config.hpp"
#include "idn/params.hpp"

namespace idn {

// A layer with the resolution of its input relative to the network input
// (input side = size * up / down).
struct PlacedLayer {
  LayerSpec spec;
  std::size_t up = 1;
  std::size_t down = 1;

  Dims input_dims(std::size_t size, std::size_t batch = 1) const {
    const std::size_t s = size * up / down;
    return {batch, spec.c_in, s, s};
  }
};

struct StagePlan {
  std::string name;
  std::size_t upsample = 1;
  int skip = -1;  // index of the concatenated stage, or -1
  std::size_t dw = 0;
  std::size_t pw = 0;
  std::size_t channels = 0;
  std::size_t up = 1, down = 1;  // output resolution factor
};

class IdnArchitecture {
 public:
  ArchConfig config;
  std::vector<PlacedLayer> layers;  // main network, output head included
  std::vector<PlacedLayer> fusion_layers;
  std::vector<StagePlan> stages;
  std::vector<StagePlan> fusion_stages;
  std::vector<std::pair<std::size_t, std::size_t>> skip_links;  // (from stage, to stage)
  std::size_t head = 0;         // index of the output pointwise layer in `layers`
  std::size_t fusion_proj = 0;  // index of the mask projection in `fusion_layers`
  std::size_t fusion_source = 0;
  std::size_t fusion_upsample = 1;
  std::size_t divisor = 1;  // spatial sizes must be multiples of this

  static IdnArchitecture build(const ArchConfig& c);

  std::vector<const LayerSpec*> injection_points() const {
    std::vector<const LayerSpec*> out;
    for (const auto& l : layers) {
      if (l.spec.injection != Injection::none) out.push_back(&l.spec);
    }
    return out;
  }

  // Expected dims of every parameter tensor, static and installed.
  std::map<std::string, Dims> param_dims() const {
    std::map<std::string, Dims> out;
    auto add = [&](const LayerSpec& s) {
      switch (s.kind) {
        case LayerKind::depthwise: out[s.name + ".weight"] = {s.c_in, 1, s.kernel, s.kernel}; break;
        case LayerKind::pointwise: out[s.name + ".weight"] = {s.c_out, s.c_in, 1, 1}; break;
        case LayerKind::standard: out[s.name + ".weight"] = {s.c_out, s.c_in, s.kernel, s.kernel}; break;
        case LayerKind::fully_connected: out[s.name + ".weight"] = {s.c_out, s.c_in, 1, 1}; break;
        default: return;
      }
      if (s.has_bias) out[s.name + ".bias"] = {1, s.c_out, 1, 1};
    };
    for (const auto& l : layers) add(l.spec);
    for (const auto& l : fusion_layers) add(l.spec);
    return out;
  }

  // Parameters held by the template itself (injected kernels excluded).
  std::map<std::string, Dims> static_param_dims() const {
    auto all = param_dims();
    for (const LayerSpec* s : injection_points()) all.erase(s->name + ".weight");
    return all;
  }

  void check_input(const Dims& d) const {
    if (d.c != config.in_channels) {
      shape_fail("network input has ", d.c, " channels, expected ", config.in_channels);
    }
    if (d.h == 0 || d.w == 0 || d.h % divisor != 0 || d.w % divisor != 0) {
      shape_fail("network input spatial size ", d.h, "x", d.w, " must be a positive multiple of ", divisor);
    }
  }
};

namespace detail {

inline void reduce(std::size_t& up, std::size_t& down) {
  const std::size_t g = std::gcd(up, down);
  up /= g;
  down /= g;
}

}  // namespace detail

inline IdnArchitecture IdnArchitecture::build(const ArchConfig& c) {
  IdnArchitecture a;
  a.config = c;
  const std::size_t K = c.kernel;
  std::set<std::string> names;
  auto claim = [&](const std::string& n) {
    if (!names.insert(n).second) throw ConfigError("duplicate stage name '" + n + "'");
  };

  auto add_separable = [&](std::vector<PlacedLayer>& dst, StagePlan& plan, std::size_t in_ch, const StageConfig& s,
                           std::size_t& up, std::size_t& down) {
    LayerSpec dw{s.name + ".dw", LayerKind::depthwise, in_ch, in_ch, K, s.stride, K / 2, true,
                 s.inject ? Injection::predicted_depthwise : Injection::none};
    plan.dw = dst.size();
    dst.push_back({dw, up, down});
    down *= s.stride;
    detail::reduce(up, down);
    LayerSpec pw{s.name + ".pw", LayerKind::pointwise, in_ch, s.channels, 1, 1, 0, true,
                 s.inject ? Injection::modulated_pointwise : Injection::none};
    plan.pw = dst.size();
    dst.push_back({pw, up, down});
    LayerSpec act{s.name + ".act", LayerKind::activation, s.channels, s.channels};
    dst.push_back({act, up, down});
  };

  std::size_t ch = c.in_channels, up = 1, down = 1;
  for (std::size_t i = 0; i < c.stages.size(); ++i) {
    const StageConfig& s = c.stages[i];
    claim(s.name);
    StagePlan plan;
    plan.name = s.name;
    plan.upsample = s.upsample;
    if (s.upsample > 1) {
      LayerSpec u{s.name + ".up", LayerKind::upsample, ch, ch};
      u.factor = s.upsample;
      a.layers.push_back({u, up, down});
      up *= s.upsample;
      detail::reduce(up, down);
    }
    if (!s.skip.empty()) {
      int j = -1;
      for (std::size_t k = 0; k < i; ++k) {
        if (a.stages[k].name == s.skip) j = static_cast<int>(k);
      }
      if (j < 0) throw ConfigError("stage '" + s.name + "' skips from unknown or later stage '" + s.skip + "'");
      const StagePlan& from = a.stages[static_cast<std::size_t>(j)];
      if (from.up * down != up * from.down) {
        throw ConfigError("skip link '" + s.skip + "' -> '" + s.name + "' joins mismatched resolutions");
      }
      plan.skip = j;
      ch += from.channels;
      a.skip_links.emplace_back(static_cast<std::size_t>(j), i);
    }
    add_separable(a.layers, plan, ch, s, up, down);
    ch = s.channels;
    plan.channels = ch;
    plan.up = up;
    plan.down = down;
    a.stages.push_back(plan);
  }
  if (up != down) throw ConfigError("network output resolution differs from its input resolution");

  a.head = a.layers.size();
  a.layers.push_back({LayerSpec{"head.pw", LayerKind::pointwise, ch, c.out_channels, 1, 1, 0, true}, up, down});
  a.layers.push_back({LayerSpec{"head.act", LayerKind::activation, c.out_channels, c.out_channels}, up, down});

  // Fusion head
  int src = -1;
  for (std::size_t k = 0; k < a.stages.size(); ++k) {
    if (a.stages[k].name == c.fusion.source) src = static_cast<int>(k);
  }
  if (src < 0) throw ConfigError("fusion source '" + c.fusion.source + "' is not a stage");
  a.fusion_source = static_cast<std::size_t>(src);
  ch = a.stages[a.fusion_source].channels;
  up = a.stages[a.fusion_source].up;
  down = a.stages[a.fusion_source].down;
  for (const StageConfig& s : c.fusion.stages) {
    claim(s.name);
    if (!s.skip.empty() || s.upsample != 1 || s.inject) {
      throw ConfigError("fusion stage '" + s.name + "' may only set channels and stride");
    }
    StagePlan plan;
    plan.name = s.name;
    add_separable(a.fusion_layers, plan, ch, s, up, down);
    ch = s.channels;
    plan.channels = ch;
    plan.up = up;
    plan.down = down;
    a.fusion_stages.push_back(plan);
  }
  a.fusion_proj = a.fusion_layers.size();
  a.fusion_layers.push_back({LayerSpec{"fusion.proj", LayerKind::pointwise, ch, 1, 1, 1, 0, true}, up, down});
  a.fusion_layers.push_back({LayerSpec{"fusion.act", LayerKind::activation, 1, 1}, up, down});
  if (up != 1) throw ConfigError("fusion head must not run above input resolution");
  a.fusion_upsample = down;
  LayerSpec fu{"fusion.up", LayerKind::upsample, 1, 1};
  fu.factor = down;
  a.fusion_layers.push_back({fu, up, down});

  // Every intermediate side must be an integer: size must divide by each down/gcd.
  auto fold = [&](const PlacedLayer& l) {
    std::size_t u = l.up, d = l.down;
    detail::reduce(u, d);
    a.divisor = std::lcm(a.divisor, d);
    u = l.up;
    d = l.down * l.spec.stride;
    detail::reduce(u, d);
    a.divisor = std::lcm(a.divisor, d);
  };
  for (const auto& l : a.layers) {
    l.spec.validate();
    fold(l);
  }
  for (const auto& l : a.fusion_layers) {
    l.spec.validate();
    fold(l);
  }
  if (c.input_size % a.divisor != 0) {
    throw ConfigError("input_size " + std::to_string(c.input_size) + " is not a multiple of the downsample factor " +
                      std::to_string(a.divisor));
  }
  return a;
}

// ---------------------------------------------------------------------------
// Accounting

struct Accounting {
  std::size_t input_size = 0;
  std::uint64_t params_static = 0;   // stored kernels and biases of the main network
  std::uint64_t params_dynamic = 0;  // installed per identity
  std::uint64_t params_idn = 0;      // static + dynamic
  std::uint64_t params_fusion = 0;
  std::uint64_t params_total = 0;
  std::uint64_t macs_idn = 0;
  std::uint64_t macs_fusion = 0;
  std::uint64_t macs_total = 0;
};

inline Accounting account(const IdnArchitecture& arch, std::size_t input_size) {
  Accounting r;
  r.input_size = input_size;
  for (const auto& l : arch.layers) {
    if (l.spec.injection != Injection::none) {
      r.params_dynamic += l.spec.kernel_params();
      r.params_static += l.spec.bias_params();
    } else {
      r.params_static += count_params(l.spec);
    }
    r.macs_idn += count_macs(l.spec, l.input_dims(input_size));
  }
  for (const auto& l : arch.fusion_layers) {
    r.params_fusion += count_params(l.spec);
    r.macs_fusion += count_macs(l.spec, l.input_dims(input_size));
  }
  r.params_idn = r.params_static + r.params_dynamic;
  r.params_total = r.params_idn + r.params_fusion;
  r.macs_total = r.macs_idn + r.macs_fusion;
  return r;
}

// ---------------------------------------------------------------------------
// Template: architecture plus the static (never injected) parameters.

struct IdnTemplate {
  std::shared_ptr<const IdnArchitecture> arch;
  std::map<std::string, Tensor> static_params;

  const IdnArchitecture& architecture() const { return *arch; }
};

inline std::map<std::string, Tensor> init_static_params(const IdnArchitecture& a, std::uint64_t seed) {
  Rng rng(seed);
  std::map<std::string, Tensor> out;
  auto init_layer = [&](const LayerSpec& s, double gain) {
    const bool injected = s.injection != Injection::none;
    if (s.kind == LayerKind::depthwise && !injected) {
      out[s.name + ".weight"] = he_init<float>({s.c_in, 1, s.kernel, s.kernel}, s.kernel * s.kernel, rng, gain);
    } else if (s.kind == LayerKind::pointwise && !injected) {
      out[s.name + ".weight"] = he_init<float>({s.c_out, s.c_in, 1, 1}, s.c_in, rng, gain);
    } else if (s.kind != LayerKind::depthwise && s.kind != LayerKind::pointwise) {
      return;
    }
    if (s.has_bias) out[s.name + ".bias"] = Tensor({1, s.c_out, 1, 1});
  };
  for (const auto& l : a.layers) init_layer(l.spec, l.spec.name == "head.pw" ? 0.5 : 1.0);
  for (const auto& l : a.fusion_layers) init_layer(l.spec, l.spec.name == "fusion.proj" ? 0.1 : 1.0);
  return out;
}

// Validates the config and, when it declares a budget, rejects accounting
// above 110% of it.
inline IdnTemplate build_template(const ArchConfig& c) {
  auto arch = std::make_shared<IdnArchitecture>(IdnArchitecture::build(c));
  if (c.budget) {
    const Accounting acc = account(*arch, c.input_size);
    if (c.budget->params && acc.params_idn * 10 > c.budget->params * 11) {
      throw ConfigError("config '" + c.name + "' has " + std::to_string(acc.params_idn) +
                        " parameters, over 110% of its budget " + std::to_string(c.budget->params));
    }
    if (c.budget->macs && acc.macs_idn * 10 > c.budget->macs * 11) {
      throw ConfigError("config '" + c.name + "' needs " + std::to_string(acc.macs_idn) +
                        " MACs, over 110% of its budget " + std::to_string(c.budget->macs));
    }
  }
  IdnTemplate t;
  t.static_params = init_static_params(*arch, c.seed);
  t.arch = std::move(arch);
  return t;
}

// ---------------------------------------------------------------------------
// Forward graph. `p` must hold every parameter in arch.param_dims().

template <typename T>
struct IdnOutputs {
  Var<T> raw;   // (N, out_channels, H, W), tanh range
  Var<T> mask;  // (N, 1, H, W), sigmoid range
};

template <typename T>
IdnOutputs<T> forward_graph(const IdnArchitecture& arch, const ParamMap<T>& p, const Var<T>& input,
                            MacCounter* macs = nullptr) {
  arch.check_input(input.dims());
  const std::size_t K = arch.config.kernel;
  auto run = [&](const PlacedLayer& l, const Var<T>& x) {
    if (macs) macs->add(l.spec, x.dims());
    const std::string& n = l.spec.name;
    switch (l.spec.kind) {
      case LayerKind::depthwise:
        return ag::conv_depthwise(x, p.at(n + ".weight"), p.find(n + ".bias"), ConvArgs{l.spec.stride, K / 2});
      case LayerKind::pointwise: return ag::conv_pointwise(x, p.at(n + ".weight"), p.find(n + ".bias"));
      default: shape_fail("layer '", n, "' is not a convolution");
    }
  };

  std::vector<Var<T>> outs(arch.stages.size());
  Var<T> x = input;
  for (std::size_t i = 0; i < arch.stages.size(); ++i) {
    const StagePlan& s = arch.stages[i];
    if (s.upsample > 1) x = ag::upsample_nearest(x, s.upsample);
    if (s.skip >= 0) x = ag::concat(x, outs[static_cast<std::size_t>(s.skip)]);
    x = run(arch.layers[s.dw], x);
    x = run(arch.layers[s.pw], x);
    x = ag::act(x, arch.config.activation);
    outs[i] = x;
  }
  Var<T> raw = ag::act(run(arch.layers[arch.head], x), Activation::tanh);

  Var<T> f = outs[arch.fusion_source];
  for (const StagePlan& s : arch.fusion_stages) {
    f = run(arch.fusion_layers[s.dw], f);
    f = run(arch.fusion_layers[s.pw], f);
    f = ag::act(f, arch.config.activation);
  }
  f = ag::act(run(arch.fusion_layers[arch.fusion_proj], f), Activation::sigmoid);
  Var<T> mask = ag::upsample_bilinear(f, arch.fusion_upsample);
  return {raw, mask};
}

inline Tensor blend(const Tensor& raw, const Tensor& target, const Tensor& mask) {
  return ag::blend_values(raw, target, mask);
}

struct IdnResult {
  Tensor raw;
  Tensor mask;
};

// A network with every injection point filled. Immutable once built; forward
// is safe to call concurrently.
class SpecializedIdn {
 public:
  SpecializedIdn(std::shared_ptr<const IdnArchitecture> arch, const std::map<std::string, Tensor>& params)
      : arch_(std::move(arch)) {
    if (!arch_) throw std::invalid_argument("specialised network needs an architecture");
    for (const auto& [name, dims] : arch_->param_dims()) {
      auto it = params.find(name);
      if (it == params.end()) {
        const bool injected = !arch_->static_param_dims().count(name);
        throw MissingParamError(injected ? "injection point '" + name + "' has no installed kernel"
                                         : "missing parameter '" + name + "'");
      }
      if (it->second.dims() != dims) {
        shape_fail("parameter '", name, "' has dims ", it->second.dims().str(), ", expected ", dims.str());
      }
      params_.set(name, Var<float>::constant(it->second));
    }
  }

  const IdnArchitecture& architecture() const { return *arch_; }
  std::shared_ptr<const IdnArchitecture> architecture_ptr() const { return arch_; }
  std::map<std::string, Tensor> tensors() const { return params_.tensors(); }
  const ParamMap<float>& params() const { return params_; }

  IdnResult forward(const Tensor& target, MacCounter* macs = nullptr) const {
    auto out = forward_graph(*arch_, params_, Var<float>::constant(target), macs);
    return {out.raw.value(), out.mask.value()};
  }

  Tensor swap(const Tensor& target, MacCounter* macs = nullptr) const {
    const IdnResult r = forward(target, macs);
    return blend(r.raw, target, r.mask);
  }

 private:
  std::shared_ptr<const IdnArchitecture> arch_;
  ParamMap<float> params_;
};

}  // namespace idn
