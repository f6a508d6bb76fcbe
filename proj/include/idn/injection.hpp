#pragma once

// Identity injection: embedding providers, the per-layer prediction and
// modulation stacks, and specialisation of a template for one identity.

#include <map>
#include <string>
#include <vector>

#include "idn/dynamic_conv.hpp"
#include "idn/network.hpp"

namespace idn {

// ---------------------------------------------------------------------------
// Embedding providers

template <typename T>
class EmbeddingModel {
 public:
  virtual ~EmbeddingModel() = default;
  virtual std::size_t input_size() const = 0;
  virtual std::size_t dim() const = 0;
  // (N, 3, s, s) -> (N, dim, 1, 1), each item unit-norm.
  virtual Var<T> embed_graph(const Var<T>& faces) const = 0;

  void check_input(const Dims& d) const {
    if (d.c != 3 || d.h != input_size() || d.w != input_size()) {
      shape_fail("embedding provider expects (N, 3, ", input_size(), ", ", input_size(), ") faces, got ", d.str());
    }
  }
};

using EmbeddingProvider = EmbeddingModel<float>;

inline constexpr std::uint64_t kStubEmbeddingSeed = 0x1d3b5eedULL;

// Untrained, fixed-seed stand-in for a face recognition network: three
// strided 3x3 convs with tanh, global pooling, a linear map to `dim`, and
// normalisation. Weights can also be supplied (e.g. from an exported file)
// under the same names.
template <typename T>
class StubEmbeddingProvider : public EmbeddingModel<T> {
 public:
  static constexpr std::size_t kWidths[3] = {16, 32, 64};

  explicit StubEmbeddingProvider(std::size_t input_size = 112, std::uint64_t seed = kStubEmbeddingSeed,
                                 std::size_t dim = kEmbeddingDim)
      : input_size_(input_size), dim_(dim) {
    check_size();
    Rng rng(seed);
    std::size_t in = 3;
    for (std::size_t i = 0; i < 3; ++i) {
      const std::string n = "embed.conv" + std::to_string(i);
      // Generated in float so float and double providers hold identical values.
      params_.set(n + ".weight",
                  Var<T>::constant(he_init<float>({kWidths[i], in, 3, 3}, in * 9, rng, 1.5).template cast<T>()));
      params_.set(n + ".bias",
                  Var<T>::constant(randn<float>({1, kWidths[i], 1, 1}, rng, 0.1).template cast<T>()));
      in = kWidths[i];
    }
    params_.set("embed.fc.weight", Var<T>::constant(he_init<float>({dim, in, 1, 1}, in, rng).template cast<T>()));
  }

  StubEmbeddingProvider(std::size_t input_size, const std::map<std::string, BasicTensor<T>>& weights)
      : input_size_(input_size) {
    check_size();
    params_ = ParamMap<T>::constants(weights);
    dim_ = params_.at("embed.fc.weight").dims().n;
    for (std::size_t i = 0; i < 3; ++i) {
      const std::string n = "embed.conv" + std::to_string(i);
      params_.at(n + ".weight");
      params_.at(n + ".bias");
    }
  }

  std::size_t input_size() const override { return input_size_; }
  std::size_t dim() const override { return dim_; }
  std::map<std::string, BasicTensor<T>> tensors() const { return params_.tensors(); }

  Var<T> embed_graph(const Var<T>& faces) const override {
    this->check_input(faces.dims());
    Var<T> x = faces;
    for (std::size_t i = 0; i < 3; ++i) {
      const std::string n = "embed.conv" + std::to_string(i);
      x = ag::act(ag::conv_standard(x, params_.at(n + ".weight"), params_.at(n + ".bias"), ConvArgs{2, 1}),
                  Activation::tanh);
    }
    x = ag::linear(ag::global_avg_pool(x), params_.at("embed.fc.weight"), Var<T>());
    return ag::l2_normalize(x);
  }

 private:
  void check_size() const {
    if (input_size_ == 0 || input_size_ % 8 != 0) {
      throw std::invalid_argument("stub embedding input size must be a positive multiple of 8");
    }
  }

  std::size_t input_size_;
  std::size_t dim_ = kEmbeddingDim;
  ParamMap<T> params_;
};

// Area-downsamples an image whose side is an integer multiple of `size`.
template <typename T>
Var<T> fit_to_size(const Var<T>& img, std::size_t size) {
  const Dims d = img.dims();
  if (d.h == size && d.w == size) return img;
  if (d.h != d.w || size == 0 || d.h % size != 0) {
    shape_fail("image ", d.h, "x", d.w, " cannot be reduced to ", size, "x", size, " by an integer factor");
  }
  return ag::avg_pool(img, d.h / size);
}

inline IdentityEmbedding embed_identity(const Tensor& source, const EmbeddingProvider& provider) {
  if (source.dims().n != 1) shape_fail("embed_identity takes one face, got batch ", source.dims().n);
  return IdentityEmbedding(provider.embed_graph(Var<float>::constant(source)).value());
}

// ---------------------------------------------------------------------------
// IIN parameters: one prediction stack per injected depthwise layer, one
// modulation stack plus base kernel W_p (C_in, C_out, 1, 1) per injected
// pointwise layer.

inline PredictorShape predictor_shape(const IinConfig& c, const LayerSpec& s) {
  return {c.embedding_dim, c.predictor_hidden1, c.predictor_hidden2, s.c_in, s.kernel};
}

inline ModulatorShape modulator_shape(const IinConfig& c, const LayerSpec& s) {
  return {c.embedding_dim, c.modulator_hidden, s.c_in};
}

template <typename T>
struct IinParams {
  std::vector<LayerSpec> points;
  std::map<std::string, PredictorParams<T>> predictors;
  std::map<std::string, ModulatorParams<T>> modulators;
  std::map<std::string, Var<T>> bases;

  static IinParams init(const IdnArchitecture& a, std::uint64_t seed) {
    IinParams p;
    Rng root(seed);
    for (const LayerSpec* s : a.injection_points()) {
      p.points.push_back(*s);
      Rng rng = root.fork(p.points.size());
      if (s->injection == Injection::predicted_depthwise) {
        p.predictors.emplace(s->name, PredictorParams<T>::init(predictor_shape(a.config.iin, *s), rng));
      } else {
        p.modulators.emplace(s->name, ModulatorParams<T>::init(modulator_shape(a.config.iin, *s), rng));
        p.bases.emplace(s->name, Var<T>::parameter(he_init<T>({s->c_in, s->c_out, 1, 1}, s->c_in, rng)));
      }
    }
    return p;
  }

  ParamMap<T> to_map() const {
    ParamMap<T> m;
    for (const auto& [name, fp] : predictors) fp.store(m, "iin." + name + ".fp.");
    for (const auto& [name, fm] : modulators) fm.store(m, "iin." + name + ".fm.");
    for (const auto& [name, b] : bases) m.set("iin." + name + ".base", b);
    return m;
  }

  // Rejects maps lacking any injection point's parameters, naming the point.
  static IinParams from_map(const IdnArchitecture& a, const ParamMap<T>& m) {
    IinParams p;
    for (const LayerSpec* s : a.injection_points()) {
      p.points.push_back(*s);
      const std::string prefix = "iin." + s->name;
      try {
        if (s->injection == Injection::predicted_depthwise) {
          p.predictors.emplace(s->name,
                               PredictorParams<T>::load(m, prefix + ".fp.", predictor_shape(a.config.iin, *s)));
        } else {
          p.modulators.emplace(s->name,
                               ModulatorParams<T>::load(m, prefix + ".fm.", modulator_shape(a.config.iin, *s)));
          const Var<T>& b = m.at(prefix + ".base");
          if (b.dims() != Dims{s->c_in, s->c_out, 1, 1}) {
            shape_fail(prefix, ".base has dims ", b.dims().str(), ", expected ", Dims{s->c_in, s->c_out, 1, 1}.str());
          }
          p.bases.emplace(s->name, b);
        }
      } catch (const MissingParamError& e) {
        throw MissingParamError("injection point '" + s->name + "': " + e.what());
      }
    }
    return p;
  }

  static IinParams from_tensors(const IdnArchitecture& a, const std::map<std::string, BasicTensor<T>>& ts,
                                bool trainable = false) {
    ParamMap<T> m = ParamMap<T>::constants(ts);
    return from_map(a, trainable ? m.trainable() : m);
  }

  std::vector<Var<T>> variables() const {
    std::vector<Var<T>> out;
    for (const auto& [_, v] : to_map()) out.push_back(v);
    return out;
  }

  template <typename U>
  IinParams<U> cast(const IdnArchitecture& a, bool as_parameters) const {
    return IinParams<U>::from_map(a, to_map().template cast<U>(as_parameters));
  }

  void check_complete() const {
    for (const LayerSpec& s : points) {
      const bool have = s.injection == Injection::predicted_depthwise
                            ? predictors.count(s.name) != 0
                            : modulators.count(s.name) != 0 && bases.count(s.name) != 0;
      if (!have) throw MissingParamError("no IIN parameters for injection point '" + s.name + "'");
    }
  }
};

// ---------------------------------------------------------------------------
// Bundle: what the IIN produces for one identity.

struct BundleEntry {
  Injection kind = Injection::none;
  Tensor kernel;      // predicted depthwise kernel (C, 1, K, K)
  Tensor modulation;  // F_m output (1, C_in, 1, 1)
  Tensor base;        // base pointwise kernel (C_in, C_out, 1, 1)
};

struct InjectionBundle {
  std::map<std::string, BundleEntry> entries;  // keyed by layer name
  IdentityEmbedding source_embedding;

  std::map<std::string, Tensor> to_tensors() const {
    std::map<std::string, Tensor> out;
    out["bundle.embedding"] = source_embedding.tensor();
    for (const auto& [name, e] : entries) {
      if (e.kind == Injection::predicted_depthwise) {
        out["bundle." + name + ".kernel"] = e.kernel;
      } else {
        out["bundle." + name + ".modulation"] = e.modulation;
        out["bundle." + name + ".base"] = e.base;
      }
    }
    return out;
  }

  static InjectionBundle from_tensors(const std::map<std::string, Tensor>& ts) {
    InjectionBundle b;
    auto it = ts.find("bundle.embedding");
    if (it == ts.end()) throw MissingParamError("bundle has no 'bundle.embedding' tensor");
    b.source_embedding = IdentityEmbedding(it->second);
    auto strip = [](const std::string& n, const std::string& suffix) -> std::string {
      if (n.size() <= 7 + suffix.size() || n.compare(n.size() - suffix.size(), suffix.size(), suffix) != 0) return {};
      return n.substr(7, n.size() - 7 - suffix.size());
    };
    for (const auto& [name, t] : ts) {
      if (name.rfind("bundle.", 0) != 0 || name == "bundle.embedding") continue;
      if (auto l = strip(name, ".kernel"); !l.empty()) {
        b.entries[l].kind = Injection::predicted_depthwise;
        b.entries[l].kernel = t;
      } else if (auto l2 = strip(name, ".modulation"); !l2.empty()) {
        b.entries[l2].kind = Injection::modulated_pointwise;
        b.entries[l2].modulation = t;
      } else if (auto l3 = strip(name, ".base"); !l3.empty()) {
        b.entries[l3].kind = Injection::modulated_pointwise;
        b.entries[l3].base = t;
      } else {
        throw std::invalid_argument("unrecognised bundle tensor '" + name + "'");
      }
    }
    return b;
  }
};

// Pure in (z, iin). Each prediction/modulation stack runs exactly once.
inline InjectionBundle run_iin(const IdentityEmbedding& z, const IinParams<float>& iin) {
  iin.check_complete();
  InjectionBundle b;
  b.source_embedding = z;
  const Var<float> zv = Var<float>::constant(z.tensor());
  for (const LayerSpec& s : iin.points) {
    BundleEntry e;
    e.kind = s.injection;
    if (s.injection == Injection::predicted_depthwise) {
      const auto& fp = iin.predictors.at(s.name);
      fp.validate("iin." + s.name);
      e.kernel = predictor_forward(fp, zv).value();
      check_depthwise_target(e.kernel, s);
    } else {
      const auto& fm = iin.modulators.at(s.name);
      fm.validate("iin." + s.name);
      e.modulation = modulator_forward(fm, zv).value();
      e.base = iin.bases.at(s.name).value();
    }
    b.entries.emplace(s.name, std::move(e));
  }
  return b;
}

inline void check_bundle(const IdnArchitecture& a, const InjectionBundle& b) {
  std::size_t matched = 0;
  for (const LayerSpec* s : a.injection_points()) {
    auto it = b.entries.find(s->name);
    if (it == b.entries.end()) throw MissingParamError("bundle has no entry for injection point '" + s->name + "'");
    const BundleEntry& e = it->second;
    if (e.kind != s->injection) shape_fail("bundle entry '", s->name, "' has the wrong injection kind");
    if (e.kind == Injection::predicted_depthwise) {
      check_depthwise_target(e.kernel, *s);
    } else {
      if (e.base.dims() != Dims{s->c_in, s->c_out, 1, 1}) {
        shape_fail("bundle base kernel for '", s->name, "' has dims ", e.base.dims().str());
      }
      if (e.modulation.size() != s->c_in) {
        shape_fail("bundle modulation for '", s->name, "' has ", e.modulation.size(), " entries, expected ", s->c_in);
      }
    }
    ++matched;
  }
  if (matched != b.entries.size()) throw std::invalid_argument("bundle has entries for unknown injection points");
}

// Installs the bundle: depthwise kernels verbatim, pointwise kernels
// modulated, demodulated and transposed to conv layout. Runs once per
// identity; the result never touches the IIN again.
inline SpecializedIdn specialize(const IdnTemplate& t, const InjectionBundle& b, DemodEpsilon eps = {}) {
  check_bundle(*t.arch, b);
  std::map<std::string, Tensor> params = t.static_params;
  for (const auto& [name, e] : b.entries) {
    if (e.kind == Injection::predicted_depthwise) {
      params[name + ".weight"] = e.kernel;
    } else {
      params[name + ".weight"] = transpose01(demodulate(modulate<float>(e.base, e.modulation.values()), eps));
    }
  }
  return SpecializedIdn(t.arch, params);
}

// The same installation expressed as a differentiable graph from z and the
// IIN parameters; used for training and as the unspecialised reference path.
template <typename T>
ParamMap<T> injected_params(const IdnArchitecture& a, const ParamMap<T>& static_params, const IinParams<T>& iin,
                            const Var<T>& z, DemodEpsilon eps = {}) {
  iin.check_complete();
  ParamMap<T> p = static_params;
  for (const LayerSpec& s : iin.points) {
    if (s.injection == Injection::predicted_depthwise) {
      Var<T> k = predictor_forward(iin.predictors.at(s.name), z);
      check_depthwise_target(k.value(), s);
      p.set(s.name + ".weight", k);
    } else {
      Var<T> m = modulator_forward(iin.modulators.at(s.name), z);
      p.set(s.name + ".weight", ag::transpose01(ag::demodulate(ag::modulate(iin.bases.at(s.name), m), eps)));
    }
  }
  for (const auto& [name, dims] : a.param_dims()) {
    if (!p.contains(name)) throw MissingParamError("missing parameter '" + name + "'");
    if (p.at(name).dims() != dims) shape_fail("parameter '", name, "' has dims ", p.at(name).dims().str());
  }
  return p;
}

}  // namespace idn
