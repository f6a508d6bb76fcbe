#pragma once

// Identity-conditioned kernels: depthwise kernels predicted from an identity
// embedding, and pointwise kernels modulated per input channel then
// demodulated per output channel.
//
// Pointwise kernels handled here use (C_in, C_out, 1, 1) layout so that
// index (i, j, k) reads input channel i, output channel j, tap k.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>

#include "idn/accounting.hpp"
#include "idn/autograd.hpp"
#include "idn/params.hpp"

namespace idn {

inline constexpr std::size_t kEmbeddingDim = 512;

namespace instrument {
// Evaluation counts of the prediction / modulation stacks. Forward passes of a
// specialised network must never move these.
inline std::atomic<std::uint64_t> predictor_evaluations{0};
inline std::atomic<std::uint64_t> modulator_evaluations{0};

inline std::uint64_t iin_evaluations() { return predictor_evaluations.load() + modulator_evaluations.load(); }
}  // namespace instrument

class IdentityEmbedding {
 public:
  static constexpr double kNormTolerance = 1e-5;

  IdentityEmbedding() = default;

  explicit IdentityEmbedding(const Tensor& z) : z_(z.reshaped({1, z.size(), 1, 1})) {
    if (z_.empty()) throw std::invalid_argument("identity embedding is empty");
    const double n = norm();
    if (std::abs(n - 1.0) > kNormTolerance) {
      throw std::invalid_argument("identity embedding must be unit-norm, got norm " + std::to_string(n));
    }
  }

  static IdentityEmbedding normalize(const Tensor& v) {
    double s = 0;
    for (float x : v.values()) s += static_cast<double>(x) * x;
    if (s == 0) throw std::invalid_argument("cannot normalise a zero embedding");
    const double r = std::sqrt(s);
    Tensor z = v.reshaped({1, v.size(), 1, 1});
    for (auto& x : z.values()) x = static_cast<float>(x / r);
    return IdentityEmbedding(z);
  }

  const Tensor& tensor() const { return z_; }
  std::span<const float> values() const { return z_.values(); }
  std::size_t dim() const { return z_.size(); }

  double norm() const {
    double s = 0;
    for (float x : z_.values()) s += static_cast<double>(x) * x;
    return std::sqrt(s);
  }

  friend bool operator==(const IdentityEmbedding&, const IdentityEmbedding&) = default;

 private:
  Tensor z_;
};

// Stabiliser added under the demodulation square root.
class DemodEpsilon {
 public:
  static constexpr double kDefault = 1e-8;

  constexpr DemodEpsilon() = default;
  explicit DemodEpsilon(double eps) : eps_(eps) {
    if (!(eps > 0)) throw std::invalid_argument("demodulation epsilon must be > 0");
  }

  // eps = 0: exact unit-norm demodulation, used to check scale invariance.
  static DemodEpsilon exact() {
    DemodEpsilon e;
    e.eps_ = 0.0;
    return e;
  }

  double value() const { return eps_; }

 private:
  double eps_ = kDefault;
};

// ---------------------------------------------------------------------------
// Modulation / demodulation on plain tensors

template <typename T>
BasicTensor<T> modulate(const BasicTensor<T>& w, std::span<const T> s) {
  const Dims d = w.dims();
  if (s.size() != d.n) shape_fail("modulate: scale length ", s.size(), " != kernel C_in ", d.n);
  BasicTensor<T> out(d);
  const std::size_t per = d.c * d.plane();
  for (std::size_t i = 0; i < d.n; ++i) {
    for (std::size_t q = 0; q < per; ++q) out[i * per + q] = s[i] * w[i * per + q];
  }
  return out;
}

template <typename T>
BasicTensor<T> demodulate(const BasicTensor<T>& w, DemodEpsilon eps) {
  const Dims d = w.dims();
  const std::size_t cin = d.n, cout = d.c, kk = d.plane();
  BasicTensor<T> out(d);
  for (std::size_t j = 0; j < cout; ++j) {
    double s = 0;
    for (std::size_t i = 0; i < cin; ++i) {
      for (std::size_t k = 0; k < kk; ++k) {
        const double v = w[(i * cout + j) * kk + k];
        s += v * v;
      }
    }
    const double denom = std::sqrt(s + eps.value());
    if (denom == 0) continue;  // all-zero channel at eps = 0
    for (std::size_t i = 0; i < cin; ++i) {
      for (std::size_t k = 0; k < kk; ++k) {
        const std::size_t idx = (i * cout + j) * kk + k;
        out[idx] = static_cast<T>(static_cast<double>(w[idx]) / denom);
      }
    }
  }
  return out;
}

// (A, B, H, W) -> (B, A, H, W)
template <typename T>
BasicTensor<T> transpose01(const BasicTensor<T>& w) {
  const Dims d = w.dims();
  BasicTensor<T> out({d.c, d.n, d.h, d.w});
  const std::size_t kk = d.plane();
  for (std::size_t a = 0; a < d.n; ++a) {
    for (std::size_t b = 0; b < d.c; ++b) {
      for (std::size_t k = 0; k < kk; ++k) out[(b * d.n + a) * kk + k] = w[(a * d.c + b) * kk + k];
    }
  }
  return out;
}

namespace ag {

template <typename T>
Var<T> modulate(const Var<T>& w, const Var<T>& s) {
  auto y = idn::modulate<T>(w.value(), s.value().values());
  return make_result<T>(std::move(y), {w, s}, [](Node<T>& self) {
    const auto& wv = self.inputs[0]->value;
    const auto& sv = self.inputs[1]->value;
    const Dims d = wv.dims();
    const std::size_t per = d.c * d.plane();
    if (self.input_needs_grad(0)) {
      BasicTensor<T> g(d);
      for (std::size_t i = 0; i < d.n; ++i) {
        for (std::size_t q = 0; q < per; ++q) g[i * per + q] = self.grad[i * per + q] * sv[i];
      }
      self.inputs[0]->accumulate(g);
    }
    if (self.input_needs_grad(1)) {
      BasicTensor<T> g(sv.dims());
      for (std::size_t i = 0; i < d.n; ++i) {
        T acc = 0;
        for (std::size_t q = 0; q < per; ++q) acc += self.grad[i * per + q] * wv[i * per + q];
        g[i] = acc;
      }
      self.inputs[1]->accumulate(g);
    }
  });
}

template <typename T>
Var<T> demodulate(const Var<T>& w, DemodEpsilon eps) {
  auto y = idn::demodulate<T>(w.value(), eps);
  return make_result<T>(std::move(y), {w}, [eps](Node<T>& self) {
    const auto& wv = self.inputs[0]->value;
    const Dims d = wv.dims();
    const std::size_t cin = d.n, cout = d.c, kk = d.plane();
    BasicTensor<T> g(d);
    for (std::size_t j = 0; j < cout; ++j) {
      double s = 0, dot = 0;
      for (std::size_t i = 0; i < cin; ++i) {
        for (std::size_t k = 0; k < kk; ++k) {
          const std::size_t idx = (i * cout + j) * kk + k;
          s += static_cast<double>(wv[idx]) * wv[idx];
          dot += static_cast<double>(self.grad[idx]) * self.value[idx];
        }
      }
      const double denom = std::sqrt(s + eps.value());
      if (denom == 0) continue;
      for (std::size_t i = 0; i < cin; ++i) {
        for (std::size_t k = 0; k < kk; ++k) {
          const std::size_t idx = (i * cout + j) * kk + k;
          g[idx] = static_cast<T>((self.grad[idx] - self.value[idx] * dot) / denom);
        }
      }
    }
    self.inputs[0]->accumulate(g);
  });
}

template <typename T>
Var<T> transpose01(const Var<T>& w) {
  return make_result<T>(idn::transpose01(w.value()), {w},
                        [](Node<T>& self) { self.inputs[0]->accumulate(idn::transpose01(self.grad)); });
}

}  // namespace ag

// ---------------------------------------------------------------------------
// Prediction stack: embedding (D, 1, 1) -> two transposed convs with leaky
// ReLU -> 1x1 projection to (C, K, K).

struct PredictorShape {
  std::size_t embedding_dim = kEmbeddingDim;
  std::size_t hidden1 = 64;
  std::size_t hidden2 = 64;
  std::size_t channels = 0;
  std::size_t kernel = 3;

  std::size_t k1() const { return (kernel + 1) / 2; }
  std::size_t k2() const { return kernel - k1() + 1; }
};

template <typename T>
struct PredictorParams {
  PredictorShape shape;
  Var<T> t1_w, t1_b, t2_w, t2_b, proj_w, proj_b;

  static PredictorParams init(const PredictorShape& s, Rng& rng, double out_std = 1.0) {
    PredictorParams p;
    p.shape = s;
    p.t1_w = Var<T>::parameter(randn<T>({s.embedding_dim, s.hidden1, s.k1(), s.k1()}, rng, 1.0));
    p.t1_b = Var<T>::parameter(BasicTensor<T>({1, s.hidden1, 1, 1}));
    p.t2_w = Var<T>::parameter(he_init<T>({s.hidden1, s.hidden2, s.k2(), s.k2()}, s.hidden1, rng, 0.5));
    p.t2_b = Var<T>::parameter(BasicTensor<T>({1, s.hidden2, 1, 1}));
    p.proj_w = Var<T>::parameter(randn<T>({s.channels, s.hidden2, 1, 1}, rng,
                                          out_std / std::sqrt(static_cast<double>(s.hidden2))));
    p.proj_b = Var<T>::parameter(BasicTensor<T>({1, s.channels, 1, 1}));
    return p;
  }

  static PredictorParams zeros(const PredictorShape& s) {
    Rng rng(0);
    PredictorParams p = init(s, rng);
    for (Var<T>* v : p.all()) v->mutable_value().fill(T(0));
    return p;
  }

  std::vector<Var<T>*> all() { return {&t1_w, &t1_b, &t2_w, &t2_b, &proj_w, &proj_b}; }

  static std::vector<std::string> names() { return {"t1.weight", "t1.bias", "t2.weight", "t2.bias", "proj.weight", "proj.bias"}; }

  void store(ParamMap<T>& m, const std::string& prefix) const {
    const Var<T>* vs[] = {&t1_w, &t1_b, &t2_w, &t2_b, &proj_w, &proj_b};
    const auto ns = names();
    for (std::size_t i = 0; i < ns.size(); ++i) m.set(prefix + ns[i], *vs[i]);
  }

  static PredictorParams load(const ParamMap<T>& m, const std::string& prefix, const PredictorShape& s) {
    PredictorParams p;
    p.shape = s;
    Var<T>* vs[] = {&p.t1_w, &p.t1_b, &p.t2_w, &p.t2_b, &p.proj_w, &p.proj_b};
    const auto ns = names();
    for (std::size_t i = 0; i < ns.size(); ++i) *vs[i] = m.at(prefix + ns[i]);
    p.validate(prefix);
    return p;
  }

  void validate(const std::string& where = "predictor") const {
    auto expect = [&](const Var<T>& v, Dims d, const char* what) {
      if (v.dims() != d) shape_fail(where, ": ", what, " has dims ", v.dims().str(), ", expected ", d.str());
    };
    const auto& s = shape;
    expect(t1_w, {s.embedding_dim, s.hidden1, s.k1(), s.k1()}, "t1.weight");
    expect(t2_w, {s.hidden1, s.hidden2, s.k2(), s.k2()}, "t2.weight");
    expect(proj_w, {s.channels, s.hidden2, 1, 1}, "proj.weight");
  }
};

template <typename T>
Var<T> predictor_forward(const PredictorParams<T>& p, const Var<T>& z) {
  instrument::predictor_evaluations.fetch_add(1, std::memory_order_relaxed);
  const Dims zd = z.dims();
  if (zd.c * zd.plane() != p.shape.embedding_dim) {
    shape_fail("predictor: embedding length ", zd.c * zd.plane(), " != ", p.shape.embedding_dim);
  }
  Var<T> x = zd.h == 1 && zd.w == 1 ? z : make_result<T>(z.value().reshaped({zd.n, zd.c * zd.plane(), 1, 1}), {z},
      [](Node<T>& self) { self.inputs[0]->accumulate(self.grad.reshaped(self.inputs[0]->value.dims())); });
  x = ag::act(ag::conv_transpose(x, p.t1_w, p.t1_b, 1), Activation::leaky_relu);
  x = ag::act(ag::conv_transpose(x, p.t2_w, p.t2_b, 1), Activation::leaky_relu);
  x = ag::conv_standard(x, p.proj_w, p.proj_b, ConvArgs{1, 0});
  // (1, C, K, K) -> (C, 1, K, K): same memory order.
  const Dims od = x.dims();
  return make_result<T>(x.value().reshaped({od.c, 1, od.h, od.w}), {x},
                        [](Node<T>& self) { self.inputs[0]->accumulate(self.grad.reshaped(self.inputs[0]->value.dims())); });
}

// ---------------------------------------------------------------------------
// Modulation stack: two fully-connected layers, leaky ReLU between, output
// bias initialised to 1 so an untrained stack starts near identity scaling.

struct ModulatorShape {
  std::size_t embedding_dim = kEmbeddingDim;
  std::size_t hidden = 128;
  std::size_t channels = 0;
};

template <typename T>
struct ModulatorParams {
  ModulatorShape shape;
  Var<T> fc1_w, fc1_b, fc2_w, fc2_b;

  static ModulatorParams init(const ModulatorShape& s, Rng& rng, double out_std = 0.1) {
    ModulatorParams p;
    p.shape = s;
    p.fc1_w = Var<T>::parameter(he_init<T>({s.hidden, s.embedding_dim, 1, 1}, 1, rng, 1.0 / std::sqrt(2.0)));
    p.fc1_b = Var<T>::parameter(BasicTensor<T>({1, s.hidden, 1, 1}));
    p.fc2_w = Var<T>::parameter(randn<T>({s.channels, s.hidden, 1, 1}, rng,
                                         out_std / std::sqrt(static_cast<double>(s.hidden))));
    p.fc2_b = Var<T>::parameter(BasicTensor<T>({1, s.channels, 1, 1}, T(1)));
    return p;
  }

  // All weights and biases zero except the output bias (ones).
  static ModulatorParams identity(const ModulatorShape& s) {
    Rng rng(0);
    ModulatorParams p = init(s, rng);
    p.fc1_w.mutable_value().fill(T(0));
    p.fc1_b.mutable_value().fill(T(0));
    p.fc2_w.mutable_value().fill(T(0));
    p.fc2_b.mutable_value().fill(T(1));
    return p;
  }

  static std::vector<std::string> names() { return {"fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"}; }

  void store(ParamMap<T>& m, const std::string& prefix) const {
    const Var<T>* vs[] = {&fc1_w, &fc1_b, &fc2_w, &fc2_b};
    const auto ns = names();
    for (std::size_t i = 0; i < ns.size(); ++i) m.set(prefix + ns[i], *vs[i]);
  }

  static ModulatorParams load(const ParamMap<T>& m, const std::string& prefix, const ModulatorShape& s) {
    ModulatorParams p;
    p.shape = s;
    Var<T>* vs[] = {&p.fc1_w, &p.fc1_b, &p.fc2_w, &p.fc2_b};
    const auto ns = names();
    for (std::size_t i = 0; i < ns.size(); ++i) *vs[i] = m.at(prefix + ns[i]);
    p.validate(prefix);
    return p;
  }

  void validate(const std::string& where = "modulator") const {
    if (fc1_w.dims() != Dims{shape.hidden, shape.embedding_dim, 1, 1}) {
      shape_fail(where, ": fc1.weight has dims ", fc1_w.dims().str());
    }
    if (fc2_w.dims() != Dims{shape.channels, shape.hidden, 1, 1}) {
      shape_fail(where, ": fc2.weight has dims ", fc2_w.dims().str(), ", expected C_in=", shape.channels);
    }
  }
};

template <typename T>
Var<T> modulator_forward(const ModulatorParams<T>& p, const Var<T>& z) {
  instrument::modulator_evaluations.fetch_add(1, std::memory_order_relaxed);
  Var<T> h = ag::act(ag::linear(z, p.fc1_w, p.fc1_b), Activation::leaky_relu);
  return ag::linear(h, p.fc2_w, p.fc2_b);
}

// ---------------------------------------------------------------------------
// Tensor-level entry points

template <typename T>
void check_depthwise_target(const BasicTensor<T>& kernel, const LayerSpec& target) {
  const Dims want{target.c_in, 1, target.kernel, target.kernel};
  if (kernel.dims() != want) {
    shape_fail("predicted kernel ", kernel.dims().str(), " does not fit layer '", target.name, "' which needs ",
               want.str());
  }
}

inline Tensor predict_depthwise_weights(const IdentityEmbedding& z, const PredictorParams<float>& p) {
  p.validate();
  return predictor_forward(p, Var<float>::constant(z.tensor())).value();
}

inline Tensor predict_depthwise_weights(const IdentityEmbedding& z, const PredictorParams<float>& p,
                                        const LayerSpec& target) {
  Tensor k = predict_depthwise_weights(z, p);
  check_depthwise_target(k, target);
  return k;
}

inline Tensor modulation_vector(const IdentityEmbedding& z, const ModulatorParams<float>& m) {
  m.validate();
  return modulator_forward(m, Var<float>::constant(z.tensor())).value();
}

inline Tensor modulate_demodulate(const Tensor& w, const IdentityEmbedding& z, const ModulatorParams<float>& m,
                                  DemodEpsilon eps = {}) {
  const Tensor s = modulation_vector(z, m);
  return demodulate(modulate<float>(w, s.values()), eps);
}

}  // namespace idn
