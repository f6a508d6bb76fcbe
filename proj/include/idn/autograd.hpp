#pragma once

// Minimal reverse-mode automatic differentiation over BasicTensor.
//
// A Var is a shared handle to a graph node. Ops record a backward closure only
// when at least one input requires a gradient, so graphs built purely from
// constants (inference) carry no tape and no shared mutable state.

#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <unordered_set>
#include <utility>
#include <vector>

#include "idn/ops.hpp"
#include "idn/tensor.hpp"

namespace idn {

template <typename T>
struct Node {
  BasicTensor<T> value;
  BasicTensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  void accumulate(const BasicTensor<T>& g) {
    if (g.dims() != value.dims()) {
      shape_fail("gradient dims ", g.dims().str(), " do not match value dims ", value.dims().str());
    }
    if (grad.empty()) {
      grad = g;
      return;
    }
    for (std::size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
  }

  bool input_needs_grad(std::size_t i) const { return inputs[i] && inputs[i]->requires_grad; }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Var constant(BasicTensor<T> v) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(v);
    return Var(std::move(n));
  }

  // Trainable leaf.
  static Var parameter(BasicTensor<T> v) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(v);
    n->requires_grad = true;
    return Var(std::move(n));
  }

  bool defined() const { return static_cast<bool>(node_); }
  const BasicTensor<T>& value() const { return node_->value; }
  const Dims& dims() const { return node_->value.dims(); }
  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }

  // Gradient, or zeros if nothing reached this node.
  BasicTensor<T> grad() const { return node_->grad.empty() ? BasicTensor<T>(dims()) : node_->grad; }

  void zero_grad() { node_->grad = BasicTensor<T>(); }

  // In-place access for optimizers; only valid on leaves.
  BasicTensor<T>& mutable_value() {
    if (node_->backward_fn) throw std::logic_error("mutable_value() on a non-leaf Var");
    return node_->value;
  }

  Var detach() const { return constant(node_->value); }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <typename T>
Var<T> make_result(BasicTensor<T> value, std::vector<Var<T>> inputs, std::function<void(Node<T>&)> fn) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  for (const auto& in : inputs) {
    if (in.defined() && in.requires_grad()) n->requires_grad = true;
  }
  if (n->requires_grad) {
    n->inputs.reserve(inputs.size());
    for (auto& in : inputs) n->inputs.push_back(in.defined() ? in.node() : nullptr);
    n->backward_fn = std::move(fn);
  }
  return Var<T>(std::move(n));
}

// Reverse pass from a scalar root. Gradients accumulate into every node that
// requires one; call zero_grad() on leaves between passes.
template <typename T>
void backward(const Var<T>& root) {
  if (!root.defined() || root.value().size() != 1) {
    shape_fail("backward: root must be a scalar, got dims ", root.defined() ? root.dims().str() : "<undefined>");
  }
  if (!root.requires_grad()) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child && child->requires_grad && seen.insert(child).second) stack.push_back({child, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->accumulate(BasicTensor<T>(root.dims(), T(1)));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

namespace ag {

namespace detail {
template <typename T>
std::span<const T> bias_span(const Var<T>& b) {
  return b.defined() ? b.value().values() : std::span<const T>{};
}
}  // namespace detail

template <typename T>
Var<T> conv_depthwise(const Var<T>& x, const Var<T>& w, const Var<T>& b, ConvArgs a) {
  auto y = ops::conv2d_depthwise(x.value(), w.value(), detail::bias_span(b), a);
  return make_result<T>(std::move(y), {x, w, b}, [a](Node<T>& self) {
    const auto& in = self.inputs;
    const ops::GradRequest req{self.input_needs_grad(0), self.input_needs_grad(1), self.input_needs_grad(2)};
    auto g = ops::conv2d_depthwise_backward(in[0]->value, in[1]->value, self.grad, a, req);
    if (req.x) in[0]->accumulate(g.x);
    if (req.w) in[1]->accumulate(g.w);
    if (req.b) in[2]->accumulate(g.b.reshaped(in[2]->value.dims()));
  });
}

template <typename T>
Var<T> conv_pointwise(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  auto y = ops::conv2d_pointwise(x.value(), w.value(), detail::bias_span(b));
  return make_result<T>(std::move(y), {x, w, b}, [](Node<T>& self) {
    const auto& in = self.inputs;
    const ops::GradRequest req{self.input_needs_grad(0), self.input_needs_grad(1), self.input_needs_grad(2)};
    auto g = ops::conv2d_pointwise_backward(in[0]->value, in[1]->value, self.grad, req);
    if (req.x) in[0]->accumulate(g.x);
    if (req.w) in[1]->accumulate(g.w);
    if (req.b) in[2]->accumulate(g.b.reshaped(in[2]->value.dims()));
  });
}

template <typename T>
Var<T> conv_standard(const Var<T>& x, const Var<T>& w, const Var<T>& b, ConvArgs a) {
  auto y = ops::conv2d_standard(x.value(), w.value(), detail::bias_span(b), a);
  return make_result<T>(std::move(y), {x, w, b}, [a](Node<T>& self) {
    const auto& in = self.inputs;
    const ops::GradRequest req{self.input_needs_grad(0), self.input_needs_grad(1), self.input_needs_grad(2)};
    auto g = ops::conv2d_standard_backward(in[0]->value, in[1]->value, self.grad, a, req);
    if (req.x) in[0]->accumulate(g.x);
    if (req.w) in[1]->accumulate(g.w);
    if (req.b) in[2]->accumulate(g.b.reshaped(in[2]->value.dims()));
  });
}

template <typename T>
Var<T> conv_transpose(const Var<T>& x, const Var<T>& w, const Var<T>& b, std::size_t stride) {
  auto y = ops::conv_transpose2d(x.value(), w.value(), detail::bias_span(b), stride);
  return make_result<T>(std::move(y), {x, w, b}, [stride](Node<T>& self) {
    const auto& in = self.inputs;
    const ops::GradRequest req{self.input_needs_grad(0), self.input_needs_grad(1), self.input_needs_grad(2)};
    auto g = ops::conv_transpose2d_backward(in[0]->value, in[1]->value, self.grad, stride, req);
    if (req.x) in[0]->accumulate(g.x);
    if (req.w) in[1]->accumulate(g.w);
    if (req.b) in[2]->accumulate(g.b.reshaped(in[2]->value.dims()));
  });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  auto y = ops::fully_connected(x.value(), w.value(), detail::bias_span(b));
  return make_result<T>(std::move(y), {x, w, b}, [](Node<T>& self) {
    const auto& in = self.inputs;
    const ops::GradRequest req{self.input_needs_grad(0), self.input_needs_grad(1), self.input_needs_grad(2)};
    auto g = ops::fully_connected_backward(in[0]->value, in[1]->value, self.grad, req);
    if (req.x) in[0]->accumulate(g.x);
    if (req.w) in[1]->accumulate(g.w);
    if (req.b) in[2]->accumulate(g.b.reshaped(in[2]->value.dims()));
  });
}

template <typename T>
Var<T> act(const Var<T>& x, Activation kind) {
  if (kind == Activation::identity) return x;
  auto y = ops::activation(x.value(), kind);
  return make_result<T>(std::move(y), {x}, [kind](Node<T>& self) {
    self.inputs[0]->accumulate(ops::activation_backward(self.inputs[0]->value, self.value, self.grad, kind));
  });
}

template <typename T>
Var<T> upsample_nearest(const Var<T>& x, std::size_t f) {
  if (f == 1) return x;
  return make_result<T>(ops::upsample_nearest(x.value(), f), {x}, [f](Node<T>& self) {
    self.inputs[0]->accumulate(ops::upsample_nearest_backward(self.grad, f));
  });
}

template <typename T>
Var<T> upsample_bilinear(const Var<T>& x, std::size_t f) {
  if (f == 1) return x;
  return make_result<T>(ops::upsample_bilinear(x.value(), f), {x}, [f](Node<T>& self) {
    self.inputs[0]->accumulate(ops::upsample_bilinear_backward(self.grad, f));
  });
}

template <typename T>
Var<T> avg_pool(const Var<T>& x, std::size_t f) {
  if (f == 1) return x;
  return make_result<T>(ops::avg_pool(x.value(), f), {x}, [f](Node<T>& self) {
    self.inputs[0]->accumulate(ops::avg_pool_backward(self.grad, f));
  });
}

template <typename T>
Var<T> concat(const Var<T>& a, const Var<T>& b) {
  const std::size_t ca = a.dims().c, cb = b.dims().c;
  return make_result<T>(ops::concat_channels(a.value(), b.value()), {a, b}, [ca, cb](Node<T>& self) {
    if (self.input_needs_grad(0)) self.inputs[0]->accumulate(ops::slice_channels(self.grad, 0, ca));
    if (self.input_needs_grad(1)) self.inputs[1]->accumulate(ops::slice_channels(self.grad, ca, cb));
  });
}

template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  return make_result<T>(ops::global_avg_pool(x.value()), {x}, [](Node<T>& self) {
    const Dims d = self.inputs[0]->value.dims();
    BasicTensor<T> g(d);
    const T inv = T(1) / static_cast<T>(d.plane());
    for (std::size_t n = 0; n < d.n; ++n) {
      for (std::size_t c = 0; c < d.c; ++c) {
        const T v = self.grad.at(n, c, 0, 0) * inv;
        std::fill(g.plane(n, c), g.plane(n, c) + d.plane(), v);
      }
    }
    self.inputs[0]->accumulate(g);
  });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  if (a.dims() != b.dims()) shape_fail("add: ", a.dims().str(), " vs ", b.dims().str());
  BasicTensor<T> y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += b.value()[i];
  return make_result<T>(std::move(y), {a, b}, [](Node<T>& self) {
    if (self.input_needs_grad(0)) self.inputs[0]->accumulate(self.grad);
    if (self.input_needs_grad(1)) self.inputs[1]->accumulate(self.grad);
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T c) {
  BasicTensor<T> y = a.value();
  for (auto& v : y.values()) v *= c;
  return make_result<T>(std::move(y), {a}, [c](Node<T>& self) {
    BasicTensor<T> g = self.grad;
    for (auto& v : g.values()) v *= c;
    self.inputs[0]->accumulate(g);
  });
}

template <typename T>
Var<T> square(const Var<T>& a) {
  BasicTensor<T> y = a.value();
  for (auto& v : y.values()) v *= v;
  return make_result<T>(std::move(y), {a}, [](Node<T>& self) {
    BasicTensor<T> g = self.grad;
    const auto& x = self.inputs[0]->value;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= T(2) * x[i];
    self.inputs[0]->accumulate(g);
  });
}

// c0 + sum_i c_i * v_i over scalar Vars.
template <typename T>
Var<T> weighted_sum(std::span<const std::pair<T, Var<T>>> terms, T c0 = T(0)) {
  T total = c0;
  std::vector<Var<T>> ins;
  std::vector<T> coeffs;
  for (const auto& [c, v] : terms) {
    if (v.value().size() != 1) shape_fail("weighted_sum: term is not scalar, dims ", v.dims().str());
    total += c * v.value()[0];
    ins.push_back(v);
    coeffs.push_back(c);
  }
  return make_result<T>(BasicTensor<T>::scalar(total), std::move(ins), [coeffs](Node<T>& self) {
    for (std::size_t i = 0; i < coeffs.size(); ++i) {
      if (self.input_needs_grad(i)) self.inputs[i]->accumulate(BasicTensor<T>::scalar(coeffs[i] * self.grad[0]));
    }
  });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  T s = 0;
  for (T v : x.value().values()) s += v;
  const T inv = T(1) / static_cast<T>(x.value().size());
  return make_result<T>(BasicTensor<T>::scalar(s * inv), {x}, [inv](Node<T>& self) {
    self.inputs[0]->accumulate(BasicTensor<T>(self.inputs[0]->value.dims(), self.grad[0] * inv));
  });
}

// out = m * raw + (1 - m) * target, with m of shape (N, 1, H, W) broadcast over channels.
template <typename T>
BasicTensor<T> blend_values(const BasicTensor<T>& raw, const BasicTensor<T>& target, const BasicTensor<T>& m) {
  const Dims d = raw.dims();
  if (target.dims() != d) shape_fail("blend: raw ", d.str(), " vs target ", target.dims().str());
  if (m.dims().n != d.n || m.dims().c != 1 || m.dims().h != d.h || m.dims().w != d.w) {
    shape_fail("blend: mask dims ", m.dims().str(), " must be (N, 1, H, W) matching ", d.str());
  }
  BasicTensor<T> y(d);
  for (std::size_t n = 0; n < d.n; ++n) {
    const T* mp = m.plane(n, 0);
    for (std::size_t c = 0; c < d.c; ++c) {
      const T* r = raw.plane(n, c);
      const T* t = target.plane(n, c);
      T* o = y.plane(n, c);
      for (std::size_t i = 0; i < d.plane(); ++i) o[i] = mp[i] * r[i] + (T(1) - mp[i]) * t[i];
    }
  }
  return y;
}

template <typename T>
Var<T> blend(const Var<T>& raw, const Var<T>& target, const Var<T>& m) {
  return make_result<T>(blend_values(raw.value(), target.value(), m.value()), {raw, target, m}, [](Node<T>& self) {
    const auto& r = self.inputs[0]->value;
    const auto& t = self.inputs[1]->value;
    const auto& mk = self.inputs[2]->value;
    const Dims d = r.dims();
    BasicTensor<T> gr(d), gt(d), gm(mk.dims());
    for (std::size_t n = 0; n < d.n; ++n) {
      const T* mp = mk.plane(n, 0);
      T* gmp = gm.plane(n, 0);
      for (std::size_t c = 0; c < d.c; ++c) {
        const T* g = self.grad.plane(n, c);
        const T* rp = r.plane(n, c);
        const T* tp = t.plane(n, c);
        T* grp = gr.plane(n, c);
        T* gtp = gt.plane(n, c);
        for (std::size_t i = 0; i < d.plane(); ++i) {
          grp[i] = g[i] * mp[i];
          gtp[i] = g[i] * (T(1) - mp[i]);
          gmp[i] += g[i] * (rp[i] - tp[i]);
        }
      }
    }
    if (self.input_needs_grad(0)) self.inputs[0]->accumulate(gr);
    if (self.input_needs_grad(1)) self.inputs[1]->accumulate(gt);
    if (self.input_needs_grad(2)) self.inputs[2]->accumulate(gm);
  });
}

// Per batch item: x / ||x||.
template <typename T>
Var<T> l2_normalize(const Var<T>& x) {
  const Dims d = x.dims();
  const std::size_t per = d.c * d.plane();
  BasicTensor<T> y = x.value();
  std::vector<T> norms(d.n);
  for (std::size_t n = 0; n < d.n; ++n) {
    double s = 0;
    for (std::size_t i = 0; i < per; ++i) s += static_cast<double>(y[n * per + i]) * y[n * per + i];
    if (s == 0) throw std::invalid_argument("l2_normalize: zero vector");
    norms[n] = static_cast<T>(std::sqrt(s));
    for (std::size_t i = 0; i < per; ++i) y[n * per + i] /= norms[n];
  }
  return make_result<T>(std::move(y), {x}, [norms, per](Node<T>& self) {
    BasicTensor<T> g(self.value.dims());
    for (std::size_t n = 0; n < norms.size(); ++n) {
      T dot = 0;
      for (std::size_t i = 0; i < per; ++i) dot += self.value[n * per + i] * self.grad[n * per + i];
      for (std::size_t i = 0; i < per; ++i) {
        g[n * per + i] = (self.grad[n * per + i] - self.value[n * per + i] * dot) / norms[n];
      }
    }
    self.inputs[0]->accumulate(g);
  });
}

// ---------------------------------------------------------------------------
// Scalar reductions used by the losses.

// mean |a - b|; the subgradient of |.| at 0 is taken as 0.
template <typename T>
Var<T> mean_abs_diff(const Var<T>& a, const Var<T>& b) {
  if (a.dims() != b.dims()) shape_fail("mean_abs_diff: ", a.dims().str(), " vs ", b.dims().str());
  const std::size_t n = a.value().size();
  T s = 0;
  for (std::size_t i = 0; i < n; ++i) s += std::abs(a.value()[i] - b.value()[i]);
  const T inv = T(1) / static_cast<T>(n);
  return make_result<T>(BasicTensor<T>::scalar(s * inv), {a, b}, [inv](Node<T>& self) {
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    BasicTensor<T> g(av.dims());
    const T go = self.grad[0] * inv;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T d = av[i] - bv[i];
      g[i] = d > 0 ? go : (d < 0 ? -go : T(0));
    }
    if (self.input_needs_grad(0)) self.inputs[0]->accumulate(g);
    if (self.input_needs_grad(1)) {
      for (auto& v : g.values()) v = -v;
      self.inputs[1]->accumulate(g);
    }
  });
}

// (1 / N) * sum (a - b)^2 with N the element count.
template <typename T>
Var<T> mean_sq_diff(const Var<T>& a, const Var<T>& b) {
  if (a.dims() != b.dims()) shape_fail("mean_sq_diff: ", a.dims().str(), " vs ", b.dims().str());
  const std::size_t n = a.value().size();
  T s = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T d = a.value()[i] - b.value()[i];
    s += d * d;
  }
  const T inv = T(1) / static_cast<T>(n);
  return make_result<T>(BasicTensor<T>::scalar(s * inv), {a, b}, [inv](Node<T>& self) {
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    BasicTensor<T> g(av.dims());
    const T go = T(2) * self.grad[0] * inv;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = go * (av[i] - bv[i]);
    if (self.input_needs_grad(0)) self.inputs[0]->accumulate(g);
    if (self.input_needs_grad(1)) {
      for (auto& v : g.values()) v = -v;
      self.inputs[1]->accumulate(g);
    }
  });
}

// mean |a - b| over elements where sel != 0; zero when sel selects nothing.
template <typename T>
Var<T> masked_mean_abs_diff(const Var<T>& a, const Var<T>& b, const BasicTensor<T>& sel) {
  if (a.dims() != b.dims()) shape_fail("masked_mean_abs_diff: ", a.dims().str(), " vs ", b.dims().str());
  if (sel.dims() != a.dims()) shape_fail("masked_mean_abs_diff: selector ", sel.dims().str(), " vs ", a.dims().str());
  std::size_t count = 0;
  T s = 0;
  for (std::size_t i = 0; i < sel.size(); ++i) {
    if (sel[i] != T(0)) {
      ++count;
      s += std::abs(a.value()[i] - b.value()[i]);
    }
  }
  const T inv = count ? T(1) / static_cast<T>(count) : T(0);
  return make_result<T>(BasicTensor<T>::scalar(s * inv), {a, b}, [inv, sel](Node<T>& self) {
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    BasicTensor<T> g(av.dims());
    const T go = self.grad[0] * inv;
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (sel[i] == T(0)) continue;
      const T d = av[i] - bv[i];
      g[i] = d > 0 ? go : (d < 0 ? -go : T(0));
    }
    if (self.input_needs_grad(0)) self.inputs[0]->accumulate(g);
    if (self.input_needs_grad(1)) {
      for (auto& v : g.values()) v = -v;
      self.inputs[1]->accumulate(g);
    }
  });
}

// Cosine of the angle between a and b, both flattened.
template <typename T>
Var<T> cosine_similarity(const Var<T>& a, const Var<T>& b) {
  if (a.value().size() != b.value().size()) {
    shape_fail("cosine_similarity: lengths ", a.value().size(), " vs ", b.value().size());
  }
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.value().size(); ++i) {
    const double x = a.value()[i], y = b.value()[i];
    dot += x * y;
    na += x * x;
    nb += y * y;
  }
  if (na == 0 || nb == 0) throw std::invalid_argument("cosine_similarity: zero vector");
  const double ra = std::sqrt(na), rb = std::sqrt(nb);
  const double c = dot / (ra * rb);
  return make_result<T>(BasicTensor<T>::scalar(static_cast<T>(c)), {a, b}, [ra, rb, c](Node<T>& self) {
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    const double go = self.grad[0];
    if (self.input_needs_grad(0)) {
      BasicTensor<T> g(av.dims());
      for (std::size_t i = 0; i < g.size(); ++i) {
        g[i] = static_cast<T>(go * (bv[i] / (ra * rb) - c * av[i] / (ra * ra)));
      }
      self.inputs[0]->accumulate(g);
    }
    if (self.input_needs_grad(1)) {
      BasicTensor<T> g(bv.dims());
      for (std::size_t i = 0; i < g.size(); ++i) {
        g[i] = static_cast<T>(go * (av[i] / (ra * rb) - c * bv[i] / (rb * rb)));
      }
      self.inputs[1]->accumulate(g);
    }
  });
}

// mean(relu(offset + sign * d)): hinge terms for the adversarial loss.
template <typename T>
Var<T> mean_hinge(const Var<T>& d, T sign, T offset = T(1)) {
  const std::size_t n = d.value().size();
  T s = 0;
  for (std::size_t i = 0; i < n; ++i) s += std::max(T(0), offset + sign * d.value()[i]);
  const T inv = T(1) / static_cast<T>(n);
  return make_result<T>(BasicTensor<T>::scalar(s * inv), {d}, [sign, offset, inv](Node<T>& self) {
    const auto& dv = self.inputs[0]->value;
    BasicTensor<T> g(dv.dims());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = (offset + sign * dv[i]) > 0 ? sign * inv * self.grad[0] : T(0);
    self.inputs[0]->accumulate(g);
  });
}

}  // namespace ag
}  // namespace idn
