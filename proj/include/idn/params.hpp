#pragma once

#include <map>
#include <stdexcept>
#include <string>

#include "idn/autograd.hpp"
#include "idn/random.hpp"

namespace idn {

class MissingParamError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// Ordered name -> Var map. Ordering keeps serialization deterministic.
template <typename T>
class ParamMap {
 public:
  const Var<T>& at(const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw MissingParamError("missing parameter '" + name + "'");
    return it->second;
  }

  // Undefined Var if absent (used for optional biases).
  Var<T> find(const std::string& name) const {
    auto it = vars_.find(name);
    return it == vars_.end() ? Var<T>() : it->second;
  }

  bool contains(const std::string& name) const { return vars_.count(name) != 0; }
  void set(const std::string& name, Var<T> v) { vars_[name] = std::move(v); }
  void erase(const std::string& name) { vars_.erase(name); }
  std::size_t size() const { return vars_.size(); }

  auto begin() const { return vars_.begin(); }
  auto end() const { return vars_.end(); }

  std::uint64_t scalar_count() const {
    std::uint64_t n = 0;
    for (const auto& [_, v] : vars_) n += v.value().size();
    return n;
  }

  // Same names, values wrapped as constants (frozen copy).
  ParamMap frozen() const {
    ParamMap out;
    for (const auto& [k, v] : vars_) out.set(k, Var<T>::constant(v.value()));
    return out;
  }

  // Same names, values as trainable leaves.
  ParamMap trainable() const {
    ParamMap out;
    for (const auto& [k, v] : vars_) out.set(k, Var<T>::parameter(v.value()));
    return out;
  }

  std::map<std::string, BasicTensor<T>> tensors() const {
    std::map<std::string, BasicTensor<T>> out;
    for (const auto& [k, v] : vars_) out.emplace(k, v.value());
    return out;
  }

  static ParamMap constants(const std::map<std::string, BasicTensor<T>>& ts) {
    ParamMap out;
    for (const auto& [k, t] : ts) out.set(k, Var<T>::constant(t));
    return out;
  }

  template <typename U>
  ParamMap<U> cast(bool as_parameters) const {
    ParamMap<U> out;
    for (const auto& [k, v] : vars_) {
      auto t = v.value().template cast<U>();
      out.set(k, as_parameters ? Var<U>::parameter(std::move(t)) : Var<U>::constant(std::move(t)));
    }
    return out;
  }

  void zero_grad() {
    for (auto& [_, v] : vars_) v.zero_grad();
  }

 private:
  std::map<std::string, Var<T>> vars_;
};

// He-style normal initialisation for a kernel with the given fan-in.
template <typename T>
BasicTensor<T> he_init(Dims dims, std::size_t fan_in, Rng& rng, double gain = 1.0) {
  const double sd = gain * std::sqrt(2.0 / static_cast<double>(fan_in == 0 ? 1 : fan_in));
  return randn<T>(dims, rng, sd);
}

}  // namespace idn
