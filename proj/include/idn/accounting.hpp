#pragma once

// Layer descriptions and exact parameter / multiply-accumulate accounting.
//
// One multiply-accumulate is reported as one "FLOP" throughout. Bias
// additions, activations and resampling are not counted.

#include <cstdint>
#include <string>
#include <string_view>

#include "idn/tensor.hpp"

namespace idn {

enum class LayerKind { depthwise, pointwise, standard, fully_connected, upsample, activation };

enum class Injection { none, predicted_depthwise, modulated_pointwise };

inline std::string_view to_string(LayerKind k) {
  switch (k) {
    case LayerKind::depthwise: return "depthwise";
    case LayerKind::pointwise: return "pointwise";
    case LayerKind::standard: return "standard";
    case LayerKind::fully_connected: return "fully_connected";
    case LayerKind::upsample: return "upsample";
    case LayerKind::activation: return "activation";
  }
  return "?";
}

inline std::string_view to_string(Injection i) {
  switch (i) {
    case Injection::none: return "none";
    case Injection::predicted_depthwise: return "predicted_depthwise";
    case Injection::modulated_pointwise: return "modulated_pointwise";
  }
  return "?";
}

struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::pointwise;
  std::size_t c_in = 0;
  std::size_t c_out = 0;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
  bool has_bias = true;
  Injection injection = Injection::none;
  // Upsampling factor; only meaningful for LayerKind::upsample.
  std::size_t factor = 1;

  void validate() const {
    auto fail = [&](const std::string& why) { shape_fail("layer '", name, "': ", why); };
    if (stride == 0) fail("stride must be >= 1");
    switch (kind) {
      case LayerKind::depthwise:
        if (c_out != c_in) fail("depthwise layer needs c_out == c_in");
        if (injection == Injection::modulated_pointwise) fail("depthwise layer cannot be modulated");
        break;
      case LayerKind::pointwise:
        if (kernel != 1) fail("pointwise layer needs kernel == 1");
        if (stride != 1 || padding != 0) fail("pointwise layer needs stride 1 and no padding");
        if (injection == Injection::predicted_depthwise) fail("pointwise layer cannot be predicted");
        break;
      case LayerKind::standard:
      case LayerKind::fully_connected:
      case LayerKind::upsample:
      case LayerKind::activation:
        if (injection != Injection::none) fail("only depthwise/pointwise layers take injection");
        break;
    }
    if (kind == LayerKind::upsample && factor == 0) fail("upsample factor must be >= 1");
  }

  // Scalars in the layer's kernel (excludes bias).
  std::uint64_t kernel_params() const {
    switch (kind) {
      case LayerKind::depthwise: return std::uint64_t{c_in} * kernel * kernel;
      case LayerKind::pointwise: return std::uint64_t{c_in} * c_out;
      case LayerKind::standard: return std::uint64_t{c_out} * c_in * kernel * kernel;
      case LayerKind::fully_connected: return std::uint64_t{c_in} * c_out;
      case LayerKind::upsample:
      case LayerKind::activation: return 0;
    }
    return 0;
  }

  std::uint64_t bias_params() const {
    if (!has_bias) return 0;
    switch (kind) {
      case LayerKind::depthwise:
      case LayerKind::pointwise:
      case LayerKind::standard:
      case LayerKind::fully_connected: return c_out;
      default: return 0;
    }
  }
};

inline std::uint64_t count_params(const LayerSpec& spec) { return spec.kernel_params() + spec.bias_params(); }

// Output extent of a layer applied to an input of extent `in`.
inline Dims layer_output_dims(const LayerSpec& spec, Dims in) {
  auto conv_extent = [&](std::size_t x) {
    if (x + 2 * spec.padding < spec.kernel) shape_fail("layer '", spec.name, "': input smaller than kernel");
    return (x + 2 * spec.padding - spec.kernel) / spec.stride + 1;
  };
  switch (spec.kind) {
    case LayerKind::depthwise:
    case LayerKind::standard: return {in.n, spec.c_out, conv_extent(in.h), conv_extent(in.w)};
    case LayerKind::pointwise: return {in.n, spec.c_out, in.h, in.w};
    case LayerKind::fully_connected: return {in.n, spec.c_out, 1, 1};
    case LayerKind::upsample: return {in.n, in.c, in.h * spec.factor, in.w * spec.factor};
    case LayerKind::activation: return in;
  }
  return in;
}

// Multiply-accumulates for a batch of `in.n` inputs (n == 0 treated as 1).
inline std::uint64_t count_macs(const LayerSpec& spec, Dims in) {
  const std::uint64_t batch = in.n == 0 ? 1 : in.n;
  const Dims out = layer_output_dims(spec, in);
  const std::uint64_t pixels = std::uint64_t{out.h} * out.w;
  switch (spec.kind) {
    case LayerKind::depthwise:
    case LayerKind::pointwise:
    case LayerKind::standard: return batch * spec.kernel_params() * pixels;
    case LayerKind::fully_connected: return batch * spec.kernel_params();
    case LayerKind::upsample:
    case LayerKind::activation: return 0;
  }
  return 0;
}

// Running tally of executed multiply-accumulates, filled by instrumented
// forward passes.
struct MacCounter {
  std::uint64_t macs = 0;
  std::uint64_t layers = 0;

  void add(const LayerSpec& spec, Dims in) {
    macs += count_macs(spec, in);
    ++layers;
  }
};

}  // namespace idn
