#pragma once

// Procedural face-like images for tests, the toy dataset and the quality
// ladder. A "face" is an ellipse with eyes, mouth and hair over a gradient
// background; identity traits and pose/background attributes are drawn
// separately so sources and targets can be mixed.

#include <algorithm>
#include <cmath>

#include "idn/random.hpp"
#include "idn/tensor.hpp"

namespace idn::synthetic {

struct Identity {
  double skin[3];
  double hair[3];
  double eye[3];
  double eye_sep;   // fraction of face width
  double eye_size;
  double mouth_w;
  double face_aspect;
};

struct Attributes {
  double cx, cy;    // face centre, in [0,1] image units
  double radius;    // face half-width
  double tilt;      // radians
  double bg0[3], bg1[3];
  double bg_angle;
  double mouth_open;
};

inline Identity random_identity(Rng& rng) {
  Identity id{};
  const double tone = rng.uniform(-0.6, 0.7);
  id.skin[0] = std::clamp(tone + 0.25, -1.0, 1.0);
  id.skin[1] = std::clamp(tone - 0.05 + rng.uniform(-0.1, 0.1), -1.0, 1.0);
  id.skin[2] = std::clamp(tone - 0.25 + rng.uniform(-0.1, 0.1), -1.0, 1.0);
  for (double& h : id.hair) h = rng.uniform(-1.0, 0.4);
  for (double& e : id.eye) e = rng.uniform(-1.0, 0.6);
  id.eye_sep = rng.uniform(0.32, 0.52);
  id.eye_size = rng.uniform(0.08, 0.16);
  id.mouth_w = rng.uniform(0.25, 0.55);
  id.face_aspect = rng.uniform(1.1, 1.45);
  return id;
}

inline Attributes random_attributes(Rng& rng) {
  Attributes a{};
  a.cx = rng.uniform(0.42, 0.58);
  a.cy = rng.uniform(0.45, 0.58);
  a.radius = rng.uniform(0.24, 0.32);
  a.tilt = rng.uniform(-0.3, 0.3);
  for (double& b : a.bg0) b = rng.uniform(-1.0, 1.0);
  for (double& b : a.bg1) b = rng.uniform(-1.0, 1.0);
  a.bg_angle = rng.uniform(0.0, 6.283185307179586);
  a.mouth_open = rng.uniform(0.0, 1.0);
  return a;
}

namespace detail {

// Soft inside-indicator from a signed distance (negative inside), about one
// pixel wide.
inline double soft(double sd, double px) { return 1.0 / (1.0 + std::exp(sd / px)); }

}  // namespace detail

// Renders (1, 3, size, size) in [-1, 1]. If `mask` is given it receives the
// (1, 1, size, size) face-and-hair foreground in [0, 1].
inline Tensor render(const Identity& id, const Attributes& at, std::size_t size, Tensor* mask = nullptr) {
  Tensor img({1, 3, size, size});
  if (mask) *mask = Tensor({1, 1, size, size});
  const double px = 1.0 / static_cast<double>(size);
  const double ct = std::cos(at.tilt), st = std::sin(at.tilt);
  const double ga = std::cos(at.bg_angle), gb = std::sin(at.bg_angle);
  const double rx = at.radius, ry = at.radius * id.face_aspect;
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double u = (static_cast<double>(x) + 0.5) * px, v = (static_cast<double>(y) + 0.5) * px;
      // Face-local coordinates (unit ellipse radius).
      const double dx = u - at.cx, dy = v - at.cy;
      const double lx = (ct * dx + st * dy) / rx, ly = (-st * dx + ct * dy) / ry;
      const double lpx = px / rx;

      const double t = std::clamp(0.5 + 0.5 * ((u - 0.5) * ga + (v - 0.5) * gb) * 1.4, 0.0, 1.0);
      double c[3];
      for (int k = 0; k < 3; ++k) c[k] = at.bg0[k] * (1 - t) + at.bg1[k] * t;

      const double r = std::sqrt(lx * lx + ly * ly);
      // Hair: a larger ellipse cap above the face.
      const double hx = lx / 1.12, hy = (ly + 0.18) / 1.08;
      const double hair = detail::soft(std::sqrt(hx * hx + hy * hy) - 1.0, lpx) * detail::soft(ly + 0.05, lpx * 4);
      const double face = detail::soft(r - 1.0, lpx);
      for (int k = 0; k < 3; ++k) c[k] = c[k] * (1 - hair) + id.hair[k] * hair;
      const double shade = 1.0 - 0.25 * std::clamp(r, 0.0, 1.0);
      for (int k = 0; k < 3; ++k) c[k] = c[k] * (1 - face) + id.skin[k] * shade * face;

      for (int side = -1; side <= 1; side += 2) {
        const double ex = lx - side * id.eye_sep, ey = ly + 0.2;
        const double e = detail::soft(std::sqrt(ex * ex + ey * ey * 2.0) - id.eye_size, lpx) * face;
        for (int k = 0; k < 3; ++k) c[k] = c[k] * (1 - e) + id.eye[k] * e;
      }
      const double mh = 0.04 + 0.08 * at.mouth_open;
      const double mx = lx / id.mouth_w, my = (ly - 0.45) / mh;
      const double m = detail::soft(std::sqrt(mx * mx + my * my) - 1.0, lpx / mh) * face;
      for (int k = 0; k < 3; ++k) c[k] = c[k] * (1 - m) + (-0.6 + 0.2 * id.skin[k]) * m;

      for (std::size_t k = 0; k < 3; ++k) img.at(0, k, y, x) = static_cast<float>(std::clamp(c[k], -1.0, 1.0));
      if (mask) mask->at(0, 0, y, x) = static_cast<float>(std::max(face, hair));
    }
  }
  return img;
}

inline Tensor random_face(Rng& rng, std::size_t size, Tensor* mask = nullptr) {
  const Identity id = random_identity(rng);
  const Attributes at = random_attributes(rng);
  return render(id, at, size, mask);
}

// Separable Gaussian blur with zero-flux (clamped) borders.
inline Tensor gaussian_blur(const Tensor& x, double sigma) {
  if (sigma <= 0) return x;
  const int r = std::max(1, static_cast<int>(std::ceil(3 * sigma)));
  std::vector<double> k(2 * static_cast<std::size_t>(r) + 1);
  double s = 0;
  for (int i = -r; i <= r; ++i) s += k[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (double& v : k) v /= s;
  const Dims d = x.dims();
  Tensor tmp(d), out(d);
  auto clampi = [](long v, long hi) { return static_cast<std::size_t>(std::clamp(v, 0L, hi - 1)); };
  for (std::size_t n = 0; n < d.n; ++n) {
    for (std::size_t c = 0; c < d.c; ++c) {
      const float* in = x.plane(n, c);
      float* t = tmp.plane(n, c);
      float* o = out.plane(n, c);
      for (std::size_t y = 0; y < d.h; ++y) {
        for (std::size_t xx = 0; xx < d.w; ++xx) {
          double acc = 0;
          for (int i = -r; i <= r; ++i) {
            acc += k[static_cast<std::size_t>(i + r)] * in[y * d.w + clampi(static_cast<long>(xx) + i, static_cast<long>(d.w))];
          }
          t[y * d.w + xx] = static_cast<float>(acc);
        }
      }
      for (std::size_t y = 0; y < d.h; ++y) {
        for (std::size_t xx = 0; xx < d.w; ++xx) {
          double acc = 0;
          for (int i = -r; i <= r; ++i) {
            acc += k[static_cast<std::size_t>(i + r)] * t[clampi(static_cast<long>(y) + i, static_cast<long>(d.h)) * d.w + xx];
          }
          o[y * d.w + xx] = static_cast<float>(acc);
        }
      }
    }
  }
  return out;
}

// Degradation of strength `severity` in [0, 1]: blur then additive noise.
// Severity 0 returns the input unchanged.
inline Tensor degrade(const Tensor& x, double severity, Rng& rng) {
  if (severity <= 0) return x;
  const double scale = static_cast<double>(x.dims().w) / 64.0;
  Tensor y = gaussian_blur(x, 2.5 * severity * scale);
  const double sd = 0.35 * severity;
  for (auto& v : y.values()) v = static_cast<float>(std::clamp(v + sd * rng.normal(), -1.0, 1.0));
  return y;
}

}  // namespace idn::synthetic
