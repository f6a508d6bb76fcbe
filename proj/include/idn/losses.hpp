#pragma once

// Training objectives: distillation (reconstruction + perceptual), identity,
// background mask, hinge adversarial, the reweighting coefficient and the
// weighted total. Also the frozen helper networks they rely on: a feature
// pyramid, a patch discriminator and the teacher-output quality scorer.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "idn/dynamic_conv.hpp"
#include "idn/image_io.hpp"
#include "idn/optim.hpp"
#include "idn/params.hpp"

namespace idn {

struct LossWeights {
  double rec = 30;
  double per = 5;
  double id = 3;
  double mask = 10;

  void validate() const {
    if (!(rec >= 0 && per >= 0 && id >= 0 && mask >= 0)) throw std::invalid_argument("loss weights must be >= 0");
  }
};

// ---------------------------------------------------------------------------
// Feature providers for the perceptual term.

template <typename T>
class FeatureModel {
 public:
  virtual ~FeatureModel() = default;
  virtual std::size_t levels() const = 0;
  virtual std::vector<Var<T>> features(const Var<T>& img) const = 0;
};

using FeatureProvider = FeatureModel<float>;

// Returns the image itself as the only level.
template <typename T>
class IdentityFeatures : public FeatureModel<T> {
 public:
  std::size_t levels() const override { return 1; }
  std::vector<Var<T>> features(const Var<T>& img) const override { return {img}; }
};

inline constexpr std::uint64_t kStubFeatureSeed = 0xfea7u;

// Frozen fixed-seed conv pyramid: level i is a 3x3 conv (stride 1 for the
// first level, 2 after) followed by leaky ReLU.
template <typename T>
class StubFeatureProvider : public FeatureModel<T> {
 public:
  explicit StubFeatureProvider(std::vector<std::size_t> widths = {8, 16, 32}, std::uint64_t seed = kStubFeatureSeed) {
    if (widths.empty()) throw std::invalid_argument("feature pyramid needs at least one level");
    Rng rng(seed);
    std::size_t in = 3;
    for (std::size_t i = 0; i < widths.size(); ++i) {
      const std::string n = "feat.conv" + std::to_string(i);
      params_.set(n + ".weight",
                  Var<T>::constant(he_init<float>({widths[i], in, 3, 3}, in * 9, rng).template cast<T>()));
      params_.set(n + ".bias", Var<T>::constant(BasicTensor<T>({1, widths[i], 1, 1})));
      in = widths[i];
    }
    levels_ = widths.size();
  }

  explicit StubFeatureProvider(const std::map<std::string, BasicTensor<T>>& weights)
      : params_(ParamMap<T>::constants(weights)) {
    while (params_.contains("feat.conv" + std::to_string(levels_) + ".weight")) ++levels_;
    if (levels_ == 0) throw MissingParamError("feature weights have no 'feat.conv0.weight'");
  }

  std::size_t levels() const override { return levels_; }
  std::map<std::string, BasicTensor<T>> tensors() const { return params_.tensors(); }

  std::vector<Var<T>> features(const Var<T>& img) const override {
    std::vector<Var<T>> out;
    Var<T> x = img;
    for (std::size_t i = 0; i < levels_; ++i) {
      const std::string n = "feat.conv" + std::to_string(i);
      x = ag::act(ag::conv_standard(x, params_.at(n + ".weight"), params_.find(n + ".bias"), ConvArgs{i ? 2u : 1u, 1}),
                  Activation::leaky_relu);
      out.push_back(x);
    }
    return out;
  }

 private:
  ParamMap<T> params_;
  std::size_t levels_ = 0;
};

// ---------------------------------------------------------------------------
// Individual terms. Graph versions take Vars; plain versions wrap constants.

template <typename T>
Var<T> rec_loss(const Var<T>& teacher_out, const Var<T>& student_out) {
  return ag::mean_abs_diff(student_out, teacher_out);
}

template <typename T>
Var<T> perceptual_loss(const Var<T>& teacher_out, const Var<T>& student_out, const FeatureModel<T>& f) {
  if (teacher_out.dims() != student_out.dims()) {
    shape_fail("perceptual_loss: ", teacher_out.dims().str(), " vs ", student_out.dims().str());
  }
  const auto ft = f.features(teacher_out);
  const auto fs = f.features(student_out);
  std::vector<std::pair<T, Var<T>>> terms;
  for (std::size_t i = 0; i < ft.size(); ++i) terms.emplace_back(T(1), ag::mean_sq_diff(fs[i], ft[i]));
  return ag::weighted_sum<T>(terms);
}

// 1 - cos(z_src, z_gen).
template <typename T>
Var<T> identity_loss(const Var<T>& z_src, const Var<T>& z_gen) {
  return ag::weighted_sum<T>(std::vector<std::pair<T, Var<T>>>{{T(-1), ag::cosine_similarity(z_src, z_gen)}}, T(1));
}

// Mean |m_target - m_gen| over background-selected elements (selector != 0).
template <typename T>
Var<T> mask_loss(const Var<T>& m_target, const Var<T>& m_gen, const BasicTensor<T>& bg_selector) {
  return ag::masked_mean_abs_diff(m_gen, m_target, bg_selector);
}

enum class AdvSide { generator, discriminator };

// Hinge loss on discriminator outputs.
template <typename T>
Var<T> adversarial_loss(const Var<T>& d_real, const Var<T>& d_fake, AdvSide side) {
  if (side == AdvSide::generator) return ag::scale(ag::mean(d_fake), T(-1));
  return ag::add(ag::mean_hinge(d_real, T(-1)), ag::mean_hinge(d_fake, T(1)));
}

inline double rec_loss(const Tensor& teacher_out, const Tensor& student_out) {
  return rec_loss(Var<float>::constant(teacher_out), Var<float>::constant(student_out)).value().item();
}

inline double perceptual_loss(const Tensor& teacher_out, const Tensor& student_out, const FeatureProvider& f) {
  return perceptual_loss(Var<float>::constant(teacher_out), Var<float>::constant(student_out), f).value().item();
}

inline double identity_loss(const IdentityEmbedding& z_src, const IdentityEmbedding& z_gen) {
  return identity_loss(Var<float>::constant(z_src.tensor()), Var<float>::constant(z_gen.tensor())).value().item();
}

inline double mask_loss(const Tensor& m_target, const Tensor& m_gen, const Tensor& bg_selector) {
  return mask_loss(Var<float>::constant(m_target), Var<float>::constant(m_gen), bg_selector).value().item();
}

// Background selector from a target mask: 1 where the mask is below 0.5.
template <typename T>
BasicTensor<T> background_selector(const BasicTensor<T>& m_target) {
  BasicTensor<T> sel(m_target.dims());
  for (std::size_t i = 0; i < sel.size(); ++i) sel[i] = m_target[i] < T(0.5) ? T(1) : T(0);
  return sel;
}

// ---------------------------------------------------------------------------
// Reweighting and total.

// cos(z_src, z_teacher)^2 * q, clamped to [0, 1].
inline double reweight_alpha(const IdentityEmbedding& z_src, const IdentityEmbedding& z_teacher_out, double q) {
  if (z_src.dim() != z_teacher_out.dim()) shape_fail("reweight_alpha: embedding lengths differ");
  double dot = 0;
  for (std::size_t i = 0; i < z_src.dim(); ++i) dot += static_cast<double>(z_src.values()[i]) * z_teacher_out.values()[i];
  const double c = dot / (z_src.norm() * z_teacher_out.norm());
  return std::clamp(c * c * std::clamp(q, 0.0, 1.0), 0.0, 1.0);
}

struct LossParts {
  double rec = 0, per = 0, id = 0, mask = 0, adv = 0;
};

struct LossBundle {
  double rec = 0, per = 0, id = 0, mask = 0, adv = 0;
  double alpha = 1;
  double total = 0;
};

class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline LossBundle total_loss(const LossParts& p, const LossWeights& w, double alpha) {
  w.validate();
  const std::pair<const char*, double> named[] = {
      {"rec", p.rec}, {"per", p.per}, {"id", p.id}, {"mask", p.mask}, {"adv", p.adv}, {"alpha", alpha}};
  for (const auto& [name, v] : named) {
    if (!std::isfinite(v)) throw NonFiniteLoss(std::string("loss term '") + name + "' is not finite");
  }
  LossBundle b{p.rec, p.per, p.id, p.mask, p.adv, alpha, 0};
  b.total = p.adv + alpha * (w.rec * p.rec + w.per * p.per) + w.id * p.id + w.mask * p.mask;
  return b;
}

// Graph form of the total; alpha gates only the rec and per terms. Undefined
// parts are skipped.
template <typename T>
Var<T> total_loss_graph(const Var<T>& rec, const Var<T>& per, const Var<T>& id, const Var<T>& mask, const Var<T>& adv,
                        const LossWeights& w, T alpha) {
  w.validate();
  std::vector<std::pair<T, Var<T>>> terms;
  auto push = [&](T c, const Var<T>& v) {
    if (v.defined() && c != T(0)) terms.emplace_back(c, v);
  };
  push(alpha * static_cast<T>(w.rec), rec);
  push(alpha * static_cast<T>(w.per), per);
  push(static_cast<T>(w.id), id);
  push(static_cast<T>(w.mask), mask);
  push(T(1), adv);
  return ag::weighted_sum<T>(terms);
}

// ---------------------------------------------------------------------------
// Patch discriminator: three 4x4 stride-2 convs with leaky ReLU, then a 3x3
// conv to one logit per patch.

template <typename T>
class PatchDiscriminator {
 public:
  static constexpr std::size_t kWidths[3] = {32, 64, 64};

  static PatchDiscriminator init(std::uint64_t seed) {
    PatchDiscriminator d;
    Rng rng(seed);
    std::size_t in = 3;
    for (std::size_t i = 0; i < 3; ++i) {
      const std::string n = "disc.conv" + std::to_string(i);
      d.params_.set(n + ".weight", Var<T>::parameter(he_init<T>({kWidths[i], in, 4, 4}, in * 16, rng)));
      d.params_.set(n + ".bias", Var<T>::parameter(BasicTensor<T>({1, kWidths[i], 1, 1})));
      in = kWidths[i];
    }
    d.params_.set("disc.out.weight", Var<T>::parameter(he_init<T>({1, in, 3, 3}, in * 9, rng, 0.5)));
    d.params_.set("disc.out.bias", Var<T>::parameter(BasicTensor<T>({1, 1, 1, 1})));
    return d;
  }

  static PatchDiscriminator from_tensors(const std::map<std::string, BasicTensor<T>>& ts) {
    PatchDiscriminator d;
    d.params_ = ParamMap<T>::constants(ts).trainable();
    for (const auto& n : names()) d.params_.at(n);
    return d;
  }

  static std::vector<std::string> names() {
    std::vector<std::string> out;
    for (const char* l : {"disc.conv0", "disc.conv1", "disc.conv2", "disc.out"}) {
      out.push_back(std::string(l) + ".weight");
      out.push_back(std::string(l) + ".bias");
    }
    return out;
  }

  // (N, 3, H, W) -> (N, 1, H/8, W/8) patch logits.
  Var<T> operator()(const Var<T>& x) const {
    if (x.dims().c != 3 || x.dims().h % 8 != 0 || x.dims().w % 8 != 0) {
      shape_fail("discriminator needs (N, 3, H, W) with H, W multiples of 8, got ", x.dims().str());
    }
    Var<T> h = x;
    for (std::size_t i = 0; i < 3; ++i) {
      const std::string n = "disc.conv" + std::to_string(i);
      h = ag::act(ag::conv_standard(h, params_.at(n + ".weight"), params_.at(n + ".bias"), ConvArgs{2, 1}),
                  Activation::leaky_relu);
    }
    return ag::conv_standard(h, params_.at("disc.out.weight"), params_.at("disc.out.bias"), ConvArgs{1, 1});
  }

  const ParamMap<T>& params() const { return params_; }
  ParamMap<T>& params() { return params_; }
  std::vector<Var<T>> variables() const {
    std::vector<Var<T>> out;
    for (const auto& [_, v] : params_) out.push_back(v);
    return out;
  }

 private:
  ParamMap<T> params_;
};

// ---------------------------------------------------------------------------
// Quality scorer: image -> [0, 1].

class QualityScorer {
 public:
  virtual ~QualityScorer() = default;
  virtual double score(const Tensor& img) const = 0;
};

class ConstantScorer : public QualityScorer {
 public:
  explicit ConstantScorer(double q) : q_(std::clamp(q, 0.0, 1.0)) {}
  double score(const Tensor&) const override { return q_; }

 private:
  double q_;
};

// Small conv net: three 3x3 stride-2 convs with leaky ReLU, global average
// pooling of both the features and their squares, a linear read-out and a
// sigmoid. The squared-pool branch lets it see local energy (blur, noise).
class ConvQualityScorer : public QualityScorer {
 public:
  static constexpr std::size_t kWidths[3] = {8, 16, 16};

  static ConvQualityScorer init(std::uint64_t seed) {
    ConvQualityScorer s;
    Rng rng(seed);
    std::size_t in = 3;
    for (std::size_t i = 0; i < 3; ++i) {
      const std::string n = "quality.conv" + std::to_string(i);
      s.params_.set(n + ".weight", Var<float>::parameter(he_init<float>({kWidths[i], in, 3, 3}, in * 9, rng)));
      s.params_.set(n + ".bias", Var<float>::parameter(Tensor({1, kWidths[i], 1, 1})));
      in = kWidths[i];
    }
    s.params_.set("quality.fc.weight", Var<float>::parameter(randn<float>({1, 2 * in, 1, 1}, rng, 0.1)));
    s.params_.set("quality.fc.bias", Var<float>::parameter(Tensor({1, 1, 1, 1})));
    return s;
  }

  static ConvQualityScorer from_tensors(const std::map<std::string, Tensor>& ts) {
    ConvQualityScorer s;
    s.params_ = ParamMap<float>::constants(ts);
    for (const char* n : {"quality.conv0.weight", "quality.conv1.weight", "quality.conv2.weight", "quality.fc.weight"}) {
      s.params_.at(n);
    }
    return s;
  }

  // (N, 3, H, W) -> (N, 1, 1, 1) scores in (0, 1).
  Var<float> graph(const Var<float>& x) const {
    Var<float> h = x;
    for (std::size_t i = 0; i < 3; ++i) {
      const std::string n = "quality.conv" + std::to_string(i);
      h = ag::act(ag::conv_standard(h, params_.at(n + ".weight"), params_.at(n + ".bias"), ConvArgs{2, 1}),
                  Activation::leaky_relu);
    }
    Var<float> pooled = ag::concat(ag::global_avg_pool(h), ag::global_avg_pool(ag::square(h)));
    return ag::act(ag::linear(pooled, params_.at("quality.fc.weight"), params_.at("quality.fc.bias")),
                   Activation::sigmoid);
  }

  double score(const Tensor& img) const override {
    if (img.dims().n != 1) shape_fail("quality scorer takes one image, got batch ", img.dims().n);
    return std::clamp(static_cast<double>(graph(Var<float>::constant(img)).value().item()), 0.0, 1.0);
  }

  std::map<std::string, Tensor> tensors() const { return params_.tensors(); }
  std::vector<Var<float>> variables() const {
    std::vector<Var<float>> out;
    for (const auto& [_, v] : params_) out.push_back(v);
    return out;
  }
  ConvQualityScorer frozen() const {
    ConvQualityScorer s;
    s.params_ = params_.frozen();
    return s;
  }

 private:
  ParamMap<float> params_;
};

struct ScorerTrainConfig {
  std::size_t epochs = 30;
  std::size_t batch = 8;
  double lr = 3e-3;
  std::uint64_t seed = 17;
};

struct ScoredImage {
  Tensor image;  // (1, 3, H, W)
  double score = 0;
};

// Fits a ConvQualityScorer by mean squared error. Returns the frozen scorer;
// `final_mse` (if given) receives the last epoch's mean training loss.
inline ConvQualityScorer train_quality_scorer(const std::vector<ScoredImage>& pairs, const ScorerTrainConfig& cfg = {},
                                              double* final_mse = nullptr) {
  if (pairs.empty()) throw std::invalid_argument("quality scorer needs at least one training pair");
  const Dims d0 = pairs.front().image.dims();
  for (const auto& p : pairs) {
    if (p.image.dims() != d0) shape_fail("quality scorer images must share dims; got ", p.image.dims().str());
    if (!(p.score >= 0 && p.score <= 1)) throw std::invalid_argument("quality scores must lie in [0, 1]");
  }
  ConvQualityScorer s = ConvQualityScorer::init(cfg.seed);
  Adam<float> opt(s.variables(), AdamConfig{cfg.lr, 0.9, 0.999, 1e-8});
  Rng rng(cfg.seed ^ 0x5c0e5ULL);
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);
  double epoch_loss = 0;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
    epoch_loss = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch) {
      const std::size_t b1 = std::min(order.size(), b0 + cfg.batch);
      std::vector<Tensor> imgs;
      Tensor target({b1 - b0, 1, 1, 1});
      for (std::size_t k = b0; k < b1; ++k) {
        imgs.push_back(pairs[order[k]].image);
        target[k - b0] = static_cast<float>(pairs[order[k]].score);
      }
      Var<float> pred = s.graph(Var<float>::constant(stack_batch<float>(imgs)));
      Var<float> loss = ag::mean_sq_diff(pred, Var<float>::constant(target));
      backward(loss);
      opt.step();
      epoch_loss += loss.value().item() * static_cast<double>(b1 - b0);
    }
    epoch_loss /= static_cast<double>(pairs.size());
  }
  if (final_mse) *final_mse = epoch_loss;
  return s.frozen();
}

// Synthetic degradation ladder: each base image degraded at a random
// severity, scored 1 - severity.
template <typename Degrade>
std::vector<ScoredImage> degradation_ladder(const std::vector<Tensor>& bases, std::size_t count, Rng& rng,
                                            Degrade&& degrade) {
  std::vector<ScoredImage> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const double sev = rng.uniform();
    out.push_back({degrade(bases[i % bases.size()], sev, rng), 1.0 - sev});
  }
  return out;
}

// Manifest of "<filename> <score>" lines, paths relative to `dir`.
inline std::vector<ScoredImage> load_scored_images(const std::string& dir, const std::string& manifest) {
  std::ifstream in(manifest);
  if (!in) throw ImageError("cannot open score manifest '" + manifest + "'");
  std::vector<ScoredImage> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    std::string file;
    double score = 0;
    if (!(ss >> file >> score) || score < 0 || score > 1) {
      throw std::invalid_argument(manifest + ":" + std::to_string(lineno) + ": expected '<file> <score in [0,1]>'");
    }
    out.push_back({load_image(dir + "/" + file), score});
  }
  return out;
}

// Spearman rank correlation with average ranks for ties.
inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) throw std::invalid_argument("spearman needs two equal-length series");
  auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return v[i] < v[j]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  const auto ra = ranks(a), rb = ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0 || sbb == 0) return 0;
  return sab / std::sqrt(saa * sbb);
}

}  // namespace idn
