#pragma once

// Distillation training: datasets, teacher oracles, and the student update
// loop over the IIN, the template's static parameters and a discriminator.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "idn/image_io.hpp"
#include "idn/injection.hpp"
#include "idn/losses.hpp"
#include "idn/optim.hpp"
#include "idn/synthetic.hpp"

namespace idn {

// ---------------------------------------------------------------------------
// Dataset: aligned (source, target, target mask) triples.

struct Sample {
  Tensor source;  // (1, 3, S, S)
  Tensor target;  // (1, 3, S, S)
  Tensor mask;    // (1, 1, S, S), foreground in [0, 1]
};

struct Dataset {
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
  std::size_t image_size() const { return empty() ? 0 : samples.front().target.dims().h; }

  void validate() const {
    if (empty()) throw std::invalid_argument("dataset is empty");
    const std::size_t s = image_size();
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const Sample& x = samples[i];
      const Dims img{1, 3, s, s}, m{1, 1, s, s};
      if (x.source.dims() != img || x.target.dims() != img || x.mask.dims() != m) {
        shape_fail("dataset sample ", i, " does not match the ", s, "x", s, " layout");
      }
    }
  }
};

inline std::vector<std::string> list_images(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw ImageError("'" + dir + "' is not a directory");
  std::vector<std::string> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && is_image_path(e.path().string())) out.push_back(e.path().string());
  }
  std::sort(out.begin(), out.end());
  return out;
}

// Directory with source/, target/ and mask/ holding index-matched images
// (matched by sorted file name order).
inline Dataset load_dataset(const std::string& dir) {
  const auto src = list_images(dir + "/source");
  const auto tgt = list_images(dir + "/target");
  const auto msk = list_images(dir + "/mask");
  if (src.size() != tgt.size() || src.size() != msk.size()) {
    throw ImageError("dataset '" + dir + "' has " + std::to_string(src.size()) + " sources, " +
                     std::to_string(tgt.size()) + " targets and " + std::to_string(msk.size()) + " masks");
  }
  Dataset d;
  for (std::size_t i = 0; i < src.size(); ++i) {
    d.samples.push_back({load_image(src[i]), load_image(tgt[i]), load_mask(msk[i])});
  }
  if (d.empty()) throw ImageError("dataset '" + dir + "' is empty");
  d.validate();
  return d;
}

inline std::string frame_name(std::size_t i, const char* ext = ".png") {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%05zu%s", i, ext);
  return buf;
}

inline void save_dataset(const std::string& dir, const Dataset& d) {
  namespace fs = std::filesystem;
  for (const char* sub : {"source", "target", "mask"}) fs::create_directories(dir + "/" + sub);
  for (std::size_t i = 0; i < d.size(); ++i) {
    save_image(dir + "/source/" + frame_name(i), d.samples[i].source);
    save_image(dir + "/target/" + frame_name(i), d.samples[i].target);
    save_mask(dir + "/mask/" + frame_name(i), d.samples[i].mask);
  }
}

// Sources and targets are independent random faces.
inline Dataset synthetic_dataset(std::size_t count, std::size_t size, std::uint64_t seed) {
  Dataset d;
  Rng rng(seed);
  for (std::size_t i = 0; i < count; ++i) {
    Sample s;
    s.source = synthetic::random_face(rng, size);
    s.target = synthetic::random_face(rng, size, &s.mask);
    d.samples.push_back(std::move(s));
  }
  return d;
}

// Quality scorer fitted on a degradation ladder of synthetic faces: 100 base
// faces, 500 graded copies.
inline ConvQualityScorer fit_synthetic_quality_scorer(std::size_t size, Rng& rng, double* mse = nullptr) {
  std::vector<Tensor> bases;
  for (int i = 0; i < 100; ++i) bases.push_back(synthetic::random_face(rng, size));
  const auto ladder = degradation_ladder(bases, 500, rng, [](const Tensor& x, double s, Rng& g) {
    return synthetic::degrade(x, s, g);
  });
  return train_quality_scorer(ladder, {}, mse);
}

// ---------------------------------------------------------------------------
// Teachers

class TeacherOracle {
 public:
  virtual ~TeacherOracle() = default;
  // Output for dataset item `index`; deterministic per item.
  virtual Tensor teach(const Sample& s, std::size_t index) const = 0;
};

inline constexpr std::uint64_t kTeacherSeed = 0x7eac4e12ULL;

// Frozen random U-Net of standard 3x3 convolutions over the target. The
// source enters as a pooled code added at the bottleneck. Its output is a
// bounded residual on the target, faded out away from the image centre so
// the background is mostly kept.
class SyntheticTeacher : public TeacherOracle {
 public:
  explicit SyntheticTeacher(std::uint64_t seed = kTeacherSeed, double gain = 0.6) : gain_(gain) {
    Rng rng(seed);
    auto conv = [&](const std::string& n, std::size_t cin, std::size_t cout, double g = 1.0) {
      w_[n + ".weight"] = he_init<float>({cout, cin, 3, 3}, cin * 9, rng, g);
      w_[n + ".bias"] = randn<float>({1, cout, 1, 1}, rng, 0.05);
    };
    conv("e0", 3, 24);
    conv("e1", 24, 48);
    conv("e2", 48, 64);
    conv("s0", 3, 16);
    conv("s1", 16, 32);
    w_["code.weight"] = he_init<float>({64, 32, 1, 1}, 32, rng, 2.0);
    conv("d1", 64 + 48, 48);
    conv("d0", 48 + 24, 24);
    conv("head", 24, 3, 0.7);
  }

  Tensor teach(const Sample& s, std::size_t) const override { return run(s.source, s.target); }

  Tensor run(const Tensor& source, const Tensor& target) const {
    const Dims d = target.dims();
    if (d.n != 1 || d.c != 3 || d.h % 4 != 0 || d.w % 4 != 0 || source.dims() != d) {
      shape_fail("synthetic teacher needs matching (1, 3, H, W) images with H, W multiples of 4");
    }
    auto conv = [&](const Tensor& x, const std::string& n, std::size_t stride, std::span<const float> bias) {
      return ops::conv2d_standard<float>(x, w_.at(n + ".weight"), bias, ConvArgs{stride, 1});
    };
    auto b = [&](const std::string& n) { return w_.at(n + ".bias").values(); };
    auto leaky = [](Tensor t) { return ops::activation(t, Activation::leaky_relu); };

    const Tensor s0 = ops::activation(conv(source, "s0", 2, b("s0")), Activation::tanh);
    const Tensor s1 = ops::activation(conv(s0, "s1", 2, b("s1")), Activation::tanh);
    const Tensor code = ops::fully_connected<float>(ops::global_avg_pool(s1), w_.at("code.weight"), {});
    Tensor bias2 = w_.at("e2.bias");
    for (std::size_t i = 0; i < bias2.size(); ++i) bias2[i] += code[i];

    const Tensor e0 = leaky(conv(target, "e0", 1, b("e0")));
    const Tensor e1 = leaky(conv(e0, "e1", 2, b("e1")));
    const Tensor e2 = leaky(conv(e1, "e2", 2, bias2.values()));
    const Tensor d1 = leaky(conv(ops::concat_channels(ops::upsample_nearest(e2, 2), e1), "d1", 1, b("d1")));
    const Tensor d0 = leaky(conv(ops::concat_channels(ops::upsample_nearest(d1, 2), e0), "d0", 1, b("d0")));
    const Tensor r = ops::activation(conv(d0, "head", 1, b("head")), Activation::tanh);

    Tensor out = target;
    for (std::size_t y = 0; y < d.h; ++y) {
      for (std::size_t x = 0; x < d.w; ++x) {
        const double u = (x + 0.5) / d.w - 0.5, v = (y + 0.5) / d.h - 0.52;
        const double win = 1.0 / (1.0 + std::exp((std::sqrt(u * u + v * v) - 0.32) / 0.04));
        for (std::size_t c = 0; c < 3; ++c) {
          const double o = target.at(0, c, y, x) + gain_ * win * r.at(0, c, y, x);
          out.at(0, c, y, x) = static_cast<float>(std::clamp(o, -1.0, 1.0));
        }
      }
    }
    return out;
  }

 private:
  std::map<std::string, Tensor> w_;
  double gain_;
};

// Precomputed outputs: a directory of images index-matched to the dataset.
class DirectoryTeacher : public TeacherOracle {
 public:
  explicit DirectoryTeacher(const std::string& dir) : files_(list_images(dir)) {
    if (files_.empty()) throw ImageError("teacher directory '" + dir + "' holds no images");
  }
  std::size_t size() const { return files_.size(); }
  Tensor teach(const Sample& s, std::size_t index) const override {
    if (index >= files_.size()) {
      throw ImageError("teacher directory has " + std::to_string(files_.size()) + " images, needs item " +
                       std::to_string(index));
    }
    Tensor t = load_image(files_[index]);
    if (t.dims() != s.target.dims()) shape_fail("teacher image '", files_[index], "' is ", t.dims().str());
    return t;
  }

 private:
  std::vector<std::string> files_;
};

// Wraps a teacher and degrades a fixed, seeded subset of its outputs.
class CorruptedTeacher : public TeacherOracle {
 public:
  CorruptedTeacher(const TeacherOracle& inner, std::size_t dataset_size, double fraction, std::uint64_t seed,
                   double min_severity = 0.7, double max_severity = 1.0)
      : inner_(inner), seed_(seed), lo_(min_severity), hi_(max_severity) {
    std::vector<std::size_t> idx(dataset_size);
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(seed);
    for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.index(i)]);
    const auto n = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(dataset_size)));
    corrupted_.insert(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(std::min(n, idx.size())));
  }

  bool is_corrupted(std::size_t index) const { return corrupted_.count(index) != 0; }
  const std::set<std::size_t>& corrupted() const { return corrupted_; }

  Tensor teach(const Sample& s, std::size_t index) const override {
    Tensor t = inner_.teach(s, index);
    if (!is_corrupted(index)) return t;
    Rng rng(seed_ ^ (0x9E3779B97F4A7C15ULL * (index + 1)));
    return synthetic::degrade(t, rng.uniform(lo_, hi_), rng);
  }

 private:
  const TeacherOracle& inner_;
  std::uint64_t seed_;
  double lo_, hi_;
  std::set<std::size_t> corrupted_;
};

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  double learning_rate = 1e-4;
  double disc_learning_rate = 0;  // 0: same as learning_rate
  double beta1 = 0.5;
  double beta2 = 0.999;
  std::size_t batch_size = 4;
  std::size_t steps = 2000;
  std::uint64_t seed = 1;
  LossWeights weights;
  bool reweight = true;                 // false: alpha = 1
  // Factor switches inside alpha, for ablations; a disabled factor counts as 1.
  bool identity_reweight = true;
  bool quality_reweight = true;
  std::optional<double> alpha_override;  // forces alpha for every sample
  bool adversarial = true;
  // For this many initial steps the image losses blend with the dataset mask
  // instead of the predicted one, and the mask loss covers every pixel.
  // Without it the predicted mask closes before the raw branch is any good and
  // the student settles on copying the target.
  std::size_t mask_warmup = 0;
  DemodEpsilon eps;

  void validate() const {
    if (!(learning_rate > 0)) throw std::invalid_argument("learning_rate must be > 0");
    if (disc_learning_rate < 0) throw std::invalid_argument("disc_learning_rate must be >= 0");
    if (batch_size == 0) throw std::invalid_argument("batch_size must be >= 1");
    weights.validate();
  }
};

struct LogRow {
  std::size_t step = 0;
  LossBundle loss;
};

inline const char* kLogHeader = "step,rec,per,id,mask,adv,alpha_mean,total";

inline std::string log_line(const LogRow& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g", r.step, r.loss.rec, r.loss.per, r.loss.id,
                r.loss.mask, r.loss.adv, r.loss.alpha, r.loss.total);
  return buf;
}

// Per-item quantities fixed before training: teacher output, source
// embedding and reweighting terms.
struct PreparedSample {
  Tensor source, target, mask, bg, teacher;
  IdentityEmbedding z_src;
  double cos = 1;  // cos(z_src, embedding of the teacher output)
  double q = 1;    // teacher output quality
  double alpha = 1;
};

class DistillTrainer {
 public:
  DistillTrainer(const IdnTemplate& tmpl, const IinParams<float>& iin, const EmbeddingProvider& embedder,
                 const FeatureProvider& features, const QualityScorer& scorer, TrainConfig cfg)
      : arch_(tmpl.arch),
        embedder_(embedder),
        features_(features),
        scorer_(scorer),
        cfg_(std::move(cfg)),
        disc_(PatchDiscriminator<float>::init(cfg_.seed ^ 0xd15cULL)),
        rng_(cfg_.seed) {
    cfg_.validate();
    static_ = ParamMap<float>::constants(tmpl.static_params).trainable();
    iin_ = IinParams<float>::from_map(*arch_, iin.to_map().trainable());
    std::vector<Var<float>> gen;
    for (const auto& [_, v] : static_) gen.push_back(v);
    for (const auto& v : iin_.variables()) gen.push_back(v);
    gen_opt_.emplace(gen, AdamConfig{cfg_.learning_rate, cfg_.beta1, cfg_.beta2, 1e-8});
    const double dlr = cfg_.disc_learning_rate > 0 ? cfg_.disc_learning_rate : cfg_.learning_rate;
    disc_opt_.emplace(disc_.variables(), AdamConfig{dlr, cfg_.beta1, cfg_.beta2, 1e-8});
  }

  void prepare(const Dataset& data, const TeacherOracle& teacher) {
    data.validate();
    const std::size_t s = data.image_size();
    if (s != arch_->config.input_size) {
      shape_fail("dataset images are ", s, "x", s, " but the network config expects ", arch_->config.input_size);
    }
    items_.clear();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const Sample& x = data.samples[i];
      PreparedSample p;
      p.source = x.source;
      p.target = x.target;
      p.mask = x.mask;
      p.bg = background_selector(x.mask);
      p.teacher = teacher.teach(x, i);
      p.z_src = embed(x.source);
      const IdentityEmbedding z_t = embed(p.teacher);
      p.q = scorer_.score(p.teacher);
      p.alpha = reweight_alpha(p.z_src, z_t, p.q);
      double dot = 0;
      for (std::size_t k = 0; k < p.z_src.dim(); ++k) dot += static_cast<double>(p.z_src.values()[k]) * z_t.values()[k];
      p.cos = dot / (p.z_src.norm() * z_t.norm());
      items_.push_back(std::move(p));
    }
    order_.clear();
  }

  const std::vector<PreparedSample>& items() const { return items_; }

  double alpha_for(const PreparedSample& p) const {
    if (cfg_.alpha_override) return *cfg_.alpha_override;
    if (!cfg_.reweight) return 1.0;
    if (cfg_.identity_reweight && cfg_.quality_reweight) return p.alpha;
    const double id = cfg_.identity_reweight ? p.cos * p.cos : 1.0;
    const double q = cfg_.quality_reweight ? std::clamp(p.q, 0.0, 1.0) : 1.0;
    return std::clamp(id * q, 0.0, 1.0);
  }

  // Next batch from per-epoch shuffles of the prepared items.
  std::vector<std::size_t> next_batch() {
    if (items_.empty()) throw std::logic_error("prepare() must run before training");
    std::vector<std::size_t> b;
    while (b.size() < cfg_.batch_size) {
      if (cursor_ >= order_.size()) {
        order_.resize(items_.size());
        std::iota(order_.begin(), order_.end(), 0);
        for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng_.index(i)]);
        cursor_ = 0;
      }
      b.push_back(order_[cursor_++]);
    }
    return b;
  }

  // One generator step then one discriminator step on the given items.
  LossBundle step(const std::vector<std::size_t>& batch) {
    const std::size_t B = batch.size();
    if (B == 0) throw std::invalid_argument("empty batch");
    const float inv_b = 1.0f / static_cast<float>(B);
    std::vector<std::pair<float, Var<float>>> totals;
    std::vector<Var<float>> fakes;
    LossBundle mean;
    mean.alpha = 0;
    for (std::size_t idx : batch) {
      const PreparedSample& p = items_.at(idx);
      const float alpha = static_cast<float>(alpha_for(p));
      const Var<float> target = Var<float>::constant(p.target);
      const ParamMap<float> params =
          injected_params(*arch_, static_, iin_, Var<float>::constant(p.z_src.tensor()), cfg_.eps);
      const IdnOutputs<float> out = forward_graph(*arch_, params, target);
      const bool warm = gen_opt_->steps() < cfg_.mask_warmup;
      const Var<float> gen = ag::blend(out.raw, target, warm ? Var<float>::constant(p.mask) : out.mask);
      const Var<float> teacher = Var<float>::constant(p.teacher);

      const Var<float> rec = rec_loss(teacher, gen);
      const Var<float> per = perceptual_loss(teacher, gen, features_);
      const Var<float> z_gen = embedder_.embed_graph(fit_to_size(gen, embedder_.input_size()));
      const Var<float> id = identity_loss(Var<float>::constant(p.z_src.tensor()), z_gen);
      const Var<float> msk = mask_loss(Var<float>::constant(p.mask), out.mask, warm ? Tensor(p.bg.dims(), 1.0f) : p.bg);
      Var<float> adv;
      if (cfg_.adversarial) adv = adversarial_loss(Var<float>(), disc_(gen), AdvSide::generator);

      const LossParts parts{rec.value().item(), per.value().item(), id.value().item(), msk.value().item(),
                            adv.defined() ? static_cast<double>(adv.value().item()) : 0.0};
      LossBundle b;
      try {
        b = total_loss(parts, cfg_.weights, alpha);
      } catch (const NonFiniteLoss& e) {
        throw NonFiniteLoss(std::string(e.what()) + " at step " + std::to_string(gen_opt_->steps() + 1) +
                            " (item " + std::to_string(idx) + ")");
      }
      mean.rec += b.rec / B;
      mean.per += b.per / B;
      mean.id += b.id / B;
      mean.mask += b.mask / B;
      mean.adv += b.adv / B;
      mean.alpha += b.alpha / B;
      mean.total += b.total / B;
      totals.emplace_back(inv_b, total_loss_graph(rec, per, id, msk, adv, cfg_.weights, alpha));
      fakes.push_back(gen.detach());
    }
    backward(ag::weighted_sum<float>(totals));
    gen_opt_->step();

    disc_opt_->zero_grad();
    if (cfg_.adversarial) {
      std::vector<std::pair<float, Var<float>>> dl;
      for (std::size_t k = 0; k < B; ++k) {
        const Var<float> real = disc_(Var<float>::constant(items_[batch[k]].target));
        dl.emplace_back(inv_b, adversarial_loss(real, disc_(fakes[k]), AdvSide::discriminator));
      }
      backward(ag::weighted_sum<float>(dl));
      disc_opt_->step();
    }
    return mean;
  }

  // Mean rec between the specialised student's blended output and `refs`
  // (defaults to the prepared teacher outputs) over the given items.
  double eval_rec(const std::vector<std::size_t>& indices, const std::vector<Tensor>* refs = nullptr) const {
    if (indices.empty()) return 0;
    const IdnTemplate t = current_template();
    const IinParams<float> iin = current_iin();
    double s = 0;
    for (std::size_t k = 0; k < indices.size(); ++k) {
      const PreparedSample& p = items_.at(indices[k]);
      const SpecializedIdn net = specialize(t, run_iin(p.z_src, iin), cfg_.eps);
      s += rec_loss(refs ? (*refs)[k] : p.teacher, net.swap(p.target));
    }
    return s / static_cast<double>(indices.size());
  }

  IdnTemplate current_template() const {
    IdnTemplate t;
    t.arch = arch_;
    t.static_params = static_.tensors();
    return t;
  }

  IinParams<float> current_iin() const { return IinParams<float>::from_map(*arch_, iin_.to_map().frozen()); }
  const PatchDiscriminator<float>& discriminator() const { return disc_; }
  const ParamMap<float>& static_params() const { return static_; }
  const IinParams<float>& iin_params() const { return iin_; }
  const TrainConfig& config() const { return cfg_; }

 private:
  IdentityEmbedding embed(const Tensor& img) const {
    return IdentityEmbedding(
        embedder_.embed_graph(fit_to_size(Var<float>::constant(img), embedder_.input_size())).value());
  }

  std::shared_ptr<const IdnArchitecture> arch_;
  const EmbeddingProvider& embedder_;
  const FeatureProvider& features_;
  const QualityScorer& scorer_;
  TrainConfig cfg_;
  ParamMap<float> static_;
  IinParams<float> iin_;
  PatchDiscriminator<float> disc_;
  std::optional<Adam<float>> gen_opt_, disc_opt_;
  std::vector<PreparedSample> items_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  Rng rng_;
};

struct DistillResult {
  IdnTemplate net;
  IinParams<float> iin;
  std::map<std::string, Tensor> discriminator;
  std::vector<LogRow> log;
};

// Runs cfg.steps training steps. `on_step` (optional) sees every log row and
// the trainer, e.g. for periodic evaluation.
inline DistillResult run_distillation(
    const Dataset& data, const TeacherOracle& teacher, const IdnTemplate& tmpl, const IinParams<float>& iin,
    const EmbeddingProvider& embedder, const FeatureProvider& features, const QualityScorer& scorer,
    const TrainConfig& cfg, const std::function<void(const LogRow&, const DistillTrainer&)>& on_step = {}) {
  if (data.empty()) throw std::invalid_argument("cannot train on an empty dataset");
  DistillTrainer tr(tmpl, iin, embedder, features, scorer, cfg);
  tr.prepare(data, teacher);
  DistillResult r;
  for (std::size_t s = 1; s <= cfg.steps; ++s) {
    LogRow row{s, tr.step(tr.next_batch())};
    r.log.push_back(row);
    if (on_step) on_step(row, tr);
  }
  r.net = tr.current_template();
  r.iin = tr.current_iin();
  r.discriminator = tr.discriminator().params().tensors();
  return r;
}

inline void write_log(const std::string& path, const std::vector<LogRow>& rows) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write log '" + path + "'");
  out << kLogHeader << "\n";
  for (const auto& r : rows) out << log_line(r) << "\n";
}

}  // namespace idn
