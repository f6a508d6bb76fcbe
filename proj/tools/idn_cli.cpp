// idn: specialise, run, benchmark and train identity-injected swap networks.
//
// Exit codes: 0 ok, 2 usage or input error, 3 verification failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <atomic>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <memory>
#include <thread>

#include "idn/idn.hpp"

#ifndef IDN_CONFIG_DIR
#define IDN_CONFIG_DIR "configs"
#endif

namespace fs = std::filesystem;
using namespace idn;

namespace {

constexpr int kOk = 0, kInputError = 2, kVerifyFailed = 3;

struct InputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::unique_ptr<EmbeddingProvider> make_embedder(const std::string& weights, std::size_t input_size) {
  if (weights.empty()) return std::make_unique<StubEmbeddingProvider<float>>(input_size);
  return std::make_unique<StubEmbeddingProvider<float>>(input_size, load_idnw(weights));
}

std::unique_ptr<FeatureProvider> make_features(const std::string& weights) {
  if (weights.empty()) return std::make_unique<StubFeatureProvider<float>>();
  return std::make_unique<StubFeatureProvider<float>>(load_idnw(weights));
}

void check_frame(const Tensor& t, const IdnArchitecture& a, const std::string& path) {
  const std::size_t s = a.config.input_size;
  if (t.dims().h != s || t.dims().w != s) {
    throw InputError("image '" + path + "' is " + std::to_string(t.dims().w) + "x" + std::to_string(t.dims().h) +
                     "; the network needs " + std::to_string(s) + "x" + std::to_string(s));
  }
}

Tensor run_frame(const SpecializedIdn& net, const Tensor& target, bool zero_mask) {
  if (!zero_mask) return net.swap(target);
  const IdnResult r = net.forward(target);
  return ag::blend_values<float>(r.raw, target, Tensor(r.mask.dims()));
}

SpecializedIdn specialize_from(const StudentCheckpoint& ck, const std::string& source_path, const std::string& embedder,
                               double* seconds = nullptr) {
  const Tensor src = load_image(source_path);
  const auto emb = make_embedder(embedder, ck.net.arch->config.iin.embedding_input);
  const auto t0 = std::chrono::steady_clock::now();
  const IdentityEmbedding z = embed_identity(src, *emb);
  SpecializedIdn net = specialize(ck.net, run_iin(z, ck.iin));
  if (seconds) *seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return net;
}

StudentCheckpoint load_student(const std::string& path, const std::string& config) {
  if (config.empty()) return load_checkpoint(path);
  const ArchConfig cfg = load_config(config);
  return load_checkpoint(path, &cfg);
}

void print_accounting(const Accounting& a, const std::string& name) {
  std::printf("config       %s at %zux%zu\n", name.c_str(), a.input_size, a.input_size);
  std::printf("params       static %llu, dynamic %llu, idn %llu, fusion %llu, total %llu\n",
              (unsigned long long)a.params_static, (unsigned long long)a.params_dynamic,
              (unsigned long long)a.params_idn, (unsigned long long)a.params_fusion,
              (unsigned long long)a.params_total);
  std::printf("macs         idn %llu, fusion %llu, total %llu (%.4f G)\n", (unsigned long long)a.macs_idn,
              (unsigned long long)a.macs_fusion, (unsigned long long)a.macs_total, a.macs_total / 1e9);
  std::printf("input_size=%zu\nparams_static=%llu\nparams_dynamic=%llu\nparams_idn=%llu\nparams_fusion=%llu\n"
              "params_total=%llu\nmacs_idn=%llu\nmacs_fusion=%llu\nmacs_total=%llu\n",
              a.input_size, (unsigned long long)a.params_static, (unsigned long long)a.params_dynamic,
              (unsigned long long)a.params_idn, (unsigned long long)a.params_fusion,
              (unsigned long long)a.params_total, (unsigned long long)a.macs_idn,
              (unsigned long long)a.macs_fusion, (unsigned long long)a.macs_total);
}

ConvQualityScorer fit_scorer(std::size_t size, std::uint64_t seed, double* mse) {
  Rng rng(seed ^ 0x5c0eULL);
  return fit_synthetic_quality_scorer(size, rng, mse);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Identity-injected face swap networks"};
  app.require_subcommand(1);

  std::string config, iin_path, source, out, net_path, target, in_dir, out_dir, embedder, features, data, teacher,
      scorer_path, init_path, configs_dir = IDN_CONFIG_DIR;
  std::size_t size = 0, frames = 200, threads = 1, steps = 2000, batch = 4, count = 500, eval_items = 64, mask_warmup = 300;
  std::uint64_t seed = 1;
  double lr = 1e-3, corrupt = 0;
  bool zero_mask = false, no_reweight = false, no_id_reweight = false, no_quality_reweight = false, no_adv = false;

  auto* c_spec = app.add_subcommand("specialize", "Install a source identity into the network");
  c_spec->add_option("--source", source, "Source face image")->required();
  c_spec->add_option("--iin", iin_path, "Student checkpoint (static params + IIN)")->required();
  c_spec->add_option("--config", config, "Architecture config (defaults to the one in the checkpoint)");
  c_spec->add_option("--embedder", embedder, "Embedding weights (IDNW); default: built-in stub");
  c_spec->add_option("--out", out, "Specialised network (IDNW)")->required();

  auto* c_swap = app.add_subcommand("swap", "Swap one target image");
  c_swap->add_option("--net", net_path, "Specialised network")->required();
  c_swap->add_option("--target", target, "Target image")->required();
  c_swap->add_option("--out", out, "Output image (.png/.ppm)")->required();
  c_swap->add_flag("--zero-mask", zero_mask, "Debug: force the mask to zero");

  auto* c_frames = app.add_subcommand("swap-frames", "Swap every image in a directory");
  c_frames->add_option("--net", net_path, "Specialised network")->required();
  c_frames->add_option("--in-dir", in_dir, "Input frames")->required();
  c_frames->add_option("--out-dir", out_dir, "Output frames (same file names)")->required();
  c_frames->add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);
  c_frames->add_flag("--zero-mask", zero_mask, "Debug: force the mask to zero");

  auto* c_stream = app.add_subcommand("swap-stream", "Swap raw RGB24 frames from stdin to stdout");
  c_stream->add_option("--net", net_path, "Specialised network")->required();

  auto* c_account = app.add_subcommand("account", "Parameter and MAC counts");
  c_account->add_option("--config", config, "Architecture config")->required();
  c_account->add_option("--size", size, "Input size (default: the config's)");

  auto* c_bench = app.add_subcommand("bench", "Time per-frame inference");
  c_bench->add_option("--net", net_path, "Specialised network");
  c_bench->add_option("--iin", iin_path, "Student checkpoint; with --source, times specialisation too");
  c_bench->add_option("--source", source, "Source image for --iin");
  c_bench->add_option("--size", size, "Input size (default: the config's)");
  c_bench->add_option("--frames", frames, "Timed frames")->check(CLI::PositiveNumber);
  c_bench->add_option("--threads", threads, "Concurrent frames")->check(CLI::PositiveNumber);

  auto* c_init = app.add_subcommand("init", "Write a freshly initialised student checkpoint");
  c_init->add_option("--config", config, "Architecture config")->required();
  c_init->add_option("--seed", seed, "IIN initialisation seed");
  c_init->add_option("--out", out, "Checkpoint (IDNW)")->required();

  auto* c_synth = app.add_subcommand("synth-data", "Write a synthetic source/target/mask dataset");
  c_synth->add_option("--out", out, "Dataset directory")->required();
  c_synth->add_option("--count", count, "Pairs");
  c_synth->add_option("--size", size, "Image size (default 64)");
  c_synth->add_option("--seed", seed, "Seed");

  auto* c_train = app.add_subcommand("train", "Distil a student from a teacher");
  c_train->add_option("--config", config, "Architecture config")->required();
  c_train->add_option("--data", data, "Dataset directory (source/, target/, mask/)")->required();
  c_train->add_option("--teacher", teacher, "'synthetic' or a directory of teacher outputs")->required();
  c_train->add_option("--steps", steps, "Training steps");
  c_train->add_option("--seed", seed, "Seed");
  c_train->add_option("--out", out, "Output directory")->required();
  c_train->add_option("--batch", batch, "Batch size")->check(CLI::PositiveNumber);
  c_train->add_option("--lr", lr, "Learning rate");
  c_train->add_option("--init", init_path, "Start from this checkpoint");
  c_train->add_option("--corrupt", corrupt, "Fraction of teacher outputs to degrade")->check(CLI::Range(0.0, 1.0));
  c_train->add_option("--scorer", scorer_path, "Quality scorer weights; default: fit on synthetic degradations");
  c_train->add_option("--embedder", embedder, "Embedding weights (IDNW)");
  c_train->add_option("--features", features, "Feature provider weights (IDNW)");
  c_train->add_option("--eval-items", eval_items, "Items in the fixed evaluation subset");
  c_train->add_option("--mask-warmup", mask_warmup, "Steps that blend with the dataset mask before the predicted one");
  c_train->add_flag("--no-reweight", no_reweight, "Use alpha = 1");
  c_train->add_flag("--no-id-reweight", no_id_reweight, "Leave the identity factor out of alpha");
  c_train->add_flag("--no-quality-reweight", no_quality_reweight, "Leave the quality factor out of alpha");
  c_train->add_flag("--no-adv", no_adv, "Drop the adversarial term");

  auto* c_verify = app.add_subcommand("verify", "Run the property self-checks");
  c_verify->add_option("--configs", configs_dir, "Directory with the shipped configs");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kInputError;
  }

  try {
    if (*c_spec) {
      const StudentCheckpoint ck = load_student(iin_path, config);
      save_specialized(out, specialize_from(ck, source, embedder));
      std::printf("wrote %s\n", out.c_str());
    } else if (*c_swap) {
      const SpecializedIdn net = load_specialized(net_path);
      const Tensor t = load_image(target);
      check_frame(t, net.architecture(), target);
      save_image(out, run_frame(net, t, zero_mask));
    } else if (*c_frames) {
      const SpecializedIdn net = load_specialized(net_path);
      const auto files = list_images(in_dir);
      fs::create_directories(out_dir);
      for (const auto& f : files) check_frame(load_image(f), net.architecture(), f);
      std::atomic<std::size_t> next{0};
      std::vector<std::string> errors(threads);
      auto work = [&](std::size_t w) {
        try {
          for (std::size_t i = next++; i < files.size(); i = next++) {
            const Tensor y = run_frame(net, load_image(files[i]), zero_mask);
            save_image(out_dir + "/" + fs::path(files[i]).filename().string(), y);
          }
        } catch (const std::exception& e) {
          errors[w] = e.what();
        }
      };
      std::vector<std::thread> pool;
      for (std::size_t w = 1; w < threads; ++w) pool.emplace_back(work, w);
      work(0);
      for (auto& t : pool) t.join();
      for (const auto& e : errors)
        if (!e.empty()) throw InputError(e);
      std::printf("%zu frames\n", files.size());
    } else if (*c_stream) {
      const SpecializedIdn net = load_specialized(net_path);
      const std::size_t s = net.architecture().config.input_size, bytes = s * s * 3;
      Image8 img{s, s, std::vector<std::uint8_t>(bytes)};
      std::size_t n = 0;
      while (std::fread(img.rgb.data(), 1, bytes, stdin) == bytes) {
        const Image8 o = from_tensor(net.swap(to_tensor(img)));
        std::fwrite(o.rgb.data(), 1, bytes, stdout);
        ++n;
      }
      std::fflush(stdout);
      std::fprintf(stderr, "%zu frames\n", n);
    } else if (*c_account) {
      const ArchConfig cfg = load_config(config);
      const IdnArchitecture arch = IdnArchitecture::build(cfg);
      const std::size_t s = size ? size : cfg.input_size;
      arch.check_input({1, cfg.in_channels, s, s});
      print_accounting(account(arch, s), cfg.name);
    } else if (*c_bench) {
      if (net_path.empty() == iin_path.empty()) throw InputError("bench needs exactly one of --net or --iin");
      BenchOptions o;
      o.size = size;
      o.frames = frames;
      o.threads = threads;
      if (!net_path.empty()) {
        const BenchReport r = bench(load_specialized(net_path), o);
        std::cout << r.text() << r.machine();
      } else {
        if (source.empty()) throw InputError("bench --iin needs --source");
        double t = 0;
        const SpecializedIdn net = specialize_from(load_checkpoint(iin_path), source, "", &t);
        const BenchReport r = bench(net, o, t);
        std::cout << r.text() << r.machine();
      }
    } else if (*c_init) {
      const IdnTemplate tmpl = build_template(load_config(config));
      save_checkpoint(out, tmpl, IinParams<float>::init(*tmpl.arch, seed));
      std::printf("wrote %s\n", out.c_str());
    } else if (*c_synth) {
      save_dataset(out, synthetic_dataset(count, size ? size : 64, seed));
      std::printf("wrote %zu pairs to %s\n", count, out.c_str());
    } else if (*c_train) {
      const ArchConfig cfg = load_config(config);
      StudentCheckpoint ck;
      if (init_path.empty()) {
        ck.net = build_template(cfg);
        ck.iin = IinParams<float>::init(*ck.net.arch, seed);
      } else {
        ck = load_checkpoint(init_path, &cfg);
      }
      const Dataset ds = load_dataset(data);
      std::unique_ptr<TeacherOracle> base;
      if (teacher == "synthetic") {
        base = std::make_unique<SyntheticTeacher>();
      } else {
        base = std::make_unique<DirectoryTeacher>(teacher);
      }
      std::unique_ptr<CorruptedTeacher> bad;
      if (corrupt > 0) bad = std::make_unique<CorruptedTeacher>(*base, ds.size(), corrupt, seed ^ 0xc0ULL);
      const TeacherOracle& T = bad ? static_cast<const TeacherOracle&>(*bad) : *base;

      fs::create_directories(out);
      double mse = 0;
      const ConvQualityScorer scorer =
          scorer_path.empty() ? fit_scorer(ds.image_size(), seed, &mse) : ConvQualityScorer::from_tensors(load_idnw(scorer_path));
      if (scorer_path.empty()) save_idnw(out + "/scorer.idnw", scorer.tensors());
      const auto emb = make_embedder(embedder, cfg.iin.embedding_input);
      const auto feat = make_features(features);

      TrainConfig tc;
      tc.learning_rate = lr;
      tc.batch_size = batch;
      tc.steps = steps;
      tc.seed = seed;
      tc.reweight = !no_reweight;
      tc.identity_reweight = !no_id_reweight;
      tc.quality_reweight = !no_quality_reweight;
      tc.adversarial = !no_adv;
      tc.mask_warmup = mask_warmup;
      std::vector<std::size_t> eval;
      for (std::size_t i = 0; i < std::min(eval_items, ds.size()); ++i) eval.push_back(i);
      double rec_at_50 = -1, rec_final = -1;
      const auto t0 = std::chrono::steady_clock::now();
      const DistillResult r = run_distillation(ds, T, ck.net, ck.iin, *emb, *feat, scorer, tc,
                                               [&](const LogRow& row, const DistillTrainer& tr) {
                                                 if (row.step == 50) rec_at_50 = tr.eval_rec(eval);
                                                 if (row.step == steps) rec_final = tr.eval_rec(eval);
                                                 if (row.step % 100 == 0) {
                                                   std::fprintf(stderr, "step %zu  %s\n", row.step, log_line(row).c_str());
                                                 }
                                               });
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      save_checkpoint(out + "/checkpoint.idnw", r.net, r.iin);
      save_idnw(out + "/discriminator.idnw", r.discriminator);
      write_log(out + "/log.csv", r.log);

      nlohmann::json summary = {{"steps", steps}, {"seed", seed}, {"seconds", secs}, {"eval_items", eval.size()}};
      if (rec_final >= 0) summary["eval_rec_final"] = rec_final;
      if (rec_at_50 >= 0) {
        summary["eval_rec_step50"] = rec_at_50;
        summary["final_over_step50"] = rec_final / rec_at_50;
      }
      std::ofstream(out + "/summary.json") << summary.dump(2) << "\n";
      std::printf("%s\n", summary.dump().c_str());
    } else if (*c_verify) {
      const auto results = run_verification(configs_dir);
      int rc = kOk;
      for (const auto& r : results) {
        std::printf("%s %s: %s\n", r.ok ? "ok  " : "FAIL", r.name.c_str(), r.detail.c_str());
        if (!r.ok && rc == kOk) {
          std::fprintf(stderr, "first failing property: %s\n", r.name.c_str());
          rc = kVerifyFailed;
        }
      }
      return rc;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kInputError;
  }
  return kOk;
}
