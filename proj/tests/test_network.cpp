#include <gtest/gtest.h>

#include <algorithm>
#include <thread>

#include "idn/injection.hpp"
#include "oracles.hpp"

using namespace idn;

namespace {

ArchConfig cfg(const char* name) { return load_config(std::string(IDN_CONFIG_DIR) + "/" + name); }

SpecializedIdn random_net(const ArchConfig& c, std::uint64_t seed) {
  const IdnTemplate t = build_template(c);
  const auto iin = IinParams<float>::init(*t.arch, seed);
  Rng rng(seed);
  return specialize(t, run_iin(IdentityEmbedding::normalize(randn<float>({1, 512, 1, 1}, rng)), iin));
}

ArchConfig two_stage() {
  return parse_config_text(R"({
    "name": "t", "input_size": 16,
    "stages": [{"name": "a", "channels": 4}, {"name": "b", "channels": 4, "stride": 2},
               {"name": "c", "channels": 4, "upsample": 2, "skip": "a", "inject": true}],
    "fusion": {"source": "b", "stages": []}
  })");
}

}  // namespace

TEST(Budget, DefaultConfigMatchesPublishedBudgets) {
  const Accounting a = account(IdnArchitecture::build(cfg("idn_default.json")), 224);
  EXPECT_GE(a.params_idn, 405000u);
  EXPECT_LE(a.params_idn, 421000u);
  EXPECT_GE(a.params_fusion, 81000u);
  EXPECT_LE(a.params_fusion, 85000u);
  EXPECT_GE(a.params_total, 490000u);
  EXPECT_LE(a.params_total, 500000u);
  EXPECT_NEAR(double(a.macs_total), 0.333e9, 0.15 * 0.333e9);
}

TEST(Budget, DefaultConfigAccountingPinned) {
  // Regression pin of the shipped layer table (counts derived by hand in
  // docs/config.md).
  const Accounting a = account(IdnArchitecture::build(cfg("idn_default.json")), 224);
  EXPECT_EQ(a.params_static, 76241u);
  EXPECT_EQ(a.params_dynamic, 334080u);
  EXPECT_EQ(a.params_fusion, 83825u);
  EXPECT_EQ(a.macs_total, 334047896u);
}

TEST(Budget, OverBudgetConfigRejected) {
  ArchConfig c = cfg("idn_toy64.json");
  c.budget = BudgetConfig{1000, 0};
  EXPECT_THROW(build_template(c), ConfigError);
  c.budget = BudgetConfig{0, 1000};
  EXPECT_THROW(build_template(c), ConfigError);
  const Accounting a = account(IdnArchitecture::build(c), c.input_size);
  c.budget = BudgetConfig{a.params_idn * 100 / 109, a.macs_idn};  // within 110%
  EXPECT_NO_THROW(build_template(c));
}

TEST(Accounting, EmptyArchitectureIsZero) {
  const Accounting a = account(IdnArchitecture{}, 224);
  EXPECT_EQ(a.params_total + a.macs_total, 0u);
}

TEST(Accounting, AdditiveOverLayersAndOrderInvariant) {
  const IdnArchitecture arch = IdnArchitecture::build(cfg("idn_toy64.json"));
  std::uint64_t params = 0, macs = 0;
  for (const auto& l : arch.layers) {
    params += count_params(l.spec);
    macs += count_macs(l.spec, l.input_dims(64));
  }
  const Accounting a = account(arch, 64);
  EXPECT_EQ(a.params_idn, params);
  EXPECT_EQ(a.macs_idn, macs);
  IdnArchitecture rev = arch;
  std::reverse(rev.layers.begin(), rev.layers.end());
  std::reverse(rev.fusion_layers.begin(), rev.fusion_layers.end());
  const Accounting b = account(rev, 64);
  EXPECT_EQ(a.params_total, b.params_total);
  EXPECT_EQ(a.macs_total, b.macs_total);
}

TEST(Accounting, MacCounterAgreesWithStaticAccount) {
  const SpecializedIdn net = random_net(cfg("idn_toy64.json"), 1);
  MacCounter m;
  net.forward(Tensor({1, 3, 64, 64}), &m);
  EXPECT_EQ(m.macs, account(net.architecture(), 64).macs_total);
}

TEST(Template, OneStageToyIsValidAndDeterministic) {
  const ArchConfig c = cfg("toy_one_stage.json");
  const IdnTemplate a = build_template(c), b = build_template(c);
  ASSERT_EQ(a.arch->layers.size(), b.arch->layers.size());
  std::vector<std::string> convs;
  for (const auto& l : a.arch->layers)
    if (l.spec.kind == LayerKind::depthwise || l.spec.kind == LayerKind::pointwise) convs.push_back(l.spec.name);
  EXPECT_EQ(convs, (std::vector<std::string>{"down.dw", "down.pw", "up.dw", "up.pw", "head.pw"}));
  EXPECT_EQ(a.arch->injection_points().size(), 2u);
  for (const auto& [k, t] : a.static_params) EXPECT_EQ(max_abs_diff(t, b.static_params.at(k)), 0.0f) << k;
}

TEST(Template, InjectedLayersHoldNoStaticKernel) {
  const IdnTemplate t = build_template(cfg("idn_default.json"));
  for (const LayerSpec* s : t.arch->injection_points()) {
    EXPECT_FALSE(t.static_params.count(s->name + ".weight")) << s->name;
    EXPECT_TRUE(t.static_params.count(s->name + ".bias")) << s->name;
  }
}

TEST(Template, InjectionOnlyOnSynthesisPath) {
  const IdnArchitecture a = IdnArchitecture::build(cfg("idn_default.json"));
  for (const auto& l : a.layers) {
    const bool synth = l.spec.name.rfind("mid", 0) == 0 || l.spec.name.rfind("dec", 0) == 0;
    const bool conv = l.spec.kind == LayerKind::depthwise || l.spec.kind == LayerKind::pointwise;
    EXPECT_EQ(l.spec.injection != Injection::none, synth && conv) << l.spec.name;
    if (l.spec.kind == LayerKind::depthwise && synth) {
      EXPECT_EQ(l.spec.injection, Injection::predicted_depthwise);
    }
    if (l.spec.kind == LayerKind::pointwise && synth) {
      EXPECT_EQ(l.spec.injection, Injection::modulated_pointwise);
    }
  }
}

TEST(Template, SkipLinksJoinEqualResolutions) {
  const IdnArchitecture a = IdnArchitecture::build(cfg("idn_default.json"));
  ASSERT_EQ(a.skip_links.size(), 4u);
  for (const auto& [from, to] : a.skip_links) {
    const StagePlan& f = a.stages[from];
    const StagePlan& t = a.stages[to];
    EXPECT_EQ(f.up * t.down, t.up * f.down) << f.name << " -> " << t.name;
  }
}

TEST(Template, MismatchedSkipRejected) {
  ArchConfig c = two_stage();
  c.stages[2].upsample = 1;  // c now sits at half resolution, a at full
  c.stages.push_back({"d", 4, 1, 2, "", false});
  try {
    IdnArchitecture::build(c);
    FAIL() << "expected rejection";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("mismatched resolutions"), std::string::npos) << e.what();
  }
}

TEST(Template, MalformedConfigsRejected) {
  EXPECT_THROW(parse_config_text("{"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"stages": [{"name": "a"}]})"), ConfigError);
  ArchConfig c = two_stage();
  c.stages[1].name = "a";
  EXPECT_THROW(IdnArchitecture::build(c), ConfigError);
  c = two_stage();
  c.stages[2].skip = "nope";
  EXPECT_THROW(IdnArchitecture::build(c), ConfigError);
  c = two_stage();
  c.fusion.source = "nope";
  EXPECT_THROW(IdnArchitecture::build(c), ConfigError);
  c = two_stage();
  c.stages[2].upsample = 1;  // output at half resolution
  c.stages[2].skip = "";
  EXPECT_THROW(IdnArchitecture::build(c), ConfigError);
}

TEST(Config, JsonRoundTrip) {
  const ArchConfig c = cfg("idn_default.json");
  const ArchConfig back = parse_config_text(to_json(c).dump());
  EXPECT_EQ(to_json(back), to_json(c));
}

TEST(Forward, DefaultShapesAndRanges) {
  const SpecializedIdn net = random_net(cfg("idn_default.json"), 2);
  Rng rng(3);
  const IdnResult r = net.forward(rand_uniform<float>({1, 3, 224, 224}, rng));
  EXPECT_EQ(r.raw.dims(), (Dims{1, 3, 224, 224}));
  EXPECT_EQ(r.mask.dims(), (Dims{1, 1, 224, 224}));
  for (float v : r.raw.values()) ASSERT_TRUE(v >= -1 && v <= 1);
  for (float v : r.mask.values()) ASSERT_TRUE(v >= 0 && v <= 1);
}

TEST(Forward, RepeatedCallsBitIdentical) {
  const SpecializedIdn net = random_net(cfg("idn_toy64.json"), 4);
  Rng rng(5);
  const Tensor x = rand_uniform<float>({1, 3, 64, 64}, rng);
  const IdnResult a = net.forward(x), b = net.forward(x);
  EXPECT_EQ(std::memcmp(a.raw.data(), b.raw.data(), 4 * a.raw.size()), 0);
  EXPECT_EQ(std::memcmp(a.mask.data(), b.mask.data(), 4 * a.mask.size()), 0);
}

TEST(Forward, IndivisibleSizeRejectedWithDivisor) {
  const SpecializedIdn net = random_net(cfg("idn_toy64.json"), 6);
  try {
    net.forward(Tensor({1, 3, 60, 60}));
    FAIL() << "expected rejection";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("multiple of 8"), std::string::npos) << e.what();
  }
}

TEST(Forward, OtherMultiplesOfDivisorRun) {
  const SpecializedIdn net = random_net(cfg("idn_toy64.json"), 7);
  EXPECT_EQ(net.forward(Tensor({1, 3, 32, 40})).raw.dims(), (Dims{1, 3, 32, 40}));
}

TEST(Forward, BatchCompositionIndependent) {
  const SpecializedIdn net = random_net(cfg("idn_toy64.json"), 8);
  Rng rng(9);
  const Tensor a = rand_uniform<float>({1, 3, 64, 64}, rng), b = rand_uniform<float>({1, 3, 64, 64}, rng);
  const std::vector<Tensor> items = {a, b};
  const IdnResult both = net.forward(stack_batch<float>(items));
  const IdnResult ra = net.forward(a), rb = net.forward(b);
  EXPECT_LE(max_abs_diff(both.raw.batch_item(0), ra.raw), 1e-6f);
  EXPECT_LE(max_abs_diff(both.raw.batch_item(1), rb.raw), 1e-6f);
  EXPECT_LE(max_abs_diff(both.mask.batch_item(1), rb.mask), 1e-6f);
}

TEST(Forward, ZeroKernelsReduceToBiasPath) {
  // With every kernel zero, each layer outputs act(bias) whatever its input,
  // so raw = tanh(head bias) and mask = sigmoid(projection bias) everywhere.
  const ArchConfig c = cfg("idn_toy64.json");
  const IdnArchitecture arch = IdnArchitecture::build(c);
  auto shared = std::make_shared<IdnArchitecture>(arch);
  Rng rng(10);
  std::map<std::string, Tensor> params;
  for (const auto& [name, d] : arch.param_dims()) {
    params[name] = name.ends_with(".bias") ? randn<float>(d, rng) : Tensor(d);
  }
  const SpecializedIdn net(shared, params);
  const IdnResult r = net.forward(rand_uniform<float>({1, 3, 64, 64}, rng));
  const Tensor& hb = params.at("head.pw.bias");
  const double mb = params.at("fusion.proj.bias")[0];
  for (std::size_t ch = 0; ch < 3; ++ch)
    for (std::size_t i = 0; i < 64 * 64; ++i) ASSERT_NEAR(r.raw.plane(0, ch)[i], std::tanh(double(hb[ch])), 1e-6);
  for (float v : r.mask.values()) ASSERT_NEAR(v, 1.0 / (1.0 + std::exp(-mb)), 1e-6);
}

TEST(Forward, MissingInjectedKernelRejected) {
  const IdnTemplate t = build_template(cfg("toy_one_stage.json"));
  try {
    SpecializedIdn(t.arch, t.static_params);
    FAIL() << "expected rejection";
  } catch (const MissingParamError& e) {
    EXPECT_NE(std::string(e.what()).find("injection point"), std::string::npos) << e.what();
  }
}

TEST(Blend, Examples) {
  Rng rng(11);
  const Tensor raw = rand_uniform<float>({1, 3, 4, 4}, rng), tgt = rand_uniform<float>({1, 3, 4, 4}, rng);
  EXPECT_EQ(max_abs_diff(blend(raw, tgt, Tensor({1, 1, 4, 4}, 1.0f)), raw), 0.0f);
  EXPECT_EQ(max_abs_diff(blend(raw, tgt, Tensor({1, 1, 4, 4}, 0.0f)), tgt), 0.0f);
  const Tensor half = blend(raw, tgt, Tensor({1, 1, 4, 4}, 0.5f));
  for (std::size_t i = 0; i < half.size(); ++i) EXPECT_NEAR(half[i], 0.5 * (double(raw[i]) + tgt[i]), 1e-7);
}

TEST(Blend, ConvexCombination) {
  Rng rng(12);
  const Tensor raw = rand_uniform<float>({2, 3, 5, 5}, rng), tgt = rand_uniform<float>({2, 3, 5, 5}, rng);
  const Tensor m = rand_uniform<float>({2, 1, 5, 5}, rng, 0, 1);
  const Tensor y = blend(raw, tgt, m);
  for (std::size_t i = 0; i < y.size(); ++i) {
    EXPECT_GE(y[i], std::min(raw[i], tgt[i]) - 1e-7f);
    EXPECT_LE(y[i], std::max(raw[i], tgt[i]) + 1e-7f);
  }
}

TEST(Blend, ShapeMismatchRejected) {
  EXPECT_THROW(blend(Tensor({1, 3, 4, 4}), Tensor({1, 3, 4, 5}), Tensor({1, 1, 4, 4})), ShapeError);
  EXPECT_THROW(blend(Tensor({1, 3, 4, 4}), Tensor({1, 3, 4, 4}), Tensor({1, 3, 4, 4})), ShapeError);
}

TEST(SpecializedIdn, ConcurrentForwardsAgree) {
  const SpecializedIdn net = random_net(cfg("idn_toy64.json"), 13);
  Rng rng(14);
  const Tensor x = rand_uniform<float>({1, 3, 64, 64}, rng);
  const Tensor ref = net.swap(x);
  std::vector<Tensor> outs(4);
  std::vector<std::thread> pool;
  for (std::size_t i = 0; i < outs.size(); ++i) pool.emplace_back([&, i] { outs[i] = net.swap(x); });
  for (auto& t : pool) t.join();
  for (const auto& o : outs) EXPECT_EQ(std::memcmp(o.data(), ref.data(), 4 * ref.size()), 0);
}
