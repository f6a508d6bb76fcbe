#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>

#include "idn/model_io.hpp"

using namespace idn;

namespace {

// Hand-assembled little-endian bytes, independent of the library writer.
struct Bytes {
  std::vector<std::uint8_t> b;
  Bytes& raw(const std::string& s) {
    b.insert(b.end(), s.begin(), s.end());
    return *this;
  }
  Bytes& u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) b.push_back(std::uint8_t(v >> (8 * i)));
    return *this;
  }
  Bytes& u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) b.push_back(std::uint8_t(v >> (8 * i)));
    return *this;
  }
  Bytes& f32(float f) {
    std::uint32_t v;
    std::memcpy(&v, &f, 4);
    return u32(v);
  }
};

std::string error_of(const std::vector<std::uint8_t>& bytes) {
  try {
    decode_idnw(bytes);
  } catch (const WeightFileError& e) {
    return e.what();
  }
  return "";
}

TensorMap sample_map() {
  Rng rng(1);
  TensorMap m;
  m["b"] = randn<float>({2, 3, 1, 1}, rng);
  m["a.weight"] = randn<float>({4, 1, 3, 3}, rng);
  m["z"] = Tensor({1, 1, 1, 1}, 7.0f);
  return m;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("idn_wf_" + name)).string();
}

}  // namespace

TEST(Idnw, HandBuiltFileDecodes) {
  // One rank-2 tensor "w" of dims (2, 1) holding [1.5, -2].
  const std::uint64_t header = 4 + 4 + 8 + 4 + 1 + 4 + 2 * 8 + 8;
  Bytes f;
  f.raw("IDNW").u32(1).u64(1).u32(1).raw("w").u32(2).u64(2).u64(1).u64(header).f32(1.5f).f32(-2.0f);
  const TensorMap m = decode_idnw(f.b);
  ASSERT_EQ(m.size(), 1u);
  const Tensor& w = m.at("w");
  EXPECT_EQ(w.dims(), (Dims{2, 1, 1, 1}));
  EXPECT_EQ(w[0], 1.5f);
  EXPECT_EQ(w[1], -2.0f);
}

TEST(Idnw, EncoderLayoutMatchesHandBuiltBytes) {
  TensorMap m;
  m["k"] = Tensor({1, 2, 1, 1});
  m["k"][0] = 0.25f, m["k"][1] = -1.0f;
  const std::uint64_t header = 4 + 4 + 8 + 4 + 1 + 4 + 4 * 8 + 8;
  Bytes f;
  f.raw("IDNW").u32(1).u64(1).u32(1).raw("k").u32(4).u64(1).u64(2).u64(1).u64(1).u64(header).f32(0.25f).f32(-1.0f);
  EXPECT_EQ(encode_idnw(m), f.b);
}

TEST(Idnw, RoundTripBitExactIncludingSpecials) {
  TensorMap m = sample_map();
  Tensor s({1, 5, 1, 1});
  s[0] = std::numeric_limits<float>::infinity();
  s[1] = -0.0f;
  s[2] = std::numeric_limits<float>::denorm_min();
  s[3] = std::numeric_limits<float>::quiet_NaN();
  s[4] = -std::numeric_limits<float>::max();
  m["specials"] = s;
  const TensorMap back = decode_idnw(encode_idnw(m));
  ASSERT_EQ(back.size(), m.size());
  for (const auto& [k, t] : m) {
    ASSERT_EQ(back.at(k).dims(), t.dims()) << k;
    EXPECT_EQ(std::memcmp(back.at(k).data(), t.data(), 4 * t.size()), 0) << k;
  }
}

TEST(Idnw, EncodingIsCanonical) {
  const TensorMap m = sample_map();
  EXPECT_EQ(encode_idnw(m), encode_idnw(decode_idnw(encode_idnw(m))));
}

TEST(Idnw, EmptyMapRoundTrips) { EXPECT_TRUE(decode_idnw(encode_idnw({})).empty()); }

TEST(Idnw, EveryTruncationRejected) {
  const auto bytes = encode_idnw(sample_map());
  for (std::size_t n = 0; n < bytes.size(); ++n) {
    const std::vector<std::uint8_t> cut(bytes.begin(), bytes.begin() + long(n));
    EXPECT_THROW(decode_idnw(cut), WeightFileError) << n;
  }
}

TEST(Idnw, BadMagicAndVersion) {
  auto bytes = encode_idnw(sample_map());
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_NE(error_of(bad).find("magic"), std::string::npos);
  bad = bytes;
  bad[4] = 2;
  EXPECT_NE(error_of(bad).find("version 2"), std::string::npos);
}

TEST(Idnw, OverlappingTensorsRejected) {
  // Two 1-element tensors pointing at the same data.
  const std::uint64_t header = 4 + 4 + 8 + 2 * (4 + 1 + 4 + 8 + 8);
  Bytes f;
  f.raw("IDNW").u32(1).u64(2);
  f.u32(1).raw("a").u32(1).u64(1).u64(header);
  f.u32(1).raw("b").u32(1).u64(1).u64(header);
  f.f32(1);
  EXPECT_NE(error_of(f.b).find("overlap"), std::string::npos) << error_of(f.b);
}

TEST(Idnw, DataOutsideFileRejected) {
  const std::uint64_t header = 4 + 4 + 8 + 4 + 1 + 4 + 8 + 8;
  Bytes f;
  f.raw("IDNW").u32(1).u64(1).u32(1).raw("a").u32(1).u64(2).u64(header).f32(1);
  EXPECT_NE(error_of(f.b).find("outside"), std::string::npos) << error_of(f.b);
  Bytes g;
  g.raw("IDNW").u32(1).u64(1).u32(1).raw("a").u32(1).u64(1).u64(3).f32(1);  // points into the header
  EXPECT_NE(error_of(g.b).find("outside"), std::string::npos) << error_of(g.b);
}

TEST(Idnw, HugeDimsAndCountsRejected) {
  Bytes f;
  f.raw("IDNW").u32(1).u64(1).u32(1).raw("a").u32(2).u64(1ULL << 40).u64(1ULL << 40).u64(0);
  EXPECT_THROW(decode_idnw(f.b), WeightFileError);
  Bytes g;
  g.raw("IDNW").u32(1).u64(~0ULL);
  EXPECT_NE(error_of(g.b).find("count"), std::string::npos);
}

TEST(Idnw, BadRankAndNamesRejected) {
  Bytes f;
  f.raw("IDNW").u32(1).u64(1).u32(1).raw("a").u32(5);
  EXPECT_NE(error_of(f.b).find("rank 5"), std::string::npos);
  Bytes g;
  g.raw("IDNW").u32(1).u64(1).u32(0).u64(0).u64(0).u64(0);
  EXPECT_NE(error_of(g.b).find("empty name"), std::string::npos);
  const std::uint64_t header = 4 + 4 + 8 + 2 * (4 + 1 + 4 + 8 + 8);
  Bytes d;
  d.raw("IDNW").u32(1).u64(2);
  d.u32(1).raw("a").u32(1).u64(1).u64(header);
  d.u32(1).raw("a").u32(1).u64(1).u64(header + 4);
  d.f32(1).f32(2);
  EXPECT_NE(error_of(d.b).find("duplicate"), std::string::npos);
  EXPECT_THROW(encode_idnw({{"", Tensor({1, 1, 1, 1})}}), WeightFileError);
}

TEST(Idnw, FileRoundTripAndMissingFile) {
  const std::string p = temp_path("rt.idnw");
  save_idnw(p, sample_map());
  const TensorMap back = load_idnw(p);
  EXPECT_EQ(encode_idnw(back), encode_idnw(sample_map()));
  std::filesystem::remove(p);
  EXPECT_THROW(load_idnw(p), WeightFileError);
}

TEST(Idnw, TextEntries) {
  TensorMap m;
  put_text(m, "meta.x", "{\"a\": 1}");
  EXPECT_EQ(get_text(decode_idnw(encode_idnw(m)), "meta.x"), "{\"a\": 1}");
  EXPECT_THROW(get_text(m, "meta.y"), WeightFileError);
  m["meta.bad"] = Tensor({1, 1, 1, 1}, 0.5f);
  EXPECT_THROW(get_text(m, "meta.bad"), WeightFileError);
}

TEST(ModelIo, SpecialisedFileRunsStandalone) {
  const IdnTemplate t = build_template(load_config(std::string(IDN_CONFIG_DIR) + "/idn_toy64.json"));
  Rng rng(2);
  const auto z = IdentityEmbedding::normalize(randn<float>({1, 512, 1, 1}, rng));
  const SpecializedIdn net = specialize(t, run_iin(z, IinParams<float>::init(*t.arch, 3)));
  const SpecializedIdn back = specialized_from_tensors(decode_idnw(encode_idnw(specialized_to_tensors(net))));
  const Tensor x = rand_uniform<float>({1, 3, 64, 64}, rng);
  const Tensor a = net.swap(x), b = back.swap(x);
  EXPECT_EQ(std::memcmp(a.data(), b.data(), 4 * a.size()), 0);
}

TEST(ModelIo, SpecialisedFileNeedsEveryInstalledKernel) {
  const IdnTemplate t = build_template(load_config(std::string(IDN_CONFIG_DIR) + "/toy_one_stage.json"));
  Rng rng(4);
  const auto z = IdentityEmbedding::normalize(randn<float>({1, 512, 1, 1}, rng));
  TensorMap m = specialized_to_tensors(specialize(t, run_iin(z, IinParams<float>::init(*t.arch, 5))));
  TensorMap extra = m;
  extra["iin.up.pw.base"] = Tensor({8, 8, 1, 1});
  EXPECT_THROW(specialized_from_tensors(extra), WeightFileError);
  m.erase("up.dw.weight");
  try {
    specialized_from_tensors(m);
    FAIL() << "expected rejection";
  } catch (const MissingParamError& e) {
    EXPECT_NE(std::string(e.what()).find("up.dw.weight"), std::string::npos) << e.what();
  }
}

TEST(ModelIo, CheckpointRoundTrip) {
  const ArchConfig c = load_config(std::string(IDN_CONFIG_DIR) + "/toy_one_stage.json");
  const IdnTemplate t = build_template(c);
  const auto iin = IinParams<float>::init(*t.arch, 6);
  const StudentCheckpoint ck = checkpoint_from_tensors(decode_idnw(encode_idnw(checkpoint_to_tensors(t, iin))));
  EXPECT_EQ(encode_idnw(checkpoint_to_tensors(ck.net, ck.iin)), encode_idnw(checkpoint_to_tensors(t, iin)));
  TensorMap m = checkpoint_to_tensors(t, iin);
  m.erase("iin.up.dw.fp.t1.weight");
  EXPECT_THROW(checkpoint_from_tensors(m), MissingParamError);
}
