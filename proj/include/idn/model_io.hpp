#pragma once

// Networks <-> IDNW files. A specialised file carries its architecture as
// "meta.arch" so it can be run with nothing else; a student checkpoint holds
// the template's static parameters plus the IIN ("iin.*").

#include <string>

#include "idn/injection.hpp"
#include "idn/weight_file.hpp"

namespace idn {

inline constexpr const char* kArchKey = "meta.arch";

inline bool is_meta(const std::string& name) { return name.rfind("meta.", 0) == 0; }

inline TensorMap specialized_to_tensors(const SpecializedIdn& net) {
  TensorMap m = net.tensors();
  put_text(m, kArchKey, to_json(net.architecture().config).dump());
  return m;
}

// Rejects files without an installed kernel for every injection point, and
// files carrying anything other than network parameters.
inline SpecializedIdn specialized_from_tensors(const TensorMap& m, const std::string& what = "weight file") {
  const ArchConfig cfg = parse_config_text(get_text(m, kArchKey));
  auto arch = std::make_shared<IdnArchitecture>(IdnArchitecture::build(cfg));
  const auto dims = arch->param_dims();
  TensorMap params;
  for (const auto& [name, t] : m) {
    if (is_meta(name)) continue;
    if (!dims.count(name)) {
      throw WeightFileError(what + ": unexpected tensor '" + name + "' in a specialised network file");
    }
    params.emplace(name, t);
  }
  return SpecializedIdn(std::move(arch), params);
}

inline void save_specialized(const std::string& path, const SpecializedIdn& net) {
  save_idnw(path, specialized_to_tensors(net));
}

inline SpecializedIdn load_specialized(const std::string& path) {
  return specialized_from_tensors(load_idnw(path), path);
}

// Static parameters for `cfg` taken from `m` (other entries ignored).
inline IdnTemplate template_from_tensors(const ArchConfig& cfg, const TensorMap& m) {
  IdnTemplate t;
  auto arch = std::make_shared<IdnArchitecture>(IdnArchitecture::build(cfg));
  for (const auto& [name, dims] : arch->static_param_dims()) {
    auto it = m.find(name);
    if (it == m.end()) throw MissingParamError("missing static parameter '" + name + "'");
    if (it->second.dims() != dims) {
      shape_fail("static parameter '", name, "' has dims ", it->second.dims().str(), ", expected ", dims.str());
    }
    t.static_params.emplace(name, it->second);
  }
  t.arch = std::move(arch);
  return t;
}

struct StudentCheckpoint {
  IdnTemplate net;
  IinParams<float> iin;
};

inline TensorMap checkpoint_to_tensors(const IdnTemplate& t, const IinParams<float>& iin) {
  TensorMap m = t.static_params;
  for (const auto& [name, v] : iin.to_map()) m.emplace(name, v.value());
  put_text(m, kArchKey, to_json(t.arch->config).dump());
  return m;
}

inline void save_checkpoint(const std::string& path, const IdnTemplate& t, const IinParams<float>& iin) {
  save_idnw(path, checkpoint_to_tensors(t, iin));
}

// `cfg` overrides the embedded architecture when given.
inline StudentCheckpoint checkpoint_from_tensors(const TensorMap& m, const ArchConfig* cfg = nullptr) {
  const ArchConfig c = cfg ? *cfg : parse_config_text(get_text(m, kArchKey));
  StudentCheckpoint ck{template_from_tensors(c, m), {}};
  ck.iin = IinParams<float>::from_tensors(*ck.net.arch, m);
  return ck;
}

inline StudentCheckpoint load_checkpoint(const std::string& path, const ArchConfig* cfg = nullptr) {
  return checkpoint_from_tensors(load_idnw(path), cfg);
}

}  // namespace idn
