#pragma once
// Adam with bias correction. Moments live beside the parameters keyed by
// path, and serialize to a sidecar file so an interrupted run resumes
// bit-for-bit.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>

#include "autodiff.hpp"
#include "checkpoint.hpp"
#include "common.hpp"
#include "tensor.hpp"

namespace oddkit {

struct AdamConfig {
  double learning_rate = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  void validate() const {
    if (!(learning_rate > 0)) throw ConfigError("learning_rate must be > 0");
    if (beta1 < 0 || beta1 >= 1) throw ConfigError("adam beta1 must be in [0,1)");
    if (beta2 < 0 || beta2 >= 1) throw ConfigError("adam beta2 must be in [0,1)");
    if (!(epsilon > 0)) throw ConfigError("adam epsilon must be > 0");
  }
};

template <typename T>
struct AdamState {
  std::int64_t t = 0;  // completed update steps
  std::map<std::string, Tensor<T>> m;
  std::map<std::string, Tensor<T>> v;

  static AdamState zeros_like(const ParamSet<T>& params) {
    AdamState s;
    for (const auto& [path, var] : params.params) {
      s.m.emplace(path, Tensor<T>(var.shape()));
      s.v.emplace(path, Tensor<T>(var.shape()));
    }
    return s;
  }
};

/// One Adam update from the gradients left by the last backward() pass.
/// Gradients are validated in a first sweep, so a non-finite one aborts the
/// step with every parameter untouched.
template <typename T>
void adam_step(ParamSet<T>& params, AdamState<T>& state, const AdamConfig& cfg) {
  cfg.validate();
  for (const auto& [path, var] : params.params) {
    const VarNode<T>* node = var.node();
    if (node->grad.shape != node->value.shape)
      throw ValidationError("adam_step: no gradient for " + path);
    if (!state.m.count(path)) throw ValidationError("adam_step: no optimizer state for " + path);
    for (std::int64_t i = 0; i < node->grad.size(); ++i)
      if (!std::isfinite(static_cast<double>(node->grad[i])))
        throw NumericError("adam_step: non-finite gradient in " + path);
  }
  ++state.t;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (auto& [path, var] : params.params) {
    Tensor<T>& value = var.value();
    const Tensor<T>& grad = var.node()->grad;
    Tensor<T>& m = state.m.at(path);
    Tensor<T>& v = state.v.at(path);
    for (std::int64_t i = 0; i < value.size(); ++i) {
      const double g = static_cast<double>(grad[i]);
      const double mi = cfg.beta1 * static_cast<double>(m[i]) + (1.0 - cfg.beta1) * g;
      const double vi = cfg.beta2 * static_cast<double>(v[i]) + (1.0 - cfg.beta2) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      value[i] -= static_cast<T>(cfg.learning_rate * (mi / bc1) /
                                 (std::sqrt(vi / bc2) + cfg.epsilon));
    }
  }
}

// Sidecar format: magic, version, step counter, then the two moment maps.

inline constexpr char kAdamMagic[4] = {'O', 'D', 'D', 'A'};

template <typename T>
void save_adam_state(const AdamState<T>& state, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path);
  os.write(kAdamMagic, 4);
  detail::write_le(os, std::uint32_t{1});
  detail::write_le(os, static_cast<std::uint64_t>(state.t));
  TensorMap first, second;
  for (const auto& [key, tensor] : state.m) first.emplace(key, tensor.template cast<float>());
  for (const auto& [key, tensor] : state.v) second.emplace(key, tensor.template cast<float>());
  write_tensor_map(os, first);
  write_tensor_map(os, second);
  if (!os) throw IoError("failed writing " + path);
}

template <typename T = float>
AdamState<T> load_adam_state(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kAdamMagic, 4) != 0)
    throw IoError("not an optimizer state file (bad magic)");
  const std::uint32_t version = detail::read_le<std::uint32_t>(is);
  if (version != 1) throw IoError("unsupported optimizer state version " + std::to_string(version));
  AdamState<T> state;
  state.t = static_cast<std::int64_t>(detail::read_le<std::uint64_t>(is));
  for (auto* dst : {&state.m, &state.v}) {
    TensorMap loaded = read_tensor_map(is);
    for (auto& [key, tensor] : loaded) dst->emplace(key, tensor.template cast<T>());
  }
  return state;
}

}  // namespace oddkit
