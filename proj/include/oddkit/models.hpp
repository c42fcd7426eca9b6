#pragma once
// The four autoencoders: a dense AE, a convolutional pair (plain and
// variational), and a memory-augmented CAE whose bottleneck rebuilds each
// latent position from a learned dictionary of prototype features. The
// memory lookup (cosine addressing, hard shrinkage, entropy regularizer)
// lives here too, as standalone differentiable ops.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "autodiff.hpp"
#include "checkpoint.hpp"
#include "common.hpp"
#include "conv.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace oddkit {

// ---- architecture descriptor ----------------------------------------------

enum class ModelKind { ae, cae, cvae, memcae };

inline const char* model_kind_name(ModelKind kind) {
  switch (kind) {
    case ModelKind::ae: return "ae";
    case ModelKind::cae: return "cae";
    case ModelKind::cvae: return "cvae";
    case ModelKind::memcae: return "memcae";
  }
  return "?";
}

inline ModelKind model_kind_from_name(const std::string& name) {
  if (name == "ae") return ModelKind::ae;
  if (name == "cae") return ModelKind::cae;
  if (name == "cvae") return ModelKind::cvae;
  if (name == "memcae") return ModelKind::memcae;
  throw ConfigError("unknown model kind \"" + name + "\" (expected ae, cae, cvae or memcae)");
}

/// Everything needed to rebuild a model shell: which architecture, the input
/// patch size, and the memory hyperparameters. The layer stacks themselves
/// are fixed per kind; see layer_spec().
struct ArchitectureDescriptor {
  ModelKind kind = ModelKind::cae;
  std::int64_t patch_size = 256;
  std::int64_t latent_dim = 32;
  std::int64_t memory_slots = 500;
  double shrink_lambda = -1.0;  // negative: use the 1/memory_slots default
  double shrink_epsilon = 1e-12;
  double entropy_alpha = 2e-4;

  /// Number of stride-2 stages in the conv trunk.
  std::int64_t depth() const {
    switch (kind) {
      case ModelKind::ae: return 0;
      case ModelKind::cae:
      case ModelKind::cvae: return 4;
      case ModelKind::memcae: return 3;
    }
    return 0;
  }

  bool has_memory() const { return kind == ModelKind::memcae; }

  /// Channel width of the encoder output map (memcae), also the memory
  /// feature dimension C.
  std::int64_t feature_channels() const { return 64; }

  /// Spatial side of the encoder output map.
  std::int64_t bottleneck_side() const { return patch_size >> depth(); }

  double resolved_lambda() const {
    return shrink_lambda < 0 ? 1.0 / static_cast<double>(memory_slots) : shrink_lambda;
  }

  void validate() const {
    if (patch_size < 1) throw ConfigError("patch_size must be positive");
    const std::int64_t granularity = std::int64_t{1} << depth();
    if (patch_size % granularity != 0)
      throw ConfigError("patch_size " + std::to_string(patch_size) + " not divisible by " +
                        std::to_string(granularity) + ", required by the " +
                        model_kind_name(kind) + " stride stack");
    if (kind != ModelKind::memcae && latent_dim != 32)
      throw ConfigError("latent_dim is fixed at 32 for " + std::string(model_kind_name(kind)));
    if (memory_slots < 1) throw ConfigError("memory_slots must be >= 1");
    if (resolved_lambda() < 0) throw ConfigError("shrink_lambda must be >= 0");
    if (!(shrink_epsilon > 0)) throw ConfigError("shrink_epsilon must be > 0");
    if (entropy_alpha < 0) throw ConfigError("entropy_alpha must be >= 0");
  }

  /// Stable text form used as the bundle header. Floats are written with
  /// enough digits to round-trip; shrink_lambda is stored resolved.
  std::string canonical_text() const {
    validate();
    auto num = [](double v) {
      char buf[40];
      std::snprintf(buf, sizeof buf, "%.17g", v);
      return std::string(buf);
    };
    std::ostringstream os;
    os << "oddkit-model v1\n";
    os << "kind " << model_kind_name(kind) << "\n";
    os << "patch_size " << patch_size << "\n";
    os << "latent_dim " << latent_dim << "\n";
    os << "memory_slots " << memory_slots << "\n";
    os << "shrink_lambda " << num(resolved_lambda()) << "\n";
    os << "shrink_epsilon " << num(shrink_epsilon) << "\n";
    os << "entropy_alpha " << num(entropy_alpha) << "\n";
    return os.str();
  }

  static ArchitectureDescriptor parse(const std::string& text) {
    std::istringstream is(text);
    std::string line;
    if (!std::getline(is, line) || line != "oddkit-model v1")
      throw ParseError("model descriptor: bad header line", 0);
    ArchitectureDescriptor d;
    std::map<std::string, std::string> fields;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      auto sp = line.find(' ');
      if (sp == std::string::npos || sp == 0 || sp + 1 >= line.size())
        throw ParseError("model descriptor: malformed line \"" + line + "\"", 0);
      if (!fields.emplace(line.substr(0, sp), line.substr(sp + 1)).second)
        throw ParseError("model descriptor: duplicate key " + line.substr(0, sp), 0);
    }
    auto take = [&](const char* key) {
      auto it = fields.find(key);
      if (it == fields.end())
        throw ParseError(std::string("model descriptor: missing key ") + key, 0);
      std::string v = it->second;
      fields.erase(it);
      return v;
    };
    auto as_int = [](const std::string& v, const char* key) {
      std::size_t used = 0;
      long long n = std::stoll(v, &used);
      if (used != v.size()) throw ParseError(std::string("model descriptor: bad integer for ") + key, 0);
      return static_cast<std::int64_t>(n);
    };
    auto as_real = [](const std::string& v, const char* key) {
      std::size_t used = 0;
      double x = std::stod(v, &used);
      if (used != v.size()) throw ParseError(std::string("model descriptor: bad number for ") + key, 0);
      return x;
    };
    d.kind = model_kind_from_name(take("kind"));
    d.patch_size = as_int(take("patch_size"), "patch_size");
    d.latent_dim = as_int(take("latent_dim"), "latent_dim");
    d.memory_slots = as_int(take("memory_slots"), "memory_slots");
    d.shrink_lambda = as_real(take("shrink_lambda"), "shrink_lambda");
    d.shrink_epsilon = as_real(take("shrink_epsilon"), "shrink_epsilon");
    d.entropy_alpha = as_real(take("entropy_alpha"), "entropy_alpha");
    if (!fields.empty())
      throw ParseError("model descriptor: unknown key " + fields.begin()->first, 0);
    d.validate();
    return d;
  }

  /// Human-readable layer list, one entry per layer in forward order.
  std::vector<std::string> layer_spec() const {
    const std::int64_t s = bottleneck_side();
    const std::int64_t flat_in = patch_size * patch_size * 3;
    std::vector<std::string> out;
    switch (kind) {
      case ModelKind::ae:
        out = {"Flatten(" + std::to_string(flat_in) + ")",
               "Dense(" + std::to_string(latent_dim) + ")",
               "Dense(" + std::to_string(flat_in) + ") + sigmoid"};
        break;
      case ModelKind::cae:
      case ModelKind::cvae: {
        out = {"Conv2D(32,3,2) + ReLU", "Conv2D(64,3,2) + ReLU", "Conv2D(128,3,2) + ReLU",
               "Conv2D(256,4,2) + ReLU", "Flatten(" + std::to_string(s * s * 256) + ")"};
        if (kind == ModelKind::cvae) {
          out.push_back("Dense(32) mean");
          out.push_back("Dense(32) log-variance");
          out.push_back("Sample z");
        } else {
          out.push_back("Dense(32)");
        }
        out.push_back("Dense(" + std::to_string(s * s * 256) + ") + ReLU");
        out.push_back("Reshape(" + std::to_string(s) + "," + std::to_string(s) + ",256)");
        out.insert(out.end(), {"Deconv2D(256,4,2) + ReLU", "Deconv2D(128,3,2) + ReLU",
                               "Deconv2D(64,3,2) + ReLU", "Deconv2D(32,3,2) + ReLU",
                               "Deconv2D(3,3,1) + sigmoid"});
        break;
      }
      case ModelKind::memcae:
        out = {"Conv2D(16,1,2) + BN + ReLU",
               "Conv2D(32,3,2) + BN + ReLU",
               "Conv2D(64,3,2)",
               "Memory(" + std::to_string(memory_slots) + "x" +
                   std::to_string(feature_channels()) + ") per position",
               "Deconv2D(64,3,2) + BN + ReLU",
               "Deconv2D(32,3,2) + BN + ReLU",
               "Deconv2D(16,1,2)",
               "Conv2D(3,1,1) + sigmoid"};
        break;
    }
    return out;
  }
};

// ---- memory module ---------------------------------------------------------

namespace detail {

template <typename T>
Var<T> as_rows(const Var<T>& v, const char* op) {
  if (v.shape().size() == 1) return reshape(v, {1, v.shape()[0]});
  if (v.shape().size() == 2) return v;
  throw ShapeError(std::string(op) + ": expected rank 1 or 2, got " + shape_str(v.shape()));
}

}  // namespace detail

/// Attention over memory rows: softmax of the cosine similarity between each
/// query and each slot. queries [Q,C] (or a single [C]), memory [N,C].
/// Scale-free in the query by construction.
template <typename T>
Var<T> memory_address(const Var<T>& queries, const Var<T>& memory) {
  const bool single = queries.shape().size() == 1;
  Var<T> q = detail::as_rows(queries, "memory_address");
  if (memory.shape().size() != 2 || memory.shape()[1] != q.shape()[1])
    throw ShapeError("memory_address: queries " + shape_str(q.shape()) + " vs memory " +
                     shape_str(memory.shape()));
  Var<T> w = softmax_rows(cosine_matrix(q, memory));
  return single ? reshape(w, {memory.shape()[0]}) : w;
}

/// Sparsifies attention row-wise: entries at or below lambda are cut to an
/// exact zero, survivors pass through the continuous relaxation
/// (w - lambda) * w / (w - lambda + epsilon), and each row is renormalized to
/// sum 1 so downstream reads stay convex combinations. lambda = 0 disables
/// shrinkage entirely; the relaxation would still nudge entries by O(epsilon),
/// so the weights pass through untouched. A row shrunk to nothing falls back
/// to a one-hot at its strongest slot and propagates no gradient.
template <typename T>
Var<T> hard_shrink(const Var<T>& w, double lambda, double epsilon) {
  if (lambda < 0) throw ValidationError("hard_shrink: lambda must be >= 0");
  if (!(epsilon > 0)) throw ValidationError("hard_shrink: epsilon must be > 0");
  if (lambda == 0) return w;
  const bool single = w.shape().size() == 1;
  Var<T> rows = detail::as_rows(w, "hard_shrink");
  const std::int64_t q = rows.shape()[0], n = rows.shape()[1];

  auto shrunk = [lambda, epsilon](double x) {
    return x > lambda ? (x - lambda) * x / (x - lambda + epsilon) : 0.0;
  };

  Tensor<T> out(rows.shape());
  std::vector<double> row_sums(static_cast<std::size_t>(q), 0.0);
  std::vector<char> fallback(static_cast<std::size_t>(q), 0);
  std::int64_t fallback_count = 0;
  for (std::int64_t i = 0; i < q; ++i) {
    const T* src = rows.value().data() + i * n;
    T* dst = out.data() + i * n;
    double sum = 0;
    for (std::int64_t j = 0; j < n; ++j) {
      double s = shrunk(static_cast<double>(src[j]));
      dst[j] = static_cast<T>(s);
      sum += s;
    }
    if (sum > 0) {
      row_sums[static_cast<std::size_t>(i)] = sum;
      for (std::int64_t j = 0; j < n; ++j) dst[j] = static_cast<T>(dst[j] / sum);
    } else {
      // Every slot fell below the threshold. Keep the best one so the read
      // stays defined; this branch is non-differentiable, so no gradient.
      std::int64_t best = 0;
      for (std::int64_t j = 1; j < n; ++j)
        if (src[j] > src[best]) best = j;
      for (std::int64_t j = 0; j < n; ++j) dst[j] = T(0);
      dst[best] = T(1);
      fallback[static_cast<std::size_t>(i)] = 1;
      ++fallback_count;
    }
  }
  if (fallback_count > 0)
    log_msg(LogLevel::warn, "hard_shrink: " + std::to_string(fallback_count) + " of " +
                                std::to_string(q) +
                                " rows fully shrunk; kept their strongest slot");

  Var<T> result = make_op<T>(
      std::move(out), {rows},
      [rows, q, n, lambda, epsilon, shrunk, row_sums = std::move(row_sums),
       fallback = std::move(fallback)](const Tensor<T>& g) {
        T* gw = detail::grad_of(rows);
        if (!gw) return;
        for (std::int64_t i = 0; i < q; ++i) {
          if (fallback[static_cast<std::size_t>(i)]) continue;
          const T* src = rows.value().data() + i * n;
          const T* gr = g.data() + i * n;
          const double sum = row_sums[static_cast<std::size_t>(i)];
          // y_j = s_j / S, so dy_j/dw_i = s'(w_i) (delta_ij - y_j) / S.
          double inner = 0;
          for (std::int64_t j = 0; j < n; ++j)
            inner += static_cast<double>(gr[j]) * shrunk(static_cast<double>(src[j])) / sum;
          for (std::int64_t j = 0; j < n; ++j) {
            const double x = static_cast<double>(src[j]);
            if (x <= lambda) continue;
            const double a = x - lambda;
            const double sprime = (a * a + epsilon * (2 * x - lambda)) / ((a + epsilon) * (a + epsilon));
            gw[i * n + j] += static_cast<T>(sprime * (static_cast<double>(gr[j]) - inner) / sum);
          }
        }
      });
  return single ? reshape(result, {n}) : result;
}

/// Shannon entropy of each attention row in nats, with 0 log 0 = 0.
/// [Q,N] -> [Q]; a single row [N] gives a one-element result.
template <typename T>
Var<T> attention_entropy(const Var<T>& w) {
  Var<T> rows = detail::as_rows(w, "attention_entropy");
  const std::int64_t q = rows.shape()[0], n = rows.shape()[1];
  Tensor<T> out({q});
  for (std::int64_t i = 0; i < q; ++i) {
    double e = 0;
    const T* src = rows.value().data() + i * n;
    for (std::int64_t j = 0; j < n; ++j) {
      const double p = static_cast<double>(src[j]);
      if (p > 0) e -= p * std::log(p);
    }
    out[i] = static_cast<T>(e);
  }
  return make_op<T>(std::move(out), {rows}, [rows, q, n](const Tensor<T>& g) {
    T* gw = detail::grad_of(rows);
    if (!gw) return;
    for (std::int64_t i = 0; i < q; ++i) {
      const T* src = rows.value().data() + i * n;
      for (std::int64_t j = 0; j < n; ++j) {
        const double p = static_cast<double>(src[j]);
        if (p > 0) gw[i * n + j] -= static_cast<T>(g[i] * (std::log(p) + 1.0));
      }
    }
  });
}

/// Weighted combination of memory rows: [Q,N] x [N,C] -> [Q,C].
template <typename T>
Var<T> memory_read(const Var<T>& w, const Var<T>& memory) {
  const bool single = w.shape().size() == 1;
  Var<T> rows = detail::as_rows(w, "memory_read");
  Var<T> z = matmul(rows, memory);
  return single ? reshape(z, {memory.shape()[1]}) : z;
}

// ---- model shell -----------------------------------------------------------

template <typename T>
struct Model {
  ArchitectureDescriptor desc;
  ParamSet<T> params;
  std::map<std::string, BnState<T>> bn;  // keyed by layer prefix, memcae only

  Var<T>& p(const std::string& path) { return params.at(path); }
};

namespace detail {

template <typename T>
void add_weight(Model<T>& m, std::uint64_t seed, const std::string& path, Shape shape,
                std::int64_t fan_in) {
  Rng rng = keyed_rng(seed, "init", fnv1a64(path));
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
  Tensor<T> t(std::move(shape));
  for (std::int64_t i = 0; i < t.size(); ++i)
    t[i] = static_cast<T>(rng.next_uniform(-limit, limit));
  m.params.add(path, std::move(t));
}

template <typename T>
void add_zeros(Model<T>& m, const std::string& path, Shape shape) {
  m.params.add(path, Tensor<T>(std::move(shape)));
}

template <typename T>
void add_conv(Model<T>& m, std::uint64_t seed, const std::string& prefix, std::int64_t k,
              std::int64_t cin, std::int64_t cout) {
  add_weight(m, seed, prefix + ".kernel", {k, k, cin, cout}, k * k * cin);
  add_zeros(m, prefix + ".bias", {cout});
}

// Deconv kernels are laid out [k, k, Cout, Cin]; fan-in is still the number
// of inputs feeding one output, k*k*cin.
template <typename T>
void add_deconv(Model<T>& m, std::uint64_t seed, const std::string& prefix, std::int64_t k,
                std::int64_t cin, std::int64_t cout) {
  add_weight(m, seed, prefix + ".kernel", {k, k, cout, cin}, k * k * cin);
  add_zeros(m, prefix + ".bias", {cout});
}

template <typename T>
void add_dense(Model<T>& m, std::uint64_t seed, const std::string& prefix, std::int64_t in,
               std::int64_t out) {
  add_weight(m, seed, prefix + ".weight", {in, out}, in);
  add_zeros(m, prefix + ".bias", {out});
}

template <typename T>
void add_bn(Model<T>& m, const std::string& prefix, std::int64_t channels) {
  m.params.add(prefix + ".gamma", Tensor<T>::full({channels}, T(1)));
  add_zeros(m, prefix + ".beta", {channels});
  m.bn.emplace(prefix, BnState<T>(channels));
}

}  // namespace detail

/// Builds a freshly initialized model. Every weight draws from its own
/// path-keyed stream, so two builds with one seed agree parameter by
/// parameter and adding a layer never shifts the others.
template <typename T>
Model<T> build_model(const ArchitectureDescriptor& desc, std::uint64_t seed) {
  desc.validate();
  Model<T> m;
  m.desc = desc;
  const std::int64_t flat_in = desc.patch_size * desc.patch_size * 3;
  switch (desc.kind) {
    case ModelKind::ae:
      detail::add_dense(m, seed, "encoder.fc", flat_in, desc.latent_dim);
      detail::add_dense(m, seed, "decoder.fc", desc.latent_dim, flat_in);
      break;
    case ModelKind::cae:
    case ModelKind::cvae: {
      detail::add_conv(m, seed, "encoder.conv1", 3, 3, 32);
      detail::add_conv(m, seed, "encoder.conv2", 3, 32, 64);
      detail::add_conv(m, seed, "encoder.conv3", 3, 64, 128);
      detail::add_conv(m, seed, "encoder.conv4", 4, 128, 256);
      const std::int64_t s = desc.bottleneck_side();
      const std::int64_t flat = s * s * 256;
      if (desc.kind == ModelKind::cvae) {
        detail::add_dense(m, seed, "encoder.mu", flat, desc.latent_dim);
        detail::add_dense(m, seed, "encoder.logvar", flat, desc.latent_dim);
      } else {
        detail::add_dense(m, seed, "encoder.fc", flat, desc.latent_dim);
      }
      detail::add_dense(m, seed, "decoder.fc", desc.latent_dim, flat);
      detail::add_deconv(m, seed, "decoder.deconv1", 4, 256, 256);
      detail::add_deconv(m, seed, "decoder.deconv2", 3, 256, 128);
      detail::add_deconv(m, seed, "decoder.deconv3", 3, 128, 64);
      detail::add_deconv(m, seed, "decoder.deconv4", 3, 64, 32);
      detail::add_deconv(m, seed, "decoder.out", 3, 32, 3);
      break;
    }
    case ModelKind::memcae: {
      detail::add_conv(m, seed, "encoder.conv1", 1, 3, 16);
      detail::add_bn(m, "encoder.bn1", 16);
      detail::add_conv(m, seed, "encoder.conv2", 3, 16, 32);
      detail::add_bn(m, "encoder.bn2", 32);
      detail::add_conv(m, seed, "encoder.conv3", 3, 32, 64);
      const std::int64_t c = desc.feature_channels();
      // Rows start uniform in (-1/sqrt(C), 1/sqrt(C)); a zero row would break
      // cosine addressing, and this scale keeps early reads well-conditioned.
      {
        Rng rng = keyed_rng(seed, "init", fnv1a64("memory.M"));
        const double limit = 1.0 / std::sqrt(static_cast<double>(c));
        Tensor<T> mem({desc.memory_slots, c});
        for (std::int64_t i = 0; i < mem.size(); ++i)
          mem[i] = static_cast<T>(rng.next_uniform(-limit, limit));
        m.params.add("memory.M", std::move(mem));
      }
      detail::add_deconv(m, seed, "decoder.deconv1", 3, 64, 64);
      detail::add_bn(m, "decoder.bn1", 64);
      detail::add_deconv(m, seed, "decoder.deconv2", 3, 64, 32);
      detail::add_bn(m, "decoder.bn2", 32);
      detail::add_deconv(m, seed, "decoder.deconv3", 1, 32, 16);
      detail::add_conv(m, seed, "decoder.out", 1, 16, 3);
      break;
    }
  }
  return m;
}

// ---- forward passes --------------------------------------------------------

template <typename T>
struct LatentCode {
  Var<T> z;        // [B,32] dense code, or the [B,s,s,64] feature map for memcae
  Var<T> mu;       // cvae only
  Var<T> log_var;  // cvae only
};

namespace detail {

template <typename T>
void check_input(const Model<T>& m, const Var<T>& x) {
  const Shape& s = x.shape();
  if (s.size() != 4 || s[1] != m.desc.patch_size || s[2] != m.desc.patch_size || s[3] != 3)
    throw ShapeError("model input must be [B," + std::to_string(m.desc.patch_size) + "," +
                     std::to_string(m.desc.patch_size) + ",3], got " + shape_str(s));
  if (s[0] < 1) throw ShapeError("model input batch is empty");
}

template <typename T>
Var<T> conv_block(Model<T>& m, const Var<T>& x, const std::string& prefix, std::int64_t stride) {
  return bias_add(conv2d(x, m.p(prefix + ".kernel"), stride), m.p(prefix + ".bias"));
}

template <typename T>
Var<T> deconv_block(Model<T>& m, const Var<T>& x, const std::string& prefix, std::int64_t stride) {
  return bias_add(deconv2d(x, m.p(prefix + ".kernel"), stride), m.p(prefix + ".bias"));
}

template <typename T>
Var<T> bn_block(Model<T>& m, const Var<T>& x, const std::string& prefix, bool training) {
  return batch_norm(x, m.p(prefix + ".gamma"), m.p(prefix + ".beta"), m.bn.at(prefix), training);
}

}  // namespace detail

/// Runs the encoder. For the CVAE, `noise` selects the behaviour: a [B,32]
/// standard-normal draw samples z = mu + exp(log_var/2) * noise, and a null
/// pointer gives the deterministic code z = mu (what scoring uses).
template <typename T>
LatentCode<T> encode(Model<T>& m, const Var<T>& x, bool training = false,
                     const Tensor<T>* noise = nullptr) {
  detail::check_input(m, x);
  if (noise && m.desc.kind != ModelKind::cvae)
    throw ValidationError("encode: noise is only meaningful for the cvae");
  LatentCode<T> code;
  switch (m.desc.kind) {
    case ModelKind::ae:
      code.z = dense(flatten_rows(x), m.p("encoder.fc.weight"), m.p("encoder.fc.bias"));
      break;
    case ModelKind::cae:
    case ModelKind::cvae: {
      Var<T> h = relu(detail::conv_block(m, x, "encoder.conv1", 2));
      h = relu(detail::conv_block(m, h, "encoder.conv2", 2));
      h = relu(detail::conv_block(m, h, "encoder.conv3", 2));
      h = relu(detail::conv_block(m, h, "encoder.conv4", 2));
      Var<T> flat = flatten_rows(h);
      if (m.desc.kind == ModelKind::cae) {
        code.z = dense(flat, m.p("encoder.fc.weight"), m.p("encoder.fc.bias"));
      } else {
        code.mu = dense(flat, m.p("encoder.mu.weight"), m.p("encoder.mu.bias"));
        code.log_var = dense(flat, m.p("encoder.logvar.weight"), m.p("encoder.logvar.bias"));
        if (noise) {
          check_same_shape(noise->shape, code.mu.shape(), "encode noise");
          code.z = add(code.mu, mul(exp(scale(code.log_var, 0.5)), constant(*noise)));
        } else {
          code.z = code.mu;
        }
      }
      break;
    }
    case ModelKind::memcae: {
      Var<T> h = relu(detail::bn_block(m, detail::conv_block(m, x, "encoder.conv1", 2),
                                       "encoder.bn1", training));
      h = relu(detail::bn_block(m, detail::conv_block(m, h, "encoder.conv2", 2), "encoder.bn2",
                                training));
      code.z = detail::conv_block(m, h, "encoder.conv3", 2);
      break;
    }
  }
  return code;
}

/// Runs the decoder on a latent code ([B,32], or the [B,s,s,64] map read back
/// from memory for the memcae). Output is the input patch shape in [0,1].
template <typename T>
Var<T> decode(Model<T>& m, const Var<T>& z, bool training = false) {
  const std::int64_t p = m.desc.patch_size;
  switch (m.desc.kind) {
    case ModelKind::ae: {
      Var<T> flat = sigmoid(dense(z, m.p("decoder.fc.weight"), m.p("decoder.fc.bias")));
      return reshape(flat, {z.shape()[0], p, p, 3});
    }
    case ModelKind::cae:
    case ModelKind::cvae: {
      const std::int64_t s = m.desc.bottleneck_side();
      Var<T> h = relu(dense(z, m.p("decoder.fc.weight"), m.p("decoder.fc.bias")));
      h = reshape(h, {z.shape()[0], s, s, 256});
      h = relu(detail::deconv_block(m, h, "decoder.deconv1", 2));
      h = relu(detail::deconv_block(m, h, "decoder.deconv2", 2));
      h = relu(detail::deconv_block(m, h, "decoder.deconv3", 2));
      h = relu(detail::deconv_block(m, h, "decoder.deconv4", 2));
      return sigmoid(detail::deconv_block(m, h, "decoder.out", 1));
    }
    case ModelKind::memcae: {
      Var<T> h = relu(detail::bn_block(m, detail::deconv_block(m, z, "decoder.deconv1", 2),
                                       "decoder.bn1", training));
      h = relu(detail::bn_block(m, detail::deconv_block(m, h, "decoder.deconv2", 2), "decoder.bn2",
                                training));
      h = detail::deconv_block(m, h, "decoder.deconv3", 2);
      return sigmoid(detail::conv_block(m, h, "decoder.out", 1));
    }
  }
  throw ValidationError("decode: unknown model kind");
}

/// One full differentiable pass: reconstruction plus the training objective.
template <typename T>
struct ModelForward {
  Var<T> recon;           // [B,H,W,3]
  Var<T> loss;            // scalar objective for backward()
  T recon_loss = T(0);    // batch mean of the squared reconstruction error
  Tensor<T> recon_rows;   // [B] per-sample squared error
  Tensor<T> kl_rows;      // [B] per-sample KL term (cvae), else empty
  Tensor<T> entropy_rows; // [B] per-sample attention entropy, summed over
                          // positions (memcae), else empty
};

/// Objectives by kind, each a mean over the batch of per-sample terms:
///   ae/cae     |x - recon|^2
///   cvae       |x - recon|^2 + KL(q(z|x) || N(0,I))
///   memcae     |x - recon|^2 + alpha * sum over positions of E(attention)
template <typename T>
ModelForward<T> forward_loss(Model<T>& m, const Var<T>& x, bool training = false,
                             const Tensor<T>* cvae_noise = nullptr) {
  detail::check_input(m, x);
  const std::int64_t b = x.shape()[0];
  ModelForward<T> out;
  LatentCode<T> code = encode(m, x, training, cvae_noise);

  Var<T> entropy;  // [Q] per-query, memcae only
  if (m.desc.kind == ModelKind::memcae) {
    const std::int64_t s = m.desc.bottleneck_side();
    const std::int64_t c = m.desc.feature_channels();
    Var<T> queries = reshape(code.z, {b * s * s, c});
    Var<T> attention = hard_shrink(memory_address(queries, m.p("memory.M")),
                                   m.desc.resolved_lambda(), m.desc.shrink_epsilon);
    entropy = attention_entropy(attention);
    Var<T> read = reshape(memory_read(attention, m.p("memory.M")), {b, s, s, c});
    out.recon = decode(m, read, training);
  } else {
    out.recon = decode(m, code.z, training);
  }

  Var<T> diff = flatten_rows(sub(x, out.recon));
  Var<T> err_rows = row_sum(mul(diff, diff));  // [B]
  Var<T> recon_mean = mean_all(err_rows);
  out.recon_rows = err_rows.value();
  out.recon_loss = recon_mean.value()[0];

  switch (m.desc.kind) {
    case ModelKind::ae:
    case ModelKind::cae:
      out.loss = recon_mean;
      break;
    case ModelKind::cvae: {
      // KL(N(mu, sigma^2) || N(0, I)) = 1/2 sum(exp(lv) + mu^2 - 1 - lv)
      Var<T> t = add(exp(code.log_var), mul(code.mu, code.mu));
      Var<T> kl = scale(row_sum(add_scalar(sub(t, code.log_var), -1.0)), 0.5);
      out.kl_rows = kl.value();
      out.loss = mean_all(add(err_rows, kl));
      break;
    }
    case ModelKind::memcae: {
      const std::int64_t positions = entropy.size() / b;
      Var<T> ent_rows = row_sum(reshape(entropy, {b, positions}));
      out.entropy_rows = ent_rows.value();
      out.loss = mean_all(add(err_rows, scale(ent_rows, m.desc.entropy_alpha)));
      break;
    }
  }
  return out;
}

template <typename T>
ModelForward<T> forward_loss(Model<T>& m, const Tensor<T>& x, bool training = false,
                             const Tensor<T>* cvae_noise = nullptr) {
  Var<T> xv = constant(x);
  return forward_loss(m, xv, training, cvae_noise);
}

// ---- bundle I/O ------------------------------------------------------------
// Layout: magic, format version, length-prefixed descriptor text, then two
// tensor maps: parameters and batch-norm running statistics.

inline constexpr char kModelMagic[4] = {'O', 'D', 'D', 'M'};
inline constexpr std::uint32_t kModelVersion = 1;

template <typename T>
void write_model(std::ostream& os, const Model<T>& m) {
  os.write(kModelMagic, 4);
  detail::write_le(os, kModelVersion);
  const std::string text = m.desc.canonical_text();
  detail::write_le(os, static_cast<std::uint32_t>(text.size()));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  TensorMap params;
  for (const auto& [path, var] : m.params.params)
    params.emplace(path, var.value().template cast<float>());
  write_tensor_map(os, params);
  TensorMap buffers;
  for (const auto& [prefix, state] : m.bn) {
    buffers.emplace(prefix + ".running_mean", state.running_mean.template cast<float>());
    buffers.emplace(prefix + ".running_var", state.running_var.template cast<float>());
  }
  write_tensor_map(os, buffers);
}

template <typename T = float>
Model<T> read_model(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kModelMagic, 4) != 0)
    throw IoError("not a model bundle (bad magic)");
  const std::uint32_t version = detail::read_le<std::uint32_t>(is);
  if (version != kModelVersion)
    throw IoError("unsupported model bundle version " + std::to_string(version));
  const std::uint32_t text_len = detail::read_le<std::uint32_t>(is);
  std::string text(text_len, '\0');
  is.read(text.data(), text_len);
  if (!is) throw IoError("truncated model bundle header");
  ArchitectureDescriptor desc = ArchitectureDescriptor::parse(text);
  TensorMap params = read_tensor_map(is);
  TensorMap buffers = read_tensor_map(is);

  Model<T> m = build_model<T>(desc, 0);
  if (params.size() != m.params.size())
    throw IoError("model bundle holds " + std::to_string(params.size()) + " parameters, expected " +
                  std::to_string(m.params.size()));
  for (auto& [path, var] : m.params.params) {
    auto it = params.find(path);
    if (it == params.end()) throw IoError("model bundle is missing parameter " + path);
    if (it->second.shape != var.shape())
      throw IoError("model bundle parameter " + path + " has shape " +
                    shape_str(it->second.shape) + ", expected " + shape_str(var.shape()));
    var.value() = it->second.template cast<T>();
  }
  for (auto& [prefix, state] : m.bn) {
    for (const std::string leaf : {".running_mean", ".running_var"}) {
      auto it = buffers.find(prefix + leaf);
      if (it == buffers.end()) throw IoError("model bundle is missing buffer " + prefix + leaf);
      Tensor<T>& dst = leaf == ".running_mean" ? state.running_mean : state.running_var;
      if (it->second.shape != dst.shape)
        throw IoError("model bundle buffer " + prefix + leaf + " has a wrong shape");
      dst = it->second.template cast<T>();
      buffers.erase(it);
    }
  }
  if (!buffers.empty()) throw IoError("model bundle holds unexpected buffer " + buffers.begin()->first);
  return m;
}

template <typename T>
void save_model(const Model<T>& m, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path);
  write_model(os, m);
  if (!os) throw IoError("failed writing " + path);
}

template <typename T = float>
Model<T> load_model(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path);
  return read_model<T>(is);
}

}  // namespace oddkit
