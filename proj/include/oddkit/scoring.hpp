#pragma once
// Reconstruction-error anomaly scoring: raw per-sample errors, min-max
// normalization over the scored set, and threshold verdicts.
//
// The raw error is the squared L2 reconstruction distance; memory models add
// alpha times their summed attention entropy so the score matches what they
// were trained to minimize. Variational models score with z = mu, no
// sampling, which keeps reports reproducible. Raw errors are persisted next
// to the normalized scores so a different normalization can be applied later
// without re-running the model.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "oddkit/models.hpp"
#include "oddkit/patches.hpp"

namespace oddkit {

enum class Verdict { normal, anomaly };

inline const char* verdict_name(Verdict v) {
  return v == Verdict::anomaly ? "anomaly" : "normal";
}

struct ScoredSample {
  std::string patch_id;
  double raw_error = 0;
  double normalized_score = 0;
  Verdict verdict = Verdict::normal;
};

struct ScoreReport {
  std::string model_id;
  double gamma = 0.9;
  double alpha = 0;
  std::string normalization = "min_max";
  std::vector<ScoredSample> samples;

  std::int64_t anomaly_count() const {
    std::int64_t n = 0;
    for (const ScoredSample& s : samples)
      if (s.verdict == Verdict::anomaly) ++n;
    return n;
  }
};

namespace detail {

// Errors for one contiguous batch, written into out[first..first+count).
// Inference mode: no graph, BN running statistics, z = mu for cvae.
template <typename T>
void score_batch(Model<T>& model, const std::vector<ObjectPatch>& patches,
                 std::int64_t first, std::int64_t count, double alpha,
                 std::vector<double>& out) {
  NoGradGuard guard;
  std::vector<const ObjectPatch*> ptrs(count);
  for (std::int64_t j = 0; j < count; ++j) ptrs[j] = &patches[first + j];
  Tensor<T> batch = to_batch(ptrs).template cast<T>();
  ModelForward<T> fwd = forward_loss(model, batch, false);
  for (std::int64_t j = 0; j < count; ++j) {
    double e = fwd.recon_rows[j];
    if (fwd.entropy_rows.size() > 0) e += alpha * fwd.entropy_rows[j];
    out[first + j] = e;
  }
}

}  // namespace detail

/// Raw anomaly errors for a whole dataset. alpha < 0 uses the entropy weight
/// the model was built with; it only matters for memory models. Samples are
/// independent under inference-mode statistics, so batches run in parallel.
template <typename T>
std::vector<double> raw_errors(Model<T>& model, const std::vector<ObjectPatch>& patches,
                               double alpha = -1.0, std::int64_t batch_size = 32) {
  if (patches.empty()) throw ValidationError("raw_errors: no patches to score");
  if (batch_size < 1) throw ConfigError("raw_errors: batch_size must be positive");
  if (alpha < 0) alpha = model.desc.entropy_alpha;
  std::vector<double> out(patches.size());
  const std::int64_t n = static_cast<std::int64_t>(patches.size());
  const std::int64_t chunks = (n + batch_size - 1) / batch_size;
  parallel_for(chunks, [&](std::int64_t c) {
    DenormalGuard ftz;  // per-thread flag, so inside the worker
    const std::int64_t first = c * batch_size;
    detail::score_batch(model, patches, first, std::min(batch_size, n - first), alpha, out);
  });
  return out;
}

template <typename T>
double raw_error(Model<T>& model, const ObjectPatch& x, double alpha = -1.0) {
  std::vector<ObjectPatch> one(1, x);
  return raw_errors(model, one, alpha, 1)[0];
}

/// Min-max over the scored set: (e - min)/(max - min). A degenerate set with
/// one distinct value maps to all zeros, which under any gamma >= 0 reads as
/// "nothing stands out".
inline std::vector<double> normalize_scores(const std::vector<double>& raw) {
  if (raw.empty()) throw ValidationError("normalize_scores: empty score list");
  auto [lo_it, hi_it] = std::minmax_element(raw.begin(), raw.end());
  const double lo = *lo_it, hi = *hi_it;
  std::vector<double> out(raw.size(), 0.0);
  if (hi > lo) {
    for (std::size_t i = 0; i < raw.size(); ++i) out[i] = (raw[i] - lo) / (hi - lo);
  }
  return out;
}

/// Scores a dataset and applies the threshold rule: anomaly iff the
/// normalized score strictly exceeds gamma.
template <typename T>
ScoreReport detect(Model<T>& model, const std::vector<ObjectPatch>& patches,
                   double gamma = 0.9, double alpha = -1.0,
                   const std::string& model_id = "") {
  if (model.params.params.empty())
    throw ConfigError("detect: model has no parameters; train or load a checkpoint first");
  if (patches.empty()) throw ValidationError("detect: no patches to score");
  if (alpha < 0) alpha = model.desc.entropy_alpha;

  ScoreReport report;
  report.model_id = model_id.empty() ? model_kind_name(model.desc.kind) : model_id;
  report.gamma = gamma;
  report.alpha = alpha;

  std::vector<double> raw = raw_errors(model, patches, alpha);
  std::vector<double> norm = normalize_scores(raw);
  report.samples.resize(patches.size());
  for (std::size_t i = 0; i < patches.size(); ++i) {
    ScoredSample& s = report.samples[i];
    s.patch_id = patches[i].patch_id;
    s.raw_error = raw[i];
    s.normalized_score = norm[i];
    s.verdict = norm[i] > gamma ? Verdict::anomaly : Verdict::normal;
  }
  return report;
}

/// The k highest-scoring and k lowest-scoring samples. Ties break by
/// patch_id so the ranking is stable across runs.
inline std::pair<std::vector<ScoredSample>, std::vector<ScoredSample>> rank_extremes(
    const ScoreReport& report, std::int64_t k) {
  if (k < 0) throw ValidationError("rank_extremes: k must be non-negative");
  if (k > static_cast<std::int64_t>(report.samples.size()))
    throw ValidationError("rank_extremes: k = " + std::to_string(k) + " exceeds the " +
                          std::to_string(report.samples.size()) + " scored samples");
  std::vector<ScoredSample> anomalous = report.samples;
  std::sort(anomalous.begin(), anomalous.end(), [](const ScoredSample& a, const ScoredSample& b) {
    if (a.normalized_score != b.normalized_score) return a.normalized_score > b.normalized_score;
    return a.patch_id < b.patch_id;
  });
  std::vector<ScoredSample> normal = report.samples;
  std::sort(normal.begin(), normal.end(), [](const ScoredSample& a, const ScoredSample& b) {
    if (a.normalized_score != b.normalized_score) return a.normalized_score < b.normalized_score;
    return a.patch_id < b.patch_id;
  });
  anomalous.resize(k);
  normal.resize(k);
  return {std::move(anomalous), std::move(normal)};
}

inline std::string format_score_csv(const ScoreReport& report) {
  std::ostringstream os;
  char buf[64];
  os << "# model: " << report.model_id << "\n";
  std::snprintf(buf, sizeof buf, "%.9g", report.gamma);
  os << "# gamma: " << buf << "\n";
  std::snprintf(buf, sizeof buf, "%.9g", report.alpha);
  os << "# alpha: " << buf << "\n";
  os << "# normalization: " << report.normalization << "\n";
  os << "patch_id,raw_error,normalized_score,verdict\n";
  for (const ScoredSample& s : report.samples) {
    os << s.patch_id << ',';
    std::snprintf(buf, sizeof buf, "%.9g", s.raw_error);
    os << buf << ',';
    std::snprintf(buf, sizeof buf, "%.9g", s.normalized_score);
    os << buf << ',' << verdict_name(s.verdict) << "\n";
  }
  return os.str();
}

inline void write_score_csv(const std::string& path, const ScoreReport& report) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os << format_score_csv(report);
  if (!os) throw IoError("failed writing " + path);
}

}  // namespace oddkit
