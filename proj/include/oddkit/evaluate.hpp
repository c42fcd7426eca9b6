#pragma once
// Anomaly benchmarks: build a labeled eval set from categorized patches,
// compute ROC/AUC, sweep thresholds, and compare trained models.
//
// AUC is the rank statistic: the probability that a uniformly chosen anomaly
// outscores a uniformly chosen normal sample, ties counted one half. The ROC
// curve sweeps the distinct scores in descending order with tied scores
// grouped into a single step, which makes its trapezoidal area agree with
// the rank statistic exactly (up to rounding).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "oddkit/patches.hpp"
#include "oddkit/scoring.hpp"

namespace oddkit {

struct EvalDataset {
  std::set<std::int64_t> normal_categories;
  std::set<std::int64_t> anomaly_categories;
  std::vector<ObjectPatch> samples;
  std::int64_t sample_budget = 0;

  std::int64_t normal_count() const {
    std::int64_t n = 0;
    for (const ObjectPatch& p : samples)
      if (p.label == PatchLabel::normal) ++n;
    return n;
  }
  std::int64_t anomaly_count() const {
    return static_cast<std::int64_t>(samples.size()) - normal_count();
  }
};

/// Samples `budget` labeled patches, keeping the natural normal:anomaly
/// ratio of the source annotations but guaranteeing at least one of each.
/// Patches whose category is in normal_cats become normal, everything else
/// is an anomaly. Anomalies are the positive class.
inline EvalDataset build_eval_set(const std::vector<ObjectPatch>& patches,
                                  const std::set<std::int64_t>& normal_cats,
                                  std::int64_t budget, std::uint64_t seed) {
  if (budget < 2)
    throw ValidationError("build_eval_set: budget must cover at least one sample per side");
  std::vector<std::int64_t> normal_idx, anomaly_idx;
  for (std::size_t i = 0; i < patches.size(); ++i) {
    if (normal_cats.count(patches[i].category_id))
      normal_idx.push_back(static_cast<std::int64_t>(i));
    else
      anomaly_idx.push_back(static_cast<std::int64_t>(i));
  }
  if (normal_idx.empty()) throw ValidationError("build_eval_set: no normal patches");
  if (anomaly_idx.empty()) throw ValidationError("build_eval_set: no anomalous patches");

  const std::int64_t avail_n = static_cast<std::int64_t>(normal_idx.size());
  const std::int64_t avail_a = static_cast<std::int64_t>(anomaly_idx.size());
  const std::int64_t total = std::min(budget, avail_n + avail_a);
  std::int64_t take_n = std::llround(static_cast<double>(total) * avail_n / (avail_n + avail_a));
  take_n = std::clamp(take_n, std::int64_t{1}, total - 1);
  take_n = std::min(take_n, avail_n);
  std::int64_t take_a = std::min(total - take_n, avail_a);
  take_n = std::min(total - take_a, avail_n);  // hand back any shortfall

  auto pick = [&](std::vector<std::int64_t>& idx, std::int64_t k, std::uint64_t side) {
    Rng rng = keyed_rng(seed, "eval", side);
    rng.shuffle(idx);
    idx.resize(k);
    std::sort(idx.begin(), idx.end());  // source order within the side
  };
  pick(normal_idx, take_n, 0);
  pick(anomaly_idx, take_a, 1);

  EvalDataset out;
  out.normal_categories = normal_cats;
  out.sample_budget = budget;
  out.samples.reserve(take_n + take_a);
  for (std::int64_t i : normal_idx) {
    out.samples.push_back(patches[i]);
    out.samples.back().label = PatchLabel::normal;
  }
  for (std::int64_t i : anomaly_idx) {
    out.samples.push_back(patches[i]);
    out.samples.back().label = PatchLabel::anomaly;
    out.anomaly_categories.insert(patches[i].category_id);
  }
  return out;
}

struct RocCurve {
  std::vector<std::pair<double, double>> points;  // (fpr, tpr), (0,0) .. (1,1)
  double auc = 0;
};

/// labels[i] nonzero marks sample i as an anomaly (positive).
inline RocCurve roc_auc(const std::vector<double>& scores,
                        const std::vector<std::uint8_t>& labels) {
  if (scores.size() != labels.size())
    throw ValidationError("roc_auc: score/label count mismatch");
  std::int64_t pos = 0, neg = 0;
  for (std::uint8_t l : labels) (l ? pos : neg)++;
  if (pos == 0 || neg == 0)
    throw ValidationError("roc_auc: need both classes present");

  const std::int64_t n = static_cast<std::int64_t>(scores.size());
  std::vector<std::int64_t> order(n);
  for (std::int64_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::int64_t a, std::int64_t b) { return scores[a] < scores[b]; });

  // midranks over tied groups; AUC = (rank sum of positives - P(P+1)/2) / PN
  double pos_rank_sum = 0;
  for (std::int64_t i = 0; i < n;) {
    std::int64_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);  // (i+1 + j) / 2
    for (std::int64_t k = i; k < j; ++k)
      if (labels[order[k]]) pos_rank_sum += midrank;
    i = j;
  }
  RocCurve out;
  out.auc = (pos_rank_sum - 0.5 * static_cast<double>(pos) * (pos + 1)) /
            (static_cast<double>(pos) * static_cast<double>(neg));

  // curve: descending score sweep, one step per distinct value
  out.points.emplace_back(0.0, 0.0);
  std::int64_t tp = 0, fp = 0;
  for (std::int64_t i = n - 1; i >= 0;) {
    std::int64_t j = i;
    while (j >= 0 && scores[order[j]] == scores[order[i]]) --j;
    for (std::int64_t k = i; k > j; --k) (labels[order[k]] ? tp : fp)++;
    out.points.emplace_back(static_cast<double>(fp) / neg, static_cast<double>(tp) / pos);
    i = j;
  }
  return out;
}

inline std::vector<std::uint8_t> anomaly_labels(const EvalDataset& eval) {
  std::vector<std::uint8_t> labels(eval.samples.size());
  for (std::size_t i = 0; i < eval.samples.size(); ++i) {
    if (eval.samples[i].label == PatchLabel::unlabeled)
      throw ValidationError("unlabeled sample " + eval.samples[i].patch_id +
                            " in evaluation set");
    labels[i] = eval.samples[i].label == PatchLabel::anomaly ? 1 : 0;
  }
  return labels;
}

struct SweepRow {
  double gamma = 0;
  double tpr = 0;
  double tnr = 0;
  double balanced_accuracy = 0;
};

struct ThresholdSweep {
  double best_gamma = 0;
  double best_balanced_accuracy = 0;
  std::vector<SweepRow> rows;  // ascending gamma
};

/// Tries every distinct normalized score as gamma and reports the one with
/// the best balanced accuracy, ties resolved toward the smaller gamma.
inline ThresholdSweep threshold_sweep(const ScoreReport& report,
                                      const std::vector<std::uint8_t>& labels) {
  if (labels.size() != report.samples.size())
    throw ValidationError("threshold_sweep: label/report mismatch");
  std::int64_t pos = 0, neg = 0;
  for (std::uint8_t l : labels) (l ? pos : neg)++;
  if (pos == 0 || neg == 0)
    throw ValidationError("threshold_sweep: need both classes present");

  std::vector<double> candidates;
  candidates.reserve(report.samples.size());
  for (const ScoredSample& s : report.samples) candidates.push_back(s.normalized_score);
  std::sort(candidates.begin(), candidates.end());
  candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());

  ThresholdSweep out;
  out.best_balanced_accuracy = -1;
  for (double gamma : candidates) {
    std::int64_t tp = 0, tn = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const bool flagged = report.samples[i].normalized_score > gamma;
      if (labels[i] && flagged) ++tp;
      if (!labels[i] && !flagged) ++tn;
    }
    SweepRow row;
    row.gamma = gamma;
    row.tpr = static_cast<double>(tp) / pos;
    row.tnr = static_cast<double>(tn) / neg;
    row.balanced_accuracy = 0.5 * (row.tpr + row.tnr);
    out.rows.push_back(row);
    if (row.balanced_accuracy > out.best_balanced_accuracy) {
      out.best_balanced_accuracy = row.balanced_accuracy;
      out.best_gamma = gamma;
    }
  }
  return out;
}

inline ThresholdSweep threshold_sweep(const ScoreReport& report, const EvalDataset& eval) {
  if (eval.samples.size() != report.samples.size())
    throw ValidationError("threshold_sweep: label/report mismatch");
  for (std::size_t i = 0; i < eval.samples.size(); ++i)
    if (eval.samples[i].patch_id != report.samples[i].patch_id)
      throw ValidationError("threshold_sweep: sample " + std::to_string(i) +
                            " is " + report.samples[i].patch_id + " in the report but " +
                            eval.samples[i].patch_id + " in the eval set");
  return threshold_sweep(report, anomaly_labels(eval));
}

struct AucRow {
  std::string model_id;
  double auc = 0;
  RocCurve curve;
};

struct AucTable {
  std::vector<AucRow> rows;  // in the order the models were given
  std::int64_t normal_count = 0;
  std::int64_t anomaly_count = 0;
};

/// One AUC row per model, detected against the same eval set. Rows keep the
/// caller's order so comparison tables read the way they were requested.
template <typename T>
AucTable compare_models(const std::vector<std::pair<std::string, Model<T>*>>& models,
                        const EvalDataset& eval) {
  if (models.empty()) throw ValidationError("compare_models: no models");
  if (eval.samples.empty()) throw ValidationError("compare_models: empty eval set");
  const std::int64_t size = eval.samples.front().size();
  std::vector<std::uint8_t> labels = anomaly_labels(eval);

  AucTable table;
  table.normal_count = eval.normal_count();
  table.anomaly_count = eval.anomaly_count();
  for (const auto& [name, model] : models) {
    if (model == nullptr) throw ValidationError("compare_models: null model " + name);
    if (model->desc.patch_size != size)
      throw ConfigError("compare_models: model " + name + " expects patch size " +
                        std::to_string(model->desc.patch_size) + " but the eval set is " +
                        std::to_string(size));
    std::vector<double> errors = raw_errors(*model, eval.samples);
    AucRow row;
    row.model_id = name;
    row.curve = roc_auc(errors, labels);
    row.auc = row.curve.auc;
    table.rows.push_back(std::move(row));
  }
  return table;
}

inline std::string format_auc_csv(const AucTable& table) {
  std::ostringstream os;
  char buf[48];
  os << "model,auc\n";
  for (const AucRow& row : table.rows) {
    std::snprintf(buf, sizeof buf, "%.9g", row.auc);
    os << row.model_id << ',' << buf << "\n";
  }
  return os.str();
}

/// Plain-text table with aligned columns, plus the class balance the AUCs
/// were measured against.
inline std::string format_auc_table(const AucTable& table) {
  std::size_t width = 5;
  for (const AucRow& row : table.rows) width = std::max(width, row.model_id.size());
  std::ostringstream os;
  os << "eval set: " << table.normal_count << " normal, " << table.anomaly_count
     << " anomalous\n";
  os << std::string(width + 2, ' ').replace(0, 5, "model") << "auc\n";
  char buf[48];
  for (const AucRow& row : table.rows) {
    std::snprintf(buf, sizeof buf, "%.4f", row.auc);
    os << row.model_id << std::string(width + 2 - row.model_id.size(), ' ') << buf << "\n";
  }
  return os.str();
}

inline void write_roc_csv(const std::string& path, const RocCurve& curve) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os << "fpr,tpr\n";
  char buf[96];
  for (const auto& [fpr, tpr] : curve.points) {
    std::snprintf(buf, sizeof buf, "%.9g,%.9g\n", fpr, tpr);
    os << buf;
  }
  if (!os) throw IoError("failed writing " + path);
}

}  // namespace oddkit
