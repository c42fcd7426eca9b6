// Pipeline driver: prepare / train / score / eval subcommands over a shared
// sectioned config file. Command-line flags override file values, and the
// merged effective configuration is written next to each command's outputs.
//
// Exit codes: 0 success, 2 configuration or validation failure, 3 training
// halted on a numeric failure, 4 missing model checkpoint.

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "oddkit/oddkit.hpp"

namespace fs = std::filesystem;
using namespace oddkit;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitTraining = 3;
constexpr int kExitMissing = 4;

std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open " + path);
  std::ostringstream buf;
  buf << is.rdbuf();
  return buf.str();
}

std::string sanitize(const std::string& s) {
  std::string out = s;
  for (char& c : out)
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '.' && c != '-') c = '_';
  return out;
}

std::string category_label(const CocoDataset& ds, std::int64_t id) {
  auto it = ds.category_names.find(id);
  if (it != ds.category_names.end() && !it->second.empty()) return it->second;
  return std::to_string(id);
}

void write_effective(const RunConfig& cfg, const std::string& command) {
  fs::create_directories(cfg.out_dir);
  write_run_config((fs::path(cfg.out_dir) / (command + ".effective.ini")).string(), cfg);
}

// ---- prepare ---------------------------------------------------------------

int cmd_prepare(RunConfig cfg) {
  if (cfg.annotations.empty())
    throw ConfigError("prepare needs dataset.annotations");
  if (cfg.images.empty()) throw ConfigError("prepare needs dataset.images");
  if (cfg.patch_store.empty())
    cfg.patch_store = (fs::path(cfg.out_dir) / "patches").string();
  if (!fs::exists(cfg.annotations))
    throw ConfigError("annotation file not found: " + cfg.annotations);

  CocoDataset ds = parse_annotations(read_file(cfg.annotations));
  const std::set<std::int64_t> filter = resolve_categories(cfg.categories, ds.category_names);

  std::map<std::int64_t, std::vector<const AnnotationRecord*>> by_image;
  for (const AnnotationRecord& ann : ds.annotations)
    if (filter.empty() || filter.count(ann.category_id)) by_image[ann.image_id].push_back(&ann);

  std::vector<ObjectPatch> patches;
  std::int64_t skipped = 0;
  for (const ImageInfo& im : ds.images) {
    auto it = by_image.find(im.id);
    if (it == by_image.end()) continue;
    const std::string path = (fs::path(cfg.images) / im.file_name).string();
    if (!fs::exists(path)) throw ConfigError("image file not found: " + path);
    Tensor<float> img = to_float(read_image(path));
    for (const AnnotationRecord* ann : it->second) {
      MaskBitmap mask = decode_segmentation(*ann, im.height, im.width);
      // empty masks cannot be extracted at all; small ones are filtered policy
      if (mask.area() == 0 || mask.area() < cfg.min_mask_area) {
        ++skipped;
        continue;
      }
      patches.push_back(extract_patch(img, *ann, cfg.model.patch_size));
    }
  }
  if (patches.empty())
    throw ValidationError("no patches survived extraction; check the category filter and "
                          "min_mask_area");

  write_patch_store(cfg.patch_store, patches);
  write_effective(cfg, "prepare");

  std::map<std::int64_t, std::int64_t> counts;
  for (const ObjectPatch& p : patches) ++counts[p.category_id];
  for (const auto& [cat, n] : counts)
    std::printf("category %s: %lld patches\n", category_label(ds, cat).c_str(),
                static_cast<long long>(n));
  std::printf("wrote %zu patches to %s (%lld annotations skipped below min_mask_area %lld)\n",
              patches.size(), cfg.patch_store.c_str(), static_cast<long long>(skipped),
              static_cast<long long>(cfg.min_mask_area));
  return kExitOk;
}

// ---- train -----------------------------------------------------------------

int cmd_train(RunConfig cfg) {
  if (cfg.patch_store.empty()) throw ConfigError("train needs dataset.patch_store");
  std::vector<ObjectPatch> patches = load_patch_store(cfg.patch_store);
  DatasetSplit split = make_split(patches, cfg.split_fraction, cfg.seed);

  Model<float> model = build_model<float>(cfg.model, cfg.seed);
  TrainConfig tc = cfg.train;
  tc.seed = cfg.seed;
  tc.deterministic = cfg.deterministic;
  tc.checkpoint_dir = (fs::path(cfg.out_dir) / "checkpoints").string();
  AugmentationPolicy policy =
      cfg.augment_enabled ? cfg.augment : AugmentationPolicy::none();
  policy.seed = cfg.seed;

  std::printf("training %s on %zu train / %zu validation patches for %lld steps\n",
              model_kind_name(cfg.model.kind), split.train.size(), split.validation.size(),
              static_cast<long long>(tc.steps));
  TrainResult result = train(model, split, policy, tc);

  fs::create_directories(cfg.out_dir);
  write_metrics_csv((fs::path(cfg.out_dir) / "metrics.csv").string(), result.metrics);
  {
    std::ofstream dat((fs::path(cfg.out_dir) / "loss_curves.dat").string(), std::ios::binary);
    if (!dat) throw IoError("cannot write loss_curves.dat");
    dat << "# step train_loss val_loss\n";
    char row[128];
    for (const MetricRecord& r : result.metrics.records) {
      std::snprintf(row, sizeof row, "%lld %.9g %.9g\n", static_cast<long long>(r.step),
                    r.train_loss, r.val_loss);
      dat << row;
    }
  }
  write_effective(cfg, "train");

  if (result.halted) {
    std::fprintf(stderr, "training halted after %lld steps: %s\n",
                 static_cast<long long>(result.steps_done), result.halt_reason.c_str());
    return kExitTraining;
  }
  std::printf("finished %lld steps; final train loss %.6g, validation loss %.6g\n",
              static_cast<long long>(result.steps_done),
              result.metrics.records.back().train_loss,
              result.metrics.records.back().val_loss);
  std::printf("checkpoint: %s\n", (fs::path(tc.checkpoint_dir) / "final.model").string().c_str());
  return kExitOk;
}

// ---- score -----------------------------------------------------------------

std::string score_sheet_name(const char* prefix, const std::vector<ScoredSample>& ranked) {
  std::string name = prefix;
  char buf[32];
  for (const ScoredSample& s : ranked) {
    std::snprintf(buf, sizeof buf, "_%.3f", s.normalized_score);
    name += buf;
  }
  return name + ".png";
}

int cmd_score(RunConfig cfg, std::string checkpoint) {
  if (checkpoint.empty()) checkpoint = cfg.checkpoint;
  if (checkpoint.empty())
    throw ConfigError("score needs a checkpoint (positional argument or score.checkpoint)");
  if (!fs::exists(checkpoint)) {
    std::fprintf(stderr, "checkpoint not found: %s\n", checkpoint.c_str());
    return kExitMissing;
  }
  if (cfg.patch_store.empty()) throw ConfigError("score needs dataset.patch_store");

  Model<float> model = load_model<float>(checkpoint);
  std::vector<ObjectPatch> patches = load_patch_store(cfg.patch_store);
  ScoreReport report = detect(model, patches, cfg.gamma, cfg.score_alpha,
                              fs::path(checkpoint).filename().string());

  fs::create_directories(cfg.out_dir);
  write_score_csv((fs::path(cfg.out_dir) / "scores.csv").string(), report);

  std::int64_t k = cfg.topk;
  if (k > static_cast<std::int64_t>(report.samples.size())) {
    k = static_cast<std::int64_t>(report.samples.size());
    log_msg(LogLevel::warn, "topk exceeds the scored set; clamping to " + std::to_string(k));
  }
  auto [top, bottom] = rank_extremes(report, k);

  std::map<std::string, const ObjectPatch*> by_id;
  for (const ObjectPatch& p : patches) by_id[p.patch_id] = &p;
  auto sheet_for = [&](const std::vector<ScoredSample>& ranked, const char* prefix) {
    std::vector<Tensor<float>> tiles;
    for (const ScoredSample& s : ranked) tiles.push_back(by_id.at(s.patch_id)->pixels);
    const std::string name = score_sheet_name(prefix, ranked);
    write_png_float((fs::path(cfg.out_dir) / name).string(), contact_sheet(tiles, k));
    return name;
  };
  const std::string top_name = sheet_for(top, "top_anomalous");
  const std::string bottom_name = sheet_for(bottom, "top_normal");
  write_effective(cfg, "score");

  std::printf("scored %zu patches with %s; %lld flagged at gamma %.3g\n", patches.size(),
              report.model_id.c_str(), static_cast<long long>(report.anomaly_count()),
              report.gamma);
  std::printf("report: %s\n", (fs::path(cfg.out_dir) / "scores.csv").string().c_str());
  std::printf("sheets: %s, %s\n", top_name.c_str(), bottom_name.c_str());
  return kExitOk;
}

// ---- eval ------------------------------------------------------------------

int cmd_eval(RunConfig cfg, const std::vector<std::string>& checkpoints) {
  if (checkpoints.empty()) throw ConfigError("eval needs at least one checkpoint");
  for (const std::string& c : checkpoints)
    if (!fs::exists(c)) {
      std::fprintf(stderr, "checkpoint not found: %s\n", c.c_str());
      return kExitMissing;
    }
  if (cfg.patch_store.empty()) throw ConfigError("eval needs dataset.patch_store");
  if (cfg.normal_categories.empty())
    throw ConfigError("eval needs eval.normal_categories");

  // category names resolve only when the annotation document is at hand;
  // otherwise numeric ids are required
  std::map<std::int64_t, std::string> names;
  if (!cfg.annotations.empty() && fs::exists(cfg.annotations))
    names = parse_annotations(read_file(cfg.annotations)).category_names;
  const std::set<std::int64_t> normal_cats = resolve_categories(cfg.normal_categories, names);

  std::vector<ObjectPatch> patches = load_patch_store(cfg.patch_store);
  EvalDataset eval = build_eval_set(patches, normal_cats, cfg.eval_budget, cfg.seed);

  std::vector<Model<float>> models;
  models.reserve(checkpoints.size());
  for (const std::string& c : checkpoints) models.push_back(load_model<float>(c));
  std::vector<std::pair<std::string, Model<float>*>> named;
  for (std::size_t i = 0; i < models.size(); ++i) named.emplace_back(checkpoints[i], &models[i]);

  AucTable table = compare_models<float>(named, eval);

  fs::create_directories(cfg.out_dir);
  std::ofstream csv((fs::path(cfg.out_dir) / "auc_table.csv").string(), std::ios::binary);
  if (!csv) throw IoError("cannot write auc_table.csv");
  csv << format_auc_csv(table);
  csv.close();
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    const std::string name = "roc_" + std::to_string(i + 1) + "_" +
                             sanitize(fs::path(checkpoints[i]).filename().string()) + ".csv";
    write_roc_csv((fs::path(cfg.out_dir) / name).string(), table.rows[i].curve);
  }
  write_effective(cfg, "eval");

  std::fputs(format_auc_table(table).c_str(), stdout);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"object patch anomaly detection pipeline"};
  app.require_subcommand(1);

  std::string config_path;
  std::uint64_t seed = 0;
  bool deterministic = false;
  std::string out_dir;
  double gamma = 0.9, alpha = -1.0;
  std::int64_t topk = 5;
  std::string checkpoint;
  std::vector<std::string> checkpoints;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "run configuration file");
    sub->add_option("--seed", seed, "override the run seed");
    sub->add_flag("--deterministic", deterministic,
                  "bit-reproducible mode: serial execution, zeroed wall times");
    sub->add_option("--out", out_dir, "output directory");
  };

  CLI::App* prepare = app.add_subcommand("prepare", "extract masked object patches");
  add_common(prepare);
  CLI::App* train = app.add_subcommand("train", "train a model on a patch store");
  add_common(train);
  CLI::App* score = app.add_subcommand("score", "score patches against a checkpoint");
  add_common(score);
  score->add_option("checkpoint", checkpoint, "model checkpoint to score with");
  score->add_option("--gamma", gamma, "anomaly threshold on normalized scores");
  score->add_option("--alpha", alpha, "entropy weight in the raw error");
  score->add_option("--topk", topk, "extreme samples per contact sheet");
  CLI::App* eval = app.add_subcommand("eval", "compare checkpoints by AUC");
  add_common(eval);
  eval->add_option("checkpoints", checkpoints, "model checkpoints, one table row each")
      ->expected(-1);
  eval->add_option("--alpha", alpha, "entropy weight in the raw error");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    RunConfig cfg;
    if (!config_path.empty()) cfg = load_run_config(config_path);
    CLI::App* sub = app.get_subcommands().front();
    auto given = [&](const std::string& name) {
      const CLI::Option* opt = sub->get_option_no_throw(name);
      return opt != nullptr && opt->count() > 0;
    };
    if (given("--seed")) cfg.seed = seed;
    if (given("--deterministic")) cfg.deterministic = true;
    if (given("--out")) cfg.out_dir = out_dir;
    if (given("--gamma")) cfg.gamma = gamma;
    if (given("--alpha")) cfg.score_alpha = alpha;
    if (given("--topk")) cfg.topk = topk;
    if (cfg.deterministic) setenv("ODDKIT_THREADS", "1", 1);
    cfg.validate();

    if (sub == prepare) return cmd_prepare(std::move(cfg));
    if (sub == train) return cmd_train(std::move(cfg));
    if (sub == score) return cmd_score(std::move(cfg), checkpoint);
    return cmd_eval(std::move(cfg), checkpoints);
  } catch (const NumericError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitTraining;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "unexpected error: %s\n", e.what());
    return kExitConfig;
  }
}
