#pragma once
// Run configuration: a flat key-value text file with one section per
// pipeline stage. Strict on input (unknown sections or keys are errors, so
// typos cannot silently fall back to defaults). The merged effective
// configuration is always written next to a command's outputs, in canonical
// form, so every run records exactly what it ran with.

#include <cctype>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "oddkit/models.hpp"
#include "oddkit/patches.hpp"
#include "oddkit/trainer.hpp"

namespace oddkit {

struct RunConfig {
  // [dataset]
  std::string annotations;   // COCO-style annotation document
  std::string images;        // directory the image file_names resolve against
  std::string patch_store;   // extracted patch directory (prepare output)
  std::int64_t min_mask_area = 16;
  std::vector<std::string> categories;  // prepare filter; names or ids, empty = all
  double split_fraction = 0.85;

  // [model]
  ArchitectureDescriptor model;

  // [train]
  TrainConfig train;

  // [augment]
  bool augment_enabled = true;
  AugmentationPolicy augment;

  // [score]
  double gamma = 0.9;
  double score_alpha = -1;  // < 0 means the model's entropy weight
  std::int64_t topk = 5;
  std::string checkpoint;

  // [eval]
  std::vector<std::string> normal_categories;  // names or ids
  std::int64_t eval_budget = 5000;

  // [run]
  std::string out_dir = "out";
  std::uint64_t seed = 0;
  bool deterministic = false;

  void validate() const {
    if (min_mask_area < 0) throw ConfigError("dataset.min_mask_area must be non-negative");
    if (!(split_fraction > 0.0) || !(split_fraction < 1.0))
      throw ConfigError("dataset.split_fraction must lie strictly between 0 and 1");
    model.validate();
    train.validate();
    if (augment_enabled) augment.validate();
    if (topk < 1) throw ConfigError("score.topk must be positive");
    if (eval_budget < 2) throw ConfigError("eval.budget must be at least 2");
    if (out_dir.empty()) throw ConfigError("run.out_dir must not be empty");
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(s);
  while (std::getline(is, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline double parse_real(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError(key + ": cannot read '" + value + "' as a number");
  }
}

inline std::int64_t parse_int(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    std::int64_t v = std::stoll(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError(key + ": cannot read '" + value + "' as an integer");
  }
}

inline bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  throw ConfigError(key + ": cannot read '" + value + "' as true/false");
}

}  // namespace detail

/// Parses the sectioned key = value format. Lines starting with # or ; are
/// comments; blank lines are ignored; keys are only valid inside their
/// section. Unknown sections and keys are configuration errors.
inline RunConfig parse_run_config(const std::string& text) {
  using detail::parse_bool;
  using detail::parse_int;
  using detail::parse_real;
  RunConfig cfg;
  std::istringstream is(text);
  std::string line, section;
  std::int64_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[') {
      if (t.back() != ']')
        throw ConfigError("line " + std::to_string(line_no) + ": unterminated section header");
      section = t.substr(1, t.size() - 2);
      static const std::set<std::string> known = {"dataset", "model",  "train", "augment",
                                                 "score",   "eval",   "run"};
      if (!known.count(section))
        throw ConfigError("line " + std::to_string(line_no) + ": unknown section [" + section +
                          "]");
      continue;
    }
    const std::size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(line_no) + ": expected key = value, got '" + t +
                        "'");
    const std::string key = detail::trim(t.substr(0, eq));
    const std::string value = detail::trim(t.substr(eq + 1));
    const std::string where = section.empty() ? key : section + "." + key;
    if (section.empty())
      throw ConfigError("line " + std::to_string(line_no) + ": key '" + key +
                        "' appears before any section");

    if (section == "dataset") {
      if (key == "annotations") cfg.annotations = value;
      else if (key == "images") cfg.images = value;
      else if (key == "patch_store") cfg.patch_store = value;
      else if (key == "min_mask_area") cfg.min_mask_area = parse_int(where, value);
      else if (key == "categories") cfg.categories = detail::split_list(value);
      else if (key == "split_fraction") cfg.split_fraction = parse_real(where, value);
      else throw ConfigError("unknown key " + where);
    } else if (section == "model") {
      if (key == "kind") cfg.model.kind = model_kind_from_name(value);
      else if (key == "patch_size") cfg.model.patch_size = parse_int(where, value);
      else if (key == "latent_dim") cfg.model.latent_dim = parse_int(where, value);
      else if (key == "memory_slots") cfg.model.memory_slots = parse_int(where, value);
      else if (key == "shrink_lambda") cfg.model.shrink_lambda = parse_real(where, value);
      else if (key == "shrink_epsilon") cfg.model.shrink_epsilon = parse_real(where, value);
      else if (key == "entropy_alpha") cfg.model.entropy_alpha = parse_real(where, value);
      else throw ConfigError("unknown key " + where);
    } else if (section == "train") {
      if (key == "steps") cfg.train.steps = parse_int(where, value);
      else if (key == "batch_size") cfg.train.batch_size = parse_int(where, value);
      else if (key == "learning_rate") cfg.train.learning_rate = parse_real(where, value);
      else if (key == "beta1") cfg.train.adam_beta1 = parse_real(where, value);
      else if (key == "beta2") cfg.train.adam_beta2 = parse_real(where, value);
      else if (key == "adam_epsilon") cfg.train.adam_epsilon = parse_real(where, value);
      else if (key == "validate_every") cfg.train.validate_every = parse_int(where, value);
      else if (key == "checkpoint_every") cfg.train.checkpoint_every = parse_int(where, value);
      else throw ConfigError("unknown key " + where);
    } else if (section == "augment") {
      if (key == "enabled") cfg.augment_enabled = parse_bool(where, value);
      else if (key == "max_rotation_deg") cfg.augment.max_rotation_deg = parse_real(where, value);
      else if (key == "max_shift_frac") cfg.augment.max_shift_frac = parse_real(where, value);
      else if (key == "max_brightness_frac")
        cfg.augment.max_brightness_frac = parse_real(where, value);
      else if (key == "zoom_lo") cfg.augment.zoom_lo = parse_real(where, value);
      else if (key == "zoom_hi") cfg.augment.zoom_hi = parse_real(where, value);
      else if (key == "horizontal_flip") cfg.augment.horizontal_flip = parse_bool(where, value);
      else throw ConfigError("unknown key " + where);
    } else if (section == "score") {
      if (key == "gamma") cfg.gamma = parse_real(where, value);
      else if (key == "alpha") cfg.score_alpha = parse_real(where, value);
      else if (key == "topk") cfg.topk = parse_int(where, value);
      else if (key == "checkpoint") cfg.checkpoint = value;
      else throw ConfigError("unknown key " + where);
    } else if (section == "eval") {
      if (key == "normal_categories") cfg.normal_categories = detail::split_list(value);
      else if (key == "budget") cfg.eval_budget = parse_int(where, value);
      else throw ConfigError("unknown key " + where);
    } else {  // run
      if (key == "out_dir") cfg.out_dir = value;
      else if (key == "seed") cfg.seed = static_cast<std::uint64_t>(parse_int(where, value));
      else if (key == "deterministic") cfg.deterministic = parse_bool(where, value);
      else throw ConfigError("unknown key " + where);
    }
  }
  return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open config file " + path);
  std::ostringstream buf;
  buf << is.rdbuf();
  return parse_run_config(buf.str());
}

namespace detail {
inline std::string real_str(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
inline std::string join_list(const std::vector<std::string>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    out += v[i];
  }
  return out;
}
}  // namespace detail

/// Canonical emission: every key in a fixed order, so two runs with the same
/// effective settings write byte-identical files.
inline std::string format_run_config(const RunConfig& cfg) {
  using detail::join_list;
  using detail::real_str;
  std::ostringstream os;
  os << "[dataset]\n";
  os << "annotations = " << cfg.annotations << "\n";
  os << "images = " << cfg.images << "\n";
  os << "patch_store = " << cfg.patch_store << "\n";
  os << "min_mask_area = " << cfg.min_mask_area << "\n";
  os << "categories = " << join_list(cfg.categories) << "\n";
  os << "split_fraction = " << real_str(cfg.split_fraction) << "\n";
  os << "\n[model]\n";
  os << "kind = " << model_kind_name(cfg.model.kind) << "\n";
  os << "patch_size = " << cfg.model.patch_size << "\n";
  os << "latent_dim = " << cfg.model.latent_dim << "\n";
  os << "memory_slots = " << cfg.model.memory_slots << "\n";
  os << "shrink_lambda = " << real_str(cfg.model.shrink_lambda) << "\n";
  os << "shrink_epsilon = " << real_str(cfg.model.shrink_epsilon) << "\n";
  os << "entropy_alpha = " << real_str(cfg.model.entropy_alpha) << "\n";
  os << "\n[train]\n";
  os << "steps = " << cfg.train.steps << "\n";
  os << "batch_size = " << cfg.train.batch_size << "\n";
  os << "learning_rate = " << real_str(cfg.train.learning_rate) << "\n";
  os << "beta1 = " << real_str(cfg.train.adam_beta1) << "\n";
  os << "beta2 = " << real_str(cfg.train.adam_beta2) << "\n";
  os << "adam_epsilon = " << real_str(cfg.train.adam_epsilon) << "\n";
  os << "validate_every = " << cfg.train.validate_every << "\n";
  os << "checkpoint_every = " << cfg.train.checkpoint_every << "\n";
  os << "\n[augment]\n";
  os << "enabled = " << (cfg.augment_enabled ? "true" : "false") << "\n";
  os << "max_rotation_deg = " << real_str(cfg.augment.max_rotation_deg) << "\n";
  os << "max_shift_frac = " << real_str(cfg.augment.max_shift_frac) << "\n";
  os << "max_brightness_frac = " << real_str(cfg.augment.max_brightness_frac) << "\n";
  os << "zoom_lo = " << real_str(cfg.augment.zoom_lo) << "\n";
  os << "zoom_hi = " << real_str(cfg.augment.zoom_hi) << "\n";
  os << "horizontal_flip = " << (cfg.augment.horizontal_flip ? "true" : "false") << "\n";
  os << "\n[score]\n";
  os << "gamma = " << real_str(cfg.gamma) << "\n";
  os << "alpha = " << real_str(cfg.score_alpha) << "\n";
  os << "topk = " << cfg.topk << "\n";
  os << "checkpoint = " << cfg.checkpoint << "\n";
  os << "\n[eval]\n";
  os << "normal_categories = " << join_list(cfg.normal_categories) << "\n";
  os << "budget = " << cfg.eval_budget << "\n";
  os << "\n[run]\n";
  os << "out_dir = " << cfg.out_dir << "\n";
  os << "seed = " << cfg.seed << "\n";
  os << "deterministic = " << (cfg.deterministic ? "true" : "false") << "\n";
  return os.str();
}

inline void write_run_config(const std::string& path, const RunConfig& cfg) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os << format_run_config(cfg);
  if (!os) throw IoError("failed writing " + path);
}

/// Resolves category entries that are either numeric ids or names present in
/// the id -> name map. Unknown names are configuration errors.
inline std::set<std::int64_t> resolve_categories(
    const std::vector<std::string>& entries,
    const std::map<std::int64_t, std::string>& names) {
  std::set<std::int64_t> out;
  for (const std::string& entry : entries) {
    char* end = nullptr;
    const long long id = std::strtoll(entry.c_str(), &end, 10);
    if (end != entry.c_str() && *end == '\0') {
      out.insert(id);
      continue;
    }
    bool found = false;
    for (const auto& [cat_id, name] : names) {
      if (name == entry) {
        out.insert(cat_id);
        found = true;
        break;
      }
    }
    if (!found)
      throw ConfigError("category '" + entry +
                        "' is not a numeric id and no category has that name");
  }
  return out;
}

}  // namespace oddkit
