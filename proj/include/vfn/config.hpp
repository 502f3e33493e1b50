#pragma once

// Experiment configuration files: INI-style sections with `key = value`
// lines; `#` or `;` start a comment. Unknown sections and keys are errors.
// to_ini writes every field, so parse(to_ini(c)) == c.

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "vfn/backbone.hpp"
#include "vfn/synthetic.hpp"
#include "vfn/train.hpp"

namespace vfn {

enum class Precision { float64, float32 };

inline const char* to_string(Precision p) { return p == Precision::float64 ? "float64" : "float32"; }

inline Precision parse_precision(const std::string& s) {
  if (s == "float64") return Precision::float64;
  if (s == "float32") return Precision::float32;
  throw ConfigError("unknown precision '" + s + "' (float64 | float32)");
}

/// Synthetic data sizes plus optional tensor-file datasets; when
/// train_clips is set the synthetic generator is not used.
struct DataConfig {
  SyntheticVideoTask task;  // frames/height/width/channels follow [network]
  std::size_t train_size = 2000;
  std::size_t test_size = 500;
  std::uint64_t seed = 1234;
  std::string train_clips, train_labels, test_clips, test_labels;

  bool operator==(const DataConfig&) const = default;
};

struct AnalysisConfig {
  std::size_t heatmap_stage = 0;
  std::size_t heatmap_block = 0;
  double gradcheck_step = 1e-5;
  double gradcheck_tolerance = 1e-4;
  std::size_t gradcheck_samples = 64;

  bool operator==(const AnalysisConfig&) const = default;
};

struct ExperimentConfig {
  NetworkConfig network;
  TrainConfig train;
  DataConfig data;
  AnalysisConfig analysis;
  Precision precision = Precision::float64;
  std::size_t eval_batch = 32;
  std::string out_dir = "out";

  bool operator==(const ExperimentConfig&) const = default;

  /// The synthetic task with its clip geometry taken from the network.
  SyntheticVideoTask task() const {
    SyntheticVideoTask t = data.task;
    t.frames = network.frames;
    t.height = network.height;
    t.width = network.width;
    t.channels = network.in_channels;
    return t;
  }

  void validate() const {
    network.validate();
    train.validate();
    if (data.train_clips.empty()) {
      task().validate();
      if (network.num_classes != kDirections) {
        throw ConfigError("network.num_classes must be 4 for the synthetic direction task");
      }
      if (data.train_size == 0 || data.test_size == 0) throw ConfigError("data: sizes must be positive");
    } else if (data.train_labels.empty() || data.test_clips.empty() || data.test_labels.empty()) {
      throw ConfigError("data: train_clips needs train_labels, test_clips and test_labels");
    }
    if (eval_batch == 0) throw ConfigError("train.eval_batch must be positive");
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class N>
N parse_number(const std::string& key, const std::string& v) {
  N out{};
  const char* end = v.data() + v.size();
  auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc{} || ptr != end) throw ConfigError(key + ": cannot parse '" + v + "' as a number");
  return out;
}

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct Field {
  std::string section, key;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

template <class M>
Field size_field(std::string section, std::string key, M member) {
  const std::string name = section + "." + key;
  return {section, key, [member](const ExperimentConfig& c) { return std::to_string(member(const_cast<ExperimentConfig&>(c))); },
          [member, name](ExperimentConfig& c, const std::string& v) { member(c) = parse_number<std::remove_reference_t<decltype(member(c))>>(name, v); }};
}

template <class M>
Field double_field(std::string section, std::string key, M member) {
  const std::string name = section + "." + key;
  return {section, key, [member](const ExperimentConfig& c) { return format_double(member(const_cast<ExperimentConfig&>(c))); },
          [member, name](ExperimentConfig& c, const std::string& v) { member(c) = parse_number<double>(name, v); }};
}

template <class M>
Field string_field(std::string section, std::string key, M member) {
  return {section, key, [member](const ExperimentConfig& c) { return member(const_cast<ExperimentConfig&>(c)); },
          [member](ExperimentConfig& c, const std::string& v) { member(c) = v; }};
}

inline const std::vector<Field>& fields() {
  using E = ExperimentConfig;
  static const std::vector<Field> list = [] {
    std::vector<Field> f;
    f.push_back({"network", "blocks_per_stage",
                 [](const E& c) {
                   const auto& b = c.network.blocks_per_stage;
                   return std::to_string(b[0]) + " " + std::to_string(b[1]) + " " + std::to_string(b[2]) + " " +
                          std::to_string(b[3]);
                 },
                 [](E& c, const std::string& v) {
                   std::istringstream is(v);
                   std::vector<std::string> parts;
                   std::string p;
                   while (is >> p) parts.push_back(p);
                   if (parts.size() != 4) throw ConfigError("network.blocks_per_stage needs four counts, got '" + v + "'");
                   for (std::size_t i = 0; i < 4; ++i)
                     c.network.blocks_per_stage[i] = parse_number<std::size_t>("network.blocks_per_stage", parts[i]);
                 }});
    f.push_back(size_field("network", "embed_dim", [](E& c) -> auto& { return c.network.embed_dim; }));
    f.push_back({"network", "embedding", [](const E& c) { return std::string(to_string(c.network.embedding)); },
                 [](E& c, const std::string& v) { c.network.embedding = parse_embedding(v); }});
    f.push_back(double_field("network", "mlp_ratio", [](E& c) -> auto& { return c.network.mlp_ratio; }));
    f.push_back(double_field("network", "drop_path_rate", [](E& c) -> auto& { return c.network.drop_path_rate; }));
    f.push_back(size_field("network", "num_classes", [](E& c) -> auto& { return c.network.num_classes; }));
    f.push_back(size_field("network", "in_channels", [](E& c) -> auto& { return c.network.in_channels; }));
    f.push_back(size_field("network", "frames", [](E& c) -> auto& { return c.network.frames; }));
    f.push_back(size_field("network", "height", [](E& c) -> auto& { return c.network.height; }));
    f.push_back(size_field("network", "width", [](E& c) -> auto& { return c.network.width; }));

    f.push_back(size_field("focal", "focal_levels", [](E& c) -> auto& { return c.network.focal.focal_levels; }));
    f.push_back(size_field("focal", "base_kernel", [](E& c) -> auto& { return c.network.focal.base_kernel; }));
    f.push_back(size_field("focal", "kernel_step", [](E& c) -> auto& { return c.network.focal.kernel_step; }));
    f.push_back({"focal", "fusion", [](const E& c) { return std::string(to_string(c.network.focal.fusion)); },
                 [](E& c, const std::string& v) { c.network.focal.fusion = parse_fusion(v); }});
    f.push_back({"focal", "variant", [](const E& c) { return std::string(to_string(c.network.focal.variant)); },
                 [](E& c, const std::string& v) { c.network.focal.variant = parse_variant(v); }});

    f.push_back(double_field("train", "base_lr", [](E& c) -> auto& { return c.train.base_lr; }));
    f.push_back(size_field("train", "reference_batch", [](E& c) -> auto& { return c.train.reference_batch; }));
    f.push_back(size_field("train", "batch_size", [](E& c) -> auto& { return c.train.batch_size; }));
    f.push_back(size_field("train", "epochs", [](E& c) -> auto& { return c.train.epochs; }));
    f.push_back(size_field("train", "warmup_epochs", [](E& c) -> auto& { return c.train.warmup_epochs; }));
    f.push_back(double_field("train", "momentum", [](E& c) -> auto& { return c.train.momentum; }));
    f.push_back(double_field("train", "label_smoothing", [](E& c) -> auto& { return c.train.label_smoothing; }));
    f.push_back(double_field("train", "mixup_alpha", [](E& c) -> auto& { return c.train.mixup_alpha; }));
    f.push_back(double_field("train", "mixup_prob", [](E& c) -> auto& { return c.train.mixup_prob; }));
    f.push_back(double_field("train", "cutmix_prob", [](E& c) -> auto& { return c.train.cutmix_prob; }));
    f.push_back(double_field("train", "flip_prob", [](E& c) -> auto& { return c.train.flip_prob; }));
    f.push_back(double_field("train", "color_jitter_prob", [](E& c) -> auto& { return c.train.color_jitter_prob; }));
    f.push_back(double_field("train", "clip_grad_norm", [](E& c) -> auto& { return c.train.clip_grad_norm; }));
    f.push_back(size_field("train", "seed", [](E& c) -> auto& { return c.train.seed; }));
    f.push_back({"train", "precision", [](const E& c) { return std::string(to_string(c.precision)); },
                 [](E& c, const std::string& v) { c.precision = parse_precision(v); }});
    f.push_back(size_field("train", "eval_batch", [](E& c) -> auto& { return c.eval_batch; }));

    f.push_back(size_field("data", "train_size", [](E& c) -> auto& { return c.data.train_size; }));
    f.push_back(size_field("data", "test_size", [](E& c) -> auto& { return c.data.test_size; }));
    f.push_back(size_field("data", "seed", [](E& c) -> auto& { return c.data.seed; }));
    f.push_back(size_field("data", "object_size", [](E& c) -> auto& { return c.data.task.object_size; }));
    f.push_back(size_field("data", "speed", [](E& c) -> auto& { return c.data.task.speed; }));
    f.push_back(double_field("data", "intensity", [](E& c) -> auto& { return c.data.task.intensity; }));
    f.push_back(double_field("data", "noise_std", [](E& c) -> auto& { return c.data.task.noise_std; }));
    f.push_back(string_field("data", "train_clips", [](E& c) -> auto& { return c.data.train_clips; }));
    f.push_back(string_field("data", "train_labels", [](E& c) -> auto& { return c.data.train_labels; }));
    f.push_back(string_field("data", "test_clips", [](E& c) -> auto& { return c.data.test_clips; }));
    f.push_back(string_field("data", "test_labels", [](E& c) -> auto& { return c.data.test_labels; }));

    f.push_back(size_field("analysis", "heatmap_stage", [](E& c) -> auto& { return c.analysis.heatmap_stage; }));
    f.push_back(size_field("analysis", "heatmap_block", [](E& c) -> auto& { return c.analysis.heatmap_block; }));
    f.push_back(double_field("analysis", "gradcheck_step", [](E& c) -> auto& { return c.analysis.gradcheck_step; }));
    f.push_back(double_field("analysis", "gradcheck_tolerance", [](E& c) -> auto& { return c.analysis.gradcheck_tolerance; }));
    f.push_back(size_field("analysis", "gradcheck_samples", [](E& c) -> auto& { return c.analysis.gradcheck_samples; }));

    f.push_back(string_field("output", "dir", [](E& c) -> auto& { return c.out_dir; }));
    return f;
  }();
  return list;
}

}  // namespace detail

/// Applies `key = value` lines onto `base`. `source` names the input in
/// error messages. A `preset = T|S|B` line in [network] resets embed_dim
/// and blocks_per_stage at that point of the file.
inline ExperimentConfig parse_config(std::istream& is, const std::string& source = "config",
                                     ExperimentConfig base = {}) {
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find_first_of("#;");
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const std::string where = source + ":" + std::to_string(lineno) + ": ";
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + "malformed section header");
      section = detail::trim(line.substr(1, line.size() - 2));
      bool known = false;
      for (const auto& f : detail::fields()) known = known || f.section == section;
      if (!known) throw ConfigError(where + "unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value'");
    const std::string key = detail::trim(line.substr(0, eq)), value = detail::trim(line.substr(eq + 1));
    if (section.empty()) throw ConfigError(where + "key '" + key + "' outside any section");
    try {
      if (section == "network" && key == "preset") {
        const NetworkConfig p = NetworkConfig::preset(value);
        base.network.embed_dim = p.embed_dim;
        base.network.blocks_per_stage = p.blocks_per_stage;
        continue;
      }
      const detail::Field* field = nullptr;
      for (const auto& f : detail::fields())
        if (f.section == section && f.key == key) field = &f;
      if (!field) throw ConfigError("unknown key '" + key + "' in [" + section + "]");
      field->set(base, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
  return base;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config " + path.string());
  return parse_config(is, path.string());
}

/// Every field, grouped by section, in a fixed order.
inline std::string to_ini(const ExperimentConfig& c) {
  std::ostringstream os;
  std::string section;
  for (const auto& f : detail::fields()) {
    if (f.section != section) {
      if (!section.empty()) os << '\n';
      section = f.section;
      os << '[' << section << "]\n";
    }
    os << f.key << " = " << f.get(c) << '\n';
  }
  return os.str();
}

}  // namespace vfn
