#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "vfn/vfn.hpp"

namespace fs = std::filesystem;
using namespace vfn;

namespace {

struct Globals {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::size_t threads = 1;
};

ExperimentConfig resolve(const Globals& g, bool needs_data = true) {
  ExperimentConfig cfg = g.config.empty() ? ExperimentConfig{} : load_config(g.config);
  if (!g.out.empty()) cfg.out_dir = g.out;
  if (g.seed) cfg.train.seed = *g.seed;
  if (needs_data) {
    cfg.validate();
  } else {
    cfg.network.validate();
  }
  return cfg;
}

fs::path prepare_out(const ExperimentConfig& cfg) {
  const fs::path out = cfg.out_dir;
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create output directory " + out.string() + ": " + ec.message());
  std::ofstream os(out / "config.ini");
  if (!os) throw IoError("cannot write " + (out / "config.ini").string());
  os << to_ini(cfg);
  return out;
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  return os;
}

bool synthetic(const ExperimentConfig& cfg) { return cfg.data.train_clips.empty(); }

template <class T>
std::pair<Dataset<T>, Dataset<T>> load_data(const ExperimentConfig& cfg) {
  if (!synthetic(cfg)) {
    return {load_dataset<T>(cfg.data.train_clips, cfg.data.train_labels),
            load_dataset<T>(cfg.data.test_clips, cfg.data.test_labels)};
  }
  Rng rng(cfg.data.seed);
  auto train_set = make_synthetic_dataset<T>(cfg.task(), cfg.data.train_size, rng);
  auto test_set = make_synthetic_dataset<T>(cfg.task(), cfg.data.test_size, rng);
  return {std::move(train_set), std::move(test_set)};
}

Shape single_clip_input(const NetworkConfig& n) { return {1, n.frames, n.height, n.width, n.in_channels}; }

template <class T>
TrainResult<T> run_training(const ExperimentConfig& cfg, const Dataset<T>& train_set, const Dataset<T>& test_set,
                            const fs::path& log_path, const std::string& tag) {
  std::ofstream log = open_out(log_path);
  TrainHooks hooks;
  if (synthetic(cfg)) hooks.flip_label = hflip_class;
  hooks.log = &log;
  hooks.on_epoch = [&](const EpochMetrics& m) {
    std::cout << (tag.empty() ? "" : tag + " ") << m.line() << '\n' << std::flush;
  };
  return train<T>(cfg.network, cfg.train, train_set, test_set, hooks);
}

template <class T>
int cmd_train(const ExperimentConfig& cfg) {
  const fs::path out = prepare_out(cfg);
  auto [train_set, test_set] = load_data<T>(cfg);
  auto result = run_training<T>(cfg, train_set, test_set, out / "metrics.log", "");
  save_network(out / "checkpoint.vfn", result.params);
  std::printf("top1 %.6f\n", result.final_accuracy());
  return 0;
}

// Frame offset (clamped at the clip ends) and horizontal pixel shift (zero
// fill) of each view; offsets are centred on zero.
template <class T>
Tensor<T> shifted_view(const Tensor<T>& clips, std::size_t i, long dt, long dx) {
  const Shape& s = clips.shape();
  const std::size_t Tn = s[1], H = s[2], W = s[3], C = s[4], size = Tn * H * W * C;
  auto src = clips.data().subspan(i * size, size);
  std::vector<T> v(size, T(0));
  for (std::size_t t = 0; t < Tn; ++t) {
    const long st = std::clamp(static_cast<long>(t) + dt, 0L, static_cast<long>(Tn) - 1);
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const long sx = static_cast<long>(x) - dx;
        if (sx < 0 || sx >= static_cast<long>(W)) continue;
        for (std::size_t c = 0; c < C; ++c)
          v[((t * H + y) * W + x) * C + c] = src[((static_cast<std::size_t>(st) * H + y) * W + static_cast<std::size_t>(sx)) * C + c];
      }
  }
  return Tensor<T>({1, Tn, H, W, C}, std::move(v));
}

std::pair<std::size_t, std::size_t> parse_views(const std::string& text) {
  std::size_t clips = 0, crops = 0;
  char x = 0, extra = 0;
  std::istringstream is(text);
  if (!(is >> clips >> x >> crops) || x != 'x' || clips == 0 || crops == 0 || (is >> extra)) {
    throw UsageError("--views must look like NxM with N, M >= 1, got '" + text + "'");
  }
  return {clips, crops};
}

template <class T>
int cmd_eval(const ExperimentConfig& cfg, const std::string& checkpoint, const std::string& views) {
  const auto [n_clips, n_crops] = parse_views(views);
  auto p = load_network<T>(checkpoint, cfg.network);
  auto [unused, test_set] = load_data<T>(cfg);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test_set.size(); ++i) {
    std::vector<Tensor<T>> v;
    for (std::size_t a = 0; a < n_clips; ++a)
      for (std::size_t b = 0; b < n_crops; ++b)
        v.push_back(shifted_view(test_set.clips, i, static_cast<long>(a) - static_cast<long>(n_clips / 2),
                                 static_cast<long>(b) - static_cast<long>(n_crops / 2)));
    const auto probs = multi_view_inference(v, p);
    correct += argmax_rows(probs)[0] == test_set.labels[i];
  }
  const double top1 = static_cast<double>(correct) / static_cast<double>(test_set.size());
  std::printf("views %zux%zu clips %zu top1 %.6f\n", n_clips, n_crops, test_set.size(), top1);
  return 0;
}

int cmd_flops(const Globals& g, std::size_t frames, std::size_t size) {
  const Shape input{1, frames, size, size, 3};
  std::printf("model,params,flops\n");
  for (const char* name : {"T", "S", "B"}) {
    auto n = NetworkConfig::preset(name);
    n.frames = frames;
    n.height = n.width = size;
    const auto r = count_flops(n, input);
    std::printf("%s,%llu,%llu\n", name, static_cast<unsigned long long>(r.total_params()),
                static_cast<unsigned long long>(r.total_flops()));
  }
  FocalModulationConfig fc;
  fc.channels = 96;
  std::printf("attention_crossover_tokens,%llu\n", static_cast<unsigned long long>(attention_crossover(fc)));
  if (!g.config.empty() || !g.out.empty()) {
    const ExperimentConfig cfg = resolve(g, false);
    const fs::path out = prepare_out(cfg);
    std::ofstream os = open_out(out / "flops.csv");
    count_flops(cfg.network, single_clip_input(cfg.network)).write_csv(os);
  }
  return 0;
}

int cmd_gradcheck(const ExperimentConfig& cfg) {
  GradCheckOptions opt;
  opt.step = cfg.analysis.gradcheck_step;
  opt.tolerance = cfg.analysis.gradcheck_tolerance;
  opt.samples = cfg.analysis.gradcheck_samples;
  opt.seed = cfg.train.seed;
  const Shape shape{1, 2, 4, 4, 8};
  auto ops = op_gradchecks(shape, cfg.network.focal, opt);
  auto layers = layer_gradchecks(shape, cfg.network.focal, opt);
  ops.write(std::cout);
  layers.write(std::cout);
  const bool ok = ops.passed() && layers.passed();
  std::printf("gradcheck %s max_rel_err %.3e\n", ok ? "passed" : "FAILED",
              std::max(ops.max_error(), layers.max_error()));
  if (!ok) throw NumericError("gradient check failed");
  return 0;
}

template <class T>
int cmd_visualize(const ExperimentConfig& cfg, const std::string& checkpoint, std::size_t clip_index) {
  auto p = load_network<T>(checkpoint, cfg.network);
  auto [unused, test_set] = load_data<T>(cfg);
  if (clip_index >= test_set.size()) {
    throw UsageError("--clip " + std::to_string(clip_index) + " out of range (test set has " +
                     std::to_string(test_set.size()) + " clips)");
  }
  const fs::path out = prepare_out(cfg);
  const std::size_t idx[1] = {clip_index};
  const Shape& s = test_set.clips.shape();
  auto clip = reshape(test_set.gather(idx), {s[1], s[2], s[3], s[4]});
  const auto paths =
      export_modulator_maps(p, clip, cfg.analysis.heatmap_stage, cfg.analysis.heatmap_block, out / "heatmaps");
  for (const auto& path : paths) std::cout << path.string() << '\n';
  return 0;
}

template <class T>
int cmd_compare_designs(const ExperimentConfig& base) {
  const fs::path out = prepare_out(base);
  auto [train_set, test_set] = load_data<T>(base);
  std::ostringstream table;
  table << "variant,params,flops,top1\n";
  for (auto v : {DesignVariant::a_spatial_avg, DesignVariant::b_factorized_conv, DesignVariant::c_factorized_encoder,
                 DesignVariant::d_alternating, DesignVariant::e_parallel}) {
    ExperimentConfig cfg = base;
    cfg.network.focal.variant = v;
    const std::string tag = to_string(v);
    const auto result = run_training<T>(cfg, train_set, test_set, out / ("metrics_" + tag + ".log"), tag);
    const auto cost = count_flops(cfg.network, single_clip_input(cfg.network));
    char row[160];
    std::snprintf(row, sizeof row, "%s,%llu,%llu,%.6f\n", tag.c_str(),
                  static_cast<unsigned long long>(cost.total_params()),
                  static_cast<unsigned long long>(cost.total_flops()), result.final_accuracy());
    table << row;
  }
  std::ofstream os = open_out(out / "compare_designs.csv");
  os << table.str();
  std::cout << table.str();
  return 0;
}

template <class T>
int cmd_ablate(const ExperimentConfig& base, const std::string& axis) {
  if (axis != "fusion" && axis != "embedding" && axis != "all") {
    throw UsageError("--axis must be fusion, embedding or all, got '" + axis + "'");
  }
  const fs::path out = prepare_out(base);
  auto [train_set, test_set] = load_data<T>(base);
  std::vector<std::pair<std::string, ExperimentConfig>> arms;
  if (axis != "embedding") {
    for (auto f : {Fusion::multiply, Fusion::average, Fusion::learned_projection}) {
      ExperimentConfig c = base;
      c.network.focal.fusion = f;
      arms.emplace_back(std::string("fusion=") + to_string(f), c);
    }
  }
  if (axis != "fusion") {
    for (auto e : {Embedding::patch_1, Embedding::tubelet_2}) {
      ExperimentConfig c = base;
      c.network.embedding = e;
      c.network.validate();
      arms.emplace_back(std::string("embedding=") + to_string(e), c);
    }
  }
  std::ostringstream table;
  table << "arm,params,flops,final_loss,top1\n";
  for (const auto& [name, cfg] : arms) {
    std::string file = name;
    std::replace(file.begin(), file.end(), '=', '_');
    const auto result = run_training<T>(cfg, train_set, test_set, out / ("metrics_" + file + ".log"), name);
    const auto cost = count_flops(cfg.network, single_clip_input(cfg.network));
    char row[200];
    std::snprintf(row, sizeof row, "%s,%llu,%llu,%.6f,%.6f\n", name.c_str(),
                  static_cast<unsigned long long>(cost.total_params()),
                  static_cast<unsigned long long>(cost.total_flops()), result.history.back().loss,
                  result.final_accuracy());
    table << row;
  }
  std::ofstream os = open_out(out / "ablate.csv");
  os << table.str();
  std::cout << table.str();
  return 0;
}

int cmd_make_data(const ExperimentConfig& cfg) {
  if (!synthetic(cfg)) throw ConfigError("make-data generates the synthetic task; unset data.train_clips");
  const fs::path out = prepare_out(cfg);
  auto [train_set, test_set] = load_data<double>(cfg);
  save_dataset(train_set, out / "train_clips.tensor", out / "train_labels.txt");
  save_dataset(test_set, out / "test_clips.tensor", out / "test_labels.txt");
  std::printf("wrote %zu train and %zu test clips to %s\n", train_set.size(), test_set.size(), out.string().c_str());
  return 0;
}

template <class F>
int with_precision(const ExperimentConfig& cfg, F&& f) {
  if (cfg.precision == Precision::float32) return f(float{});
  return f(double{});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spatio-temporal focal modulation networks at desk scale"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "INI experiment configuration");
  app.add_option("--out", g.out, "Output directory (overrides [output] dir)");
  app.add_option("--seed", g.seed, "Training seed (overrides [train] seed)");
  app.add_option("--threads", g.threads, "Worker threads")->default_val(1);

  auto* train_cmd = app.add_subcommand("train", "Train a network and write metrics and a checkpoint");

  auto* eval_cmd = app.add_subcommand("eval", "Top-1 of a checkpoint on the test set");
  std::string checkpoint, views = "1x1";
  eval_cmd->add_option("checkpoint", checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--views", views, "Temporal x horizontal views, e.g. 4x3")->default_val("1x1");

  auto* flops_cmd = app.add_subcommand("flops", "Parameter and FLOP counts of the T, S and B presets");
  std::size_t frames = 8, size = 224;
  flops_cmd->add_option("--frames", frames, "Input frames")->default_val(8);
  flops_cmd->add_option("--size", size, "Input height and width")->default_val(224);

  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every op and the focal layer");

  auto* vis_cmd = app.add_subcommand("visualize", "Export modulator heatmaps of one test clip");
  std::size_t clip_index = 0;
  vis_cmd->add_option("checkpoint", checkpoint, "Checkpoint file")->required();
  vis_cmd->add_option("--clip", clip_index, "Test clip index")->default_val(0);

  auto* cmp_cmd = app.add_subcommand("compare-designs", "Train design variants a-e and tabulate them");

  auto* abl_cmd = app.add_subcommand("ablate", "Train the fusion and embedding ablation arms");
  std::string axis = "all";
  abl_cmd->add_option("--axis", axis, "fusion, embedding or all")->default_val("all");

  auto* data_cmd = app.add_subcommand("make-data", "Write the synthetic dataset as tensor files");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (g.threads == 0) throw UsageError("--threads must be at least 1");
    set_num_threads(g.threads);
    if (*flops_cmd) return cmd_flops(g, frames, size);
    if (*grad_cmd) return cmd_gradcheck(resolve(g, false));
    const ExperimentConfig cfg = resolve(g);
    const auto t0 = std::chrono::steady_clock::now();
    int rc = 0;
    if (*train_cmd) {
      rc = with_precision(cfg, [&](auto tag) { return cmd_train<decltype(tag)>(cfg); });
    } else if (*eval_cmd) {
      rc = with_precision(cfg, [&](auto tag) { return cmd_eval<decltype(tag)>(cfg, checkpoint, views); });
    } else if (*vis_cmd) {
      rc = with_precision(cfg, [&](auto tag) { return cmd_visualize<decltype(tag)>(cfg, checkpoint, clip_index); });
    } else if (*cmp_cmd) {
      rc = with_precision(cfg, [&](auto tag) { return cmd_compare_designs<decltype(tag)>(cfg); });
    } else if (*abl_cmd) {
      rc = with_precision(cfg, [&](auto tag) { return cmd_ablate<decltype(tag)>(cfg, axis); });
    } else if (*data_cmd) {
      rc = cmd_make_data(cfg);
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::fprintf(stderr, "done in %.1f s\n", secs);
    return rc;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
