#pragma once

// Moving-square clips. A square of constant intensity translates by `speed`
// pixels per frame in one of four directions on a dark background. Start
// positions are drawn so that every clip of a class, played backwards, is
// a clip of the opposite class with the same probability; the frames of a
// left clip and of its reversed right twin are the same multiset, so only
// temporal order separates the pairs.

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "vfn/io.hpp"
#include "vfn/random.hpp"

namespace vfn {

enum class Direction { left = 0, right = 1, up = 2, down = 3 };

inline constexpr std::size_t kDirections = 4;

inline const char* to_string(Direction d) {
  switch (d) {
    case Direction::left: return "left";
    case Direction::right: return "right";
    case Direction::up: return "up";
    case Direction::down: return "down";
  }
  return "?";
}

/// left <-> right, up <-> down.
inline int reversed_class(int label) { return label ^ 1; }

/// Class after mirroring along W: left <-> right, vertical unchanged.
inline int hflip_class(int label) { return label < 2 ? label ^ 1 : label; }

struct SyntheticVideoTask {
  std::size_t frames = 8;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t channels = 1;
  std::size_t object_size = 6;
  std::size_t speed = 2;
  double intensity = 1.0;
  double noise_std = 0.05;

  std::size_t travel() const { return speed * (frames - 1); }

  bool operator==(const SyntheticVideoTask&) const = default;

  void validate() const {
    if (frames == 0 || height == 0 || width == 0 || channels == 0 || object_size == 0) {
      throw ConfigError("task: sizes must be positive");
    }
    if (travel() + object_size > std::min(height, width)) {
      throw ConfigError("task: speed*(frames-1) + object_size = " + std::to_string(travel() + object_size) +
                        " exceeds min(height,width) = " + std::to_string(std::min(height, width)));
    }
    if (!(noise_std >= 0.0)) throw ConfigError("task: noise_std must be non-negative");
  }
};

/// One clip [T,H,W,C] and its class.
template <class T>
struct Clip {
  Tensor<T> video;
  int label = 0;
};

template <class T>
Clip<T> generate_clip(const SyntheticVideoTask& task, int label, Rng& rng) {
  task.validate();
  if (label < 0 || label >= static_cast<int>(kDirections)) {
    throw ConfigError("task: class " + std::to_string(label) + " out of range");
  }
  const std::size_t Tn = task.frames, H = task.height, W = task.width, C = task.channels, S = task.object_size;
  const std::size_t span = task.travel();
  const auto dir = static_cast<Direction>(label);
  const bool horizontal = dir == Direction::left || dir == Direction::right;
  const bool backwards = dir == Direction::left || dir == Direction::up;
  // Along the motion axis the square covers [lo, lo + span + S); across it
  // the position is fixed.
  const std::size_t along = horizontal ? W : H, across = horizontal ? H : W;
  const std::size_t lo = rng.index(along - span - S + 1);
  const std::size_t fixed = rng.index(across - S + 1);
  std::vector<T> data(Tn * H * W * C, T(0));
  for (std::size_t t = 0; t < Tn; ++t) {
    const std::size_t pos = backwards ? lo + span - task.speed * t : lo + task.speed * t;
    const std::size_t y0 = horizontal ? fixed : pos, x0 = horizontal ? pos : fixed;
    for (std::size_t y = y0; y < y0 + S; ++y)
      for (std::size_t x = x0; x < x0 + S; ++x)
        for (std::size_t c = 0; c < C; ++c) data[((t * H + y) * W + x) * C + c] = static_cast<T>(task.intensity);
  }
  if (task.noise_std > 0.0) {
    for (T& v : data) v += static_cast<T>(rng.normal(0.0, task.noise_std));
  }
  return {Tensor<T>(Shape{Tn, H, W, C}, std::move(data)), label};
}

/// Clips stacked as [N,T,H,W,C] with one label per clip.
template <class T>
struct Dataset {
  Tensor<T> clips;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }

  /// Rows `indices` as a batch [B,T,H,W,C].
  Tensor<T> gather(std::span<const std::size_t> indices) const {
    Shape s = clips.shape();
    const std::size_t row = clips.numel() / s[0];
    s[0] = indices.size();
    std::vector<T> out(indices.size() * row);
    auto src = clips.data();
    for (std::size_t i = 0; i < indices.size(); ++i)
      std::copy(src.begin() + static_cast<std::ptrdiff_t>(indices[i] * row),
                src.begin() + static_cast<std::ptrdiff_t>((indices[i] + 1) * row),
                out.begin() + static_cast<std::ptrdiff_t>(i * row));
    return Tensor<T>(std::move(s), std::move(out));
  }

  std::vector<int> gather_labels(std::span<const std::size_t> indices) const {
    std::vector<int> out;
    out.reserve(indices.size());
    for (std::size_t i : indices) out.push_back(labels[i]);
    return out;
  }
};

/// `count` clips with classes cycling through all directions.
template <class T>
Dataset<T> make_synthetic_dataset(const SyntheticVideoTask& task, std::size_t count, Rng& rng) {
  task.validate();
  if (count == 0) throw ConfigError("task: dataset size must be positive");
  const std::size_t row = task.frames * task.height * task.width * task.channels;
  std::vector<T> data(count * row);
  std::vector<int> labels(count);
  for (std::size_t i = 0; i < count; ++i) {
    Clip<T> clip = generate_clip<T>(task, static_cast<int>(i % kDirections), rng);
    std::copy(clip.video.data().begin(), clip.video.data().end(), data.begin() + static_cast<std::ptrdiff_t>(i * row));
    labels[i] = clip.label;
  }
  return {Tensor<T>(Shape{count, task.frames, task.height, task.width, task.channels}, std::move(data)),
          std::move(labels)};
}

/// Reads clips [N,T,H,W,C] from a tensor file and N whitespace-separated
/// integer labels from a text file.
template <class T>
Dataset<T> load_dataset(const std::filesystem::path& clips_path, const std::filesystem::path& labels_path) {
  Tensor<T> clips = load_tensor<T>(clips_path);
  if (clips.rank() != 5) {
    throw DimensionError(clips_path.string() + ": clips must be [N,T,H,W,C], got " + shape_str(clips.shape()));
  }
  std::ifstream is(labels_path);
  if (!is) throw IoError("cannot open " + labels_path.string());
  std::vector<int> labels;
  long long v;
  while (is >> v) labels.push_back(static_cast<int>(v));
  if (!is.eof()) throw IoError(labels_path.string() + ": malformed label");
  if (labels.size() != clips.dim(0)) {
    throw DimensionError(labels_path.string() + ": " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(clips.dim(0)) + " clips");
  }
  return {std::move(clips), std::move(labels)};
}

template <class T>
void save_dataset(const Dataset<T>& data, const std::filesystem::path& clips_path,
                  const std::filesystem::path& labels_path) {
  save_tensor(clips_path, data.clips);
  std::ofstream os(labels_path);
  if (!os) throw IoError("cannot open " + labels_path.string() + " for writing");
  for (int l : data.labels) os << l << '\n';
  if (!os) throw IoError("write failed: " + labels_path.string());
}

}  // namespace vfn
