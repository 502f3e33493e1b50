#pragma once

// Modulator heatmaps. For each frame, the channel-wise L2 norm of the
// spatial and temporal modulators of one block is min-max normalized to
// [0,1] per map and written as a 16-bit binary PGM:
//
//   P5\n<width> <height>\n65535\n
//   followed by width*height big-endian uint16 samples, row-major.
//
// A map with no spread (max - min <= 1e-12 * max(1, |max|)) normalizes to
// all zeros. Files are frame<t>_spatial.pgm and frame<t>_temporal.pgm.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "vfn/backbone.hpp"

namespace vfn {

/// One normalized map, row-major H x W.
struct Heatmap {
  std::size_t height = 0, width = 0;
  std::vector<double> values;
};

/// Channel L2 norms of frame t of m [1,T,H,W,C].
template <class T>
std::vector<double> channel_magnitude(const Tensor<T>& m, std::size_t t) {
  const std::size_t H = m.dim(2), W = m.dim(3), C = m.dim(4);
  auto d = m.data();
  std::vector<double> out(H * W);
  for (std::size_t p = 0; p < H * W; ++p) {
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      const double v = static_cast<double>(d[(t * H * W + p) * C + c]);
      s += v * v;
    }
    out[p] = std::sqrt(s);
  }
  return out;
}

inline std::vector<double> min_max_normalize(std::vector<double> v) {
  if (v.empty()) return v;
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double mn = *lo, mx = *hi;
  if (mx - mn <= 1e-12 * std::max(1.0, std::abs(mx))) {
    std::fill(v.begin(), v.end(), 0.0);
    return v;
  }
  for (double& x : v) x = (x - mn) / (mx - mn);
  return v;
}

inline void write_pgm(const std::filesystem::path& path, const Heatmap& map) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << "P5\n" << map.width << ' ' << map.height << "\n65535\n";
  std::vector<unsigned char> buf(map.values.size() * 2);
  for (std::size_t i = 0; i < map.values.size(); ++i) {
    const auto q = static_cast<unsigned>(std::lround(std::clamp(map.values[i], 0.0, 1.0) * 65535.0));
    buf[2 * i] = static_cast<unsigned char>(q >> 8);
    buf[2 * i + 1] = static_cast<unsigned char>(q & 0xff);
  }
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!os) throw IoError("write failed: " + path.string());
}

/// Reads a 16-bit P5 file back as values in [0,1].
inline Heatmap read_pgm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::string magic;
  Heatmap map;
  unsigned maxval = 0;
  is >> magic >> map.width >> map.height >> maxval;
  if (magic != "P5" || maxval != 65535 || !is) throw IoError(path.string() + ": not a 16-bit PGM");
  is.get();
  std::vector<unsigned char> buf(map.width * map.height * 2);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (static_cast<std::size_t>(is.gcount()) != buf.size()) throw IoError(path.string() + ": truncated");
  map.values.resize(map.width * map.height);
  for (std::size_t i = 0; i < map.values.size(); ++i)
    map.values[i] = static_cast<double>((unsigned{buf[2 * i]} << 8) | buf[2 * i + 1]) / 65535.0;
  return map;
}

/// Normalized spatial and temporal magnitude maps, frame by frame.
template <class T>
std::vector<std::pair<Heatmap, Heatmap>> modulator_maps(const ModulatorPair<T>& pair) {
  const Tensor<T>& ref = pair.spatial.defined() ? pair.spatial : pair.temporal;
  if (!ref.defined()) throw UsageError("modulator_maps: no modulators captured");
  const std::size_t Tn = ref.dim(1), H = ref.dim(2), W = ref.dim(3);
  std::vector<std::pair<Heatmap, Heatmap>> out;
  for (std::size_t t = 0; t < Tn; ++t) {
    Heatmap s{H, W, std::vector<double>(H * W, 0.0)}, m{H, W, std::vector<double>(H * W, 0.0)};
    if (pair.spatial.defined()) s.values = min_max_normalize(channel_magnitude(pair.spatial, t));
    if (pair.temporal.defined()) m.values = min_max_normalize(channel_magnitude(pair.temporal, t));
    out.emplace_back(std::move(s), std::move(m));
  }
  return out;
}

/// Runs `clip` [T,H,W,C] through the network, captures the modulators of
/// (stage, block) and writes 2*T' images to out_dir. Returns the paths.
template <class T>
std::vector<std::filesystem::path> export_modulator_maps(const NetworkParams<T>& p, const Tensor<T>& clip,
                                                         std::size_t stage, std::size_t block,
                                                         const std::filesystem::path& out_dir) {
  if (stage >= 4 || block >= p.stages[stage].blocks.size()) {
    throw ConfigError("visualize: no block " + std::to_string(block) + " in stage " + std::to_string(stage));
  }
  Shape s{1};
  s.insert(s.end(), clip.shape().begin(), clip.shape().end());
  if (clip.rank() != 4) throw DimensionError("visualize: clip must be [T,H,W,C], got " + shape_str(clip.shape()));
  ModulatorProbe<T> probe{stage, block, {}};
  {
    NoGradGuard guard;
    network_forward(reshape(clip, s), p, {}, &probe);
  }
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  std::vector<std::filesystem::path> written;
  const auto maps = modulator_maps(probe.pair);
  for (std::size_t t = 0; t < maps.size(); ++t) {
    const auto spatial = out_dir / ("frame" + std::to_string(t) + "_spatial.pgm");
    const auto temporal = out_dir / ("frame" + std::to_string(t) + "_temporal.pgm");
    write_pgm(spatial, maps[t].first);
    write_pgm(temporal, maps[t].second);
    written.push_back(spatial);
    written.push_back(temporal);
  }
  return written;
}

}  // namespace vfn
