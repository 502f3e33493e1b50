#pragma once

// On-disk formats.
//
// Tensor file:
//   shape: d0 d1 ... dn\n
//   followed by prod(d) little-endian IEEE-754 binary64 values, row-major.
//
// Checkpoint:
//   vfn-checkpoint 1\n
//   count <n>\n
//   <name> <byte-offset> <rank> <d0> ... <dn>\n      (n lines)
//   end\n
//   followed by the concatenated little-endian binary64 payloads; offsets
//   are relative to the first byte after "end\n".

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "vfn/tensor.hpp"

namespace vfn {

namespace detail {

inline void write_f64_le(std::ostream& os, const double* values, std::size_t n) {
  std::vector<unsigned char> buf(n * 8);
  for (std::size_t i = 0; i < n; ++i) {
    std::uint64_t bits = std::bit_cast<std::uint64_t>(values[i]);
    for (int b = 0; b < 8; ++b) buf[i * 8 + static_cast<std::size_t>(b)] = static_cast<unsigned char>(bits >> (8 * b));
  }
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

inline std::vector<double> read_f64_le(std::istream& is, std::size_t n, const std::string& what) {
  std::vector<unsigned char> buf(n * 8);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (static_cast<std::size_t>(is.gcount()) != buf.size()) throw IoError(what + ": truncated payload");
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= std::uint64_t{buf[i * 8 + static_cast<std::size_t>(b)]} << (8 * b);
    out[i] = std::bit_cast<double>(bits);
  }
  return out;
}

template <class T>
std::vector<double> as_f64(const Tensor<T>& t) {
  return std::vector<double>(t.data().begin(), t.data().end());
}

}  // namespace detail

template <class T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  os << "shape:";
  for (std::size_t d : t.shape()) os << ' ' << d;
  os << '\n';
  auto values = detail::as_f64(t);
  detail::write_f64_le(os, values.data(), values.size());
}

template <class T>
void save_tensor(const std::filesystem::path& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_tensor(os, t);
  if (!os) throw IoError("write failed: " + path.string());
}

template <class T = double>
Tensor<T> read_tensor(std::istream& is, const std::string& what = "tensor") {
  std::string header;
  if (!std::getline(is, header)) throw IoError(what + ": missing shape header");
  std::istringstream hs(header);
  std::string tag;
  hs >> tag;
  if (tag != "shape:") throw IoError(what + ": header must start with 'shape:'");
  Shape shape;
  long long d;
  while (hs >> d) {
    if (d <= 0) throw IoError(what + ": non-positive dimension in header");
    shape.push_back(static_cast<std::size_t>(d));
  }
  if (shape.empty()) throw IoError(what + ": empty shape");
  auto values = detail::read_f64_le(is, numel_of(shape), what);
  std::vector<T> data(values.begin(), values.end());
  return Tensor<T>(std::move(shape), std::move(data));
}

template <class T = double>
Tensor<T> load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return read_tensor<T>(is, path.string());
}

template <class T>
using NamedTensors = std::vector<std::pair<std::string, Tensor<T>>>;

template <class T>
void save_checkpoint(const std::filesystem::path& path, const NamedTensors<T>& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << "vfn-checkpoint 1\ncount " << params.size() << '\n';
  std::size_t offset = 0;
  for (const auto& [name, t] : params) {
    if (name.find_first_of(" \t\n") != std::string::npos) throw UsageError("parameter name with whitespace: " + name);
    os << name << ' ' << offset << ' ' << t.rank();
    for (std::size_t d : t.shape()) os << ' ' << d;
    os << '\n';
    offset += t.numel() * 8;
  }
  os << "end\n";
  for (const auto& [name, t] : params) {
    auto values = detail::as_f64(t);
    detail::write_f64_le(os, values.data(), values.size());
  }
  if (!os) throw IoError("write failed: " + path.string());
}

/// Reads a checkpoint into freshly allocated tensors, in manifest order.
template <class T>
NamedTensors<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  const std::string what = path.string();
  std::string line, tag;
  std::getline(is, line);
  if (line != "vfn-checkpoint 1") throw IoError(what + ": not a checkpoint");
  std::size_t count = 0;
  std::getline(is, line);
  std::istringstream(line) >> tag >> count;
  if (tag != "count") throw IoError(what + ": missing count");
  struct Entry {
    std::string name;
    std::size_t offset;
    Shape shape;
  };
  std::vector<Entry> entries;
  for (std::size_t i = 0; i < count; ++i) {
    if (!std::getline(is, line)) throw IoError(what + ": truncated manifest");
    std::istringstream ls(line);
    Entry e;
    std::size_t rank = 0;
    ls >> e.name >> e.offset >> rank;
    e.shape.resize(rank);
    for (auto& d : e.shape) ls >> d;
    if (!ls) throw IoError(what + ": malformed manifest line: " + line);
    entries.push_back(std::move(e));
  }
  std::getline(is, line);
  if (line != "end") throw IoError(what + ": manifest not terminated");
  const auto payload_start = is.tellg();
  NamedTensors<T> out;
  for (const Entry& e : entries) {
    is.seekg(payload_start + static_cast<std::streamoff>(e.offset));
    auto values = detail::read_f64_le(is, numel_of(e.shape), what);
    out.emplace_back(e.name, Tensor<T>(e.shape, std::vector<T>(values.begin(), values.end())));
  }
  return out;
}

}  // namespace vfn
