#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "stalemp/autodiff.hpp"
#include "stalemp/tensor.hpp"

// Binary layout (all integers and reals little-endian):
//   magic[8] | u32 version | u64 count
//   count x { u64 name_len | name bytes | u64 rank | u64 dims[rank] | f64 values[prod(dims)] }
namespace stalemp::io {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr std::array<char, 8> kParamMagic = {'S', 'T', 'M', 'P', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kFormatVersion = 1;

class BinaryWriter {
 public:
  explicit BinaryWriter(std::ostream& os) : os_(os) {}

  template <typename T>
  void put(T v) {
    os_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void bytes(std::string_view s) { os_.write(s.data(), static_cast<std::streamsize>(s.size())); }
  void reals(const std::vector<double>& v) {
    os_.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
  }

 private:
  std::ostream& os_;
};

class BinaryReader {
 public:
  BinaryReader(std::istream& is, std::string what) : is_(is), what_(std::move(what)) {}

  template <typename T>
  T get() {
    T v{};
    is_.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is_) fail("truncated");
    return v;
  }
  std::string bytes(std::size_t n) {
    if (n > kMaxName) fail("implausible string length");
    std::string s(n, '\0');
    is_.read(s.data(), static_cast<std::streamsize>(n));
    if (!is_) fail("truncated");
    return s;
  }
  std::vector<double> reals(std::size_t n) {
    if (n > kMaxValues) fail("implausible value count");
    std::vector<double> v(n);
    is_.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
    if (!is_) fail("truncated");
    return v;
  }
  void expect_magic(const std::array<char, 8>& magic) {
    std::array<char, 8> m{};
    is_.read(m.data(), 8);
    if (!is_ || m != magic) fail("bad magic");
  }
  void expect_end() {
    if (is_.peek() != std::char_traits<char>::eof()) fail("trailing bytes");
  }
  [[noreturn]] void fail(const std::string& why) const { throw FormatError(what_ + ": " + why); }

 private:
  static constexpr std::size_t kMaxName = 1 << 16;
  static constexpr std::size_t kMaxValues = std::size_t{1} << 34;
  std::istream& is_;
  std::string what_;
};

inline void write_named_tensor(BinaryWriter& w, const std::string& name, const Tensor& t) {
  w.put<std::uint64_t>(name.size());
  w.bytes(name);
  w.put<std::uint64_t>(2);
  w.put<std::uint64_t>(t.rows());
  w.put<std::uint64_t>(t.cols());
  w.reals(t.values());
}

inline std::pair<std::string, Tensor> read_named_tensor(BinaryReader& r) {
  auto name = r.bytes(r.get<std::uint64_t>());
  const auto rank = r.get<std::uint64_t>();
  if (rank == 0 || rank > 2) r.fail("unsupported rank " + std::to_string(rank));
  std::uint64_t rows = r.get<std::uint64_t>();
  std::uint64_t cols = rank == 2 ? r.get<std::uint64_t>() : 1;
  if (cols != 0 && rows > (std::uint64_t{1} << 34) / cols) r.fail("implausible shape");
  auto vals = r.reals(rows * cols);
  for (double v : vals)
    if (!std::isfinite(v)) r.fail("non-finite value in " + name);
  return {std::move(name), Tensor(rows, cols, std::move(vals))};
}

inline void write_parameters(std::ostream& os, const std::vector<const ad::Parameter*>& params) {
  BinaryWriter w(os);
  w.bytes(std::string_view(kParamMagic.data(), kParamMagic.size()));
  w.put<std::uint32_t>(kFormatVersion);
  w.put<std::uint64_t>(params.size());
  for (const auto* p : params) write_named_tensor(w, p->name, p->value);
}

inline std::vector<ad::Parameter> read_parameters(std::istream& is, const std::string& what = "checkpoint") {
  BinaryReader r(is, what);
  r.expect_magic(kParamMagic);
  if (const auto v = r.get<std::uint32_t>(); v != kFormatVersion) r.fail("unsupported version " + std::to_string(v));
  const auto n = r.get<std::uint64_t>();
  if (n > (1u << 20)) r.fail("implausible parameter count");
  std::vector<ad::Parameter> out;
  for (std::uint64_t i = 0; i < n; ++i) {
    auto [name, t] = read_named_tensor(r);
    out.emplace_back(std::move(name), std::move(t));
  }
  r.expect_end();
  return out;
}

inline void save_parameters(const std::string& path, const std::vector<const ad::Parameter*>& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  write_parameters(os, params);
  if (!os) throw std::runtime_error("write failed: " + path);
}

inline std::vector<ad::Parameter> load_parameters(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  return read_parameters(is, path);
}

/// Copies values from a loaded set into live parameters, matching by name and shape.
inline void assign_parameters(const std::vector<ad::Parameter>& loaded, const std::vector<ad::Parameter*>& live) {
  if (loaded.size() != live.size()) throw FormatError("checkpoint: parameter count does not match the model");
  for (auto* p : live) {
    auto it = std::find_if(loaded.begin(), loaded.end(), [&](const ad::Parameter& q) { return q.name == p->name; });
    if (it == loaded.end()) throw FormatError("checkpoint: missing parameter " + p->name);
    if (!it->value.same_shape(p->value))
      throw FormatError("checkpoint: shape mismatch for " + p->name + ": " + shape_str(it->value) + " vs " +
                        shape_str(p->value));
    p->value = it->value;
  }
}

}  // namespace stalemp::io
