#pragma once

// Checkpoint container shared by every module:
//
//   "TGCKPT1\n"  u64 count
//   per record:  u64 name_len, name bytes, u64 rank, rank x u64 extents, float32 payload
//
// All integers and floats are little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "transgeo/tensor.hpp"

namespace transgeo {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NamedArray {
  std::string name;
  std::vector<std::uint64_t> extents;
  std::vector<float> values;
};

inline constexpr char kCheckpointMagic[] = "TGCKPT1\n";

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

inline void put_f32(std::string& out, float f) {
  const auto bits = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFFu));
}

class ByteReader {
 public:
  explicit ByteReader(const std::string& bytes) : bytes_(bytes) {}

  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw CheckpointError("checkpoint truncated");
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  float f32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return std::bit_cast<float>(v);
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_checkpoint(const std::vector<NamedArray>& arrays) {
  std::string out(kCheckpointMagic, 8);
  detail::put_u64(out, arrays.size());
  for (const auto& a : arrays) {
    std::uint64_t n = 1;
    for (auto e : a.extents) n *= e;
    if (n != a.values.size()) throw CheckpointError("array '" + a.name + "' extents do not match data");
    detail::put_u64(out, a.name.size());
    out += a.name;
    detail::put_u64(out, a.extents.size());
    for (auto e : a.extents) detail::put_u64(out, e);
    for (float v : a.values) detail::put_f32(out, v);
  }
  return out;
}

inline std::vector<NamedArray> decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 8 || bytes.compare(0, 8, kCheckpointMagic, 8) != 0) {
    throw CheckpointError("bad checkpoint magic");
  }
  detail::ByteReader rd(bytes);
  rd.str(8);
  const std::uint64_t count = rd.u64();
  std::vector<NamedArray> arrays;
  for (std::uint64_t i = 0; i < count; ++i) {
    NamedArray a;
    a.name = rd.str(rd.u64());
    const std::uint64_t rank = rd.u64();
    std::uint64_t n = 1;
    for (std::uint64_t r = 0; r < rank; ++r) {
      a.extents.push_back(rd.u64());
      n *= a.extents.back();
    }
    rd.need(n * 4);
    a.values.resize(n);
    for (auto& v : a.values) v = rd.f32();
    arrays.push_back(std::move(a));
  }
  if (!rd.done()) throw CheckpointError("trailing bytes after checkpoint records");
  return arrays;
}

inline void write_checkpoint(const std::string& path, const std::vector<NamedArray>& arrays) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open " + path + " for writing");
  const std::string bytes = encode_checkpoint(arrays);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw CheckpointError("write failed: " + path);
}

inline std::vector<NamedArray> read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

template <class T>
NamedArray to_named_array(const std::string& name, const Tensor<T>& t) {
  NamedArray a;
  a.name = name;
  for (auto e : t.shape()) a.extents.push_back(e);
  a.values.reserve(t.numel());
  for (T v : t.data()) a.values.push_back(static_cast<float>(v));
  return a;
}

/// Ordered, named collection of trainable tensors.
template <class T>
class ParameterSet {
 public:
  struct Entry {
    std::string name;
    Tensor<T> tensor;
  };

  Tensor<T>& add(std::string name, Tensor<T> t) {
    if (index_.count(name)) throw TensorError("duplicate parameter name " + name);
    t.set_requires_grad(true);
    index_[name] = entries_.size();
    entries_.push_back({std::move(name), std::move(t)});
    return entries_.back().tensor;
  }

  /// Replaces a parameter's tensor in place (same name, possibly a new shape).
  void replace(const std::string& name, Tensor<T> t) {
    t.set_requires_grad(true);
    entries_.at(index_.at(name)).tensor = std::move(t);
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Tensor<T>& at(const std::string& name) { return entries_.at(index_.at(name)).tensor; }
  const Tensor<T>& at(const std::string& name) const { return entries_.at(index_.at(name)).tensor; }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.tensor.numel();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

  void append_to(std::vector<NamedArray>& out, const std::string& prefix = "") const {
    for (const auto& e : entries_) out.push_back(to_named_array(prefix + e.name, e.tensor));
  }

  /// Loads values for every parameter from `arrays` (looked up as prefix + name).
  void load_from(const std::vector<NamedArray>& arrays, const std::string& prefix = "") {
    std::map<std::string, const NamedArray*> by_name;
    for (const auto& a : arrays) by_name[a.name] = &a;
    for (auto& e : entries_) {
      auto it = by_name.find(prefix + e.name);
      if (it == by_name.end()) throw CheckpointError("checkpoint lacks array " + prefix + e.name);
      const NamedArray& a = *it->second;
      Shape shape(a.extents.begin(), a.extents.end());
      std::vector<T> values(a.values.begin(), a.values.end());
      e.tensor = Tensor<T>::from(std::move(shape), std::move(values), true);
    }
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace transgeo
