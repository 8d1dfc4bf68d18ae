#pragma once

// Named parameters and the CFW1 checkpoint format:
//   "CFW1" | u64 manifest byte length | manifest UTF-8 | float64 payloads.
// The manifest lists one "name d0 d1 ..." line per parameter; payloads follow
// in the same order, little-endian. Order is the lexicographic name order,
// which is what the ParamStore map iterates.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "condfuse/rng.hpp"
#include "condfuse/tensor.hpp"

namespace cf {

struct Parameter {
  std::string name;
  Tensor tensor;
};

class ParamStore {
 public:
  Tensor add(const std::string& name, Tensor t) {
    if (params_.count(name)) op_fail("ParamStore::add", "duplicate parameter name '" + name + "'");
    t.node()->requires_grad = true;
    params_.emplace(name, t);
    return t;
  }

  Tensor add_normal(const std::string& name, Shape shape, Rng& rng, double stddev) {
    std::vector<double> v(static_cast<size_t>(numel_of(shape)));
    for (double& x : v) x = rng.normal(0.0, stddev);
    return add(name, Tensor::from(std::move(v), std::move(shape)));
  }

  Tensor add_zeros(const std::string& name, Shape shape) {
    return add(name, Tensor::zeros(std::move(shape)));
  }

  Tensor add_full(const std::string& name, Shape shape, double v) {
    return add(name, Tensor::full(std::move(shape), v));
  }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  Tensor get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) op_fail("ParamStore::get", "unknown parameter '" + name + "'");
    return it->second;
  }

  // Lexicographic by name; this order defines serialization.
  const std::map<std::string, Tensor>& entries() const { return params_; }
  size_t size() const { return params_.size(); }

  int64_t total_elements() const {
    int64_t n = 0;
    for (const auto& [k, t] : params_) n += t.numel();
    return n;
  }

  int64_t elements_with_prefix(const std::string& prefix) const {
    int64_t n = 0;
    for (const auto& [k, t] : params_)
      if (k.rfind(prefix, 0) == 0) n += t.numel();
    return n;
  }

  void zero_grads() {
    for (auto& [k, t] : params_) {
      Tensor tt = t;
      tt.zero_grad();
    }
  }

 private:
  std::map<std::string, Tensor> params_;
};

namespace detail {

inline void put_u32_le(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64_le(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_f64_le(std::string& out, double d) {
  put_u64_le(out, std::bit_cast<uint64_t>(d));
}

struct ByteReader {
  const std::string& buf;
  size_t pos = 0;
  const char* context;

  void need(size_t n, const char* what) {
    if (pos + n > buf.size())
      throw TensorError(std::string(context) + ": truncated " + what + " at byte offset " +
                        std::to_string(pos));
  }
  uint32_t u32(const char* what) {
    need(4, what);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<unsigned char>(buf[pos + static_cast<size_t>(i)])) << (8 * i);
    pos += 4;
    return v;
  }
  uint64_t u64(const char* what) {
    need(8, what);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<unsigned char>(buf[pos + static_cast<size_t>(i)])) << (8 * i);
    pos += 8;
    return v;
  }
  double f64(const char* what) { return std::bit_cast<double>(u64(what)); }
  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
  std::string bytes(size_t n, const char* what) {
    need(n, what);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

inline std::string read_file_bytes(const std::string& path, const char* context) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw TensorError(std::string(context) + ": cannot open '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void write_file_bytes(const std::string& path, const std::string& bytes, const char* context) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw TensorError(std::string(context) + ": cannot open '" + path + "' for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw TensorError(std::string(context) + ": write failed for '" + path + "'");
}

}  // namespace detail

inline constexpr char kCheckpointMagic[5] = "CFW1";

inline void save_checkpoint(const ParamStore& store, const std::string& path) {
  std::string manifest;
  for (const auto& [name, t] : store.entries()) {
    manifest += name;
    for (int64_t d : t.shape()) manifest += ' ' + std::to_string(d);
    manifest += '\n';
  }
  std::string out;
  out.append(kCheckpointMagic, 4);
  detail::put_u64_le(out, manifest.size());
  out += manifest;
  for (const auto& [name, t] : store.entries())
    for (int64_t i = 0; i < t.numel(); ++i) detail::put_f64_le(out, t.data()[i]);
  detail::write_file_bytes(path, out, "save_checkpoint");
}

// Strict load: the file's manifest must name exactly the store's parameters
// with matching shapes.
inline void load_checkpoint(ParamStore& store, const std::string& path) {
  const std::string buf = detail::read_file_bytes(path, "load_checkpoint");
  detail::ByteReader r{buf, 0, "load_checkpoint"};
  if (r.bytes(4, "magic") != std::string(kCheckpointMagic, 4))
    throw TensorError("load_checkpoint: bad magic at byte offset 0 in '" + path + "'");
  const uint64_t mlen = r.u64("manifest length");
  std::istringstream manifest(r.bytes(mlen, "manifest"));

  std::vector<std::pair<std::string, Shape>> listed;
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string name;
    ls >> name;
    Shape shape;
    int64_t d;
    while (ls >> d) shape.push_back(d);
    listed.emplace_back(std::move(name), std::move(shape));
  }
  if (listed.size() != store.size())
    throw TensorError("load_checkpoint: manifest lists " + std::to_string(listed.size()) +
                      " parameters, store has " + std::to_string(store.size()));
  for (auto& [name, shape] : listed) {
    if (!store.contains(name)) throw TensorError("load_checkpoint: unexpected parameter '" + name + "'");
    Tensor t = store.get(name);
    if (t.shape() != shape)
      throw TensorError("load_checkpoint: shape mismatch for '" + name + "': file " + shape_str(shape) +
                        " vs model " + shape_str(t.shape()));
    for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = r.f64("payload");
  }
  if (r.pos != buf.size())
    throw TensorError("load_checkpoint: trailing bytes at offset " + std::to_string(r.pos));
}

}  // namespace cf
