// SPDX-License-Identifier: Apache-2.0
#include "dpf/serialize.hpp"

#include <cstring>
#include <fstream>
#include <sstream>
#include <vector>

#include "dpf/error.hpp"

namespace dpf {

namespace {

constexpr char kMagic[4] = {'D', 'P', 'F', 'N'};

// All multi-byte values little-endian; the writers below assume a
// little-endian host (asserted at startup by the magic round trip in tests).

void put_u32(std::string& out, uint32_t v) { out.append(reinterpret_cast<const char*>(&v), 4); }
void put_u64(std::string& out, uint64_t v) { out.append(reinterpret_cast<const char*>(&v), 8); }
void put_i64(std::string& out, int64_t v) { out.append(reinterpret_cast<const char*>(&v), 8); }

void put_string(std::string& out, const std::string& s) {
  put_u32(out, static_cast<uint32_t>(s.size()));
  out.append(s);
}

void put_tensor(std::string& out, const Tensor& t) {
  put_u32(out, static_cast<uint32_t>(t.ndim()));
  for (int64_t i = 0; i < t.ndim(); ++i) put_i64(out, t.dim(i));
  out.append(reinterpret_cast<const char*>(t.data()),
             static_cast<size_t>(t.numel()) * sizeof(double));
}

void put_tensor_map(std::string& out, const std::map<std::string, Tensor>& m) {
  put_u32(out, static_cast<uint32_t>(m.size()));
  for (const auto& [name, t] : m) {
    put_string(out, name);
    put_tensor(out, t);
  }
}

class Reader {
 public:
  Reader(const char* data, size_t size) : data_(data), size_(size) {}

  uint8_t u8() { return read_pod<uint8_t>(); }
  uint32_t u32() { return read_pod<uint32_t>(); }
  uint64_t u64() { return read_pod<uint64_t>(); }
  int64_t i64() { return read_pod<int64_t>(); }

  std::string str() {
    uint32_t n = u32();
    need(n);
    std::string s(data_ + pos_, n);
    pos_ += n;
    return s;
  }

  Tensor tensor() {
    uint32_t nd = u32();
    if (nd == 0 || nd > 8) throw IoError("checkpoint: bad tensor rank");
    std::vector<int64_t> shape(nd);
    int64_t numel = 1;
    for (auto& d : shape) {
      d = i64();
      if (d <= 0 || d > (1LL << 32)) throw IoError("checkpoint: bad tensor dim");
      numel *= d;
    }
    need(static_cast<size_t>(numel) * sizeof(double));
    std::vector<double> values(static_cast<size_t>(numel));
    std::memcpy(values.data(), data_ + pos_, values.size() * sizeof(double));
    pos_ += values.size() * sizeof(double);
    return Tensor::from(std::move(shape), std::move(values));
  }

  std::map<std::string, Tensor> tensor_map() {
    uint32_t n = u32();
    std::map<std::string, Tensor> m;
    for (uint32_t i = 0; i < n; ++i) {
      std::string name = str();
      m.emplace(std::move(name), tensor());
    }
    return m;
  }

  bool done() const { return pos_ == size_; }
  size_t pos() const { return pos_; }

 private:
  template <typename T>
  T read_pod() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, data_ + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  void need(size_t n) {
    if (pos_ + n > size_) throw IoError("checkpoint file truncated");
  }

  const char* data_;
  size_t size_;
  size_t pos_ = 0;
};

}  // namespace

void save_checkpoint_file(const std::filesystem::path& path, const CheckpointData& data) {
  std::string payload;
  put_u32(payload, data.format_version);
  put_u64(payload, data.config_hash);
  put_i64(payload, data.epoch);
  put_tensor_map(payload, data.model);
  payload.push_back(data.has_optimizer ? 1 : 0);
  if (data.has_optimizer) {
    put_i64(payload, data.adam_step);
    put_tensor_map(payload, data.adam_m);
    put_tensor_map(payload, data.adam_v);
  }
  put_string(payload, data.rng_state);

  std::string blob(kMagic, 4);
  blob += payload;
  uint64_t checksum = fnv1a(payload.data(), payload.size());
  put_u64(blob, checksum);

  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open " + tmp.string() + " for writing");
    f.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!f) throw IoError("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

CheckpointData load_checkpoint_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint: " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  std::string blob = ss.str();
  if (blob.size() < 4 + 8 || std::memcmp(blob.data(), kMagic, 4) != 0) {
    throw IoError("not a DPFN checkpoint: " + path.string());
  }
  size_t payload_size = blob.size() - 4 - 8;
  uint64_t stored_checksum;
  std::memcpy(&stored_checksum, blob.data() + 4 + payload_size, 8);
  if (fnv1a(blob.data() + 4, payload_size) != stored_checksum) {
    throw IoError("checkpoint checksum mismatch (corrupt file): " + path.string());
  }

  Reader r(blob.data() + 4, payload_size);
  CheckpointData data;
  data.format_version = r.u32();
  if (data.format_version != kCheckpointVersion) {
    throw ValueError("unsupported checkpoint format_version " +
                     std::to_string(data.format_version) + " (expected " +
                     std::to_string(kCheckpointVersion) + ")");
  }
  data.config_hash = r.u64();
  data.epoch = r.i64();
  data.model = r.tensor_map();
  data.has_optimizer = r.u8() != 0;
  if (data.has_optimizer) {
    data.adam_step = r.i64();
    data.adam_m = r.tensor_map();
    data.adam_v = r.tensor_map();
  }
  data.rng_state = r.str();
  if (!r.done()) throw IoError("checkpoint has trailing bytes: " + path.string());
  return data;
}

}  // namespace dpf
