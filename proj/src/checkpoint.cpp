#include "episeg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace episeg {

namespace {

constexpr char kMagic[8] = {'E', 'P', 'I', 'S', 'E', 'G', 'C', 'K'};
constexpr std::uint64_t kSupportedVersion = 1;

[[noreturn]] void fail(const std::string& path, const std::string& why) {
  throw std::runtime_error("checkpoint " + path + ": " + why);
}

void put_u64(std::string& buf, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& buf, double v) { put_u64(buf, std::bit_cast<std::uint64_t>(v)); }

void put_str(std::string& buf, const std::string& s) {
  put_u64(buf, s.size());
  buf.append(s);
}

struct Reader {
  const std::string& bytes;
  const std::string& path;
  std::size_t pos = 0;

  void need(std::size_t n) {
    if (pos + n > bytes.size()) fail(path, "truncated file");
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
    pos += 8;
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const std::uint64_t n = u64();
    if (n > bytes.size() - pos) fail(path, "truncated file");
    std::string s = bytes.substr(pos, n);
    pos += n;
    return s;
  }
};

}  // namespace

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  std::string buf;
  buf.append(kMagic, sizeof(kMagic));
  put_u64(buf, ck.format_version);
  put_u64(buf, ck.rng_seed);
  put_str(buf, ck.model_kind);
  put_u64(buf, ck.config.size());
  for (const auto& [key, value] : ck.config) {
    put_str(buf, key);
    put_f64(buf, value);
  }
  put_u64(buf, ck.tensors.size());
  for (const auto& [name, tensor] : ck.tensors) {
    put_str(buf, name);
    put_u64(buf, static_cast<std::uint64_t>(tensor.rank()));
    for (std::int64_t d = 0; d < tensor.rank(); ++d)
      put_u64(buf, static_cast<std::uint64_t>(tensor.extent(d)));
    for (double v : tensor.data()) put_f64(buf, v);
  }

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(path, "cannot open for writing");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) fail(path, "write failed");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(path, "cannot open for reading");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) fail(path, "read failed");

  Reader r{bytes, path};
  r.need(sizeof(kMagic));
  if (std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) fail(path, "not a checkpoint file");
  r.pos = sizeof(kMagic);

  Checkpoint ck;
  ck.format_version = r.u64();
  if (ck.format_version != kSupportedVersion)
    fail(path, "unsupported format version " + std::to_string(ck.format_version));
  ck.rng_seed = r.u64();
  ck.model_kind = r.str();

  const std::uint64_t n_config = r.u64();
  ck.config.reserve(n_config);
  for (std::uint64_t i = 0; i < n_config; ++i) {
    std::string key = r.str();
    const double value = r.f64();
    ck.config.emplace_back(std::move(key), value);
  }

  const std::uint64_t n_tensors = r.u64();
  ck.tensors.reserve(n_tensors);
  for (std::uint64_t i = 0; i < n_tensors; ++i) {
    std::string name = r.str();
    const std::uint64_t rank = r.u64();
    if (rank > 8) fail(path, "implausible tensor rank");
    Shape shape(rank);
    for (std::uint64_t d = 0; d < rank; ++d) {
      const std::uint64_t e = r.u64();
      if (e == 0 || e > (1ull << 32)) fail(path, "implausible tensor extent");
      shape[d] = static_cast<std::int64_t>(e);
    }
    const std::int64_t numel = shape_numel(shape);
    std::vector<double> data(static_cast<std::size_t>(numel));
    for (double& v : data) v = r.f64();
    ck.tensors.emplace_back(std::move(name), Tensor::from_data(std::move(shape), std::move(data)));
  }
  if (r.pos != bytes.size()) fail(path, "trailing bytes after checkpoint payload");
  return ck;
}

double checkpoint_config(const Checkpoint& ck, const std::string& key) {
  for (const auto& [k, v] : ck.config)
    if (k == key) return v;
  throw std::runtime_error("checkpoint: missing config entry '" + key + "'");
}

bool checkpoint_has_config(const Checkpoint& ck, const std::string& key) {
  for (const auto& [k, v] : ck.config)
    if (k == key) return true;
  return false;
}

Tensor checkpoint_tensor(const Checkpoint& ck, const std::string& name) {
  for (const auto& [n, t] : ck.tensors)
    if (n == name) return t;
  throw std::runtime_error("checkpoint: missing tensor '" + name + "'");
}

}  // namespace episeg
