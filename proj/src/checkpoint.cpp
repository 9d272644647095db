#include "mfas/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

#include "mfas/errors.hpp"

namespace mfas {

namespace {
constexpr char kMagic[4] = {'M', 'F', 'C', 'K'};
constexpr uint32_t kVersion = 1;

void put_u32(std::ofstream& os, uint32_t v) { os.write(reinterpret_cast<char*>(&v), 4); }
void put_u64(std::ofstream& os, uint64_t v) { os.write(reinterpret_cast<char*>(&v), 8); }
void put_str(std::ofstream& os, const std::string& s) {
  put_u32(os, static_cast<uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
uint32_t get_u32(std::ifstream& is) {
  uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  return v;
}
uint64_t get_u64(std::ifstream& is) {
  uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 8);
  return v;
}
std::string get_str(std::ifstream& is) {
  uint32_t n = get_u32(is);
  std::string s(n, '\0');
  is.read(s.data(), n);
  return s;
}
}  // namespace

void Checkpoint::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("checkpoint: cannot open " + path + " for writing");
  os.write(kMagic, 4);
  put_u32(os, kVersion);
  put_str(os, kind);
  std::string cfg = config.dump();
  put_u64(os, cfg.size());
  os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  put_u64(os, tensors.size());
  for (const auto& [name, t] : tensors) {
    put_str(os, name);
    put_u32(os, static_cast<uint32_t>(t.shape.size()));
    for (int64_t d : t.shape) os.write(reinterpret_cast<char*>(&d), 8);
    os.write(reinterpret_cast<const char*>(t.data.data()),
             static_cast<std::streamsize>(t.data.size() * sizeof(double)));
  }
  if (!os) throw DataError("checkpoint: write failed: " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw StateError("checkpoint: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw DataError("checkpoint: bad magic in " + path);
  if (get_u32(is) != kVersion) throw DataError("checkpoint: unsupported version in " + path);
  Checkpoint ck;
  ck.kind = get_str(is);
  uint64_t cfg_len = get_u64(is);
  std::string cfg(cfg_len, '\0');
  is.read(cfg.data(), static_cast<std::streamsize>(cfg_len));
  ck.config = nlohmann::json::parse(cfg);
  uint64_t n = get_u64(is);
  for (uint64_t i = 0; i < n; ++i) {
    std::string name = get_str(is);
    uint32_t ndim = get_u32(is);
    std::vector<int64_t> shape(ndim);
    for (auto& d : shape) is.read(reinterpret_cast<char*>(&d), 8);
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    ck.tensors.emplace(std::move(name), std::move(t));
  }
  if (!is) throw DataError("checkpoint: truncated file " + path);
  return ck;
}

void Checkpoint::put_params(const ParamRefs& params) {
  for (const Param* p : params) tensors[p->name] = p->value;
}

void Checkpoint::restore_params(const ParamRefs& params) const {
  for (Param* p : params) {
    auto it = tensors.find(p->name);
    if (it == tensors.end())
      throw StateError("checkpoint: missing tensor '" + p->name + "'");
    if (it->second.shape != p->value.shape)
      throw StateError("checkpoint: shape mismatch for '" + p->name + "': " +
                       it->second.shape_str() + " vs " + p->value.shape_str());
    p->value = it->second;
  }
}

}  // namespace mfas
