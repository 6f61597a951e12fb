#include "blendiff/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "blendiff/errors.hpp"
#include "blendiff/image.hpp"

using json = nlohmann::json;

namespace blendiff {

namespace {
constexpr char kMagic[4] = {'I', 'T', 'B', 'L'};

template <typename T>
void write_le(std::ostream& out, T v) {
  // little-endian host assumed; buffers are written raw
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T read_le(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}
}  // namespace

const NamedTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

uint64_t Checkpoint::content_hash() const {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& t : tensors) {
    h = fnv1a64(t.name.data(), t.name.size(), h);
    h = fnv1a64(t.data.data(), t.data.size() * sizeof(float), h);
  }
  return h;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  json header;
  header["format_version"] = ckpt.version;
  header["phase"] = ckpt.phase;
  header["meta"] = ckpt.meta_json.empty() ? json::object()
                                          : json::parse(ckpt.meta_json);
  json table = json::array();
  for (const auto& t : ckpt.tensors) {
    if (numel(t.shape) != static_cast<int64_t>(t.data.size()))
      throw contract_error("checkpoint: tensor " + t.name + " shape " +
                           shape_str(t.shape) + " does not match buffer");
    table.push_back({{"name", t.name},
                     {"shape", t.shape},
                     {"dtype", "f32"},
                     {"bytes", t.data.size() * sizeof(float)}});
  }
  header["tensors"] = std::move(table);
  const std::string hs = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw config_error("save_checkpoint: cannot open " + path);
  out.write(kMagic, 4);
  write_le<uint32_t>(out, ckpt.version);
  write_le<uint64_t>(out, hs.size());
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& t : ckpt.tensors)
    out.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.data.size() * sizeof(float)));
  if (!out) throw config_error("save_checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw config_error("load_checkpoint: cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    throw config_error("load_checkpoint: bad magic in " + path);

  Checkpoint ckpt;
  ckpt.version = read_le<uint32_t>(in);
  const uint64_t hlen = read_le<uint64_t>(in);
  std::string hs(hlen, '\0');
  in.read(hs.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw config_error("load_checkpoint: truncated header in " + path);

  json header = json::parse(hs);
  ckpt.phase = header.at("phase").get<std::string>();
  ckpt.meta_json = header.at("meta").dump();
  for (const auto& e : header.at("tensors")) {
    NamedTensor t;
    t.name = e.at("name").get<std::string>();
    t.shape = e.at("shape").get<Shape>();
    const uint64_t bytes = e.at("bytes").get<uint64_t>();
    if (bytes != static_cast<uint64_t>(numel(t.shape)) * sizeof(float))
      throw contract_error("load_checkpoint: declared byte length of " +
                           t.name + " does not match its shape");
    t.data.resize(bytes / sizeof(float));
    in.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(bytes));
    if (!in)
      throw contract_error("load_checkpoint: truncated payload at " + t.name);
    ckpt.tensors.push_back(std::move(t));
  }
  return ckpt;
}

std::vector<NamedTensor> snapshot_tensors(
    const std::vector<std::pair<std::string, Tensor>>& named) {
  std::vector<NamedTensor> out;
  out.reserve(named.size());
  for (const auto& [name, t] : named)
    out.push_back({name, t.shape(),
                   std::vector<float>(t.data().begin(), t.data().end())});
  return out;
}

void restore_tensors(const Checkpoint& ckpt,
                     const std::vector<std::pair<std::string, Tensor>>& named) {
  for (const auto& [name, t] : named) {
    const NamedTensor* src = ckpt.find(name);
    if (!src) throw config_error("checkpoint: missing tensor " + name);
    if (src->shape != t.shape())
      throw config_error("checkpoint: tensor " + name + " has shape " +
                         shape_str(src->shape) + ", expected " +
                         shape_str(t.shape()));
    Tensor dst = t;
    std::copy(src->data.begin(), src->data.end(), dst.data_mut().begin());
  }
}

}  // namespace blendiff
