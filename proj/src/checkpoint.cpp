#include "stllm/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "stllm/error.hpp"

namespace stllm {
namespace {

constexpr char kMagic[8] = {'S', 'T', 'L', 'L', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put_le(std::string& out, T value) {
  using U = std::make_unsigned_t<T>;
  auto u = static_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xFF));
}

template <typename T>
T get_le(std::string_view bytes, std::size_t& pos) {
  if (pos + sizeof(T) > bytes.size()) throw DataError("checkpoint: truncated archive");
  using U = std::make_unsigned_t<T>;
  U u = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    u |= static_cast<U>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
  }
  pos += sizeof(T);
  return static_cast<T>(u);
}

}  // namespace

const CheckpointEntry* Checkpoint::find(std::string_view name) const noexcept {
  for (const auto& e : entries) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

Checkpoint make_checkpoint(const ParameterSet& params, nlohmann::json meta) {
  Checkpoint ckpt;
  ckpt.meta = std::move(meta);
  for (const Parameter* p : params.all()) ckpt.entries.push_back({p->name(), p->frozen(), p->value()});
  return ckpt;
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  nlohmann::json header;
  header["meta"] = ckpt.meta;
  header["parameters"] = nlohmann::json::array();
  for (const auto& e : ckpt.entries) {
    header["parameters"].push_back({{"name", e.name}, {"shape", e.value.shape()}, {"frozen", e.frozen}});
  }
  const std::string text = header.dump();

  std::string out(kMagic, sizeof(kMagic));
  put_le<std::uint32_t>(out, kVersion);
  put_le<std::uint64_t>(out, text.size());
  out += text;
  for (const auto& e : ckpt.entries) {
    for (double v : e.value.data()) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

Checkpoint deserialize_checkpoint(std::string_view bytes) {
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw DataError("checkpoint: bad magic");
  }
  std::size_t pos = sizeof(kMagic);
  const auto version = get_le<std::uint32_t>(bytes, pos);
  if (version != kVersion) throw DataError("checkpoint: unsupported version " + std::to_string(version));
  const auto header_len = get_le<std::uint64_t>(bytes, pos);
  if (pos + header_len > bytes.size()) throw DataError("checkpoint: truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(pos, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint: malformed header: ") + e.what());
  }
  pos += header_len;

  Checkpoint ckpt;
  ckpt.meta = header.value("meta", nlohmann::json::object());
  for (const auto& item : header.at("parameters")) {
    CheckpointEntry e;
    e.name = item.at("name").get<std::string>();
    e.frozen = item.at("frozen").get<bool>();
    Shape shape = item.at("shape").get<Shape>();
    std::vector<double> data(shape_numel(shape));
    for (double& v : data) v = std::bit_cast<double>(get_le<std::uint64_t>(bytes, pos));
    e.value = Tensor(std::move(shape), std::move(data));
    ckpt.entries.push_back(std::move(e));
  }
  if (pos != bytes.size()) throw DataError("checkpoint: trailing bytes after payload");
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("checkpoint: cannot open " + path.string() + " for writing");
  const std::string bytes = serialize_checkpoint(ckpt);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("checkpoint: write failed for " + path.string());
}

void save_checkpoint(const std::filesystem::path& path, const ParameterSet& params, nlohmann::json meta) {
  save_checkpoint(path, make_checkpoint(params, std::move(meta)));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("checkpoint: cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return deserialize_checkpoint(buf.str());
}

std::size_t load_into(ParameterSet& params, const Checkpoint& ckpt, std::string_view pattern,
                      bool apply_frozen_flags) {
  std::size_t loaded = 0;
  for (Parameter* p : params.matching(pattern)) {
    const CheckpointEntry* e = ckpt.find(p->name());
    if (e == nullptr) throw DataError("checkpoint: missing parameter " + p->name());
    p->assign(e->value);
    if (apply_frozen_flags) p->set_frozen(e->frozen);
    ++loaded;
  }
  return loaded;
}

}  // namespace stllm
