#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <sstream>
#include <string>

#include "celldino/ctf.hpp"
#include "celldino/params.hpp"
#include "celldino/rng.hpp"

namespace celldino {

// A checkpoint is a directory: `manifest.json` describing the config and the
// parameter table plus a content checksum, and one CTF1 file per parameter.
// The same layout is used for backbones and classifier heads.
namespace checkpoint {

template <class T>
inline std::uint64_t tensor_digest(const Tensor<T>& t) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const unsigned char* p, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (auto d : t.shape()) {
    const std::uint64_t v = static_cast<std::uint64_t>(d);
    mix(reinterpret_cast<const unsigned char*>(&v), sizeof(v));
  }
  mix(reinterpret_cast<const unsigned char*>(t.data()),
      static_cast<std::size_t>(t.numel()) * sizeof(T));
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

template <class T>
void save(const std::filesystem::path& dir, const nlohmann::json& config,
          const ParamStore<T>& params) {
  std::filesystem::create_directories(dir);
  nlohmann::json table = nlohmann::json::array();
  std::uint64_t combined = 0xcbf29ce484222325ULL;
  for (const auto& p : params) {
    const std::string file = p.name + ".ctf";
    ctf::write(dir / file, p.value);
    const std::uint64_t digest = tensor_digest(p.value);
    combined ^= digest + 0x9e3779b97f4a7c15ULL + (combined << 6) + (combined >> 2);
    combined = splitmix64(combined ^ fnv1a64(p.name));
    nlohmann::json row;
    row["name"] = p.name;
    row["file"] = file;
    row["shape"] = p.value.shape();
    row["dtype"] = ctf::dtype_name(ctf::dtype_code<T>());
    row["digest"] = hex64(digest);
    table.push_back(row);
  }
  nlohmann::json manifest;
  manifest["format"] = "celldino-checkpoint-v1";
  manifest["config"] = config;
  manifest["params"] = table;
  manifest["checksum"] = hex64(combined);
  std::ofstream f(dir / "manifest.json");
  if (!f) throw IoError("cannot write manifest: " + dir.string());
  f << manifest.dump(2) << "\n";
}

struct Loaded {
  nlohmann::json config;
  nlohmann::json manifest;
};

inline nlohmann::json read_manifest(const std::filesystem::path& dir) {
  std::ifstream f(dir / "manifest.json");
  if (!f) throw IoError("missing manifest.json in " + dir.string());
  nlohmann::json manifest;
  try {
    f >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("corrupt manifest in " + dir.string() + ": " + e.what());
  }
  if (manifest.value("format", "") != "celldino-checkpoint-v1")
    throw IoError("not a checkpoint directory: " + dir.string());
  return manifest;
}

// Loads into an existing store; names and shapes must align. Verifies the
// per-tensor digests and the combined checksum.
template <class T>
nlohmann::json load_into(const std::filesystem::path& dir,
                         ParamStore<T>& params) {
  const nlohmann::json manifest = read_manifest(dir);
  const auto& table = manifest["params"];
  if (table.size() != params.size())
    throw ConfigError("checkpoint parameter count mismatch in " + dir.string());
  std::uint64_t combined = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[static_cast<int>(i)];
    const auto& row = table[i];
    if (row["name"].get<std::string>() != p.name)
      throw ConfigError("checkpoint parameter order mismatch: expected " +
                        p.name + ", found " + row["name"].get<std::string>());
    Tensor<T> t = ctf::read<T>(dir / row["file"].get<std::string>());
    if (!t.same_shape(p.value))
      throw ConfigError("checkpoint shape mismatch at " + p.name);
    const std::uint64_t digest = tensor_digest(t);
    if (hex64(digest) != row["digest"].get<std::string>())
      throw IoError("checkpoint corruption detected at " + p.name);
    combined ^= digest + 0x9e3779b97f4a7c15ULL + (combined << 6) + (combined >> 2);
    combined = splitmix64(combined ^ fnv1a64(p.name));
    p.value = std::move(t);
  }
  if (hex64(combined) != manifest["checksum"].get<std::string>())
    throw IoError("checkpoint checksum mismatch in " + dir.string());
  return manifest["config"];
}

}  // namespace checkpoint
}  // namespace celldino
