#include "pmdet/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

#include "pmdet/common.hpp"

namespace pmdet {

using nlohmann::json;

namespace {
constexpr char kMagic[8] = {'P', 'M', 'D', 'E', 'T', 'C', 'K', 'P'};
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  json meta;
  meta["format_version"] = Checkpoint::kFormatVersion;
  meta["stage"] = ckpt.stage;
  meta["epoch"] = ckpt.epoch;
  meta["step"] = ckpt.step;
  meta["config_text"] = ckpt.config_text;
  meta["rng"] = json::object();
  for (const auto& [name, state] : ckpt.rng_states) meta["rng"][name] = state;
  meta["meta"] = json::object();
  for (const auto& [k, v] : ckpt.meta) meta["meta"][k] = v;
  meta["arrays"] = json::array();
  for (const auto& [name, tensor] : ckpt.arrays) {
    json entry;
    entry["name"] = name;
    entry["shape"] = tensor.shape();
    meta["arrays"].push_back(entry);
  }
  const std::string meta_text = meta.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("save_checkpoint: cannot open " + path);
  out.write(kMagic, sizeof(kMagic));
  const std::uint32_t version = Checkpoint::kFormatVersion;
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  const std::uint64_t meta_len = meta_text.size();
  out.write(reinterpret_cast<const char*>(&meta_len), sizeof(meta_len));
  out.write(meta_text.data(), static_cast<std::streamsize>(meta_len));
  for (const auto& [name, tensor] : ckpt.arrays)
    out.write(reinterpret_cast<const char*>(tensor.data()),
              static_cast<std::streamsize>(tensor.size() * sizeof(double)));
  if (!out) throw IoError("save_checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("load_checkpoint: cannot open " + path);

  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(magic)) != 0)
    throw ParseError("load_checkpoint: not a checkpoint file: " + path);
  std::uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  if (version != Checkpoint::kFormatVersion)
    throw StateError("load_checkpoint: format_version " +
                     std::to_string(version) + " not supported");
  std::uint64_t meta_len = 0;
  in.read(reinterpret_cast<char*>(&meta_len), sizeof(meta_len));
  std::string meta_text(meta_len, '\0');
  in.read(meta_text.data(), static_cast<std::streamsize>(meta_len));
  if (!in) throw ParseError("load_checkpoint: truncated metadata");

  json meta;
  try {
    meta = json::parse(meta_text);
  } catch (const json::exception& e) {
    throw ParseError(std::string("load_checkpoint: bad metadata: ") +
                     e.what());
  }

  Checkpoint ckpt;
  ckpt.stage = meta.at("stage").get<std::string>();
  ckpt.epoch = meta.at("epoch").get<std::int64_t>();
  ckpt.step = meta.at("step").get<std::int64_t>();
  ckpt.config_text = meta.at("config_text").get<std::string>();
  for (const auto& [name, state] : meta.at("rng").items())
    ckpt.rng_states[name] = state.get<std::string>();
  for (const auto& [k, v] : meta.at("meta").items())
    ckpt.meta[k] = v.get<std::string>();

  for (const auto& entry : meta.at("arrays")) {
    const std::string name = entry.at("name").get<std::string>();
    const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
    Tensor t(shape);
    in.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!in)
      throw ParseError("load_checkpoint: truncated payload for " + name);
    ckpt.arrays.emplace(name, std::move(t));
  }
  return ckpt;
}

}  // namespace pmdet
