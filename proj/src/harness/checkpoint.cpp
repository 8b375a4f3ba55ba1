#include "hypermoe/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "hypermoe/config_io.hpp"
#include "hypermoe/errors.hpp"

namespace hypermoe {

namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'H', 'Y', 'P', 'M', 'O', 'E', 'C', '1'};

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

std::uint32_t crc(const std::string& bytes, std::size_t begin) {
  uLong c = crc32(0L, Z_NULL, 0);
  const auto* p = reinterpret_cast<const Bytef*>(bytes.data() + begin);
  std::size_t left = bytes.size() - begin;
  while (left > 0) {
    const auto chunk = uInt(std::min<std::size_t>(left, 1u << 30));
    c = crc32(c, p, chunk);
    p += chunk;
    left -= chunk;
  }
  return std::uint32_t(c);
}

}  // namespace

void save_checkpoint(const Model& model, const std::string& path,
                     const TaskConfig& task, std::size_t step) {
  std::string payload;
  json entries = json::array();
  for (const auto& p : model.parameters()) {
    entries.push_back({{"name", p.name},
                       {"shape", p.tensor.shape()},
                       {"offset", payload.size()},
                       {"count", p.tensor.size()}});
    for (double v : p.tensor.data()) put_u64(payload, std::bit_cast<std::uint64_t>(v));
  }
  json manifest = {{"format", 1},
                   {"config", to_json(model.cfg)},
                   {"task", to_json(task)},
                   {"step", step},
                   {"payload_bytes", payload.size()},
                   {"crc32", crc(payload, 0)},
                   {"parameters", entries}};
  const std::string text = manifest.dump();
  std::string header(kMagic, sizeof kMagic);
  put_u64(header, text.size());

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write checkpoint " + path);
  out << header << text << payload;
  out.flush();
  if (!out) throw Error("failed writing checkpoint " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path, const ModelConfig* expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IntegrityError(path + ": checkpoint missing or unreadable");
  const std::string bytes{std::istreambuf_iterator<char>(in), {}};
  const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw IntegrityError(path + ": not a checkpoint file");
  }
  const std::uint64_t manifest_len = get_u64(raw + 8);
  if (manifest_len > bytes.size() - 16) {
    throw IntegrityError(path + ": manifest truncated");
  }
  json manifest;
  try {
    manifest = json::parse(bytes.substr(16, manifest_len));
  } catch (const json::exception& e) {
    throw IntegrityError(path + ": manifest unreadable: " + e.what());
  }
  const std::size_t begin = 16 + manifest_len;
  LoadedCheckpoint out;
  try {
    const std::size_t payload_bytes = manifest.at("payload_bytes").get<std::size_t>();
    if (bytes.size() - begin != payload_bytes) {
      throw IntegrityError(path + ": payload is " + std::to_string(bytes.size() - begin) +
                           " bytes, manifest says " + std::to_string(payload_bytes));
    }
    if (crc(bytes, begin) != manifest.at("crc32").get<std::uint32_t>()) {
      throw IntegrityError(path + ": payload checksum mismatch");
    }
    const json& config = manifest.at("config");
    if (expected) {
      const std::string diff = first_difference(config, to_json(*expected));
      if (!diff.empty()) {
        const json stored = config.contains(json::json_pointer("/" + diff))
                                ? config.at(json::json_pointer("/" + diff)) : json();
        throw ConfigError("checkpoint mismatch on '" + diff + "': checkpoint has " +
                          stored.dump());
      }
    }
    out.task = task_config_from_json(manifest.at("task"));
    out.step = manifest.at("step").get<std::size_t>();
    Rng rng(0);
    out.model = build_model(model_config_from_json(config), rng);
    auto params = out.model.parameters();
    const json& entries = manifest.at("parameters");
    if (entries.size() != params.size()) {
      throw IntegrityError(path + ": checkpoint holds " + std::to_string(entries.size()) +
                           " tensors, config implies " + std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      const json& e = entries[i];
      Tensor& t = params[i].tensor;
      if (e.at("name").get<std::string>() != params[i].name ||
          e.at("shape").get<Shape>() != t.shape()) {
        throw IntegrityError(path + ": entry " + std::to_string(i) + " (" +
                             e.at("name").get<std::string>() + ") does not match " +
                             params[i].name + " " + shape_to_string(t.shape()));
      }
      const std::size_t offset = e.at("offset").get<std::size_t>();
      if (offset + 8 * t.size() > payload_bytes) {
        throw IntegrityError(path + ": entry " + params[i].name + " overruns payload");
      }
      auto dst = t.mutable_data();
      for (std::size_t k = 0; k < dst.size(); ++k) {
        dst[k] = std::bit_cast<double>(get_u64(raw + begin + offset + 8 * k));
      }
    }
  } catch (const json::exception& e) {
    throw IntegrityError(path + ": malformed manifest: " + e.what());
  }
  return out;
}

}  // namespace hypermoe
