#pragma once

#include <cstddef>
#include <string>

#include "hypermoe/config.hpp"
#include "hypermoe/model.hpp"

namespace hypermoe {

struct LoadedCheckpoint {
  Model model;
  TaskConfig task;
  std::size_t step = 0;
};

/// File layout: 8-byte magic, little-endian u64 manifest length, UTF-8 JSON
/// manifest (names, shapes, offsets, CRC-32 of the payload, config snapshot),
/// then every parameter as little-endian float64 in manifest order.
void save_checkpoint(const Model& model, const std::string& path,
                     const TaskConfig& task = {}, std::size_t step = 0);

/// Throws IntegrityError for a missing, truncated or corrupted file. When
/// `expected` is given, a config snapshot that differs from it raises
/// ConfigError naming the first differing parameter.
LoadedCheckpoint load_checkpoint(const std::string& path,
                                 const ModelConfig* expected = nullptr);

}  // namespace hypermoe
