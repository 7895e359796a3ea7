#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "pmdet/tensor.hpp"

namespace pmdet {

// Single-file checkpoint container: a JSON metadata block (format version,
// config snapshot, counters, RNG states, array directory) followed by raw
// float64 payloads in sorted-name order. Save -> load -> save is
// byte-identical.
struct Checkpoint {
  static constexpr std::uint32_t kFormatVersion = 1;

  std::string stage;  // "burn_in" or "adapt"
  std::int64_t epoch = 0;
  std::int64_t step = 0;
  std::string config_text;
  std::map<std::string, std::string> rng_states;
  std::map<std::string, std::string> meta;  // scalar metadata (adam step, ...)
  std::map<std::string, Tensor> arrays;     // named parameter payloads
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace pmdet
