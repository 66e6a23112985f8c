#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "metasparse/model.hpp"
#include "metasparse/sparsity.hpp"

namespace metasparse {

struct TensorRecord {
  std::string id;
  Shape shape;
  Vector data;
};

/**
 * Binary container: "MSCK", u32 version, then the config hash, the model
 * architecture, (id, shape, data) parameter records, mask bit arrays, raw
 * lambda and the rng state. Little-endian, doubles stored bit-exact.
 */
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::uint64_t config_hash = 0;
  ModelSpec spec;
  std::vector<TensorRecord> parameters;
  MaskSet masks;
  double lambda_raw = 0.0;
  std::string rng_state;

  static Checkpoint capture(const MultiTaskModel& model, const MaskSet& masks, double lambda_raw,
                            const std::mt19937_64& rng, std::uint64_t config_hash);

  /// Rebuilds the model and copies every stored parameter into it.
  MultiTaskModel restore_model() const;
  std::mt19937_64 restore_rng() const;

  void save(const std::filesystem::path& path) const;
  /// Throws std::runtime_error on a missing file, bad magic, unknown version or truncation.
  static Checkpoint load(const std::filesystem::path& path);
};

}  // namespace metasparse
