#pragma once

#include <string>
#include <vector>

#include "revnet/geometry.hpp"
#include "revnet/model.hpp"
#include "revnet/training.hpp"

namespace revnet {

/// Reads an XYZ text cloud: one "x y z" line per point, '#' comment lines
/// skipped. Malformed lines raise an error naming the line number.
PointCloud read_cloud(const std::string& path);

/// Writes the valid points with 9 significant digits per coordinate.
void write_cloud(const std::string& path, const PointCloud& cloud);

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  ModelConfig config;
  ParamList params;  // named tensors, bit-exact round trip
  bool has_optimizer = false;
  long optimizer_step = 0;
  AdamWConfig optimizer_cfg;
  std::vector<std::pair<std::string, std::vector<double>>> optimizer_m;
  std::vector<std::pair<std::string, std::vector<double>>> optimizer_v;
  std::uint64_t rng_seed = 0;
};

/// Little-endian binary format with magic "RVNT\0" and a u32 version.
/// Corrupt or truncated files and version mismatches raise errors.
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

Checkpoint make_checkpoint(const REVNet& model, std::uint64_t seed);
/// Builds the model from the stored config and restores its parameters.
REVNet restore_model(const Checkpoint& ckpt);

std::string config_to_json(const ModelConfig& cfg);
ModelConfig config_from_json(const std::string& json_text);
ModelConfig load_config_file(const std::string& path);

}  // namespace revnet
