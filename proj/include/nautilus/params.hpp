#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>

#include "nautilus/util.hpp"

namespace nautilus {

// Stage completion markers kept in checkpoint metadata.
inline constexpr std::uint32_t kStageTrained = 1u;
inline constexpr std::uint32_t kStageAdaptedAcoustic = 2u;
inline constexpr std::uint32_t kStageAdaptedVocoder = 4u;
inline constexpr std::uint32_t kStageWelded = 8u;

struct ParamStore {
  std::map<std::string, Mat> values;
  std::uint64_t step = 0;
  std::uint32_t flags = 0;

  bool has(const std::string& name) const { return values.count(name) > 0; }
  const Mat& at(const std::string& name) const;
  Mat& at(const std::string& name);
  std::size_t parameter_count() const;  // total scalar entries
};

void save_checkpoint(const ParamStore& store, const std::string& path,
                     const std::array<std::uint8_t, 32>& config_hash);
ParamStore load_checkpoint(const std::string& path,
                           const std::array<std::uint8_t, 32>& expected_hash);

// Order-stable content hash of every parameter tensor, for freeze contracts.
std::string params_hash(const ParamStore& store);

}  // namespace nautilus
