#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "json.hpp"

namespace condvid {

/// Architecture knobs shared by the denoiser, the control branch and the
/// codec. Level l runs at latent_size / 2^l with channels[l] channels.
struct NetworkConfig {
  std::size_t latent_channels = 4;
  std::size_t latent_size = 32;
  std::size_t patch = 4;
  std::vector<std::size_t> channels{16, 32};
  std::vector<bool> level_attention{false, true};
  bool mid_attention = true;
  std::size_t groups = 4;
  std::size_t heads = 1;
  std::size_t time_dim = 32;
  std::size_t temb_dim = 64;
  std::size_t text_dim = 32;
  std::size_t cond_channels = 1;
  std::vector<std::size_t> stem_channels{8, 16};

  [[nodiscard]] std::size_t levels() const noexcept { return channels.size(); }
  [[nodiscard]] std::size_t image_size() const noexcept { return latent_size * patch; }
  /// Throws std::invalid_argument on inconsistent knobs.
  void validate() const;
};

void to_json(nlohmann::json& j, const NetworkConfig& c);
/// Missing keys keep their defaults; unknown keys are an error.
void from_json(const nlohmann::json& j, NetworkConfig& c);

/// FNV-1a of the canonical (sorted-key, compact) JSON dump.
std::uint64_t json_hash(const nlohmann::json& j);
std::string hash_hex(std::uint64_t h);

/// Throws if `j` has a key outside `known`, naming the offending key.
void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> known, const char* where);

}  // namespace condvid
