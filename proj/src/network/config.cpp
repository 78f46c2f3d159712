#include "condvid/network/config.hpp"

#include <bit>
#include <cstdio>
#include <stdexcept>
#include <string>

#include "condvid/numerics/hash.hpp"

namespace condvid {

void NetworkConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("network config: " + msg); };
  if (channels.empty()) fail("at least one level is required");
  if (level_attention.size() != channels.size()) fail("level_attention needs one entry per level");
  if (latent_size % (std::size_t{1} << (levels() - 1)) != 0) fail("latent_size must halve cleanly at every level");
  if (patch == 0 || (patch & (patch - 1)) != 0) fail("patch must be a power of two");
  if (stem_channels.size() != static_cast<std::size_t>(std::countr_zero(patch)))
    fail("stem needs one stride-2 stage per factor of two in the patch size");
  for (std::size_t c : channels)
    if (c == 0 || c % groups != 0 || c % heads != 0) fail("every level width must be divisible by groups and heads");
  if (time_dim == 0 || time_dim % 2 != 0) fail("time_dim must be even");
  if (latent_channels == 0 || text_dim == 0 || temb_dim == 0 || cond_channels == 0) fail("widths must be positive");
}

void to_json(nlohmann::json& j, const NetworkConfig& c) {
  j = nlohmann::json{{"latent_channels", c.latent_channels},
                     {"latent_size", c.latent_size},
                     {"patch", c.patch},
                     {"channels", c.channels},
                     {"level_attention", c.level_attention},
                     {"mid_attention", c.mid_attention},
                     {"groups", c.groups},
                     {"heads", c.heads},
                     {"time_dim", c.time_dim},
                     {"temb_dim", c.temb_dim},
                     {"text_dim", c.text_dim},
                     {"cond_channels", c.cond_channels},
                     {"stem_channels", c.stem_channels}};
}

void from_json(const nlohmann::json& j, NetworkConfig& c) {
  reject_unknown_keys(j,
                      {"latent_channels", "latent_size", "patch", "channels", "level_attention", "mid_attention",
                       "groups", "heads", "time_dim", "temb_dim", "text_dim", "cond_channels", "stem_channels"},
                      "network");
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("latent_channels", c.latent_channels);
  get("latent_size", c.latent_size);
  get("patch", c.patch);
  get("channels", c.channels);
  get("level_attention", c.level_attention);
  get("mid_attention", c.mid_attention);
  get("groups", c.groups);
  get("heads", c.heads);
  get("time_dim", c.time_dim);
  get("temb_dim", c.temb_dim);
  get("text_dim", c.text_dim);
  get("cond_channels", c.cond_channels);
  get("stem_channels", c.stem_channels);
  c.validate();
}

std::uint64_t json_hash(const nlohmann::json& j) { return fnv1a64(j.dump()); }

std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> known, const char* where) {
  if (!j.is_object()) throw std::invalid_argument(std::string(where) + ": expected a JSON object");
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) throw std::invalid_argument(std::string(where) + ": unknown key '" + key + "'");
  }
}

}  // namespace condvid
