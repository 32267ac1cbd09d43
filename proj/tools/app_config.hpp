#pragma once

// The single configuration document behind every qkdsim command.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "qkd/loop.hpp"

namespace qkd::cli {

/// Bad flags, unknown names or keys, invalid values: exit code 1.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RatesGrid {
  double d_min = 0.0;
  double d_max = 200.0;
  double d_step = 5.0;
};

struct AppConfig {
  std::string protocol = "bb84";
  std::string scenario = "noise-sweep";
  int blocks = 700;
  std::uint64_t seed = 1;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::vector<std::string> controllers{"ml", "static", "recalib"};
  LinkParams link;
  /// One entry per protocol; the active one is picked by `protocol`.
  ProtocolConfig bb84 = ProtocolConfig::defaults(Protocol::BB84Decoy);
  ProtocolConfig e91 = ProtocolConfig::defaults(Protocol::E91);
  ProtocolConfig cow = ProtocolConfig::defaults(Protocol::COW);
  RatesGrid rates;
  TcnConfig tcn;
  PpoConfig ppo;
  LoopConfig loop;
  MlTrainConfig train;

  /// Protocol section selected by `protocol`. Throws UsageError.
  const ProtocolConfig& active_protocol() const;
  /// Checks every section. Throws UsageError.
  void validate() const;
};

nlohmann::json to_json(const AppConfig& c);
/// Every key must be present; throws UsageError otherwise.
AppConfig app_config_from_json(const nlohmann::json& j);

/// Reads a config file; keys it omits keep their defaults.
AppConfig load_app_config(const std::string& path);

/// Applies "a.b.c=value" onto the document. The path must already exist.
/// The value is parsed as JSON when possible and taken as a string otherwise.
void apply_override(nlohmann::json& doc, std::string_view assignment);

/// "N..M" (inclusive) or a comma list. Throws UsageError for an empty or
/// malformed list.
std::vector<std::uint64_t> parse_seeds(std::string_view text);

}  // namespace qkd::cli
