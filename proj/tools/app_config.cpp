#include "app_config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>

namespace qkd::cli {

using nlohmann::json;

namespace {

json link_json(const LinkParams& l) {
  return {{"alpha_db_per_km", l.alpha_db_per_km},
          {"distance_km", l.distance_km},
          {"eta_det", l.eta_det},
          {"y0", l.y0},
          {"e_d", l.e_d},
          {"e0", l.e0},
          {"f_rep", l.f_rep},
          {"theta", l.theta}};
}

LinkParams link_from(const json& j) {
  LinkParams l;
  l.alpha_db_per_km = j.at("alpha_db_per_km").get<double>();
  l.distance_km = j.at("distance_km").get<double>();
  l.eta_det = j.at("eta_det").get<double>();
  l.y0 = j.at("y0").get<double>();
  l.e_d = j.at("e_d").get<double>();
  l.e0 = j.at("e0").get<double>();
  l.f_rep = j.at("f_rep").get<double>();
  l.theta = j.at("theta").get<double>();
  return l;
}

// Only the parameters the protocol reads are written out.
json protocol_json(const ProtocolConfig& p) {
  json j = {{"q", p.q},
            {"f_ec", p.f_ec},
            {"n_block", p.finite_key.n_block},
            {"epsilon", p.finite_key.epsilon}};
  switch (p.kind) {
    case Protocol::BB84Decoy:
      j["mu_s"] = p.bb84.mu_s;
      j["mu_w"] = p.bb84.mu_w;
      j["p_s"] = p.bb84.p_s;
      break;
    case Protocol::E91:
      j["v_source"] = p.e91.v_source;
      j["mu_pair"] = p.e91.mu_pair;
      break;
    case Protocol::COW:
      j["alpha_sq"] = p.cow.alpha_sq;
      j["monitor_fraction"] = p.cow.monitor_fraction;
      break;
  }
  return j;
}

ProtocolConfig protocol_from(const json& j, Protocol kind) {
  ProtocolConfig p = ProtocolConfig::defaults(kind);
  p.q = j.at("q").get<double>();
  p.f_ec = j.at("f_ec").get<double>();
  p.finite_key.n_block = j.at("n_block").get<double>();
  p.finite_key.epsilon = j.at("epsilon").get<double>();
  switch (kind) {
    case Protocol::BB84Decoy:
      p.bb84.mu_s = j.at("mu_s").get<double>();
      p.bb84.mu_w = j.at("mu_w").get<double>();
      p.bb84.p_s = j.at("p_s").get<double>();
      break;
    case Protocol::E91:
      p.e91.v_source = j.at("v_source").get<double>();
      p.e91.mu_pair = j.at("mu_pair").get<double>();
      break;
    case Protocol::COW:
      p.cow.alpha_sq = j.at("alpha_sq").get<double>();
      p.cow.monitor_fraction = j.at("monitor_fraction").get<double>();
      break;
  }
  return p;
}

// Recursively copies `patch` onto `base`; unknown keys are rejected.
void merge_known(json& base, const json& patch, const std::string& path) {
  for (const auto& [key, value] : patch.items()) {
    const std::string here = path.empty() ? key : path + "." + key;
    if (!base.contains(key)) throw UsageError("unknown config key: " + here);
    if (base[key].is_object() && value.is_object())
      merge_known(base[key], value, here);
    else
      base[key] = value;
  }
}

}  // namespace

const ProtocolConfig& AppConfig::active_protocol() const {
  try {
    switch (parse_protocol(protocol)) {
      case Protocol::BB84Decoy: return bb84;
      case Protocol::E91: return e91;
      case Protocol::COW: return cow;
    }
  } catch (const std::invalid_argument&) {
  }
  throw UsageError("unknown protocol '" + protocol + "' (expected bb84, e91 or cow)");
}

void AppConfig::validate() const {
  try {
    active_protocol().validate();
    link.validate();
    tcn.validate();
    ppo.validate();
    loop.validate();
    loop.reward.validate();
    if (blocks < 1) throw UsageError("blocks must be >= 1");
    if (seeds.empty()) throw UsageError("seeds must not be empty");
    if (!(rates.d_step > 0.0) || rates.d_min < 0.0 || rates.d_max < rates.d_min)
      throw UsageError("rates grid needs 0 <= d_min <= d_max and d_step > 0");
    for (const auto& c : controllers) parse_controller(c);
    const auto names = scenario_names();
    if (std::find(names.begin(), names.end(), scenario) == names.end())
      throw UsageError("unknown scenario '" + scenario + "'");
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
}

json to_json(const AppConfig& c) {
  json j;
  j["protocol"] = c.protocol;
  j["scenario"] = c.scenario;
  j["blocks"] = c.blocks;
  j["seed"] = c.seed;
  j["seeds"] = c.seeds;
  j["controllers"] = c.controllers;
  j["link"] = link_json(c.link);
  j["protocols"] = {{"bb84", protocol_json(c.bb84)}, {"e91", protocol_json(c.e91)}, {"cow", protocol_json(c.cow)}};
  j["rates"] = {{"d_min", c.rates.d_min}, {"d_max", c.rates.d_max}, {"d_step", c.rates.d_step}};
  j["tcn"] = c.tcn;
  j["ppo"] = c.ppo;
  j["loop"] = c.loop;
  j["train"] = c.train;
  return j;
}

AppConfig app_config_from_json(const json& j) {
  try {
    AppConfig c;
    c.protocol = j.at("protocol").get<std::string>();
    c.scenario = j.at("scenario").get<std::string>();
    c.blocks = j.at("blocks").get<int>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    c.controllers = j.at("controllers").get<std::vector<std::string>>();
    c.link = link_from(j.at("link"));
    const auto& p = j.at("protocols");
    c.bb84 = protocol_from(p.at("bb84"), Protocol::BB84Decoy);
    c.e91 = protocol_from(p.at("e91"), Protocol::E91);
    c.cow = protocol_from(p.at("cow"), Protocol::COW);
    const auto& r = j.at("rates");
    c.rates = {r.at("d_min").get<double>(), r.at("d_max").get<double>(), r.at("d_step").get<double>()};
    c.tcn = j.at("tcn").get<TcnConfig>();
    c.ppo = j.at("ppo").get<PpoConfig>();
    c.loop = j.at("loop").get<LoopConfig>();
    c.train = j.at("train").get<MlTrainConfig>();
    return c;
  } catch (const json::exception& e) {
    throw UsageError(std::string("config: ") + e.what());
  }
}

AppConfig load_app_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read config file " + path);
  json patch;
  try {
    patch = json::parse(in);
  } catch (const json::parse_error& e) {
    throw UsageError("config " + path + ": " + e.what());
  }
  if (!patch.is_object()) throw UsageError("config " + path + ": expected a JSON object");
  json doc = to_json(AppConfig{});
  merge_known(doc, patch, "");
  return app_config_from_json(doc);
}

void apply_override(json& doc, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0)
    throw UsageError("--set expects key=value, got '" + std::string(assignment) + "'");
  const std::string path(assignment.substr(0, eq));
  const std::string text(assignment.substr(eq + 1));

  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(key)) throw UsageError("unknown config key: " + path);
    node = &(*node)[key];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  if (node->is_object()) throw UsageError("--set needs a leaf key, '" + path + "' is a section");
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  *node = std::move(value);
}

std::vector<std::uint64_t> parse_seeds(std::string_view text) {
  auto number = [&](std::string_view s) {
    std::uint64_t v = 0;
    const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || ec != std::errc{} || end != s.data() + s.size())
      throw UsageError("bad seed '" + std::string(s) + "'");
    return v;
  };
  std::vector<std::uint64_t> out;
  if (const auto dots = text.find(".."); dots != std::string_view::npos) {
    const auto lo = number(text.substr(0, dots));
    const auto hi = number(text.substr(dots + 2));
    if (hi < lo) throw UsageError("empty seed range '" + std::string(text) + "'");
    if (hi - lo >= 100'000) throw UsageError("seed range too long");
    for (auto s = lo; s <= hi; ++s) out.push_back(s);
    return out;
  }
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto comma = text.find(',', start);
    const auto part = text.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start);
    if (!part.empty()) out.push_back(number(part));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  if (out.empty()) throw UsageError("seed list is empty");
  return out;
}

}  // namespace qkd::cli
