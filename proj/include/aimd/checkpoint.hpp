#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "aimd/detector.hpp"

namespace aimd {

// A checkpoint is a directory holding `manifest.txt` (key = value lines) and `params.bin`
// (float32 little-endian values, in manifest parameter order). The manifest is what train and eval
// agree on: branch names, per-branch category ids and the backbone configuration.

namespace detail {

template <class C>
std::string join(const C& c, char sep = ',') {
  std::ostringstream os;
  bool first = true;
  for (const auto& v : c) {
    if (!first) os << sep;
    os << v;
    first = false;
  }
  return os.str();
}

inline std::vector<int> split_ints(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ','))
    if (!tok.empty()) out.push_back(std::stoi(tok));
  return out;
}

inline std::vector<std::string> split_strings(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ','))
    if (!tok.empty()) out.push_back(tok);
  return out;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

inline std::string manifest_text(const DetectorConfig& cfg) {
  std::ostringstream os;
  const auto& b = cfg.backbone;
  os << "format = aimd-checkpoint-1\n";
  os << "backbone.stage_widths = " << detail::join(b.stage_widths) << '\n';
  os << "backbone.num_levels = " << b.num_levels << '\n';
  os << "backbone.base_stride = " << b.base_stride << '\n';
  os << "backbone.fpn_channels = " << b.fpn_channels << '\n';
  os << "backbone.tower_depth = " << b.tower_depth << '\n';
  os << "backbone.range_scale = " << b.range_scale << '\n';
  os << "afi = " << (cfg.afi_enabled ? 1 : 0) << '\n';
  std::vector<std::string> names;
  for (const auto& br : cfg.branches) names.push_back(br.name);
  os << "branches = " << detail::join(names) << '\n';
  for (const auto& br : cfg.branches) os << "branch." << br.name << ".categories = " << detail::join(br.category_ids) << '\n';
  return os.str();
}

inline DetectorConfig parse_manifest(std::istream& is) {
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(is, line)) {
    const auto eq = line.find('=');
    if (line.empty() || line[0] == '#' || eq == std::string::npos) continue;
    kv[detail::trim(line.substr(0, eq))] = detail::trim(line.substr(eq + 1));
  }
  auto get = [&](const std::string& k) {
    auto it = kv.find(k);
    if (it == kv.end()) throw ConfigError("checkpoint manifest missing key '" + k + "'");
    return it->second;
  };
  if (get("format") != "aimd-checkpoint-1") throw ConfigError("unsupported checkpoint format");
  DetectorConfig cfg;
  const auto widths = detail::split_ints(get("backbone.stage_widths"));
  if (widths.size() != 4) throw ConfigError("checkpoint manifest: expected 4 stage widths");
  std::copy(widths.begin(), widths.end(), cfg.backbone.stage_widths.begin());
  cfg.backbone.num_levels = std::stoi(get("backbone.num_levels"));
  cfg.backbone.base_stride = std::stoi(get("backbone.base_stride"));
  cfg.backbone.fpn_channels = std::stoi(get("backbone.fpn_channels"));
  cfg.backbone.tower_depth = std::stoi(get("backbone.tower_depth"));
  cfg.backbone.range_scale = std::stod(get("backbone.range_scale"));
  cfg.afi_enabled = get("afi") == "1";
  for (const auto& name : detail::split_strings(get("branches")))
    cfg.branches.push_back({name, detail::split_ints(get("branch." + name + ".categories"))});
  return cfg;
}

template <class T>
void save_checkpoint(const Detector<T>& model, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream os(dir / "manifest.txt");
    os << manifest_text(model.config());
    for (const auto& [name, v] : model.params().items())
      os << "param " << name << ' ' << detail::join(v.shape(), 'x') << '\n';
    if (!os) throw std::runtime_error("cannot write checkpoint manifest in " + dir.string());
  }
  std::ofstream bin(dir / "params.bin", std::ios::binary);
  for (const auto& [name, v] : model.params().items())
    for (size_t i = 0; i < v.value().size(); ++i) {
      const float f = static_cast<float>(v.value()[i]);
      bin.write(reinterpret_cast<const char*>(&f), sizeof f);
    }
  if (!bin) throw std::runtime_error("cannot write checkpoint parameters in " + dir.string());
}

template <class T>
Detector<T> load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream ms(dir / "manifest.txt");
  if (!ms) throw ConfigError("no checkpoint manifest in " + dir.string());
  Detector<T> model(parse_manifest(ms), 0);
  std::ifstream bin(dir / "params.bin", std::ios::binary);
  if (!bin) throw ConfigError("no checkpoint parameters in " + dir.string());
  for (auto& [name, v] : model.params().items()) {
    auto& t = v.mutable_value();
    for (size_t i = 0; i < t.size(); ++i) {
      float f = 0;
      bin.read(reinterpret_cast<char*>(&f), sizeof f);
      t[i] = static_cast<T>(f);
    }
  }
  if (!bin) throw ConfigError("checkpoint parameters truncated in " + dir.string());
  if (bin.peek() != std::char_traits<char>::eof()) throw ConfigError("checkpoint has trailing parameter data");
  return model;
}

}  // namespace aimd
