#pragma once

// Key-value run configuration: `key = value` lines, '#' comments.
//
//   arch.preset = fc-densenet-tiny
//   arch.down_blocks = 2,2
//   train.max_epochs = 40
//   synth.n_train = 200
//   seed = 7

#include <charconv>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "fcdn/architecture.hpp"
#include "fcdn/data.hpp"
#include "fcdn/errors.hpp"
#include "fcdn/optim.hpp"

namespace fcdn {

class RunConfig {
 public:
  struct Entry {
    std::string value;
    std::size_t line = 0;  // 0 when set programmatically
  };

  static RunConfig parse(const std::string& text) {
    RunConfig cfg;
    std::istringstream in(text);
    std::size_t lineno = 0;
    for (std::string line; std::getline(in, line);) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError(lineno, "expected 'key = value', got '" + line + "'");
      std::string key = trim(line.substr(0, eq));
      std::string value = trim(line.substr(eq + 1));
      if (key.empty()) throw ConfigError(lineno, "empty key");
      if (!known_key(key)) throw ConfigError(lineno, "unknown key '" + key + "'");
      if (value.empty()) throw ConfigError(lineno, "empty value for '" + key + "'");
      cfg.entries_[key] = {value, lineno};
    }
    return cfg;
  }

  static RunConfig load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    try {
      return parse(ss.str());
    } catch (const ConfigError& e) {
      throw ConfigError(e.line(), path.string() + ": " + e.detail());
    }
  }

  void set(const std::string& key, std::string value) {
    if (!known_key(key)) throw ConfigError(0, "unknown key '" + key + "'");
    entries_[key] = {std::move(value), 0};
  }
  bool has(const std::string& key) const { return entries_.count(key) != 0; }
  std::string get(const std::string& key, const std::string& fallback = "") const {
    auto it = entries_.find(key);
    return it == entries_.end() ? fallback : it->second.value;
  }

  // Canonical text: sorted keys, one per line.
  std::string to_text() const {
    std::string out;
    for (const auto& [k, e] : entries_) out += k + " = " + e.value + "\n";
    return out;
  }

  std::uint64_t digest() const { return fnv1a(to_text()); }

  // Overlays `other` on top of this config.
  void merge(const RunConfig& other) {
    for (const auto& [k, e] : other.entries_) entries_[k] = e;
  }

  // --- typed accessors ---------------------------------------------------

  template <typename V>
  V number(const std::string& key, V fallback) const {
    auto it = entries_.find(key);
    if (it == entries_.end()) return fallback;
    return parse_number<V>(it->second.value, key, it->second.line);
  }

  std::vector<std::size_t> list(const std::string& key, std::vector<std::size_t> fallback) const {
    auto it = entries_.find(key);
    if (it == entries_.end()) return fallback;
    std::vector<std::size_t> out;
    std::stringstream ss(it->second.value);
    for (std::string item; std::getline(ss, item, ',');) {
      out.push_back(parse_number<std::size_t>(trim(item), key, it->second.line));
    }
    return out;
  }

  std::size_t line_of(const std::string& key) const {
    auto it = entries_.find(key);
    return it == entries_.end() ? 0 : it->second.line;
  }

  ArchConfig arch() const {
    ArchConfig a = presets::fc_densenet_tiny();
    if (has("arch.preset")) {
      auto p = presets::by_name(get("arch.preset"));
      if (!p) throw ConfigError(line_of("arch.preset"), "unknown preset '" + get("arch.preset") + "'");
      a = *p;
    }
    a.in_channels = number("arch.in_channels", a.in_channels);
    a.first_conv_maps = number("arch.first_conv_maps", a.first_conv_maps);
    a.growth_rate = number("arch.growth_rate", a.growth_rate);
    a.down_blocks = list("arch.down_blocks", a.down_blocks);
    a.bottleneck_layers = number("arch.bottleneck_layers", a.bottleneck_layers);
    a.up_blocks = list("arch.up_blocks", a.up_blocks);
    a.n_classes = number("arch.n_classes", a.n_classes);
    a.dropout = number("arch.dropout", a.dropout);
    try {
      a.validate();
    } catch (const ConfigError& e) {
      throw ConfigError(first_line_with_prefix("arch."), e.detail());
    }
    return a;
  }

  TrainConfig train() const {
    TrainConfig t;
    t.lr_init = number("train.lr_init", t.lr_init);
    t.lr_decay_per_epoch = number("train.lr_decay_per_epoch", t.lr_decay_per_epoch);
    t.finetune_lr = number("train.finetune_lr", t.finetune_lr);
    t.weight_decay = number("train.weight_decay", t.weight_decay);
    t.patience = number("train.patience", t.patience);
    t.finetune_patience = number("train.finetune_patience", t.finetune_patience);
    t.batch_size = number("train.batch_size", t.batch_size);
    t.finetune_batch_size = number("train.finetune_batch_size", t.finetune_batch_size);
    t.crop_size = number("train.crop_size", t.crop_size);
    t.rms_rho = number("train.rms_rho", t.rms_rho);
    t.rms_eps = number("train.rms_eps", t.rms_eps);
    t.max_epochs = number("train.max_epochs", t.max_epochs);
    t.finetune_max_epochs = number("train.finetune_max_epochs", t.finetune_max_epochs);
    t.seed = number<std::uint64_t>("seed", t.seed);
    try {
      if (has("train.flip_axis")) t.flip_axis = parse_flip_axis(get("train.flip_axis"));
      if (has("train.monitor")) t.monitor = parse_monitor(get("train.monitor"));
      t.validate();
    } catch (const ConfigError& e) {
      throw ConfigError(first_line_with_prefix("train."), e.detail());
    }
    return t;
  }

  SynthConfig synth() const {
    SynthConfig s;
    s.n_train = number("synth.n_train", s.n_train);
    s.n_val = number("synth.n_val", s.n_val);
    s.n_test = number("synth.n_test", s.n_test);
    s.height = number("synth.height", s.height);
    s.width = number("synth.width", s.width);
    s.n_classes = number("synth.n_classes", s.n_classes);
    s.shapes_per_image = number("synth.shapes_per_image", s.shapes_per_image);
    s.void_fraction = number("synth.void_fraction", s.void_fraction);
    s.noise = number("synth.noise", s.noise);
    s.color_jitter = number("synth.color_jitter", s.color_jitter);
    return s;
  }

  static const std::vector<std::string>& known_keys() {
    static const std::vector<std::string> keys = {
        "seed", "data",
        "arch.preset", "arch.in_channels", "arch.first_conv_maps", "arch.growth_rate", "arch.down_blocks",
        "arch.bottleneck_layers", "arch.up_blocks", "arch.n_classes", "arch.dropout",
        "train.lr_init", "train.lr_decay_per_epoch", "train.finetune_lr", "train.weight_decay",
        "train.patience", "train.finetune_patience", "train.batch_size", "train.finetune_batch_size",
        "train.crop_size", "train.flip_axis", "train.monitor", "train.rms_rho", "train.rms_eps",
        "train.max_epochs", "train.finetune_max_epochs",
        "synth.n_train", "synth.n_val", "synth.n_test", "synth.height", "synth.width", "synth.n_classes",
        "synth.shapes_per_image", "synth.void_fraction", "synth.noise", "synth.color_jitter"};
    return keys;
  }

  static std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
    return h;
  }

 private:
  static bool known_key(const std::string& key) {
    for (const auto& k : known_keys())
      if (k == key) return true;
    return false;
  }

  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

  template <typename V>
  static V parse_number(const std::string& text, const std::string& key, std::size_t line) {
    V v{};
    const char* first = text.data();
    const char* last = text.data() + text.size();
    auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc() || ptr != last) {
      throw ConfigError(line, "bad value '" + text + "' for '" + key + "'");
    }
    return v;
  }

  std::size_t first_line_with_prefix(const std::string& prefix) const {
    std::size_t best = 0;
    for (const auto& [k, e] : entries_) {
      if (k.rfind(prefix, 0) == 0 && e.line > 0 && (best == 0 || e.line < best)) best = e.line;
    }
    return best;
  }

  std::map<std::string, Entry> entries_;
};

}  // namespace fcdn
