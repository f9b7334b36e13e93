#pragma once

// Architecture reports (text, CSV, JSON) and comparison against published figures.

#include <cmath>
#include <cstddef>
#include <cstdio>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fcdn/architecture.hpp"
#include "fcdn/reference_tables.hpp"

namespace fcdn {

inline std::string format_arch_report(const ArchSummary& s, const std::string& title) {
  std::ostringstream os;
  char line[160];
  os << title << "\n";
  std::snprintf(line, sizeof line, "%-3s %-24s %8s %12s\n", "#", "stage", "m", "params");
  os << line;
  for (std::size_t i = 0; i < s.stages.size(); ++i) {
    const auto& st = s.stages[i];
    std::snprintf(line, sizeof line, "%-3zu %-24s %8zu %12zu\n", i, st.name.c_str(), st.m, st.params);
    os << line;
  }
  const auto& c = s.conv_layers;
  os << "total params: " << s.total_params << "\n";
  os << "conv layers: " << c.total() << " (" << c.first << "+" << c.down << "+" << c.bottleneck << "+" << c.up
     << "+" << c.transition_down << "+" << c.transition_up << "+" << c.classifier << ")\n";
  os << "pre-softmax maps: " << s.pre_softmax_maps << "\n";
  return os.str();
}

// One record per stage; field order is fixed.
inline std::string format_arch_csv(const ArchSummary& s) {
  std::ostringstream os;
  os << "stage,name,m,params\n";
  for (std::size_t i = 0; i < s.stages.size(); ++i) {
    os << i << "," << s.stages[i].name << "," << s.stages[i].m << "," << s.stages[i].params << "\n";
  }
  return os.str();
}

inline nlohmann::ordered_json arch_json(const ArchSummary& s) {
  nlohmann::ordered_json j;
  j["stages"] = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < s.stages.size(); ++i) {
    nlohmann::ordered_json st;
    st["stage"] = i;
    st["name"] = s.stages[i].name;
    st["m"] = s.stages[i].m;
    st["params"] = s.stages[i].params;
    j["stages"].push_back(st);
  }
  j["total_params"] = s.total_params;
  j["conv_layers"] = s.conv_layers.total();
  j["pre_softmax_maps"] = s.pre_softmax_maps;
  return j;
}

struct ScheduleDiffEntry {
  std::size_t stage = 0;
  std::string name;
  std::size_t computed = 0;
  std::size_t published = 0;
  bool match = false;
  bool known_discrepancy = false;
};

struct ScheduleDiff {
  std::vector<ScheduleDiffEntry> entries;
  std::size_t matches = 0;
  // Mismatches that are not the documented one.
  std::size_t unexplained = 0;
};

// Only defined for the 103 layout; nullopt for other configurations.
inline std::optional<ScheduleDiff> diff_channel_schedule(const ArchConfig& cfg) {
  ArchConfig ref = presets::fc_densenet103(cfg.n_classes);
  ref.dropout = cfg.dropout;
  if (!(cfg == ref)) return std::nullopt;
  const ArchSummary s = summarize(cfg);
  ScheduleDiff d;
  for (std::size_t i = 0; i < reference::kPublishedChannelSchedule103.size(); ++i) {
    ScheduleDiffEntry e{i, s.stages[i].name, s.m[i], reference::kPublishedChannelSchedule103[i], false, false};
    e.match = e.computed == e.published;
    e.known_discrepancy = !e.match && i == reference::kKnownDiscrepancyStage;
    if (e.match) ++d.matches;
    else if (!e.known_discrepancy) ++d.unexplained;
    d.entries.push_back(e);
  }
  return d;
}

struct ParamDiff {
  std::string preset;
  std::size_t computed = 0;
  double published_millions = 0;
  double rel_error = 0;  // (computed - published) / published
  bool within_tolerance = false;
};

inline std::vector<ParamDiff> diff_parameter_counts(std::size_t n_classes = 11) {
  std::vector<ParamDiff> out;
  for (const auto& ref : reference::kPublishedParameterCounts) {
    const ArchConfig cfg = *presets::by_name(std::string(ref.preset));
    ArchConfig c = cfg;
    c.n_classes = n_classes;
    ParamDiff d;
    d.preset = std::string(ref.preset);
    d.computed = parameter_count(c);
    d.published_millions = ref.millions;
    const double published = ref.millions * 1e6;
    d.rel_error = (static_cast<double>(d.computed) - published) / published;
    d.within_tolerance = std::abs(d.rel_error) <= reference::kParameterCountTolerance;
    out.push_back(d);
  }
  return out;
}

inline std::string format_schedule_diff(const ScheduleDiff& d) {
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof line, "%-3s %-24s %9s %9s  %s\n", "#", "stage", "computed", "published", "status");
  os << line;
  for (const auto& e : d.entries) {
    const char* status = e.match ? "ok" : (e.known_discrepancy ? "FLAGGED (documented discrepancy)" : "MISMATCH");
    std::snprintf(line, sizeof line, "%-3zu %-24s %9zu %9zu  %s\n", e.stage, e.name.c_str(), e.computed, e.published,
                  status);
    os << line;
  }
  os << d.matches << "/" << d.entries.size() << " stages match";
  if (d.entries.size() - d.matches - d.unexplained > 0) {
    os << "; the published 578 at the 7-layer TU+DB stage disagrees with 160 + 304 + 7*16 = 576";
  }
  os << "\n";
  return os.str();
}

inline std::string format_param_diff(const std::vector<ParamDiff>& diffs) {
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof line, "%-16s %12s %10s %9s  %s\n", "preset", "computed", "published", "rel.err",
                "status");
  os << line;
  for (const auto& d : diffs) {
    std::snprintf(line, sizeof line, "%-16s %12zu %9.1fM %+8.2f%%  %s\n", d.preset.c_str(), d.computed,
                  d.published_millions, 100.0 * d.rel_error, d.within_tolerance ? "ok" : "OUT OF TOLERANCE");
    os << line;
  }
  return os.str();
}

}  // namespace fcdn
