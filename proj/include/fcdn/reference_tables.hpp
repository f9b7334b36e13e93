#pragma once

// Published architecture figures used by `inspect --paper-diff`.
// Bump kReferenceTablesVersion whenever a value here changes.

#include <array>
#include <cstddef>
#include <string_view>

namespace fcdn::reference {

inline constexpr int kReferenceTablesVersion = 1;

// Feature maps at the end of each stage of FC-DenseNet103 as published:
// first conv, five DB+TD stages, bottleneck, five TU+DB stages.
inline constexpr std::array<std::size_t, 12> kPublishedChannelSchedule103 = {
    48, 112, 192, 304, 464, 656, 896, 1088, 816, 578, 384, 256};

// Stage whose published value is known to disagree with the construction
// rule (160 upsampled + 304 skip + 7 * 16 new = 576).
inline constexpr std::size_t kKnownDiscrepancyStage = 9;

inline constexpr std::size_t kPublishedPreSoftmaxMaps103 = 256;
inline constexpr std::size_t kPublishedConvLayers103 = 103;

struct PublishedParams {
  std::string_view preset;
  double millions;  // as printed, one decimal
};

inline constexpr std::array<PublishedParams, 3> kPublishedParameterCounts = {{
    {"fc-densenet56", 1.5},
    {"fc-densenet67", 3.5},
    {"fc-densenet103", 9.4},
}};

// Relative tolerance on parameter counts, covering the unpublished bias and
// transition-up conventions.
inline constexpr double kParameterCountTolerance = 0.02;

}  // namespace fcdn::reference
