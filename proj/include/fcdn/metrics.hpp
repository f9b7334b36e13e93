#pragma once

// Dataset-level IoU, mean IoU and global accuracy from a confusion matrix.

#include <cstddef>
#include <cstdint>
#include <iomanip>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fcdn/errors.hpp"
#include "fcdn/tensor.hpp"

namespace fcdn {

struct Fraction {
  std::uint64_t num = 0;
  std::uint64_t den = 0;
  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
  bool operator==(const Fraction&) const = default;
};

// Rows are target classes, columns predicted classes. Void pixels are never
// counted, so total() is the number of labelled pixels seen.
class ConfusionAccumulator {
 public:
  explicit ConfusionAccumulator(std::size_t n_classes)
      : n_(n_classes), cells_(n_classes * n_classes, 0) {
    if (n_classes == 0) throw ConfigError(0, "confusion matrix needs at least one class");
  }

  std::size_t n_classes() const noexcept { return n_; }
  std::uint64_t at(std::size_t target, std::size_t predicted) const { return cells_.at(target * n_ + predicted); }

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto v : cells_) t += v;
    return t;
  }
  std::uint64_t trace() const {
    std::uint64_t t = 0;
    for (std::size_t c = 0; c < n_; ++c) t += at(c, c);
    return t;
  }
  std::uint64_t row_sum(std::size_t c) const {
    std::uint64_t t = 0;
    for (std::size_t j = 0; j < n_; ++j) t += at(c, j);
    return t;
  }
  std::uint64_t col_sum(std::size_t c) const {
    std::uint64_t t = 0;
    for (std::size_t i = 0; i < n_; ++i) t += at(i, c);
    return t;
  }

  void accumulate(std::span<const std::int32_t> predictions, std::span<const std::int32_t> targets,
                  std::optional<std::int32_t> void_label) {
    if (predictions.size() != targets.size()) {
      throw ShapeError("accumulate: predictions have " + std::to_string(predictions.size()) +
                       " pixels, targets " + std::to_string(targets.size()));
    }
    for (std::size_t i = 0; i < targets.size(); ++i) {
      const std::int32_t t = targets[i];
      if (void_label && t == *void_label) continue;
      const std::int32_t p = predictions[i];
      if (t < 0 || static_cast<std::size_t>(t) >= n_ || p < 0 || static_cast<std::size_t>(p) >= n_) {
        throw ShapeError("accumulate: class index out of range (target " + std::to_string(t) +
                         ", predicted " + std::to_string(p) + ", classes " + std::to_string(n_) + ")");
      }
      ++cells_[static_cast<std::size_t>(t) * n_ + static_cast<std::size_t>(p)];
    }
  }

  void merge(const ConfusionAccumulator& other) {
    if (other.n_ != n_) throw ShapeError("merge: class counts differ");
    for (std::size_t i = 0; i < cells_.size(); ++i) cells_[i] += other.cells_[i];
  }

  // |pred == c and target == c| / |pred == c or target == c|; nullopt when the
  // class appears in neither.
  std::optional<Fraction> iou_fraction(std::size_t c) const {
    const std::uint64_t inter = at(c, c);
    const std::uint64_t uni = row_sum(c) + col_sum(c) - inter;
    if (uni == 0) return std::nullopt;
    return Fraction{inter, uni};
  }

  std::optional<double> iou(std::size_t c) const {
    auto f = iou_fraction(c);
    if (!f) return std::nullopt;
    return f->value();
  }

  // Mean over classes with a nonzero union.
  std::optional<double> mean_iou() const {
    double sum = 0;
    std::size_t counted = 0;
    for (std::size_t c = 0; c < n_; ++c) {
      if (auto v = iou(c)) {
        sum += *v;
        ++counted;
      }
    }
    if (counted == 0) return std::nullopt;
    return sum / static_cast<double>(counted);
  }

  // Mean over classes present in the targets of per-class pixel accuracy.
  std::optional<double> mean_class_accuracy() const {
    double sum = 0;
    std::size_t counted = 0;
    for (std::size_t c = 0; c < n_; ++c) {
      const std::uint64_t row = row_sum(c);
      if (row == 0) continue;
      sum += static_cast<double>(at(c, c)) / static_cast<double>(row);
      ++counted;
    }
    if (counted == 0) return std::nullopt;
    return sum / static_cast<double>(counted);
  }

  std::optional<Fraction> accuracy_fraction() const {
    const std::uint64_t t = total();
    if (t == 0) return std::nullopt;
    return Fraction{trace(), t};
  }

  std::optional<double> global_accuracy() const {
    auto f = accuracy_fraction();
    if (!f) return std::nullopt;
    return f->value();
  }

 private:
  std::size_t n_;
  std::vector<std::uint64_t> cells_;
};

// Per-pixel argmax over channels of (n, c, h, w) scores, lowest index on ties.
// Output is in (n, h, w) order.
template <typename T>
std::vector<std::int32_t> argmax_classes(const Tensor<T>& scores) {
  const auto [n, c, h, w] = scores.shape();
  const std::size_t plane = h * w;
  std::vector<std::int32_t> out(n * plane);
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t i = 0; i < plane; ++i) {
      std::size_t best = 0;
      for (std::size_t ch = 1; ch < c; ++ch) {
        if (scores.plane(s, ch)[i] > scores.plane(s, best)[i]) best = ch;
      }
      out[s * plane + i] = static_cast<std::int32_t>(best);
    }
  }
  return out;
}

// Per-class IoU table followed by mean IoU and global accuracy.
inline std::string format_metric_report(const ConfusionAccumulator& acc,
                                        const std::vector<std::string>& class_names = {}) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << "class                IoU\n";
  for (std::size_t c = 0; c < acc.n_classes(); ++c) {
    std::string name = c < class_names.size() ? class_names[c] : "class" + std::to_string(c);
    os << std::left << std::setw(20) << name << " ";
    if (auto v = acc.iou(c)) {
      os << *v << "\n";
    } else {
      os << "n/a\n";
    }
  }
  auto miou = acc.mean_iou();
  auto gacc = acc.global_accuracy();
  os << std::left << std::setw(20) << "mean IoU" << " ";
  if (miou) os << *miou << "\n"; else os << "n/a\n";
  os << std::left << std::setw(20) << "global accuracy" << " ";
  if (gacc) os << *gacc << "\n"; else os << "n/a\n";
  return os.str();
}

inline nlohmann::json metric_report_json(const ConfusionAccumulator& acc,
                                         const std::vector<std::string>& class_names = {}) {
  nlohmann::json j;
  j["per_class_iou"] = nlohmann::json::array();
  for (std::size_t c = 0; c < acc.n_classes(); ++c) {
    nlohmann::json row;
    row["class"] = c < class_names.size() ? class_names[c] : "class" + std::to_string(c);
    auto v = acc.iou(c);
    row["iou"] = v ? nlohmann::json(*v) : nlohmann::json(nullptr);
    j["per_class_iou"].push_back(row);
  }
  auto miou = acc.mean_iou();
  auto gacc = acc.global_accuracy();
  j["mean_iou"] = miou ? nlohmann::json(*miou) : nlohmann::json(nullptr);
  j["global_accuracy"] = gacc ? nlohmann::json(*gacc) : nlohmann::json(nullptr);
  j["labelled_pixels"] = acc.total();
  return j;
}

}  // namespace fcdn
