#pragma once

// Labelled samples, augmentation, padding, the synthetic shape dataset and
// the on-disk dataset layout.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fcdn/errors.hpp"
#include "fcdn/image_io.hpp"
#include "fcdn/rng.hpp"
#include "fcdn/tensor.hpp"

namespace fcdn {

inline constexpr std::int32_t kDefaultVoidLabel = 255;

struct LabelMap {
  std::size_t h = 0;
  std::size_t w = 0;
  std::vector<std::int32_t> data;  // row-major

  std::int32_t& at(std::size_t y, std::size_t x) { return data[y * w + x]; }
  std::int32_t at(std::size_t y, std::size_t x) const { return data[y * w + x]; }
  bool operator==(const LabelMap&) const = default;
};

// Image is (1, 3, h, w) with values in [0, 1].
struct LabeledSample {
  std::string id;
  Tensor<float> image;
  LabelMap labels;
  std::int32_t void_label = kDefaultVoidLabel;

  std::size_t height() const { return labels.h; }
  std::size_t width() const { return labels.w; }
};

struct DatasetSplit {
  std::vector<LabeledSample> train;
  std::vector<LabeledSample> val;
  std::vector<LabeledSample> test;
  std::size_t n_classes = 0;
  std::vector<std::string> class_names;

  std::size_t size() const { return train.size() + val.size() + test.size(); }
};

enum class FlipAxis {
  horizontal,  // mirror columns (left <-> right)
  vertical,    // mirror rows (top <-> bottom)
};

inline std::string to_string(FlipAxis a) { return a == FlipAxis::horizontal ? "horizontal" : "vertical"; }

inline FlipAxis parse_flip_axis(const std::string& s) {
  if (s == "horizontal") return FlipAxis::horizontal;
  if (s == "vertical") return FlipAxis::vertical;
  throw ConfigError(0, "flip axis must be 'horizontal' or 'vertical', got '" + s + "'");
}

// Window [top, top + h) x [left, left + w) of a sample.
inline LabeledSample crop_window(const LabeledSample& s, std::size_t top, std::size_t left, std::size_t h,
                                 std::size_t w) {
  if (top + h > s.height() || left + w > s.width()) {
    throw DegenerateInputError("crop " + std::to_string(h) + "x" + std::to_string(w) + " at (" +
                               std::to_string(top) + "," + std::to_string(left) + ") exceeds image " +
                               std::to_string(s.height()) + "x" + std::to_string(s.width()));
  }
  LabeledSample out;
  out.id = s.id;
  out.void_label = s.void_label;
  out.image = Tensor<float>(Shape{1, s.image.shape().c, h, w});
  out.labels = LabelMap{h, w, std::vector<std::int32_t>(h * w)};
  for (std::size_t c = 0; c < s.image.shape().c; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out.image.at(0, c, y, x) = s.image.at(0, c, top + y, left + x);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) out.labels.at(y, x) = s.labels.at(top + y, left + x);
  return out;
}

// Offsets uniform over every valid position; image and labels cut identically.
inline LabeledSample random_crop(const LabeledSample& s, std::size_t h, std::size_t w, Rng& rng) {
  if (h > s.height() || w > s.width()) {
    throw DegenerateInputError("crop " + std::to_string(h) + "x" + std::to_string(w) +
                               " larger than image " + std::to_string(s.height()) + "x" +
                               std::to_string(s.width()));
  }
  const std::size_t top = rng.below(s.height() - h + 1);
  const std::size_t left = rng.below(s.width() - w + 1);
  return crop_window(s, top, left, h, w);
}

inline LabeledSample flip_now(const LabeledSample& s, FlipAxis axis) {
  LabeledSample out = s;
  const std::size_t h = s.height(), w = s.width();
  for (std::size_t c = 0; c < s.image.shape().c; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t sy = axis == FlipAxis::vertical ? h - 1 - y : y;
        const std::size_t sx = axis == FlipAxis::horizontal ? w - 1 - x : x;
        out.image.at(0, c, y, x) = s.image.at(0, c, sy, sx);
        if (c == 0) out.labels.at(y, x) = s.labels.at(sy, sx);
      }
  return out;
}

// Mirrors with probability 0.5.
inline LabeledSample flip(const LabeledSample& s, Rng& rng, FlipAxis axis = FlipAxis::horizontal) {
  if (rng.bernoulli(0.5)) return flip_now(s, axis);
  return s;
}

struct PaddedSample {
  LabeledSample sample;
  std::size_t original_h = 0;
  std::size_t original_w = 0;
};

inline std::size_t round_up(std::size_t v, std::size_t multiple) {
  return (v + multiple - 1) / multiple * multiple;
}

// Zero-pads the image and void-pads the labels at the bottom/right up to the
// next multiple.
inline PaddedSample pad_to_multiple(const LabeledSample& s, std::size_t multiple) {
  if (multiple == 0) throw ConfigError(0, "pad multiple must be >= 1");
  const std::size_t h = round_up(s.height(), multiple), w = round_up(s.width(), multiple);
  PaddedSample p{s, s.height(), s.width()};
  if (h == s.height() && w == s.width()) return p;
  LabeledSample& o = p.sample;
  o.image = Tensor<float>(Shape{1, s.image.shape().c, h, w});
  o.labels = LabelMap{h, w, std::vector<std::int32_t>(h * w, s.void_label)};
  for (std::size_t c = 0; c < s.image.shape().c; ++c)
    for (std::size_t y = 0; y < s.height(); ++y)
      for (std::size_t x = 0; x < s.width(); ++x) o.image.at(0, c, y, x) = s.image.at(0, c, y, x);
  for (std::size_t y = 0; y < s.height(); ++y)
    for (std::size_t x = 0; x < s.width(); ++x) o.labels.at(y, x) = s.labels.at(y, x);
  return p;
}

// Top-left (h, w) window of a row-major (full_h, full_w) class map.
inline std::vector<std::int32_t> crop_class_map(std::span<const std::int32_t> map, std::size_t full_w,
                                                std::size_t h, std::size_t w) {
  std::vector<std::int32_t> out(h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) out[y * w + x] = map[y * full_w + x];
  return out;
}

// Stacks equally sized samples into an (n, 3, h, w) batch and an (n, h, w)
// target vector.
struct Batch {
  Tensor<float> images;
  std::vector<std::int32_t> targets;
};

inline Batch make_batch(std::span<const LabeledSample> samples) {
  if (samples.empty()) throw DegenerateInputError("empty batch");
  const std::size_t c = samples[0].image.shape().c, h = samples[0].height(), w = samples[0].width();
  Batch b{Tensor<float>(Shape{samples.size(), c, h, w}), {}};
  b.targets.reserve(samples.size() * h * w);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    if (s.height() != h || s.width() != w || s.image.shape().c != c) {
      throw ShapeError("batch samples differ in size: " + s.image.shape().str() + " vs " +
                       samples[0].image.shape().str());
    }
    std::copy(s.image.data().begin(), s.image.data().end(), b.images.plane(i, 0));
    b.targets.insert(b.targets.end(), s.labels.data.begin(), s.labels.data.end());
  }
  return b;
}

// ---------------------------------------------------------------------------
// Synthetic shapes

struct SynthConfig {
  std::size_t n_train = 200;
  std::size_t n_val = 40;
  std::size_t n_test = 0;
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t n_classes = 3;      // class 0 is background
  std::size_t shapes_per_image = 4;
  double void_fraction = 0.5;     // share of class-boundary pixels marked void
  double noise = 0.08;            // per-pixel uniform noise amplitude
  double color_jitter = 0.05;     // per-shape color offset amplitude
};

// Base color of each class, well separated in RGB.
inline std::array<float, 3> synth_class_color(std::size_t c) {
  static const std::array<std::array<float, 3>, 12> palette = {{
      {0.15f, 0.15f, 0.15f}, {0.85f, 0.20f, 0.20f}, {0.20f, 0.75f, 0.25f}, {0.20f, 0.30f, 0.85f},
      {0.85f, 0.85f, 0.20f}, {0.80f, 0.25f, 0.80f}, {0.20f, 0.80f, 0.80f}, {0.90f, 0.55f, 0.15f},
      {0.55f, 0.35f, 0.15f}, {0.60f, 0.60f, 0.60f}, {0.95f, 0.95f, 0.95f}, {0.40f, 0.10f, 0.55f},
  }};
  return palette.at(c);
}

inline LabeledSample synth_sample(const SynthConfig& cfg, std::string id, Rng& rng) {
  const std::size_t h = cfg.height, w = cfg.width;
  LabelMap labels{h, w, std::vector<std::int32_t>(h * w, 0)};
  std::vector<std::array<float, 3>> color(h * w, synth_class_color(0));
  for (std::size_t k = 0; k < cfg.shapes_per_image; ++k) {
    const std::int32_t cls = static_cast<std::int32_t>(1 + rng.below(cfg.n_classes - 1));
    auto base = synth_class_color(static_cast<std::size_t>(cls));
    for (float& v : base) v += static_cast<float>(rng.uniform(-cfg.color_jitter, cfg.color_jitter));
    const bool disc = rng.bernoulli(0.5);
    const double min_extent = std::max<double>(3.0, static_cast<double>(std::min(h, w)) / 8.0);
    const double max_extent = std::max(min_extent + 1.0, static_cast<double>(std::min(h, w)) / 3.0);
    const double cy = rng.uniform(0.0, static_cast<double>(h));
    const double cx = rng.uniform(0.0, static_cast<double>(w));
    const double ry = rng.uniform(min_extent, max_extent);
    const double rx = disc ? ry : rng.uniform(min_extent, max_extent);
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const double dy = static_cast<double>(y) + 0.5 - cy, dx = static_cast<double>(x) + 0.5 - cx;
        const bool inside = disc ? dy * dy + dx * dx <= ry * ry : std::abs(dy) <= ry && std::abs(dx) <= rx;
        if (!inside) continue;
        labels.at(y, x) = cls;
        color[y * w + x] = base;
      }
    }
  }
  LabeledSample s;
  s.id = std::move(id);
  s.image = Tensor<float>(Shape{1, 3, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = color[y * w + x][c] + rng.uniform(-cfg.noise, cfg.noise);
        s.image.at(0, c, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
  // Pixels on a class boundary become void with probability void_fraction.
  LabelMap out = labels;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::int32_t c = labels.at(y, x);
      const bool edge = (y > 0 && labels.at(y - 1, x) != c) || (y + 1 < h && labels.at(y + 1, x) != c) ||
                        (x > 0 && labels.at(y, x - 1) != c) || (x + 1 < w && labels.at(y, x + 1) != c);
      if (edge && rng.bernoulli(cfg.void_fraction)) out.at(y, x) = kDefaultVoidLabel;
    }
  s.labels = std::move(out);
  return s;
}

inline DatasetSplit synth_dataset(const SynthConfig& cfg, Rng& rng) {
  if (cfg.n_classes < 2 || cfg.n_classes > 12) {
    throw ConfigError(0, "synthetic dataset supports 2..12 classes, got " + std::to_string(cfg.n_classes));
  }
  if (cfg.height < 4 || cfg.width < 4) throw ConfigError(0, "synthetic images must be at least 4x4");
  DatasetSplit d;
  d.n_classes = cfg.n_classes;
  d.class_names.push_back("background");
  for (std::size_t c = 1; c < cfg.n_classes; ++c) d.class_names.push_back("shape" + std::to_string(c));
  auto fill = [&](std::vector<LabeledSample>& dst, const char* prefix, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%s_%04zu", prefix, i);
      dst.push_back(synth_sample(cfg, buf, rng));
    }
  };
  fill(d.train, "train", cfg.n_train);
  fill(d.val, "val", cfg.n_val);
  fill(d.test, "test", cfg.n_test);
  return d;
}

// ---------------------------------------------------------------------------
// On-disk layout:
//   <root>/classes.txt                       optional, one class name per line
//   <root>/{train,val,test}/images/<stem>.ppm  8-bit RGB
//   <root>/{train,val,test}/labels/<stem>.pgm  8-bit class index, 255 = void

inline const std::array<const char*, 3>& split_names() {
  static const std::array<const char*, 3> names = {"train", "val", "test"};
  return names;
}

inline std::vector<LabeledSample>& split_of(DatasetSplit& d, std::size_t i) {
  return i == 0 ? d.train : (i == 1 ? d.val : d.test);
}
inline const std::vector<LabeledSample>& split_of(const DatasetSplit& d, std::size_t i) {
  return i == 0 ? d.train : (i == 1 ? d.val : d.test);
}

inline LabeledSample sample_from_images(std::string id, const Image8& rgb, const Image8& lbl) {
  if (rgb.channels != 3) throw IoError(id + ": image must be RGB (P6)");
  if (lbl.channels != 1) throw IoError(id + ": label map must be single-channel (P5)");
  if (rgb.h != lbl.h || rgb.w != lbl.w) {
    throw IoError(id + ": image is " + std::to_string(rgb.h) + "x" + std::to_string(rgb.w) + ", labels " +
                  std::to_string(lbl.h) + "x" + std::to_string(lbl.w));
  }
  LabeledSample s;
  s.id = std::move(id);
  s.image = Tensor<float>(Shape{1, 3, rgb.h, rgb.w});
  s.labels = LabelMap{rgb.h, rgb.w, std::vector<std::int32_t>(rgb.h * rgb.w)};
  for (std::size_t y = 0; y < rgb.h; ++y)
    for (std::size_t x = 0; x < rgb.w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        s.image.at(0, c, y, x) = static_cast<float>(rgb.pixels[(y * rgb.w + x) * 3 + c]) / 255.0f;
      }
      s.labels.at(y, x) = lbl.pixels[y * lbl.w + x];
    }
  return s;
}

// Missing directories produce warnings rather than errors; unmatched image/
// label pairs and out-of-range labels are errors.
inline DatasetSplit load_dataset(const std::filesystem::path& root, std::vector<std::string>* warnings = nullptr) {
  namespace fs = std::filesystem;
  auto warn = [warnings](const std::string& m) {
    if (warnings) warnings->push_back(m);
  };
  if (!fs::is_directory(root)) throw IoError("dataset directory not found: " + root.string());
  DatasetSplit d;
  const fs::path classes = root / "classes.txt";
  if (fs::exists(classes)) {
    std::ifstream in(classes);
    for (std::string line; std::getline(in, line);) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty()) d.class_names.push_back(line);
    }
    d.n_classes = d.class_names.size();
  }
  std::int32_t max_label = -1;
  for (std::size_t si = 0; si < 3; ++si) {
    const fs::path images = root / split_names()[si] / "images";
    const fs::path labels = root / split_names()[si] / "labels";
    if (!fs::is_directory(images)) continue;
    std::map<std::string, fs::path> image_files, label_files;
    for (const auto& e : fs::directory_iterator(images))
      if (e.is_regular_file()) image_files[e.path().stem().string()] = e.path();
    if (fs::is_directory(labels)) {
      for (const auto& e : fs::directory_iterator(labels))
        if (e.is_regular_file()) label_files[e.path().stem().string()] = e.path();
    }
    for (const auto& [stem, path] : image_files) {
      auto it = label_files.find(stem);
      if (it == label_files.end()) {
        throw IoError("missing label file for " + path.string() + " (expected " + (labels / stem).string() + ".*)");
      }
      LabeledSample s = sample_from_images(std::string(split_names()[si]) + "/" + stem, read_netpbm(path),
                                           read_netpbm(it->second));
      for (std::int32_t v : s.labels.data) {
        if (v == s.void_label) continue;
        if (d.n_classes > 0 && static_cast<std::size_t>(v) >= d.n_classes) {
          throw IoError(it->second.string() + ": label " + std::to_string(v) + " out of range for " +
                        std::to_string(d.n_classes) + " classes");
        }
        max_label = std::max(max_label, v);
      }
      split_of(d, si).push_back(std::move(s));
    }
    for (const auto& [stem, path] : label_files) {
      if (!image_files.count(stem)) throw IoError("label file without image: " + path.string());
    }
  }
  if (d.n_classes == 0 && max_label >= 0) {
    d.n_classes = static_cast<std::size_t>(max_label) + 1;
    for (std::size_t c = 0; c < d.n_classes; ++c) d.class_names.push_back("class" + std::to_string(c));
  }
  if (d.size() == 0) warn("no samples found under " + root.string());
  return d;
}

inline void save_dataset(const DatasetSplit& d, const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  fs::create_directories(root);
  {
    std::ofstream out(root / "classes.txt");
    for (const auto& n : d.class_names) out << n << "\n";
  }
  for (std::size_t si = 0; si < 3; ++si) {
    const auto& samples = split_of(d, si);
    if (samples.empty()) continue;
    const fs::path images = root / split_names()[si] / "images";
    const fs::path labels = root / split_names()[si] / "labels";
    fs::create_directories(images);
    fs::create_directories(labels);
    for (const auto& s : samples) {
      std::string stem = s.id;
      if (auto slash = stem.rfind('/'); slash != std::string::npos) stem = stem.substr(slash + 1);
      Image8 rgb{s.height(), s.width(), 3, std::vector<std::uint8_t>(s.height() * s.width() * 3)};
      Image8 lbl{s.height(), s.width(), 1, std::vector<std::uint8_t>(s.height() * s.width())};
      for (std::size_t y = 0; y < s.height(); ++y)
        for (std::size_t x = 0; x < s.width(); ++x) {
          for (std::size_t c = 0; c < 3; ++c) {
            const float v = std::clamp(s.image.at(0, c, y, x), 0.0f, 1.0f);
            rgb.pixels[(y * s.width() + x) * 3 + c] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
          }
          lbl.pixels[y * s.width() + x] = static_cast<std::uint8_t>(s.labels.at(y, x));
        }
      write_netpbm(images / (stem + ".ppm"), rgb);
      write_netpbm(labels / (stem + ".pgm"), lbl);
    }
  }
}

}  // namespace fcdn
