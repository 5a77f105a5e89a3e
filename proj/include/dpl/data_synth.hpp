#pragma once

// Procedural two-domain benchmark. Source scenes are flat-coloured shapes on a
// background with light texture noise; target scenes are drawn the same way
// and then pushed through a hidden affine colour shift plus sensor noise.
// Class ids: 0 background, 1 disk, 2 rectangle, 3 stripe band.

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "dpl/config.hpp"
#include "dpl/core_types.hpp"
#include "dpl/tensor_io.hpp"

namespace dpl {

inline constexpr std::size_t kSceneClasses = 4;

using Rgb = std::array<double, 3>;

struct SceneSpec {
  std::size_t height = 32;
  std::size_t width = 32;
  std::array<Rgb, kSceneClasses> palette = {{
      {0.30, 0.30, 0.30},  // background
      {0.80, 0.30, 0.25},  // disk
      {0.30, 0.75, 0.35},  // rectangle
      {0.30, 0.40, 0.80},  // stripe band
  }};
  /// Hidden source-to-target colour shift: target = clamp(M * rgb + b).
  /// Mostly per-channel gain and offset: strong enough to move background
  /// pixels across the source classifier's red/blue boundary, yet
  /// identifiable from per-channel image statistics.
  std::array<double, 9> shift_matrix = {0.35, 0.0, 0.0,
                                        0.0, 0.9, 0.0,
                                        0.0, 0.0, 1.25};
  Rgb shift_bias = {0.3, 0.0, -0.2};
  double noise_std = 0.03;
  double texture_std = 0.02;
  std::size_t num_disks = 2;
  std::size_t num_rects = 1;
  std::size_t num_bands = 1;
  /// Probability that each configured shape instance is drawn.
  double shape_prob = 0.9;
  std::uint64_t seed = 7;
};

struct DatasetManifest {
  std::size_t train_source = 200;
  std::size_t train_target = 200;
  std::size_t eval_target = 50;
  std::filesystem::path root;
  SceneSpec spec;
};

struct SourceSample {
  Image image;
  LabelMap labels;
};

struct TargetSample {
  Image image;
  LabelMap labels;      // held out: evaluation only
  Image reference;      // noise-free source-style scene before the shift
};

inline Eigen::Matrix3d shift_matrix_of(const SceneSpec& spec) {
  Eigen::Matrix3d m;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) m(r, c) = spec.shift_matrix[r * 3 + c];
  }
  return m;
}

/// 2-norm condition number of the hidden shift matrix.
inline double shift_condition_number(const SceneSpec& spec) {
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(shift_matrix_of(spec));
  const auto& s = svd.singularValues();
  if (s(2) == 0.0) return std::numeric_limits<double>::infinity();
  return s(0) / s(2);
}

inline void validate(const SceneSpec& spec) {
  if (spec.height < 1 || spec.width < 1) {
    throw Error(ErrorCode::kConfig, "scene size must be at least 1x1");
  }
  for (std::size_t a = 0; a < kSceneClasses; ++a) {
    for (double v : spec.palette[a]) {
      if (!(v >= 0.0 && v <= 1.0)) throw Error(ErrorCode::kConfig, "palette outside [0, 1]");
    }
    for (std::size_t b = a + 1; b < kSceneClasses; ++b) {
      double dist = 0.0;
      for (int c = 0; c < 3; ++c) {
        dist = std::max(dist, std::abs(spec.palette[a][c] - spec.palette[b][c]));
      }
      if (dist < 0.2) {
        throw Error(ErrorCode::kConfig, "palette entries " + std::to_string(a) + " and " +
                                            std::to_string(b) + " closer than 0.2");
      }
    }
  }
  if (!(shift_condition_number(spec) < 100.0)) {
    throw Error(ErrorCode::kConfig, "hidden shift matrix is ill-conditioned");
  }
  if (spec.noise_std < 0.0 || spec.texture_std < 0.0) {
    throw Error(ErrorCode::kConfig, "noise std must be non-negative");
  }
  if (!(spec.shape_prob >= 0.0 && spec.shape_prob <= 1.0)) {
    throw Error(ErrorCode::kConfig, "shape_prob must lie in [0, 1]");
  }
}

inline void validate(const DatasetManifest& m) {
  if (m.train_source < 1 || m.train_target < 1 || m.eval_target < 1) {
    throw Error(ErrorCode::kConfig, "dataset counts must be >= 1");
  }
  validate(m.spec);
}

namespace detail {

enum class Stream : std::uint64_t { kSource = 1, kTarget = 2, kEval = 3 };

inline std::mt19937_64 scene_rng(const SceneSpec& spec, Stream stream, std::size_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(index),
                    static_cast<std::uint32_t>(static_cast<std::uint64_t>(index) >> 32)};
  return std::mt19937_64(seq);
}

/// Draws the label layout and textured source-style colours.
inline SourceSample draw_scene(const SceneSpec& spec, std::mt19937_64& rng) {
  const std::size_t h = spec.height;
  const std::size_t w = spec.width;
  SourceSample out{Image(h, w, 3), make_label_map(h, w, 0)};
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform_int = [&](int lo, int hi) {
    return std::uniform_int_distribution<int>(lo, hi)(rng);
  };
  const int H = static_cast<int>(h);
  const int W = static_cast<int>(w);
  const int scale = std::max(1, std::min(H, W) / 8);

  for (std::size_t n = 0; n < spec.num_bands; ++n) {
    if (unit(rng) >= spec.shape_prob) continue;
    const int thickness = uniform_int(scale, 2 * scale);
    const int top = uniform_int(0, std::max(0, H - thickness));
    for (int i = top; i < std::min(H, top + thickness); ++i) {
      for (int j = 0; j < W; ++j) out.labels(i, j) = 3;
    }
  }
  for (std::size_t n = 0; n < spec.num_rects; ++n) {
    if (unit(rng) >= spec.shape_prob) continue;
    const int rh = uniform_int(scale + 1, 3 * scale);
    const int rw = uniform_int(scale + 1, 3 * scale);
    const int top = uniform_int(0, std::max(0, H - rh));
    const int left = uniform_int(0, std::max(0, W - rw));
    for (int i = top; i < std::min(H, top + rh); ++i) {
      for (int j = left; j < std::min(W, left + rw); ++j) out.labels(i, j) = 2;
    }
  }
  for (std::size_t n = 0; n < spec.num_disks; ++n) {
    if (unit(rng) >= spec.shape_prob) continue;
    const double radius = scale * (0.75 + 1.0 * unit(rng));
    const double ci = unit(rng) * (H - 1);
    const double cj = unit(rng) * (W - 1);
    for (int i = 0; i < H; ++i) {
      for (int j = 0; j < W; ++j) {
        if ((i - ci) * (i - ci) + (j - cj) * (j - cj) <= radius * radius) out.labels(i, j) = 1;
      }
    }
  }

  std::normal_distribution<double> texture(0.0, 1.0);
  for (std::size_t p = 0; p < out.image.pixels(); ++p) {
    const Rgb& colour = spec.palette[out.labels.data()[p]];
    auto px = out.image.pixel(p);
    for (int c = 0; c < 3; ++c) {
      const double noise = spec.texture_std > 0.0 ? spec.texture_std * texture(rng) : 0.0;
      px[c] = static_cast<float>(std::clamp(colour[c] + noise, 0.0, 1.0));
    }
  }
  return out;
}

inline Image apply_shift(const SceneSpec& spec, const Image& scene) {
  Image out(scene.height(), scene.width(), 3);
  for (std::size_t p = 0; p < scene.pixels(); ++p) {
    auto x = scene.pixel(p);
    auto y = out.pixel(p);
    for (int r = 0; r < 3; ++r) {
      double z = spec.shift_bias[r];
      for (int c = 0; c < 3; ++c) z += spec.shift_matrix[r * 3 + c] * static_cast<double>(x[c]);
      y[r] = static_cast<float>(std::clamp(z, 0.0, 1.0));
    }
  }
  return out;
}

inline TargetSample draw_target(const SceneSpec& spec, Stream stream, std::size_t index) {
  auto rng = scene_rng(spec, stream, index);
  SourceSample scene = draw_scene(spec, rng);
  Image shifted = apply_shift(spec, scene.image);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (float& v : shifted.data()) {
    const double n = spec.noise_std > 0.0 ? spec.noise_std * noise(rng) : 0.0;
    v = static_cast<float>(std::clamp(static_cast<double>(v) + n, 0.0, 1.0));
  }
  return {std::move(shifted), std::move(scene.labels), std::move(scene.image)};
}

}  // namespace detail

/// Labeled source-domain sample; deterministic in (seed, index).
inline SourceSample gen_source(const SceneSpec& spec, std::size_t index) {
  auto rng = detail::scene_rng(spec, detail::Stream::kSource, index);
  return detail::draw_scene(spec, rng);
}

/// Training-split target sample. Its labels are only used by tests.
inline TargetSample gen_target(const SceneSpec& spec, std::size_t index) {
  return detail::draw_target(spec, detail::Stream::kTarget, index);
}

/// Held-out evaluation target sample.
inline TargetSample gen_eval_target(const SceneSpec& spec, std::size_t index) {
  return detail::draw_target(spec, detail::Stream::kEval, index);
}

/// The hidden shift without clamping or noise; used to check invertibility.
inline Image shift_unclamped(const SceneSpec& spec, const Image& scene, bool inverse) {
  Eigen::Matrix3d m = shift_matrix_of(spec);
  Eigen::Vector3d b(spec.shift_bias[0], spec.shift_bias[1], spec.shift_bias[2]);
  if (inverse) {
    m = m.inverse().eval();
    b = -(m * b);
  }
  Image out(scene.height(), scene.width(), 3);
  for (std::size_t p = 0; p < scene.pixels(); ++p) {
    auto x = scene.pixel(p);
    const Eigen::Vector3d y = m * Eigen::Vector3d(x[0], x[1], x[2]) + b;
    for (int c = 0; c < 3; ++c) out.pixel(p)[c] = static_cast<float>(y(c));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Config and manifest text

namespace detail {

inline std::string join(std::span<const double> values) {
  std::string out;
  for (std::size_t k = 0; k < values.size(); ++k) {
    if (k) out += ",";
    out += format_double(values[k]);
  }
  return out;
}

}  // namespace detail

/// Reads scene and dataset keys from a config, consuming them.
inline DatasetManifest manifest_from_config(KeyValues& kv) {
  DatasetManifest m;
  SceneSpec& s = m.spec;
  s.height = kv.get_uint("height", s.height);
  s.width = kv.get_uint("width", s.width);
  for (std::size_t c = 0; c < kSceneClasses; ++c) {
    const std::string key = "palette_" + std::to_string(c);
    auto v = kv.get_doubles(key, {s.palette[c][0], s.palette[c][1], s.palette[c][2]});
    s.palette[c] = {v[0], v[1], v[2]};
  }
  auto mat = kv.get_doubles("shift_matrix",
                            std::vector<double>(s.shift_matrix.begin(), s.shift_matrix.end()));
  std::copy(mat.begin(), mat.end(), s.shift_matrix.begin());
  auto bias = kv.get_doubles("shift_bias", {s.shift_bias[0], s.shift_bias[1], s.shift_bias[2]});
  s.shift_bias = {bias[0], bias[1], bias[2]};
  s.noise_std = kv.get_double("noise_std", s.noise_std);
  s.texture_std = kv.get_double("texture_std", s.texture_std);
  s.num_disks = kv.get_uint("num_disks", s.num_disks);
  s.num_rects = kv.get_uint("num_rects", s.num_rects);
  s.num_bands = kv.get_uint("num_bands", s.num_bands);
  s.shape_prob = kv.get_double("shape_prob", s.shape_prob);
  s.seed = kv.get_uint("data_seed", s.seed);
  m.train_source = kv.get_uint("train_source", m.train_source);
  m.train_target = kv.get_uint("train_target", m.train_target);
  m.eval_target = kv.get_uint("eval_target", m.eval_target);
  validate(m);
  return m;
}

inline std::string manifest_text(const DatasetManifest& m) {
  const SceneSpec& s = m.spec;
  std::string out;
  auto line = [&](const std::string& k, const std::string& v) { out += k + "=" + v + "\n"; };
  line("height", std::to_string(s.height));
  line("width", std::to_string(s.width));
  line("classes", std::to_string(kSceneClasses));
  for (std::size_t c = 0; c < kSceneClasses; ++c) {
    line("palette_" + std::to_string(c), detail::join(s.palette[c]));
  }
  line("shift_matrix", detail::join(s.shift_matrix));
  line("shift_bias", detail::join(s.shift_bias));
  line("noise_std", format_double(s.noise_std));
  line("texture_std", format_double(s.texture_std));
  line("num_disks", std::to_string(s.num_disks));
  line("num_rects", std::to_string(s.num_rects));
  line("num_bands", std::to_string(s.num_bands));
  line("shape_prob", format_double(s.shape_prob));
  line("data_seed", std::to_string(s.seed));
  line("train_source", std::to_string(m.train_source));
  line("train_target", std::to_string(m.train_target));
  line("eval_target", std::to_string(m.eval_target));
  return out;
}

inline DatasetManifest read_manifest(const std::filesystem::path& root) {
  const auto path = root / "manifest.txt";
  if (!std::filesystem::exists(path)) {
    throw Error(ErrorCode::kMissingData, "no dataset manifest at " + path.string());
  }
  KeyValues kv = KeyValues::load(path);
  kv.take("classes");
  DatasetManifest m = manifest_from_config(kv);
  kv.require_all_used();
  m.root = root;
  return m;
}

inline std::string indexed_name(const char* prefix, std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s_%05zu.dplt", prefix, index);
  return buf;
}

/// Writes source/, target/, eval/ and manifest.txt under `m.root`. Rewriting
/// with the same manifest produces identical bytes.
inline void write_dataset(const DatasetManifest& m) {
  validate(m);
  namespace fs = std::filesystem;
  std::error_code ec;
  for (const char* sub : {"source", "target", "eval"}) {
    fs::create_directories(m.root / sub, ec);
    if (ec) throw Error(ErrorCode::kIo, "cannot create " + (m.root / sub).string());
  }
  for (std::size_t k = 0; k < m.train_source; ++k) {
    const SourceSample s = gen_source(m.spec, k);
    save_tensor(m.root / "source" / indexed_name("img", k), s.image);
    save_tensor(m.root / "source" / indexed_name("lbl", k), s.labels);
  }
  for (std::size_t k = 0; k < m.train_target; ++k) {
    save_tensor(m.root / "target" / indexed_name("img", k), gen_target(m.spec, k).image);
  }
  for (std::size_t k = 0; k < m.eval_target; ++k) {
    const TargetSample t = gen_eval_target(m.spec, k);
    save_tensor(m.root / "eval" / indexed_name("img", k), t.image);
    save_tensor(m.root / "eval" / indexed_name("lbl", k), t.labels);
  }
  const std::string text = manifest_text(m);
  write_bytes(m.root / "manifest.txt",
              std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

/// Everything training may see: labeled source and unlabeled target images.
struct TrainingData {
  std::vector<Image> source_images;
  std::vector<LabelMap> source_labels;
  std::vector<Image> target_images;
};

/// Held-out target images with ground truth, for evaluation only.
struct EvalData {
  std::vector<Image> images;
  std::vector<LabelMap> labels;
};

inline TrainingData load_training_data(const DatasetManifest& m) {
  TrainingData d;
  for (std::size_t k = 0; k < m.train_source; ++k) {
    d.source_images.push_back(load_tensor_as<Image>(m.root / "source" / indexed_name("img", k)));
    d.source_labels.push_back(load_tensor_as<LabelMap>(m.root / "source" / indexed_name("lbl", k)));
  }
  for (std::size_t k = 0; k < m.train_target; ++k) {
    d.target_images.push_back(load_tensor_as<Image>(m.root / "target" / indexed_name("img", k)));
  }
  return d;
}

inline EvalData load_eval_data(const DatasetManifest& m) {
  EvalData d;
  for (std::size_t k = 0; k < m.eval_target; ++k) {
    d.images.push_back(load_tensor_as<Image>(m.root / "eval" / indexed_name("img", k)));
    d.labels.push_back(load_tensor_as<LabelMap>(m.root / "eval" / indexed_name("lbl", k)));
  }
  return d;
}

/// In-memory equivalents of the on-disk splits, for tests and benchmarks.
inline TrainingData generate_training_data(const DatasetManifest& m) {
  TrainingData d;
  for (std::size_t k = 0; k < m.train_source; ++k) {
    SourceSample s = gen_source(m.spec, k);
    d.source_images.push_back(std::move(s.image));
    d.source_labels.push_back(std::move(s.labels));
  }
  for (std::size_t k = 0; k < m.train_target; ++k) {
    d.target_images.push_back(gen_target(m.spec, k).image);
  }
  return d;
}

inline EvalData generate_eval_data(const DatasetManifest& m) {
  EvalData d;
  for (std::size_t k = 0; k < m.eval_target; ++k) {
    TargetSample t = gen_eval_target(m.spec, k);
    d.images.push_back(std::move(t.image));
    d.labels.push_back(std::move(t.labels));
  }
  return d;
}

}  // namespace dpl
