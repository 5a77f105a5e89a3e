#pragma once

// Pieces of the command-line tool that are worth testing on their own:
// exit-code mapping, seed precedence, directory scans and PPM export.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dpl/config.hpp"
#include "dpl/core_types.hpp"
#include "dpl/error.hpp"
#include "dpl/tensor_io.hpp"

namespace dpl {

inline constexpr int kExitOk = 0;
inline constexpr int kExitOther = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitIo = 3;
inline constexpr int kExitDivergence = 4;

inline int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::kConfig:
    case ErrorCode::kInvalidArgument:
      return kExitConfig;
    case ErrorCode::kIo:
    case ErrorCode::kMissingData:
    case ErrorCode::kBadMagic:
    case ErrorCode::kBadVersion:
    case ErrorCode::kBadKind:
    case ErrorCode::kDimensionOverflow:
    case ErrorCode::kTruncated:
      return kExitIo;
    case ErrorCode::kDivergence:
    case ErrorCode::kNonFinite:
      return kExitDivergence;
    case ErrorCode::kShapeMismatch:
      return kExitOther;
  }
  return kExitOther;
}

/// Applies the seed override with precedence flag > environment > file.
/// `env_value` is the raw DPL_SEED text, if set.
inline void apply_seed_override(KeyValues& kv, std::optional<std::uint64_t> flag,
                                 const char* env_value) {
  if (flag) {
    kv.set("seed", std::to_string(*flag));
    return;
  }
  if (env_value != nullptr && *env_value != '\0') {
    const std::string text(env_value);
    if (text.find_first_not_of("0123456789") != std::string::npos) {
      throw Error(ErrorCode::kConfig, "DPL_SEED must be a non-negative integer, got '" + text + "'");
    }
    kv.set("seed", text);
  }
}

inline KeyValues load_config_with_overrides(const std::filesystem::path& path,
                                            std::optional<std::uint64_t> seed_flag) {
  KeyValues kv = KeyValues::load(path);
  apply_seed_override(kv, seed_flag, std::getenv("DPL_SEED"));
  return kv;
}

/// Regular files in `dir` named `<prefix>_*.dplt`, sorted by name.
inline std::vector<std::filesystem::path> list_tensors(const std::filesystem::path& dir,
                                                       const std::string& prefix) {
  if (!std::filesystem::is_directory(dir)) {
    throw Error(ErrorCode::kMissingData, "not a directory: " + dir.string());
  }
  std::vector<std::filesystem::path> out;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const std::string name = entry.path().filename().string();
    if (name.size() > prefix.size() + 6 && name.rfind(prefix + "_", 0) == 0 &&
        entry.path().extension() == ".dplt") {
      out.push_back(entry.path());
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

/// `img_00012.dplt` -> `lbl_00012.dplt`.
inline std::string swap_prefix(const std::filesystem::path& file, const std::string& from,
                               const std::string& to) {
  const std::string name = file.filename().string();
  if (name.rfind(from, 0) != 0) return to + "_" + name;
  return to + name.substr(from.size());
}

// Fixed colours for class ids; UNLABELED renders black.
inline std::array<std::uint8_t, 3> class_color(std::uint8_t label) {
  static constexpr std::array<std::array<std::uint8_t, 3>, 8> kColors = {{
      {128, 128, 128},
      {230, 60, 50},
      {60, 200, 80},
      {60, 90, 230},
      {240, 220, 40},
      {200, 60, 220},
      {40, 210, 220},
      {255, 255, 255},
  }};
  if (label == kUnlabeled) return {0, 0, 0};
  return kColors[label % kColors.size()];
}

inline std::vector<std::uint8_t> ppm_header(std::size_t h, std::size_t w) {
  const std::string head = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  return {head.begin(), head.end()};
}

/// Binary P6 rendering of an RGB image; values are clamped to [0, 1].
inline std::vector<std::uint8_t> encode_ppm(const Image& img) {
  if (img.channels() != 3) throw Error(ErrorCode::kShapeMismatch, "PPM export needs 3 channels");
  auto out = ppm_header(img.height(), img.width());
  for (float v : img.data()) {
    const double c = std::clamp(static_cast<double>(v), 0.0, 1.0);
    out.push_back(static_cast<std::uint8_t>(std::lround(c * 255.0)));
  }
  return out;
}

inline std::vector<std::uint8_t> encode_ppm(const LabelMap& labels) {
  auto out = ppm_header(labels.height(), labels.width());
  for (std::uint8_t l : labels.data()) {
    const auto c = class_color(l);
    out.insert(out.end(), c.begin(), c.end());
  }
  return out;
}

}  // namespace dpl
