#pragma once

// DPLT container: "DPLT" | u8 version=1 | u8 kind | u32le H | u32le W | u32le C | payload.
// Payload is row-major, f32 little-endian for kinds 0-2 and raw u8 for kind 3.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <span>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "dpl/core_types.hpp"

namespace dpl {

enum class TensorKind : std::uint8_t { kImage = 0, kScoreMap = 1, kProbMap = 2, kLabelMap = 3 };

using TensorPayload = std::variant<Image, ScoreMap, ProbMap, LabelMap>;

inline constexpr std::array<char, 4> kTensorMagic = {'D', 'P', 'L', 'T'};
inline constexpr std::uint8_t kTensorVersion = 1;
inline constexpr std::size_t kTensorHeaderSize = 4 + 1 + 1 + 3 * 4;
/// Upper bound on element count accepted by the decoder (1 GiB of f32).
inline constexpr std::uint64_t kMaxTensorElements = std::uint64_t{1} << 28;

template <typename G> constexpr TensorKind tensor_kind_of();
template <> constexpr TensorKind tensor_kind_of<Image>() { return TensorKind::kImage; }
template <> constexpr TensorKind tensor_kind_of<ScoreMap>() { return TensorKind::kScoreMap; }
template <> constexpr TensorKind tensor_kind_of<ProbMap>() { return TensorKind::kProbMap; }
template <> constexpr TensorKind tensor_kind_of<LabelMap>() { return TensorKind::kLabelMap; }

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
}

inline std::uint32_t get_u32(std::span<const std::uint8_t> in, std::size_t offset) {
  std::uint32_t v = 0;
  for (int b = 0; b < 4; ++b) v |= std::uint32_t{in[offset + b]} << (8 * b);
  return v;
}

template <typename G>
void encode_into(const G& grid, std::vector<std::uint8_t>& out) {
  using T = typename G::value_type;
  if constexpr (std::is_same_v<T, std::uint8_t>) {
    out.insert(out.end(), grid.data().begin(), grid.data().end());
  } else {
    static_assert(std::is_same_v<T, float>);
    for (float v : grid.data()) put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
}

template <typename G>
G decode_payload(std::span<const std::uint8_t> in, std::uint32_t h, std::uint32_t w,
                 std::uint32_t c) {
  using T = typename G::value_type;
  G grid(h, w, c);
  const std::size_t count = grid.size();
  const std::size_t needed = count * sizeof(T);
  if (in.size() - kTensorHeaderSize < needed) {
    throw Error(ErrorCode::kTruncated, "payload has " +
                                           std::to_string(in.size() - kTensorHeaderSize) +
                                           " bytes, expected " + std::to_string(needed));
  }
  auto dst = grid.data();
  if constexpr (std::is_same_v<T, std::uint8_t>) {
    std::memcpy(dst.data(), in.data() + kTensorHeaderSize, count);
  } else {
    for (std::size_t k = 0; k < count; ++k) {
      dst[k] = std::bit_cast<float>(get_u32(in, kTensorHeaderSize + 4 * k));
    }
  }
  return grid;
}

}  // namespace detail

template <typename G>
std::vector<std::uint8_t> encode_tensor(const G& grid) {
  constexpr TensorKind kind = tensor_kind_of<G>();
  std::vector<std::uint8_t> out;
  out.reserve(kTensorHeaderSize + grid.size() * sizeof(typename G::value_type));
  out.insert(out.end(), kTensorMagic.begin(), kTensorMagic.end());
  out.push_back(kTensorVersion);
  out.push_back(static_cast<std::uint8_t>(kind));
  const std::size_t channels = kind == TensorKind::kLabelMap ? 1 : grid.channels();
  for (std::size_t d : {grid.height(), grid.width(), channels}) {
    if (d > std::numeric_limits<std::uint32_t>::max()) {
      throw Error(ErrorCode::kDimensionOverflow, "dimension does not fit in u32");
    }
    detail::put_u32(out, static_cast<std::uint32_t>(d));
  }
  detail::encode_into(grid, out);
  return out;
}

inline std::vector<std::uint8_t> encode_tensor(const TensorPayload& payload) {
  return std::visit([](const auto& g) { return encode_tensor(g); }, payload);
}

inline TensorPayload decode_tensor(std::span<const std::uint8_t> in) {
  if (in.size() < 4 || std::memcmp(in.data(), kTensorMagic.data(), 4) != 0) {
    throw Error(ErrorCode::kBadMagic, "not a DPLT container");
  }
  if (in.size() < kTensorHeaderSize) throw Error(ErrorCode::kTruncated, "header");
  if (in[4] != kTensorVersion) {
    throw Error(ErrorCode::kBadVersion, "version " + std::to_string(in[4]));
  }
  const std::uint8_t kind = in[5];
  const std::uint32_t h = detail::get_u32(in, 6);
  const std::uint32_t w = detail::get_u32(in, 10);
  const std::uint32_t c = detail::get_u32(in, 14);
  const std::uint64_t plane = std::uint64_t{w} * c;
  if (plane > kMaxTensorElements || (plane != 0 && h > kMaxTensorElements / plane)) {
    throw Error(ErrorCode::kDimensionOverflow,
                std::to_string(h) + "x" + std::to_string(w) + "x" + std::to_string(c));
  }
  switch (static_cast<TensorKind>(kind)) {
    case TensorKind::kImage: return detail::decode_payload<Image>(in, h, w, c);
    case TensorKind::kScoreMap: return detail::decode_payload<ScoreMap>(in, h, w, c);
    case TensorKind::kProbMap: return detail::decode_payload<ProbMap>(in, h, w, c);
    case TensorKind::kLabelMap:
      if (c != 1) throw Error(ErrorCode::kBadKind, "label map must have C=1");
      return detail::decode_payload<LabelMap>(in, h, w, c);
  }
  throw Error(ErrorCode::kBadKind, "kind " + std::to_string(kind));
}

inline void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::kIo, "write failed: " + path.string());
}

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

template <typename G>
void save_tensor(const std::filesystem::path& path, const G& grid) {
  write_bytes(path, encode_tensor(grid));
}

inline TensorPayload load_tensor(const std::filesystem::path& path) {
  try {
    return decode_tensor(read_bytes(path));
  } catch (const Error& e) {
    throw Error(e.code(), path.string() + ": " + e.what());
  }
}

/// Loads a file and insists on a specific payload kind.
template <typename G>
G load_tensor_as(const std::filesystem::path& path) {
  TensorPayload payload = load_tensor(path);
  if (auto* g = std::get_if<G>(&payload)) return std::move(*g);
  throw Error(ErrorCode::kBadKind, path.string() + ": unexpected payload kind");
}

}  // namespace dpl
