#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dpl/error.hpp"

namespace dpl {

/// Pixel value marking "no label": ignored ground truth and unselected pseudo labels.
inline constexpr std::uint8_t kUnlabeled = 255;

struct ImageTag {};
struct ScoreTag {};
struct ProbTag {};
struct LabelTag {};

/// Dense H x W x C grid stored row-major with channels innermost.
/// The tag keeps images, score maps, probability maps and label maps from
/// being mixed up by accident while sharing one storage implementation.
template <typename T, typename Tag>
class Grid {
 public:
  using value_type = T;
  using tag_type = Tag;

  Grid() = default;
  Grid(std::size_t height, std::size_t width, std::size_t channels, T fill = T{})
      : height_(height), width_(width), channels_(channels),
        data_(height * width * channels, fill) {}

  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t channels() const noexcept { return channels_; }
  std::size_t pixels() const noexcept { return height_ * width_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t i, std::size_t j, std::size_t c = 0) {
    return data_[(i * width_ + j) * channels_ + c];
  }
  const T& operator()(std::size_t i, std::size_t j, std::size_t c = 0) const {
    return data_[(i * width_ + j) * channels_ + c];
  }

  std::span<T> pixel(std::size_t index) {
    return {data_.data() + index * channels_, channels_};
  }
  std::span<const T> pixel(std::size_t index) const {
    return {data_.data() + index * channels_, channels_};
  }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  template <typename U, typename OtherTag>
  bool same_shape(const Grid<U, OtherTag>& other) const noexcept {
    return height_ == other.height() && width_ == other.width() && channels_ == other.channels();
  }

  /// Element-type conversion, used to lift f32 artifacts into f64 shadow evaluation.
  template <typename U>
  Grid<U, Tag> cast() const {
    Grid<U, Tag> out(height_, width_, channels_);
    std::transform(data_.begin(), data_.end(), out.storage().begin(),
                   [](T v) { return static_cast<U>(v); });
    return out;
  }

  friend bool operator==(const Grid& a, const Grid& b) = default;

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::size_t channels_ = 0;
  std::vector<T> data_;
};

template <typename T> using BasicImage = Grid<T, ImageTag>;
template <typename T> using BasicScoreMap = Grid<T, ScoreTag>;
template <typename T> using BasicProbMap = Grid<T, ProbTag>;

using Image = BasicImage<float>;
using ScoreMap = BasicScoreMap<float>;
using ProbMap = BasicProbMap<float>;
using LabelMap = Grid<std::uint8_t, LabelTag>;

inline LabelMap make_label_map(std::size_t height, std::size_t width,
                               std::uint8_t fill = kUnlabeled) {
  return LabelMap(height, width, 1, fill);
}

template <typename A, typename B>
void require_same_shape(const A& a, const B& b, const char* where) {
  if (a.height() != b.height() || a.width() != b.width() || a.channels() != b.channels()) {
    throw Error(ErrorCode::kShapeMismatch,
                std::string(where) + ": " + std::to_string(a.height()) + "x" +
                    std::to_string(a.width()) + "x" + std::to_string(a.channels()) + " vs " +
                    std::to_string(b.height()) + "x" + std::to_string(b.width()) + "x" +
                    std::to_string(b.channels()));
  }
}

template <typename A, typename B>
void require_same_extent(const A& a, const B& b, const char* where) {
  if (a.height() != b.height() || a.width() != b.width()) {
    throw Error(ErrorCode::kShapeMismatch,
                std::string(where) + ": " + std::to_string(a.height()) + "x" +
                    std::to_string(a.width()) + " vs " + std::to_string(b.height()) + "x" +
                    std::to_string(b.width()));
  }
}

// Invariant checks. Each throws dpl::Error on violation.

template <typename T>
void validate(const BasicImage<T>& img) {
  if (img.height() < 1 || img.width() < 1 || img.channels() != 3) {
    throw Error(ErrorCode::kInvalidArgument, "image must be HxWx3 with H,W >= 1");
  }
  for (T v : img.data()) {
    if (!std::isfinite(v) || v < T(0) || v > T(1)) {
      throw Error(ErrorCode::kInvalidArgument, "image intensity outside [0, 1]");
    }
  }
}

template <typename T>
void validate(const BasicScoreMap<T>& scores) {
  if (scores.channels() < 2) throw Error(ErrorCode::kInvalidArgument, "score map needs C >= 2");
  for (T v : scores.data()) {
    if (!std::isfinite(v)) throw Error(ErrorCode::kNonFinite, "score map");
  }
}

template <typename T>
void validate(const BasicProbMap<T>& probs, double tolerance = 1e-5) {
  if (probs.channels() < 2) throw Error(ErrorCode::kInvalidArgument, "prob map needs C >= 2");
  for (std::size_t p = 0; p < probs.pixels(); ++p) {
    double sum = 0.0;
    for (T v : probs.pixel(p)) {
      if (!std::isfinite(v) || v < T(0)) {
        throw Error(ErrorCode::kInvalidArgument, "probability negative or non-finite");
      }
      sum += v;
    }
    if (std::abs(sum - 1.0) > tolerance) {
      throw Error(ErrorCode::kInvalidArgument, "pixel probabilities do not sum to 1");
    }
  }
}

inline void validate(const LabelMap& labels, std::size_t classes) {
  for (std::uint8_t v : labels.data()) {
    if (v != kUnlabeled && v >= classes) {
      throw Error(ErrorCode::kInvalidArgument, "label id out of range");
    }
  }
}

/// Per-pixel softmax with max subtraction. Adding a constant to every score of
/// a pixel leaves the result bit-identical as long as the shifted scores are
/// exactly representable.
template <typename T>
BasicProbMap<T> softmax(const BasicScoreMap<T>& scores) {
  BasicProbMap<T> out(scores.height(), scores.width(), scores.channels());
  for (std::size_t p = 0; p < scores.pixels(); ++p) {
    auto in = scores.pixel(p);
    auto dst = out.pixel(p);
    T max_score = in[0];
    for (T v : in) {
      if (!std::isfinite(v)) throw Error(ErrorCode::kNonFinite, "softmax input");
      max_score = std::max(max_score, v);
    }
    double sum = 0.0;
    for (std::size_t c = 0; c < in.size(); ++c) {
      const double e = std::exp(static_cast<double>(in[c] - max_score));
      dst[c] = static_cast<T>(e);
      sum += e;
    }
    for (T& v : dst) v = static_cast<T>(static_cast<double>(v) / sum);
  }
  return out;
}

/// Index of the largest entry; ties go to the lowest index.
template <typename T>
std::size_t argmax(std::span<const T> values) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < values.size(); ++c) {
    if (values[c] > values[best]) best = c;
  }
  return best;
}

template <typename T, typename Tag>
LabelMap argmax_labels(const Grid<T, Tag>& probs) {
  LabelMap out = make_label_map(probs.height(), probs.width());
  for (std::size_t p = 0; p < probs.pixels(); ++p) {
    out.data()[p] = static_cast<std::uint8_t>(argmax(probs.pixel(p)));
  }
  return out;
}

}  // namespace dpl
