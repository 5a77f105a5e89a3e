#pragma once

// Toy differentiable backends with closed-form gradients:
//   * segmenter: linear map over 12 handcrafted per-pixel features
//   * translator: clamped affine colour transform
//   * image discriminator: linear map over 9 global image statistics
//   * feature discriminator: linear map over per-class mean softmax output
//
// All parameter sets keep their parameters in one flat `values` vector so that
// SGD, cloning and checkpointing are shared.

#include <algorithm>
#include <array>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <vector>

#include "dpl/core_types.hpp"

namespace dpl {

inline constexpr std::size_t kFeatureCount = 12;
inline constexpr std::size_t kImageStatCount = 9;
/// Smoothing constant in sqrt(x + eps) - sqrt(eps) used for std and gradient
/// magnitudes. Keeps the features differentiable at zero while mapping flat
/// regions to exactly 0.
inline constexpr double kFeatureEps = 1e-3;

struct FeatureTag {};
template <typename T> using FeatureGrid = Grid<T, FeatureTag>;

namespace detail {

inline double smooth_root(double x) { return std::sqrt(x + kFeatureEps) - std::sqrt(kFeatureEps); }

inline std::size_t clamp_index(std::ptrdiff_t v, std::size_t extent) {
  if (v < 0) return 0;
  if (static_cast<std::size_t>(v) >= extent) return extent - 1;
  return static_cast<std::size_t>(v);
}

/// 3x3 window with clamp-to-edge padding; fills `rows`/`cols` with 9 coordinates.
inline void window3x3(std::size_t i, std::size_t j, std::size_t h, std::size_t w,
                      std::array<std::size_t, 9>& rows, std::array<std::size_t, 9>& cols) {
  std::size_t n = 0;
  for (int di = -1; di <= 1; ++di) {
    for (int dj = -1; dj <= 1; ++dj) {
      rows[n] = clamp_index(static_cast<std::ptrdiff_t>(i) + di, h);
      cols[n] = clamp_index(static_cast<std::ptrdiff_t>(j) + dj, w);
      ++n;
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Features

/// Per-pixel features, channel layout:
///   0-2 RGB, 3-5 3x3 mean, 6-8 3x3 std, 9-11 horizontal gradient magnitude.
template <typename T>
FeatureGrid<T> extract_features(const BasicImage<T>& img) {
  const std::size_t h = img.height();
  const std::size_t w = img.width();
  FeatureGrid<T> out(h, w, kFeatureCount);
  std::array<std::size_t, 9> rows{}, cols{};
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      detail::window3x3(i, j, h, w, rows, cols);
      const std::size_t jl = j == 0 ? 0 : j - 1;
      const std::size_t jr = j + 1 < w ? j + 1 : w - 1;
      for (std::size_t ch = 0; ch < 3; ++ch) {
        double sum = 0.0;
        for (std::size_t n = 0; n < 9; ++n) sum += static_cast<double>(img(rows[n], cols[n], ch));
        const double mean = sum / 9.0;
        double var = 0.0;
        for (std::size_t n = 0; n < 9; ++n) {
          const double d = static_cast<double>(img(rows[n], cols[n], ch)) - mean;
          var += d * d;
        }
        var /= 9.0;
        const double grad =
            0.5 * (static_cast<double>(img(i, jr, ch)) - static_cast<double>(img(i, jl, ch)));
        out(i, j, ch) = img(i, j, ch);
        out(i, j, 3 + ch) = static_cast<T>(mean);
        out(i, j, 6 + ch) = static_cast<T>(detail::smooth_root(var));
        out(i, j, 9 + ch) = static_cast<T>(detail::smooth_root(grad * grad));
      }
    }
  }
  return out;
}

/// Pulls a feature-space gradient back to the image.
template <typename T>
BasicImage<T> features_backward(const BasicImage<T>& img, const FeatureGrid<T>& grad_features) {
  const std::size_t h = img.height();
  const std::size_t w = img.width();
  std::vector<double> acc(img.size(), 0.0);
  auto at = [&](std::size_t i, std::size_t j, std::size_t ch) -> double& {
    return acc[(i * w + j) * 3 + ch];
  };
  std::array<std::size_t, 9> rows{}, cols{};
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      detail::window3x3(i, j, h, w, rows, cols);
      const std::size_t jl = j == 0 ? 0 : j - 1;
      const std::size_t jr = j + 1 < w ? j + 1 : w - 1;
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double g_rgb = static_cast<double>(grad_features(i, j, ch));
        const double g_mean = static_cast<double>(grad_features(i, j, 3 + ch));
        const double g_std = static_cast<double>(grad_features(i, j, 6 + ch));
        const double g_mag = static_cast<double>(grad_features(i, j, 9 + ch));
        at(i, j, ch) += g_rgb;

        double sum = 0.0;
        for (std::size_t n = 0; n < 9; ++n) sum += static_cast<double>(img(rows[n], cols[n], ch));
        const double mean = sum / 9.0;
        double var = 0.0;
        for (std::size_t n = 0; n < 9; ++n) {
          const double d = static_cast<double>(img(rows[n], cols[n], ch)) - mean;
          var += d * d;
        }
        var /= 9.0;
        const double std_scale = g_std / (9.0 * std::sqrt(var + kFeatureEps));
        for (std::size_t n = 0; n < 9; ++n) {
          const double x = static_cast<double>(img(rows[n], cols[n], ch));
          at(rows[n], cols[n], ch) += g_mean / 9.0 + std_scale * (x - mean);
        }

        const double grad =
            0.5 * (static_cast<double>(img(i, jr, ch)) - static_cast<double>(img(i, jl, ch)));
        const double d_grad = g_mag * grad / std::sqrt(grad * grad + kFeatureEps);
        at(i, jr, ch) += 0.5 * d_grad;
        at(i, jl, ch) -= 0.5 * d_grad;
      }
    }
  }
  BasicImage<T> out(h, w, 3);
  for (std::size_t k = 0; k < acc.size(); ++k) out.data()[k] = static_cast<T>(acc[k]);
  return out;
}

// ---------------------------------------------------------------------------
// Shared parameter plumbing

template <typename P>
concept ParamSet = requires(P p) {
  { p.values } -> std::convertible_to<std::vector<typename P::value_type>>;
};

/// Elementwise p - lr * g.
template <ParamSet P>
P sgd_step(P params, const P& grads, double lr) {
  if (params.values.size() != grads.values.size()) {
    throw Error(ErrorCode::kShapeMismatch, "sgd_step parameter/gradient size");
  }
  for (std::size_t k = 0; k < params.values.size(); ++k) {
    params.values[k] = static_cast<typename P::value_type>(
        static_cast<double>(params.values[k]) - lr * static_cast<double>(grads.values[k]));
  }
  return params;
}

template <ParamSet P>
P clone_params(const P& params) {
  return params;
}

/// into += scale * g.
template <ParamSet P>
void accumulate(P& into, const P& g, double scale = 1.0) {
  if (into.values.size() != g.values.size()) {
    throw Error(ErrorCode::kShapeMismatch, "gradient accumulation size");
  }
  for (std::size_t k = 0; k < into.values.size(); ++k) {
    into.values[k] = static_cast<typename P::value_type>(static_cast<double>(into.values[k]) +
                                                         scale * static_cast<double>(g.values[k]));
  }
}

template <ParamSet P>
P zeros_like(const P& params) {
  P out = params;
  std::fill(out.values.begin(), out.values.end(), typename P::value_type{});
  return out;
}

template <ParamSet P>
bool all_finite(const P& params) {
  for (auto v : params.values) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Segmenter

/// Weight matrix (features x classes, row-major) followed by one bias per class.
template <typename T>
struct SegmenterParams {
  using value_type = T;
  std::size_t classes = 0;
  std::vector<T> values;

  SegmenterParams() = default;
  explicit SegmenterParams(std::size_t num_classes)
      : classes(num_classes), values((kFeatureCount + 1) * num_classes, T{}) {}

  T& weight(std::size_t k, std::size_t c) { return values[k * classes + c]; }
  T weight(std::size_t k, std::size_t c) const { return values[k * classes + c]; }
  T& bias(std::size_t c) { return values[kFeatureCount * classes + c]; }
  T bias(std::size_t c) const { return values[kFeatureCount * classes + c]; }

  template <typename U>
  SegmenterParams<U> cast() const {
    SegmenterParams<U> out(classes);
    for (std::size_t k = 0; k < values.size(); ++k) out.values[k] = static_cast<U>(values[k]);
    return out;
  }

  friend bool operator==(const SegmenterParams&, const SegmenterParams&) = default;
};

template <typename T>
BasicScoreMap<T> segmenter_scores(const SegmenterParams<T>& params,
                                  const FeatureGrid<T>& features) {
  const std::size_t classes = params.classes;
  BasicScoreMap<T> out(features.height(), features.width(), classes);
  for (std::size_t p = 0; p < features.pixels(); ++p) {
    auto f = features.pixel(p);
    auto s = out.pixel(p);
    for (std::size_t c = 0; c < classes; ++c) {
      double acc = static_cast<double>(params.bias(c));
      for (std::size_t k = 0; k < kFeatureCount; ++k) {
        acc += static_cast<double>(f[k]) * static_cast<double>(params.weight(k, c));
      }
      s[c] = static_cast<T>(acc);
    }
  }
  return out;
}

template <typename T>
BasicScoreMap<T> segmenter_forward(const SegmenterParams<T>& params, const BasicImage<T>& img) {
  return segmenter_scores(params, extract_features(img));
}

template <typename T>
BasicProbMap<T> segmenter_probs(const SegmenterParams<T>& params, const BasicImage<T>& img) {
  return softmax(segmenter_forward(params, img));
}

/// Parameter gradient given dL/dscores.
template <typename T>
SegmenterParams<T> segmenter_backward(const SegmenterParams<T>& params,
                                      const FeatureGrid<T>& features,
                                      const BasicScoreMap<T>& upstream) {
  require_same_extent(features, upstream, "segmenter_backward");
  const std::size_t classes = params.classes;
  std::vector<double> acc(params.values.size(), 0.0);
  for (std::size_t p = 0; p < features.pixels(); ++p) {
    auto f = features.pixel(p);
    auto g = upstream.pixel(p);
    for (std::size_t c = 0; c < classes; ++c) {
      const double gc = static_cast<double>(g[c]);
      if (gc == 0.0) continue;
      for (std::size_t k = 0; k < kFeatureCount; ++k) {
        acc[k * classes + c] += static_cast<double>(f[k]) * gc;
      }
      acc[kFeatureCount * classes + c] += gc;
    }
  }
  SegmenterParams<T> out(classes);
  for (std::size_t k = 0; k < acc.size(); ++k) out.values[k] = static_cast<T>(acc[k]);
  return out;
}

template <typename T>
SegmenterParams<T> segmenter_backward(const SegmenterParams<T>& params, const BasicImage<T>& img,
                                      const BasicScoreMap<T>& upstream) {
  return segmenter_backward(params, extract_features(img), upstream);
}

/// Image gradient given dL/dscores.
template <typename T>
BasicImage<T> segmenter_input_backward(const SegmenterParams<T>& params, const BasicImage<T>& img,
                                       const BasicScoreMap<T>& upstream) {
  require_same_extent(img, upstream, "segmenter_input_backward");
  FeatureGrid<T> grad_features(img.height(), img.width(), kFeatureCount);
  for (std::size_t p = 0; p < img.pixels(); ++p) {
    auto g = upstream.pixel(p);
    auto gf = grad_features.pixel(p);
    for (std::size_t k = 0; k < kFeatureCount; ++k) {
      double acc = 0.0;
      for (std::size_t c = 0; c < params.classes; ++c) {
        acc += static_cast<double>(params.weight(k, c)) * static_cast<double>(g[c]);
      }
      gf[k] = static_cast<T>(acc);
    }
  }
  return features_backward(img, grad_features);
}

/// Chain dL/dprobs through the per-pixel softmax Jacobian.
template <typename T>
BasicScoreMap<T> softmax_backward(const BasicProbMap<T>& probs, const BasicProbMap<T>& grad_probs) {
  require_same_shape(probs, grad_probs, "softmax_backward");
  BasicScoreMap<T> out(probs.height(), probs.width(), probs.channels());
  for (std::size_t p = 0; p < probs.pixels(); ++p) {
    auto pr = probs.pixel(p);
    auto g = grad_probs.pixel(p);
    double dot = 0.0;
    for (std::size_t c = 0; c < pr.size(); ++c) {
      dot += static_cast<double>(pr[c]) * static_cast<double>(g[c]);
    }
    auto dst = out.pixel(p);
    for (std::size_t c = 0; c < pr.size(); ++c) {
      dst[c] = static_cast<T>(static_cast<double>(pr[c]) * (static_cast<double>(g[c]) - dot));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Translator

/// out = clamp(M * rgb + b, 0, 1); values hold M row-major then b.
template <typename T>
struct TranslatorParams {
  using value_type = T;
  std::vector<T> values = std::vector<T>(12, T{});

  static TranslatorParams identity() {
    TranslatorParams p;
    p.matrix(0, 0) = p.matrix(1, 1) = p.matrix(2, 2) = T(1);
    return p;
  }

  T& matrix(std::size_t r, std::size_t s) { return values[r * 3 + s]; }
  T matrix(std::size_t r, std::size_t s) const { return values[r * 3 + s]; }
  T& bias(std::size_t r) { return values[9 + r]; }
  T bias(std::size_t r) const { return values[9 + r]; }

  template <typename U>
  TranslatorParams<U> cast() const {
    TranslatorParams<U> out;
    for (std::size_t k = 0; k < values.size(); ++k) out.values[k] = static_cast<U>(values[k]);
    return out;
  }

  friend bool operator==(const TranslatorParams&, const TranslatorParams&) = default;
};

template <typename T>
BasicImage<T> translator_forward(const TranslatorParams<T>& params, const BasicImage<T>& img) {
  BasicImage<T> out(img.height(), img.width(), 3);
  for (std::size_t p = 0; p < img.pixels(); ++p) {
    auto x = img.pixel(p);
    auto y = out.pixel(p);
    for (std::size_t r = 0; r < 3; ++r) {
      double z = static_cast<double>(params.bias(r));
      for (std::size_t s = 0; s < 3; ++s) {
        z += static_cast<double>(params.matrix(r, s)) * static_cast<double>(x[s]);
      }
      y[r] = static_cast<T>(std::clamp(z, 0.0, 1.0));
    }
  }
  return out;
}

template <typename T>
struct TranslatorGrad {
  TranslatorParams<T> params;
  BasicImage<T> input;
};

/// Clamp subgradient: 1 strictly inside (0, 1), 0 elsewhere.
template <typename T>
TranslatorGrad<T> translator_backward(const TranslatorParams<T>& params, const BasicImage<T>& img,
                                      const BasicImage<T>& upstream) {
  require_same_shape(img, upstream, "translator_backward");
  std::array<double, 12> acc{};
  BasicImage<T> grad_input(img.height(), img.width(), 3);
  for (std::size_t p = 0; p < img.pixels(); ++p) {
    auto x = img.pixel(p);
    auto g = upstream.pixel(p);
    auto gx = grad_input.pixel(p);
    std::array<double, 3> gx_acc{};
    for (std::size_t r = 0; r < 3; ++r) {
      double z = static_cast<double>(params.bias(r));
      for (std::size_t s = 0; s < 3; ++s) {
        z += static_cast<double>(params.matrix(r, s)) * static_cast<double>(x[s]);
      }
      if (!(z > 0.0 && z < 1.0)) continue;
      const double gz = static_cast<double>(g[r]);
      for (std::size_t s = 0; s < 3; ++s) {
        acc[r * 3 + s] += gz * static_cast<double>(x[s]);
        gx_acc[s] += gz * static_cast<double>(params.matrix(r, s));
      }
      acc[9 + r] += gz;
    }
    for (std::size_t s = 0; s < 3; ++s) gx[s] = static_cast<T>(gx_acc[s]);
  }
  TranslatorGrad<T> out{{}, std::move(grad_input)};
  for (std::size_t k = 0; k < 12; ++k) out.params.values[k] = static_cast<T>(acc[k]);
  return out;
}

// ---------------------------------------------------------------------------
// Image discriminator

/// Global statistics per channel: mean, std, mean horizontal gradient magnitude.
template <typename T>
std::array<double, kImageStatCount> image_stats(const BasicImage<T>& img) {
  std::array<double, kImageStatCount> stats{};
  const double n = static_cast<double>(img.pixels());
  const std::size_t w = img.width();
  for (std::size_t ch = 0; ch < 3; ++ch) {
    double sum = 0.0;
    for (std::size_t p = 0; p < img.pixels(); ++p) sum += static_cast<double>(img.pixel(p)[ch]);
    const double mean = sum / n;
    double var = 0.0;
    double mag = 0.0;
    for (std::size_t i = 0; i < img.height(); ++i) {
      for (std::size_t j = 0; j < w; ++j) {
        const double d = static_cast<double>(img(i, j, ch)) - mean;
        var += d * d;
        const std::size_t jl = j == 0 ? 0 : j - 1;
        const std::size_t jr = j + 1 < w ? j + 1 : w - 1;
        const double g =
            0.5 * (static_cast<double>(img(i, jr, ch)) - static_cast<double>(img(i, jl, ch)));
        mag += detail::smooth_root(g * g);
      }
    }
    stats[ch] = mean;
    stats[3 + ch] = detail::smooth_root(var / n);
    stats[6 + ch] = mag / n;
  }
  return stats;
}

/// Nine stat weights followed by a bias.
template <typename T>
struct ImageDiscParams {
  using value_type = T;
  std::vector<T> values = std::vector<T>(kImageStatCount + 1, T{});

  template <typename U>
  ImageDiscParams<U> cast() const {
    ImageDiscParams<U> out;
    for (std::size_t k = 0; k < values.size(); ++k) out.values[k] = static_cast<U>(values[k]);
    return out;
  }

  friend bool operator==(const ImageDiscParams&, const ImageDiscParams&) = default;
};

template <typename T>
double image_disc_forward(const ImageDiscParams<T>& params, const BasicImage<T>& img) {
  const auto stats = image_stats(img);
  double out = static_cast<double>(params.values[kImageStatCount]);
  for (std::size_t k = 0; k < kImageStatCount; ++k) {
    out += static_cast<double>(params.values[k]) * stats[k];
  }
  return out;
}

template <typename T>
struct ImageDiscGrad {
  ImageDiscParams<T> params;
  BasicImage<T> input;
};

template <typename T>
ImageDiscGrad<T> image_disc_backward(const ImageDiscParams<T>& params, const BasicImage<T>& img,
                                     double upstream) {
  const auto stats = image_stats(img);
  ImageDiscGrad<T> out{{}, BasicImage<T>(img.height(), img.width(), 3)};
  for (std::size_t k = 0; k < kImageStatCount; ++k) {
    out.params.values[k] = static_cast<T>(upstream * stats[k]);
  }
  out.params.values[kImageStatCount] = static_cast<T>(upstream);

  const double n = static_cast<double>(img.pixels());
  const std::size_t w = img.width();
  std::vector<double> acc(img.size(), 0.0);
  for (std::size_t ch = 0; ch < 3; ++ch) {
    const double g_mean = upstream * static_cast<double>(params.values[ch]);
    const double g_std = upstream * static_cast<double>(params.values[3 + ch]);
    const double g_mag = upstream * static_cast<double>(params.values[6 + ch]);
    const double mean = stats[ch];
    double var = 0.0;
    for (std::size_t p = 0; p < img.pixels(); ++p) {
      const double d = static_cast<double>(img.pixel(p)[ch]) - mean;
      var += d * d;
    }
    var /= n;
    const double std_scale = g_std / (n * std::sqrt(var + kFeatureEps));
    for (std::size_t i = 0; i < img.height(); ++i) {
      for (std::size_t j = 0; j < w; ++j) {
        const double x = static_cast<double>(img(i, j, ch));
        acc[(i * w + j) * 3 + ch] += g_mean / n + std_scale * (x - mean);
        const std::size_t jl = j == 0 ? 0 : j - 1;
        const std::size_t jr = j + 1 < w ? j + 1 : w - 1;
        const double g =
            0.5 * (static_cast<double>(img(i, jr, ch)) - static_cast<double>(img(i, jl, ch)));
        const double d_grad = g_mag / n * g / std::sqrt(g * g + kFeatureEps);
        acc[(i * w + jr) * 3 + ch] += 0.5 * d_grad;
        acc[(i * w + jl) * 3 + ch] -= 0.5 * d_grad;
      }
    }
  }
  for (std::size_t k = 0; k < acc.size(); ++k) out.input.data()[k] = static_cast<T>(acc[k]);
  return out;
}

// ---------------------------------------------------------------------------
// Feature discriminator (over softmax outputs)

/// One weight per class followed by a bias.
template <typename T>
struct FeatDiscParams {
  using value_type = T;
  std::size_t classes = 0;
  std::vector<T> values;

  FeatDiscParams() = default;
  explicit FeatDiscParams(std::size_t num_classes)
      : classes(num_classes), values(num_classes + 1, T{}) {}

  template <typename U>
  FeatDiscParams<U> cast() const {
    FeatDiscParams<U> out(classes);
    for (std::size_t k = 0; k < values.size(); ++k) out.values[k] = static_cast<U>(values[k]);
    return out;
  }

  friend bool operator==(const FeatDiscParams&, const FeatDiscParams&) = default;
};

template <typename T>
double feat_disc_forward(const FeatDiscParams<T>& params, const BasicProbMap<T>& probs) {
  if (probs.channels() != params.classes) {
    throw Error(ErrorCode::kShapeMismatch, "feature discriminator class count");
  }
  std::vector<double> means(params.classes, 0.0);
  for (std::size_t p = 0; p < probs.pixels(); ++p) {
    auto pr = probs.pixel(p);
    for (std::size_t c = 0; c < params.classes; ++c) means[c] += static_cast<double>(pr[c]);
  }
  double out = static_cast<double>(params.values[params.classes]);
  const double n = static_cast<double>(probs.pixels());
  for (std::size_t c = 0; c < params.classes; ++c) {
    out += static_cast<double>(params.values[c]) * means[c] / n;
  }
  return out;
}

template <typename T>
struct FeatDiscGrad {
  FeatDiscParams<T> params;
  BasicProbMap<T> input;
};

template <typename T>
FeatDiscGrad<T> feat_disc_backward(const FeatDiscParams<T>& params, const BasicProbMap<T>& probs,
                                   double upstream) {
  if (probs.channels() != params.classes) {
    throw Error(ErrorCode::kShapeMismatch, "feature discriminator class count");
  }
  const double n = static_cast<double>(probs.pixels());
  FeatDiscGrad<T> out{FeatDiscParams<T>(params.classes),
                      BasicProbMap<T>(probs.height(), probs.width(), probs.channels())};
  std::vector<double> means(params.classes, 0.0);
  for (std::size_t p = 0; p < probs.pixels(); ++p) {
    auto pr = probs.pixel(p);
    auto g = out.input.pixel(p);
    for (std::size_t c = 0; c < params.classes; ++c) {
      means[c] += static_cast<double>(pr[c]);
      g[c] = static_cast<T>(upstream * static_cast<double>(params.values[c]) / n);
    }
  }
  for (std::size_t c = 0; c < params.classes; ++c) {
    out.params.values[c] = static_cast<T>(upstream * means[c] / n);
  }
  out.params.values[params.classes] = static_cast<T>(upstream);
  return out;
}

}  // namespace dpl
