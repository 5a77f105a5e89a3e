#pragma once

// Label-space procedures: source label correction, probability fusion and the
// pseudo-label selection strategies compared in the ablations.

#include <cstddef>
#include <cstdint>
#include <algorithm>
#include <string>
#include <string_view>

#include "dpl/core_types.hpp"

namespace dpl {

enum class PseudoLabelStrategy {
  kWeighted,  // fuse both paths, then threshold (default)
  kMax,       // per pixel pick the more confident path, then threshold
  kJoint,     // threshold each path, keep agreeing pixels
  kSingle,    // each path thresholds its own prediction
};

inline std::string_view to_string(PseudoLabelStrategy s) {
  switch (s) {
    case PseudoLabelStrategy::kWeighted: return "weighted";
    case PseudoLabelStrategy::kMax: return "max";
    case PseudoLabelStrategy::kJoint: return "joint";
    case PseudoLabelStrategy::kSingle: return "spplg";
  }
  return "?";
}

inline PseudoLabelStrategy parse_strategy(std::string_view name) {
  if (name == "weighted") return PseudoLabelStrategy::kWeighted;
  if (name == "max") return PseudoLabelStrategy::kMax;
  if (name == "joint") return PseudoLabelStrategy::kJoint;
  if (name == "spplg" || name == "single") return PseudoLabelStrategy::kSingle;
  throw Error(ErrorCode::kConfig, "unknown pseudo-label strategy '" + std::string(name) + "'");
}

/// Replace a ground-truth label by the prediction on the translated image when
/// the predicted class beats the ground-truth class by more than `delta`.
/// UNLABELED pixels are left alone.
template <typename T>
LabelMap correct_labels(const LabelMap& y_source, const BasicProbMap<T>& p_translated,
                        double delta) {
  require_same_extent(y_source, p_translated, "correct_labels");
  if (!(delta >= 0.0)) throw Error(ErrorCode::kInvalidArgument, "delta must be >= 0");
  LabelMap out = y_source;
  for (std::size_t p = 0; p < y_source.pixels(); ++p) {
    const std::uint8_t truth = y_source.data()[p];
    if (truth == kUnlabeled) continue;
    if (truth >= p_translated.channels()) {
      throw Error(ErrorCode::kInvalidArgument, "label id out of range in correct_labels");
    }
    auto probs = p_translated.pixel(p);
    const std::size_t predicted = argmax(probs);
    const double gap = static_cast<double>(probs[predicted]) - static_cast<double>(probs[truth]);
    if (gap > delta) out.data()[p] = static_cast<std::uint8_t>(predicted);
  }
  return out;
}

/// Count of pixels whose label differs between two maps.
inline std::size_t count_changed(const LabelMap& before, const LabelMap& after) {
  require_same_extent(before, after, "count_changed");
  std::size_t changed = 0;
  for (std::size_t p = 0; p < before.pixels(); ++p) {
    changed += before.data()[p] != after.data()[p];
  }
  return changed;
}

/// alpha * p_t + (1 - alpha) * p_s.
template <typename T>
BasicProbMap<T> fuse_weighted(const BasicProbMap<T>& p_t, const BasicProbMap<T>& p_s,
                              double alpha = 0.5) {
  require_same_shape(p_t, p_s, "fuse_weighted");
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw Error(ErrorCode::kInvalidArgument, "alpha must lie in [0, 1]");
  }
  BasicProbMap<T> out(p_t.height(), p_t.width(), p_t.channels());
  auto a = p_t.data();
  auto b = p_s.data();
  auto dst = out.data();
  if (alpha == 1.0) {
    std::copy(a.begin(), a.end(), dst.begin());
  } else if (alpha == 0.0) {
    std::copy(b.begin(), b.end(), dst.begin());
  } else {
    for (std::size_t k = 0; k < dst.size(); ++k) {
      dst[k] = static_cast<T>(alpha * static_cast<double>(a[k]) +
                              (1.0 - alpha) * static_cast<double>(b[k]));
    }
  }
  return out;
}

/// Max probability threshold: keep the argmax class where it is strictly above `lambda`.
template <typename T>
LabelMap mpt_select(const BasicProbMap<T>& p, double lambda = 0.9) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) {
    throw Error(ErrorCode::kInvalidArgument, "lambda must lie in [0, 1]");
  }
  LabelMap out = make_label_map(p.height(), p.width());
  for (std::size_t k = 0; k < p.pixels(); ++k) {
    auto probs = p.pixel(k);
    const std::size_t best = argmax(probs);
    if (static_cast<double>(probs[best]) > lambda) {
      out.data()[k] = static_cast<std::uint8_t>(best);
    }
  }
  return out;
}

template <typename T>
LabelMap spplg(const BasicProbMap<T>& p, double lambda = 0.9) {
  return mpt_select(p, lambda);
}

template <typename T>
LabelMap dpplg_weighted(const BasicProbMap<T>& p_t, const BasicProbMap<T>& p_s,
                        double alpha = 0.5, double lambda = 0.9) {
  return mpt_select(fuse_weighted(p_t, p_s, alpha), lambda);
}

/// Per pixel, threshold whichever path has the larger maximum probability.
/// Equal maxima resolve to path-T.
template <typename T>
LabelMap dpplg_max(const BasicProbMap<T>& p_t, const BasicProbMap<T>& p_s, double lambda = 0.9) {
  require_same_shape(p_t, p_s, "dpplg_max");
  if (!(lambda >= 0.0 && lambda <= 1.0)) {
    throw Error(ErrorCode::kInvalidArgument, "lambda must lie in [0, 1]");
  }
  LabelMap out = make_label_map(p_t.height(), p_t.width());
  for (std::size_t k = 0; k < p_t.pixels(); ++k) {
    auto pt = p_t.pixel(k);
    auto ps = p_s.pixel(k);
    const std::size_t bt = argmax(pt);
    const std::size_t bs = argmax(ps);
    const bool use_source = ps[bs] > pt[bt];
    const std::size_t best = use_source ? bs : bt;
    const double conf = static_cast<double>(use_source ? ps[bs] : pt[bt]);
    if (conf > lambda) out.data()[k] = static_cast<std::uint8_t>(best);
  }
  return out;
}

/// Threshold each path separately and keep only pixels where both agree.
template <typename T>
LabelMap dpplg_joint(const BasicProbMap<T>& p_t, const BasicProbMap<T>& p_s, double lambda = 0.9) {
  require_same_shape(p_t, p_s, "dpplg_joint");
  LabelMap lt = mpt_select(p_t, lambda);
  const LabelMap ls = mpt_select(p_s, lambda);
  for (std::size_t k = 0; k < lt.pixels(); ++k) {
    if (lt.data()[k] != ls.data()[k]) lt.data()[k] = kUnlabeled;
  }
  return lt;
}

/// Shared pseudo labels for the dual-path strategies. kSingle has no shared
/// label; callers threshold each path on its own.
template <typename T>
LabelMap dual_path_pseudo_labels(PseudoLabelStrategy strategy, const BasicProbMap<T>& p_t,
                                 const BasicProbMap<T>& p_s, double alpha, double lambda) {
  switch (strategy) {
    case PseudoLabelStrategy::kWeighted: return dpplg_weighted(p_t, p_s, alpha, lambda);
    case PseudoLabelStrategy::kMax: return dpplg_max(p_t, p_s, lambda);
    case PseudoLabelStrategy::kJoint: return dpplg_joint(p_t, p_s, lambda);
    case PseudoLabelStrategy::kSingle: break;
  }
  throw Error(ErrorCode::kInvalidArgument, "single-path strategy has no shared pseudo label");
}

/// Inference-time averaging of both paths' probability maps.
template <typename T>
BasicProbMap<T> fuse_inference(const BasicProbMap<T>& p_t, const BasicProbMap<T>& p_s) {
  return fuse_weighted(p_t, p_s, 0.5);
}

}  // namespace dpl
