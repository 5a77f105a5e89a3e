#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <vector>

#include "dpl/core_types.hpp"

namespace dpl {

/// Entry (g, p) counts pixels with ground truth g predicted as p.
class ConfusionMatrix {
 public:
  ConfusionMatrix() = default;
  explicit ConfusionMatrix(std::size_t classes) : classes_(classes), counts_(classes * classes, 0) {}

  std::size_t classes() const noexcept { return classes_; }

  std::uint64_t at(std::size_t truth, std::size_t predicted) const {
    return counts_[truth * classes_ + predicted];
  }

  std::uint64_t total() const {
    std::uint64_t sum = 0;
    for (auto v : counts_) sum += v;
    return sum;
  }

  /// Adds one image. Pixels with UNLABELED ground truth are skipped; every
  /// other pixel must carry a valid prediction.
  void accumulate(const LabelMap& pred, const LabelMap& gt) {
    require_same_extent(pred, gt, "ConfusionMatrix::accumulate");
    for (std::size_t p = 0; p < gt.pixels(); ++p) {
      const std::uint8_t g = gt.data()[p];
      if (g == kUnlabeled) continue;
      const std::uint8_t q = pred.data()[p];
      if (g >= classes_ || q >= classes_) {
        throw Error(ErrorCode::kInvalidArgument, "label outside confusion matrix range");
      }
      ++counts_[g * classes_ + q];
    }
  }

  void merge(const ConfusionMatrix& other) {
    if (other.classes_ != classes_) {
      throw Error(ErrorCode::kShapeMismatch, "merging confusion matrices of different size");
    }
    for (std::size_t k = 0; k < counts_.size(); ++k) counts_[k] += other.counts_[k];
  }

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

  /// Builds a matrix from a row-major table of counts (truth rows).
  static ConfusionMatrix from_counts(std::size_t classes, std::span<const std::uint64_t> counts) {
    if (counts.size() != classes * classes) {
      throw Error(ErrorCode::kShapeMismatch, "confusion table size");
    }
    ConfusionMatrix cm(classes);
    std::copy(counts.begin(), counts.end(), cm.counts_.begin());
    return cm;
  }

 private:
  std::size_t classes_ = 0;
  std::vector<std::uint64_t> counts_;
};

inline ConfusionMatrix accumulate(ConfusionMatrix cm, const LabelMap& pred, const LabelMap& gt) {
  cm.accumulate(pred, gt);
  return cm;
}

/// IoU per class; classes with an empty union are undefined.
inline std::vector<std::optional<double>> per_class_iou(const ConfusionMatrix& cm) {
  const std::size_t n = cm.classes();
  std::vector<std::optional<double>> out(n);
  for (std::size_t c = 0; c < n; ++c) {
    std::uint64_t row = 0, col = 0;
    for (std::size_t k = 0; k < n; ++k) {
      row += cm.at(c, k);
      col += cm.at(k, c);
    }
    const std::uint64_t diag = cm.at(c, c);
    const std::uint64_t uni = row + col - diag;
    if (uni > 0) out[c] = static_cast<double>(diag) / static_cast<double>(uni);
  }
  return out;
}

/// Unweighted mean over defined entries; nullopt when none is defined.
inline std::optional<double> miou(std::span<const std::optional<double>> ious) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& v : ious) {
    if (v) {
      sum += *v;
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

inline std::optional<double> miou(std::span<const double> ious) {
  std::vector<std::optional<double>> wrapped(ious.begin(), ious.end());
  return miou(std::span<const std::optional<double>>(wrapped));
}

inline std::optional<double> miou(const ConfusionMatrix& cm) {
  const auto ious = per_class_iou(cm);
  return miou(std::span<const std::optional<double>>(ious));
}

/// Counts backing a pseudo-label quality report; mergeable across images.
struct PseudoQualityCounts {
  std::vector<std::uint64_t> selected;  // per gt class, selected pixels
  std::vector<std::uint64_t> correct;   // per gt class, selected and correct
  std::uint64_t evaluable = 0;          // pixels with gt != UNLABELED

  explicit PseudoQualityCounts(std::size_t classes = 0) : selected(classes, 0), correct(classes, 0) {}

  void accumulate(const LabelMap& pseudo, const LabelMap& gt) {
    require_same_extent(pseudo, gt, "pseudo_quality");
    for (std::size_t p = 0; p < gt.pixels(); ++p) {
      const std::uint8_t g = gt.data()[p];
      if (g == kUnlabeled) continue;
      if (g >= selected.size()) throw Error(ErrorCode::kInvalidArgument, "gt label out of range");
      ++evaluable;
      const std::uint8_t q = pseudo.data()[p];
      if (q == kUnlabeled) continue;
      ++selected[g];
      correct[g] += q == g;
    }
  }
};

struct PseudoQualityReport {
  std::vector<std::optional<double>> class_accuracy;  // absent when no pixel of that class was selected
  std::optional<double> mean_accuracy;
  std::optional<double> overall_accuracy;
  double pixel_ratio = 0.0;
};

inline PseudoQualityReport pseudo_quality(const PseudoQualityCounts& counts) {
  PseudoQualityReport r;
  r.class_accuracy.resize(counts.selected.size());
  std::uint64_t selected = 0, correct = 0;
  for (std::size_t c = 0; c < counts.selected.size(); ++c) {
    selected += counts.selected[c];
    correct += counts.correct[c];
    if (counts.selected[c] > 0) {
      r.class_accuracy[c] =
          static_cast<double>(counts.correct[c]) / static_cast<double>(counts.selected[c]);
    }
  }
  r.mean_accuracy = miou(std::span<const std::optional<double>>(r.class_accuracy));
  if (selected > 0) r.overall_accuracy = static_cast<double>(correct) / static_cast<double>(selected);
  if (counts.evaluable > 0) {
    r.pixel_ratio = static_cast<double>(selected) / static_cast<double>(counts.evaluable);
  }
  return r;
}

inline PseudoQualityReport pseudo_quality(const LabelMap& pseudo, const LabelMap& gt,
                                          std::size_t classes) {
  PseudoQualityCounts counts(classes);
  counts.accumulate(pseudo, gt);
  return pseudo_quality(counts);
}

namespace detail {

inline void write_optional(std::ostream& out, const std::optional<double>& v) {
  if (v) out << *v;
  else out << "NA";
}

}  // namespace detail

/// CSV: `class,iou` rows followed by a `mIoU` summary row.
inline void write_iou_report(std::ostream& out, const ConfusionMatrix& cm) {
  const auto ious = per_class_iou(cm);
  out << "class,iou\n";
  for (std::size_t c = 0; c < ious.size(); ++c) {
    out << c << ",";
    detail::write_optional(out, ious[c]);
    out << "\n";
  }
  out << "mIoU,";
  detail::write_optional(out, miou(std::span<const std::optional<double>>(ious)));
  out << "\n";
}

/// CSV: `class,accuracy,selected` rows followed by summary rows.
inline void write_pseudo_report(std::ostream& out, const PseudoQualityCounts& counts) {
  const PseudoQualityReport r = pseudo_quality(counts);
  out << "class,accuracy,selected\n";
  for (std::size_t c = 0; c < r.class_accuracy.size(); ++c) {
    out << c << ",";
    detail::write_optional(out, r.class_accuracy[c]);
    out << "," << counts.selected[c] << "\n";
  }
  out << "mean_accuracy,";
  detail::write_optional(out, r.mean_accuracy);
  out << ",\noverall_accuracy,";
  detail::write_optional(out, r.overall_accuracy);
  out << ",\npixel_ratio," << r.pixel_ratio << ",\n";
}

}  // namespace dpl
