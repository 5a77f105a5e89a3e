#pragma once

// Forward values and closed-form gradients for every training objective.
// Values are accumulated in double regardless of the storage type T.

#include <algorithm>
#include <cmath>
#include <cstddef>

#include "dpl/core_types.hpp"

namespace dpl {

enum class AdversarialRole { kGenerator, kDiscriminator };

/// Value plus the gradient with respect to a single map-shaped input.
template <typename G>
struct MapLoss {
  double value = 0.0;
  G grad;
};

/// Value plus gradients with respect to two map-shaped inputs.
template <typename G>
struct MapPairLoss {
  double value = 0.0;
  G grad_first;
  G grad_second;
};

/// Value plus gradients with respect to two scalar scores.
struct ScalarPairLoss {
  double value = 0.0;
  double grad_first = 0.0;
  double grad_second = 0.0;
};

inline double softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// Per-pixel cross entropy on softmax(scores). UNLABELED pixels contribute
/// nothing; the normalizer is H*W unless `normalize_by_labeled` is set.
template <typename T>
MapLoss<BasicScoreMap<T>> seg_cross_entropy(const BasicScoreMap<T>& scores, const LabelMap& labels,
                                            bool normalize_by_labeled = false) {
  require_same_extent(scores, labels, "seg_cross_entropy");
  const std::size_t classes = scores.channels();
  std::size_t labeled = 0;
  for (std::uint8_t y : labels.data()) labeled += y != kUnlabeled;
  const double norm = normalize_by_labeled ? static_cast<double>(labeled)
                                           : static_cast<double>(scores.pixels());

  MapLoss<BasicScoreMap<T>> out{0.0, BasicScoreMap<T>(scores.height(), scores.width(), classes)};
  if (labeled == 0 || norm == 0.0) return out;

  for (std::size_t p = 0; p < scores.pixels(); ++p) {
    const std::uint8_t y = labels.data()[p];
    if (y == kUnlabeled) continue;
    if (y >= classes) throw Error(ErrorCode::kInvalidArgument, "label id out of range");
    auto s = scores.pixel(p);
    double max_score = static_cast<double>(s[0]);
    for (T v : s) max_score = std::max(max_score, static_cast<double>(v));
    double sum = 0.0;
    for (T v : s) sum += std::exp(static_cast<double>(v) - max_score);
    const double log_sum = std::log(sum);
    out.value -= static_cast<double>(s[y]) - max_score - log_sum;
    auto g = out.grad.pixel(p);
    for (std::size_t c = 0; c < classes; ++c) {
      const double prob = std::exp(static_cast<double>(s[c]) - max_score - log_sum);
      g[c] = static_cast<T>((prob - (c == y ? 1.0 : 0.0)) / norm);
    }
  }
  out.value /= norm;
  return out;
}

/// Mean squared distance between two feature maps.
template <typename G>
MapPairLoss<G> perceptual_loss(const G& a, const G& b) {
  require_same_shape(a, b, "perceptual_loss");
  using T = typename G::value_type;
  MapPairLoss<G> out{0.0, G(a.height(), a.width(), a.channels()),
                     G(a.height(), a.width(), a.channels())};
  const double n = static_cast<double>(a.size());
  if (n == 0.0) return out;
  auto da = a.data();
  auto db = b.data();
  auto ga = out.grad_first.data();
  auto gb = out.grad_second.data();
  for (std::size_t k = 0; k < da.size(); ++k) {
    const double diff = static_cast<double>(da[k]) - static_cast<double>(db[k]);
    out.value += diff * diff;
    ga[k] = static_cast<T>(2.0 * diff / n);
    gb[k] = static_cast<T>(-2.0 * diff / n);
  }
  out.value /= n;
  return out;
}

/// Sum of the two cross-domain perceptual terms. Only the features of the
/// translated images (`t_of_translated_source`, `s_of_translated_target`)
/// receive gradients; features of raw images are fixed targets.
template <typename G>
MapPairLoss<G> dual_perceptual_loss(const G& t_of_translated_source, const G& s_of_source,
                                    const G& t_of_target, const G& s_of_translated_target) {
  auto first = perceptual_loss(t_of_translated_source, s_of_source);
  auto second = perceptual_loss(s_of_translated_target, t_of_target);
  return {first.value + second.value, std::move(first.grad_first), std::move(second.grad_first)};
}

/// Least-squares GAN objective on raw discriminator scores.
/// Discriminator role: (d_real - 1)^2 + d_fake^2. Generator role: (d_fake - 1)^2.
/// grad_first is w.r.t. d_real, grad_second w.r.t. d_fake.
inline ScalarPairLoss gan_loss_ls(double d_real, double d_fake, AdversarialRole role) {
  if (role == AdversarialRole::kDiscriminator) {
    return {(d_real - 1.0) * (d_real - 1.0) + d_fake * d_fake, 2.0 * (d_real - 1.0),
            2.0 * d_fake};
  }
  return {(d_fake - 1.0) * (d_fake - 1.0), 0.0, 2.0 * (d_fake - 1.0)};
}

/// Mean absolute difference; gradient is taken w.r.t. the reconstruction and
/// uses sign(0) = 0.
template <typename T>
MapLoss<BasicImage<T>> recon_loss(const BasicImage<T>& x, const BasicImage<T>& x_cycle) {
  require_same_shape(x, x_cycle, "recon_loss");
  MapLoss<BasicImage<T>> out{0.0, BasicImage<T>(x.height(), x.width(), x.channels())};
  const double n = static_cast<double>(x.size());
  if (n == 0.0) return out;
  auto a = x.data();
  auto b = x_cycle.data();
  auto g = out.grad.data();
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double diff = static_cast<double>(b[k]) - static_cast<double>(a[k]);
    out.value += std::abs(diff);
    g[k] = static_cast<T>((diff > 0.0 ? 1.0 : diff < 0.0 ? -1.0 : 0.0) / n);
  }
  out.value /= n;
  return out;
}

/// Non-saturating BCE on feature-discriminator logits. The discriminator
/// labels target-like predictions 1 and source-like predictions 0; the
/// segmenter (generator role) pushes source-like predictions toward 1.
/// grad_first is w.r.t. the source-like score, grad_second w.r.t. the target-like one.
inline ScalarPairLoss adv_feature_loss(double d_source_like, double d_target_like,
                                       AdversarialRole role) {
  if (role == AdversarialRole::kDiscriminator) {
    return {softplus(-d_target_like) + softplus(d_source_like), sigmoid(d_source_like),
            sigmoid(d_target_like) - 1.0};
  }
  return {softplus(-d_source_like), sigmoid(d_source_like) - 1.0, 0.0};
}

struct DpitTerms {
  double gan_source = 0.0;
  double gan_target = 0.0;
  double recon_source = 0.0;
  double recon_target = 0.0;
  double dual_perceptual = 0.0;
};

struct DpitWeights {
  double recon = 10.0;
  double dual_perceptual = 0.1;
};

/// Multiplier applied to each term (and to its gradient) in the translation objective.
inline DpitTerms dpit_coefficients(const DpitWeights& w) {
  return {1.0, 1.0, w.recon, w.recon, w.dual_perceptual};
}

inline double dpit_total(const DpitTerms& terms, const DpitWeights& w = {}) {
  const DpitTerms k = dpit_coefficients(w);
  return k.gan_source * terms.gan_source + k.gan_target * terms.gan_target +
         k.recon_source * terms.recon_source + k.recon_target * terms.recon_target +
         k.dual_perceptual * terms.dual_perceptual;
}

/// Target-model warm-up objective: translated source with corrected labels,
/// raw target with pseudo labels, plus the weighted adversarial term.
inline double warmup_target_total(double seg_translated_source, double seg_target, double adv,
                                  double lambda_adv) {
  return seg_translated_source + seg_target + lambda_adv * adv;
}

struct DualSegTerms {
  double seg_t_translated_source = 0.0;  // M_T on S' with Y_S
  double seg_t_target = 0.0;             // M_T on T with shared pseudo labels
  double seg_s_source = 0.0;             // M_S on S with Y_S
  double seg_s_translated_target = 0.0;  // M_S on T' with shared pseudo labels
  double adv_t = 0.0;
  double adv_s = 0.0;
};

inline double dual_seg_total(const DualSegTerms& t, double lambda_adv) {
  return t.seg_t_translated_source + t.seg_t_target + t.seg_s_source + t.seg_s_translated_target +
         lambda_adv * (t.adv_t + t.adv_s);
}

/// Path-T share of the dual segmentation objective; only M_T receives its gradient.
inline double dual_seg_target_path(const DualSegTerms& t, double lambda_adv) {
  return t.seg_t_translated_source + t.seg_t_target + lambda_adv * t.adv_t;
}

/// Path-S share of the dual segmentation objective; only M_S receives its gradient.
inline double dual_seg_source_path(const DualSegTerms& t, double lambda_adv) {
  return t.seg_s_source + t.seg_s_translated_target + lambda_adv * t.adv_s;
}

}  // namespace dpl
