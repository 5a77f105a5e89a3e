#pragma once

// Full training procedure:
//   1. supervised source warm-up of M_S
//   2. naive translator pair (no dual perceptual term) and target warm-up of
//      M_T with label correction and MPT pseudo labels
//   3. dual path image translation with both segmenters frozen
//   4. N rounds of dual path adaptive segmentation: fixed shared pseudo labels,
//      then separate training of M_T and M_S
//
// Everything is single-threaded and seeded so that two runs with the same
// configuration produce identical parameters, pseudo labels and logs.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dpl/checkpoint.hpp"
#include "dpl/config.hpp"
#include "dpl/data_synth.hpp"
#include "dpl/label_ops.hpp"
#include "dpl/losses.hpp"
#include "dpl/metrics.hpp"
#include "dpl/models.hpp"

namespace dpl {

enum class RefreshPolicy { kPerEpoch, kFixedOnce };

struct HyperParams {
  double delta = 0.3;           // label-correction margin
  double mpt_threshold = 0.9;   // pseudo-label confidence threshold
  double alpha = 0.5;           // path-T weight when fusing probability maps
  double lambda_adv = 1e-3;
  double lambda_recon = 10.0;
  double lambda_dual_per = 0.1;
  std::size_t iterations = 1;   // DPAS rounds
  std::uint64_t seed = 1;
};

inline void validate(const HyperParams& hp) {
  if (!(hp.delta >= 0.0)) throw Error(ErrorCode::kConfig, "delta must be >= 0");
  if (!(hp.mpt_threshold >= 0.0 && hp.mpt_threshold <= 1.0)) {
    throw Error(ErrorCode::kConfig, "mpt_threshold must lie in [0, 1]");
  }
  if (!(hp.alpha >= 0.0 && hp.alpha <= 1.0)) {
    throw Error(ErrorCode::kConfig, "alpha must lie in [0, 1]");
  }
  if (!(hp.lambda_adv >= 0.0 && hp.lambda_recon >= 0.0 && hp.lambda_dual_per >= 0.0)) {
    throw Error(ErrorCode::kConfig, "loss weights must be >= 0");
  }
  if (hp.iterations < 1) throw Error(ErrorCode::kConfig, "iterations must be >= 1");
}

struct TrainConfig {
  HyperParams hp;
  std::size_t epochs_warmup_source = 6;
  std::size_t epochs_naive_translation = 30;
  std::size_t epochs_warmup_target = 6;
  std::size_t epochs_dpit = 30;
  std::size_t epochs_dpas = 6;
  std::size_t batch_size = 4;
  double lr_segmenter = 1.0;
  double lr_translator = 0.005;
  double lr_image_disc = 0.2;
  double lr_feat_disc = 0.05;
  std::size_t image_disc_steps = 1;  // per translator step
  std::size_t feat_disc_steps = 1;   // per segmenter step
  double translator_init_std = 0.1;  // jitter around identity
  RefreshPolicy warmup_refresh = RefreshPolicy::kPerEpoch;
  PseudoLabelStrategy strategy = PseudoLabelStrategy::kWeighted;
  bool train_source_path = true;
  bool normalize_by_labeled = false;
  std::filesystem::path dataset;
  std::filesystem::path out;
};

inline void validate(const TrainConfig& c) {
  validate(c.hp);
  for (std::size_t e : {c.epochs_warmup_source, c.epochs_naive_translation, c.epochs_warmup_target,
                        c.epochs_dpit, c.epochs_dpas}) {
    if (e < 1) throw Error(ErrorCode::kConfig, "epochs must be >= 1");
  }
  if (c.batch_size < 1) throw Error(ErrorCode::kConfig, "batch_size must be >= 1");
  for (double lr : {c.lr_segmenter, c.lr_translator, c.lr_image_disc, c.lr_feat_disc}) {
    if (!(lr >= 0.0)) throw Error(ErrorCode::kConfig, "learning rates must be >= 0");
  }
}

/// Reads training keys from a config, consuming them.
inline TrainConfig train_config_from(KeyValues& kv) {
  TrainConfig c;
  HyperParams& hp = c.hp;
  hp.delta = kv.get_double("delta", hp.delta);
  hp.mpt_threshold = kv.get_double("mpt_threshold", hp.mpt_threshold);
  hp.alpha = kv.get_double("alpha", hp.alpha);
  hp.lambda_adv = kv.get_double("lambda_adv", hp.lambda_adv);
  hp.lambda_recon = kv.get_double("lambda_recon", hp.lambda_recon);
  hp.lambda_dual_per = kv.get_double("lambda_dual_per", hp.lambda_dual_per);
  hp.iterations = kv.get_uint("iterations", hp.iterations);
  hp.seed = kv.get_uint("seed", hp.seed);
  c.epochs_warmup_source = kv.get_uint("epochs_warmup_source", c.epochs_warmup_source);
  c.epochs_naive_translation = kv.get_uint("epochs_naive_translation", c.epochs_naive_translation);
  c.epochs_warmup_target = kv.get_uint("epochs_warmup_target", c.epochs_warmup_target);
  c.epochs_dpit = kv.get_uint("epochs_dpit", c.epochs_dpit);
  c.epochs_dpas = kv.get_uint("epochs_dpas", c.epochs_dpas);
  c.batch_size = kv.get_uint("batch_size", c.batch_size);
  c.lr_segmenter = kv.get_double("lr_segmenter", c.lr_segmenter);
  c.lr_translator = kv.get_double("lr_translator", c.lr_translator);
  c.lr_image_disc = kv.get_double("lr_image_disc", c.lr_image_disc);
  c.lr_feat_disc = kv.get_double("lr_feat_disc", c.lr_feat_disc);
  c.image_disc_steps = kv.get_uint("image_disc_steps", c.image_disc_steps);
  c.feat_disc_steps = kv.get_uint("feat_disc_steps", c.feat_disc_steps);
  c.translator_init_std = kv.get_double("translator_init_std", c.translator_init_std);
  const std::string refresh = kv.get_string("warmup_refresh", "per_epoch");
  if (refresh == "per_epoch") c.warmup_refresh = RefreshPolicy::kPerEpoch;
  else if (refresh == "fixed_once") c.warmup_refresh = RefreshPolicy::kFixedOnce;
  else throw Error(ErrorCode::kConfig, "warmup_refresh must be per_epoch or fixed_once");
  c.strategy = parse_strategy(kv.get_string("strategy", "weighted"));
  c.train_source_path = kv.get_bool("train_source_path", c.train_source_path);
  c.normalize_by_labeled = kv.get_bool("normalize_by_labeled", c.normalize_by_labeled);
  c.dataset = kv.get_string("dataset", "");
  c.out = kv.get_string("out", "");
  validate(c);
  return c;
}

/// One configuration file may describe both the dataset and the training run.
struct ExperimentConfig {
  DatasetManifest data;
  TrainConfig train;
};

inline ExperimentConfig experiment_config_from(KeyValues& kv) {
  ExperimentConfig e;
  e.data = manifest_from_config(kv);
  e.train = train_config_from(kv);
  kv.require_all_used();
  return e;
}

// ---------------------------------------------------------------------------
// Metrics log

struct MetricsRow {
  std::string phase;
  std::size_t epoch = 0;
  double loss_total = 0.0;
  std::optional<double> loss_seg = {};
  std::optional<double> loss_adv = {};
  std::optional<double> loss_gan = {};
  std::optional<double> loss_recon = {};
  std::optional<double> loss_dual_per = {};
  std::optional<double> corrected_fraction = {};
  std::optional<std::size_t> pseudo_count = {};
  std::optional<double> miou = {};
};

class MetricsLog {
 public:
  void add(MetricsRow row) { rows_.push_back(std::move(row)); }
  const std::vector<MetricsRow>& rows() const { return rows_; }

  std::string csv() const {
    std::ostringstream out;
    out << "phase,epoch,loss_total,loss_seg,loss_adv,loss_gan,loss_recon,loss_dual_per,"
           "corrected_fraction,pseudo_count,miou\n";
    auto opt = [&](const std::optional<double>& v) {
      out << ',' << (v ? format_double(*v) : std::string("NA"));
    };
    for (const auto& r : rows_) {
      out << r.phase << ',' << r.epoch << ',' << format_double(r.loss_total);
      opt(r.loss_seg);
      opt(r.loss_adv);
      opt(r.loss_gan);
      opt(r.loss_recon);
      opt(r.loss_dual_per);
      opt(r.corrected_fraction);
      out << ',' << (r.pseudo_count ? std::to_string(*r.pseudo_count) : std::string("NA"));
      opt(r.miou);
      out << '\n';
    }
    return out.str();
  }

 private:
  std::vector<MetricsRow> rows_;
};

// ---------------------------------------------------------------------------
// Inference and evaluation helpers

/// FNV-1a over the concatenated label bytes; pass a previous hash as `h` to chain.
inline std::uint64_t hash_labels(const std::vector<LabelMap>& labels,
                                 std::uint64_t h = 14695981039346656037ull) {
  for (const auto& lm : labels) {
    for (std::uint8_t b : lm.data()) {
      h ^= b;
      h *= 1099511628211ull;
    }
  }
  return h;
}

inline std::size_t count_labeled(const std::vector<LabelMap>& labels) {
  std::size_t n = 0;
  for (const auto& lm : labels) {
    for (std::uint8_t b : lm.data()) n += b != kUnlabeled;
  }
  return n;
}

/// Single-model inference: M_T on the raw target image.
inline ProbMap infer_dpl(const SegmenterParams<float>& m_t, const Image& img) {
  return segmenter_probs(m_t, img);
}

/// Two-path inference: average of M_T on the image and M_S on its translation.
inline ProbMap infer_dpl_dual(const SegmenterParams<float>& m_t, const SegmenterParams<float>& m_s,
                              const TranslatorParams<float>& g_ts, const Image& img) {
  return fuse_inference(segmenter_probs(m_t, img),
                        segmenter_probs(m_s, translator_forward(g_ts, img)));
}

inline ConfusionMatrix confusion_of(const SegmenterParams<float>& m, const std::vector<Image>& images,
                                    const std::vector<LabelMap>& labels) {
  ConfusionMatrix cm(m.classes);
  for (std::size_t k = 0; k < images.size(); ++k) {
    cm.accumulate(argmax_labels(segmenter_forward(m, images[k])), labels[k]);
  }
  return cm;
}

inline double evaluate_miou(const SegmenterParams<float>& m, const std::vector<Image>& images,
                            const std::vector<LabelMap>& labels) {
  return miou(confusion_of(m, images, labels)).value_or(0.0);
}

inline double evaluate_dual_miou(const SegmenterParams<float>& m_t,
                                 const SegmenterParams<float>& m_s,
                                 const TranslatorParams<float>& g_ts,
                                 const std::vector<Image>& images,
                                 const std::vector<LabelMap>& labels) {
  ConfusionMatrix cm(m_t.classes);
  for (std::size_t k = 0; k < images.size(); ++k) {
    cm.accumulate(argmax_labels(infer_dpl_dual(m_t, m_s, g_ts, images[k])), labels[k]);
  }
  return miou(cm).value_or(0.0);
}

/// Generator-side DPIT terms for one (source, target) pair and their
/// gradients w.r.t. both translators. Discriminators and segmenters are held
/// fixed; the total is dpit_total(terms, weights).
template <typename T>
struct DpitGeneratorStep {
  DpitTerms terms;
  TranslatorParams<T> grad_st;
  TranslatorParams<T> grad_ts;
};

template <typename T>
DpitGeneratorStep<T> dpit_generator_step(
    const TranslatorParams<T>& g_st, const TranslatorParams<T>& g_ts,
    const ImageDiscParams<T>& d_source, const ImageDiscParams<T>& d_target,
    const SegmenterParams<T>& m_s, const SegmenterParams<T>& m_t, const BasicImage<T>& s,
    const BasicImage<T>& t, const BasicScoreMap<T>& fs_source, const BasicScoreMap<T>& ft_target,
    const DpitWeights& weights) {
  const DpitTerms coeff = dpit_coefficients(weights);
  DpitGeneratorStep<T> out{{}, zeros_like(g_st), zeros_like(g_ts)};
  const BasicImage<T> s_t = translator_forward(g_st, s);  // S'
  const BasicImage<T> t_s = translator_forward(g_ts, t);  // T'
  const BasicImage<T> s_cycle = translator_forward(g_ts, s_t);
  const BasicImage<T> t_cycle = translator_forward(g_st, t_s);
  BasicImage<T> grad_s_t(s_t.height(), s_t.width(), 3);
  BasicImage<T> grad_t_s(t_s.height(), t_s.width(), 3);
  auto add_into = [](BasicImage<T>& dst, const BasicImage<T>& src, double scale) {
    for (std::size_t k = 0; k < dst.size(); ++k) {
      dst.data()[k] += static_cast<T>(scale * src.data()[k]);
    }
  };

  const auto gan_t = gan_loss_ls(0.0, image_disc_forward(d_target, s_t), AdversarialRole::kGenerator);
  add_into(grad_s_t, image_disc_backward(d_target, s_t, gan_t.grad_second).input, coeff.gan_target);
  const auto gan_s = gan_loss_ls(0.0, image_disc_forward(d_source, t_s), AdversarialRole::kGenerator);
  add_into(grad_t_s, image_disc_backward(d_source, t_s, gan_s.grad_second).input, coeff.gan_source);

  // Cycle terms flow through the second translator into the first one's output.
  const auto rec_s = recon_loss(s, s_cycle);
  if (coeff.recon_source != 0.0) {
    const auto back = translator_backward(g_ts, s_t, rec_s.grad);
    accumulate(out.grad_ts, back.params, coeff.recon_source);
    add_into(grad_s_t, back.input, coeff.recon_source);
  }
  const auto rec_t = recon_loss(t, t_cycle);
  if (coeff.recon_target != 0.0) {
    const auto back = translator_backward(g_st, t_s, rec_t.grad);
    accumulate(out.grad_st, back.params, coeff.recon_target);
    add_into(grad_t_s, back.input, coeff.recon_target);
  }

  const auto ft_s_t = segmenter_forward(m_t, s_t);
  const auto fs_t_s = segmenter_forward(m_s, t_s);
  const auto dual = dual_perceptual_loss(ft_s_t, fs_source, ft_target, fs_t_s);
  if (coeff.dual_perceptual != 0.0) {
    add_into(grad_s_t, segmenter_input_backward(m_t, s_t, dual.grad_first), coeff.dual_perceptual);
    add_into(grad_t_s, segmenter_input_backward(m_s, t_s, dual.grad_second), coeff.dual_perceptual);
  }

  accumulate(out.grad_st, translator_backward(g_st, s, grad_s_t).params);
  accumulate(out.grad_ts, translator_backward(g_ts, t, grad_t_s).params);
  out.terms = {gan_s.value, gan_t.value, rec_s.value, rec_t.value, dual.value};
  return out;
}

// ---------------------------------------------------------------------------
// Trainer

struct TranslatorSet {
  TranslatorParams<float> g_st = TranslatorParams<float>::identity();  // source -> target
  TranslatorParams<float> g_ts = TranslatorParams<float>::identity();  // target -> source
  ImageDiscParams<float> d_source;  // real: source images, fake: G_ts(target)
  ImageDiscParams<float> d_target;  // real: target images, fake: G_st(source)
  double recon_initial = 0.0;       // mean cycle MAE before training
  double recon_final = 0.0;         // mean cycle MAE after training
};

struct WarmupTargetResult {
  SegmenterParams<float> m_t;
  std::vector<double> corrected_fraction;  // per epoch, replaced / labeled pixels
  std::vector<std::size_t> pseudo_count;   // per epoch
};

struct DpasResult {
  SegmenterParams<float> m_s;
  SegmenterParams<float> m_t;
  std::vector<LabelMap> pseudo_labels;         // shared labels (path-T labels for spplg)
  std::vector<LabelMap> source_path_labels;    // spplg only: path-S's own labels
  std::uint64_t hash_start = 0;
  std::uint64_t hash_end = 0;
};

struct DplResult {
  SegmenterParams<float> m_s0, m_t0;  // after warm-up
  TranslatorSet naive;
  TranslatorSet dpit;
  SegmenterParams<float> m_s, m_t;    // after the last DPAS round
  std::vector<DpasResult> rounds;
  std::optional<double> miou_s0, miou_t0, miou_t, miou_s;  // on held-out target data
};

class DplTrainer {
 public:
  DplTrainer(TrainConfig config, const TrainingData& data, const EvalData* eval = nullptr)
      : cfg_(std::move(config)), data_(data), eval_(eval) {
    validate(cfg_);
    if (data_.source_images.empty() || data_.target_images.empty()) {
      throw Error(ErrorCode::kMissingData, "training data needs source and target images");
    }
    if (data_.source_images.size() != data_.source_labels.size()) {
      throw Error(ErrorCode::kMissingData, "source images and labels differ in count");
    }
  }

  const TrainConfig& config() const { return cfg_; }
  const MetricsLog& log() const { return log_; }
  std::size_t classes() const { return kSceneClasses; }

  /// Supervised training of M_S on labeled source images.
  SegmenterParams<float> warmup_source() {
    SegmenterParams<float> m(classes());
    FeatDiscParams<float> unused(classes());
    const auto feats = features_of(data_.source_images);
    auto rng = phase_rng(1);
    for (std::size_t epoch = 0; epoch < cfg_.epochs_warmup_source; ++epoch) {
      const auto order = shuffled(feats.size(), rng);
      PathStats stats;
      for (std::size_t start = 0; start < order.size(); start += cfg_.batch_size) {
        std::vector<PathItem> batch;
        for (std::size_t k = start; k < std::min(order.size(), start + cfg_.batch_size); ++k) {
          batch.push_back({&feats[order[k]], &data_.source_labels[order[k]], nullptr, nullptr});
        }
        train_path_batch(m, unused, batch, stats);
      }
      log_.add({.phase = "warmup_source", .epoch = epoch + 1, .loss_total = stats.mean_total(),
                .loss_seg = stats.mean_seg(), .miou = eval_miou(m)});
    }
    return m;
  }

  /// Translator pair trained with the full translation objective under `weights`.
  TranslatorSet train_translators(const SegmenterParams<float>& m_s,
                                  const SegmenterParams<float>& m_t, const DpitWeights& weights,
                                  std::size_t epochs, const std::string& phase) {
    auto rng = phase_rng(phase == "dpit" ? 4 : 2);
    TranslatorSet set;
    set.g_st = jittered_identity(rng);
    set.g_ts = jittered_identity(rng);
    set.recon_initial = mean_cycle_error(set);

    const auto& src = data_.source_images;
    const auto& tgt = data_.target_images;
    // Fixed perceptual targets: F_S(S) and F_T(T).
    std::vector<ScoreMap> fs_source, ft_target;
    for (const auto& s : src) fs_source.push_back(segmenter_forward(m_s, s));
    for (const auto& t : tgt) ft_target.push_back(segmenter_forward(m_t, t));

    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
      const auto order_s = shuffled(src.size(), rng);
      const auto order_t = shuffled(tgt.size(), rng);
      DpitTerms sums;
      std::size_t count = 0;
      for (std::size_t start = 0; start < order_s.size(); start += cfg_.batch_size) {
        const std::size_t end = std::min(order_s.size(), start + cfg_.batch_size);
        const double inv = 1.0 / static_cast<double>(end - start);

        for (std::size_t step = 0; step < cfg_.image_disc_steps; ++step) {
          ImageDiscParams<float> g_ds, g_dt;
          g_ds = zeros_like(set.d_source);
          g_dt = zeros_like(set.d_target);
          for (std::size_t k = start; k < end; ++k) {
            const Image& s = src[order_s[k]];
            const Image& t = tgt[order_t[k % tgt.size()]];
            const Image s_t = translator_forward(set.g_st, s);
            const Image t_s = translator_forward(set.g_ts, t);
            const auto lt = gan_loss_ls(image_disc_forward(set.d_target, t),
                                        image_disc_forward(set.d_target, s_t),
                                        AdversarialRole::kDiscriminator);
            accumulate(g_dt, image_disc_backward(set.d_target, t, lt.grad_first).params, inv);
            accumulate(g_dt, image_disc_backward(set.d_target, s_t, lt.grad_second).params, inv);
            const auto ls = gan_loss_ls(image_disc_forward(set.d_source, s),
                                        image_disc_forward(set.d_source, t_s),
                                        AdversarialRole::kDiscriminator);
            accumulate(g_ds, image_disc_backward(set.d_source, s, ls.grad_first).params, inv);
            accumulate(g_ds, image_disc_backward(set.d_source, t_s, ls.grad_second).params, inv);
          }
          set.d_source = sgd_step(set.d_source, g_ds, cfg_.lr_image_disc);
          set.d_target = sgd_step(set.d_target, g_dt, cfg_.lr_image_disc);
        }

        TranslatorParams<float> grad_st = zeros_like(set.g_st);
        TranslatorParams<float> grad_ts = zeros_like(set.g_ts);
        for (std::size_t k = start; k < end; ++k) {
          const std::size_t is = order_s[k];
          const std::size_t it = order_t[k % tgt.size()];
          const auto r = dpit_generator_step(set.g_st, set.g_ts, set.d_source, set.d_target, m_s,
                                             m_t, src[is], tgt[it], fs_source[is], ft_target[it],
                                             weights);
          accumulate(grad_st, r.grad_st, inv);
          accumulate(grad_ts, r.grad_ts, inv);
          sums.gan_source += r.terms.gan_source;
          sums.gan_target += r.terms.gan_target;
          sums.recon_source += r.terms.recon_source;
          sums.recon_target += r.terms.recon_target;
          sums.dual_perceptual += r.terms.dual_perceptual;
          ++count;
        }
        set.g_st = sgd_step(set.g_st, grad_st, cfg_.lr_translator);
        set.g_ts = sgd_step(set.g_ts, grad_ts, cfg_.lr_translator);
        if (!all_finite(set.g_st) || !all_finite(set.g_ts) || !all_finite(set.d_source) ||
            !all_finite(set.d_target)) {
          throw Error(ErrorCode::kDivergence, phase + ": non-finite translator parameters");
        }
      }
      const double n = static_cast<double>(count);
      const DpitTerms mean{sums.gan_source / n, sums.gan_target / n, sums.recon_source / n,
                           sums.recon_target / n, sums.dual_perceptual / n};
      const double total = dpit_total(mean, weights);
      if (!std::isfinite(total)) throw Error(ErrorCode::kDivergence, phase + ": loss");
      log_.add({.phase = phase, .epoch = epoch + 1, .loss_total = total,
                .loss_gan = mean.gan_source + mean.gan_target,
                .loss_recon = mean.recon_source + mean.recon_target,
                .loss_dual_per = mean.dual_perceptual});
    }
    set.recon_final = mean_cycle_error(set);
    return set;
  }

  /// Preliminary translators for the target warm-up: no dual perceptual term.
  TranslatorSet train_naive_translators(const SegmenterParams<float>& m_s) {
    return train_translators(m_s, m_s, {cfg_.hp.lambda_recon, 0.0}, cfg_.epochs_naive_translation,
                             "naive_translation");
  }

  /// Translators trained with the full objective; both segmenters stay frozen.
  TranslatorSet train_dpit(const SegmenterParams<float>& m_s, const SegmenterParams<float>& m_t) {
    return train_translators(m_s, m_t, {cfg_.hp.lambda_recon, cfg_.hp.lambda_dual_per},
                             cfg_.epochs_dpit, "dpit");
  }

  /// M_T warm-up: starts from M_S, trains on translated source images with
  /// corrected labels and on target images with MPT pseudo labels.
  WarmupTargetResult warmup_target(const SegmenterParams<float>& m_s, const TranslatorSet& naive) {
    WarmupTargetResult result{clone_params(m_s), {}, {}};
    SegmenterParams<float>& m = result.m_t;
    FeatDiscParams<float> disc(classes());
    std::vector<Image> translated;
    for (const auto& s : data_.source_images) translated.push_back(translator_forward(naive.g_st, s));
    const auto feats_sp = features_of(translated);
    const auto feats_t = features_of(data_.target_images);
    std::size_t labeled_source = 0;
    for (const auto& y : data_.source_labels) {
      for (std::uint8_t b : y.data()) labeled_source += b != kUnlabeled;
    }

    std::vector<LabelMap> corrected, pseudo;
    std::size_t replaced = 0;
    auto refresh = [&] {
      corrected.clear();
      pseudo.clear();
      replaced = 0;
      for (std::size_t k = 0; k < feats_sp.size(); ++k) {
        const ProbMap p = softmax(segmenter_scores(m, feats_sp[k]));
        corrected.push_back(correct_labels(data_.source_labels[k], p, cfg_.hp.delta));
        replaced += count_changed(data_.source_labels[k], corrected.back());
      }
      for (const auto& f : feats_t) {
        pseudo.push_back(mpt_select(softmax(segmenter_scores(m, f)), cfg_.hp.mpt_threshold));
      }
    };

    auto rng = phase_rng(3);
    for (std::size_t epoch = 0; epoch < cfg_.epochs_warmup_target; ++epoch) {
      if (epoch == 0 || cfg_.warmup_refresh == RefreshPolicy::kPerEpoch) refresh();
      const auto order_s = shuffled(feats_sp.size(), rng);
      const auto order_t = shuffled(feats_t.size(), rng);
      PathStats stats;
      for (std::size_t start = 0; start < order_s.size(); start += cfg_.batch_size) {
        std::vector<PathItem> batch;
        for (std::size_t k = start; k < std::min(order_s.size(), start + cfg_.batch_size); ++k) {
          const std::size_t is = order_s[k];
          const std::size_t it = order_t[k % feats_t.size()];
          batch.push_back({&feats_sp[is], &corrected[is], &feats_t[it], &pseudo[it]});
        }
        train_path_batch(m, disc, batch, stats);
      }
      const double fraction =
          labeled_source ? static_cast<double>(replaced) / static_cast<double>(labeled_source) : 0.0;
      result.corrected_fraction.push_back(fraction);
      result.pseudo_count.push_back(count_labeled(pseudo));
      log_.add({.phase = "warmup_target", .epoch = epoch + 1, .loss_total = stats.mean_total(),
                .loss_seg = stats.mean_seg(), .loss_adv = stats.mean_adv(),
                .corrected_fraction = fraction, .pseudo_count = count_labeled(pseudo),
                .miou = eval_miou(m)});
    }
    return result;
  }

  /// Pseudo labels for every target image from the two paths; fixed for a round.
  DpasResult generate_pseudo_labels(const SegmenterParams<float>& m_s,
                                    const SegmenterParams<float>& m_t,
                                    const TranslatorSet& translators) const {
    DpasResult r;
    for (const auto& t : data_.target_images) {
      const ProbMap p_t = segmenter_probs(m_t, t);
      const ProbMap p_s = segmenter_probs(m_s, translator_forward(translators.g_ts, t));
      if (cfg_.strategy == PseudoLabelStrategy::kSingle) {
        r.pseudo_labels.push_back(spplg(p_t, cfg_.hp.mpt_threshold));
        r.source_path_labels.push_back(spplg(p_s, cfg_.hp.mpt_threshold));
      } else {
        r.pseudo_labels.push_back(
            dual_path_pseudo_labels(cfg_.strategy, p_t, p_s, cfg_.hp.alpha, cfg_.hp.mpt_threshold));
      }
    }
    return r;
  }

  /// One round: generate pseudo labels, then train M_T and M_S separately.
  DpasResult dpas_iteration(const SegmenterParams<float>& m_s, const SegmenterParams<float>& m_t,
                            const TranslatorSet& translators, std::size_t round) {
    DpasResult r = generate_pseudo_labels(m_s, m_t, translators);
    r.m_s = clone_params(m_s);
    r.m_t = clone_params(m_t);
    r.hash_start = hash_labels(r.source_path_labels, hash_labels(r.pseudo_labels));
    const std::vector<LabelMap>& labels_t = r.pseudo_labels;
    const std::vector<LabelMap>& labels_s =
        r.source_path_labels.empty() ? r.pseudo_labels : r.source_path_labels;

    std::vector<Image> s_translated, t_translated;
    for (const auto& s : data_.source_images) s_translated.push_back(translator_forward(translators.g_st, s));
    for (const auto& t : data_.target_images) t_translated.push_back(translator_forward(translators.g_ts, t));
    const auto feats_s = features_of(data_.source_images);
    const auto feats_sp = features_of(s_translated);
    const auto feats_t = features_of(data_.target_images);
    const auto feats_tp = features_of(t_translated);

    FeatDiscParams<float> disc_t(classes()), disc_s(classes());
    auto rng = phase_rng(100 + round);
    const std::string phase = "dpas_" + std::to_string(round);
    for (std::size_t epoch = 0; epoch < cfg_.epochs_dpas; ++epoch) {
      const auto order_s = shuffled(feats_s.size(), rng);
      const auto order_t = shuffled(feats_t.size(), rng);
      PathStats stats_t, stats_s;
      for (std::size_t start = 0; start < order_s.size(); start += cfg_.batch_size) {
        std::vector<PathItem> batch_t, batch_s;
        for (std::size_t k = start; k < std::min(order_s.size(), start + cfg_.batch_size); ++k) {
          const std::size_t is = order_s[k];
          const std::size_t it = order_t[k % feats_t.size()];
          batch_t.push_back({&feats_sp[is], &data_.source_labels[is], &feats_t[it], &labels_t[it]});
          batch_s.push_back({&feats_s[is], &data_.source_labels[is], &feats_tp[it], &labels_s[it]});
        }
        train_path_batch(r.m_t, disc_t, batch_t, stats_t);
        if (cfg_.train_source_path) train_path_batch(r.m_s, disc_s, batch_s, stats_s);
      }
      DualSegTerms terms;
      terms.seg_t_translated_source = stats_t.mean_labeled();
      terms.seg_t_target = stats_t.mean_unlabeled();
      terms.seg_s_source = stats_s.mean_labeled();
      terms.seg_s_translated_target = stats_s.mean_unlabeled();
      terms.adv_t = stats_t.mean_adv();
      terms.adv_s = stats_s.mean_adv();
      log_.add({.phase = phase, .epoch = epoch + 1,
                .loss_total = dual_seg_total(terms, cfg_.hp.lambda_adv),
                .loss_seg = stats_t.mean_seg() + stats_s.mean_seg(),
                .loss_adv = terms.adv_t + terms.adv_s,
                .pseudo_count = count_labeled(r.pseudo_labels), .miou = eval_miou(r.m_t)});
    }
    r.hash_end = hash_labels(r.source_path_labels, hash_labels(r.pseudo_labels));
    if (r.hash_end != r.hash_start) {
      throw Error(ErrorCode::kInvalidArgument, "pseudo labels changed during a DPAS round");
    }
    return r;
  }

  /// All phases end to end. Writes checkpoints and metrics when cfg.out is set.
  DplResult run() {
    DplResult res;
    res.m_s0 = warmup_source();
    res.miou_s0 = eval_miou(res.m_s0);
    save_segmenters("warmup_source", &res.m_s0, nullptr, {});

    res.naive = train_naive_translators(res.m_s0);
    save_translators("naive_translation", res.naive);

    WarmupTargetResult wt = warmup_target(res.m_s0, res.naive);
    res.m_t0 = std::move(wt.m_t);
    res.miou_t0 = eval_miou(res.m_t0);
    save_segmenters("warmup_target", nullptr, &res.m_t0, {});

    res.dpit = train_dpit(res.m_s0, res.m_t0);
    save_translators("dpit", res.dpit);

    res.m_s = res.m_s0;
    res.m_t = res.m_t0;
    for (std::size_t n = 1; n <= cfg_.hp.iterations; ++n) {
      res.rounds.push_back(dpas_iteration(res.m_s, res.m_t, res.dpit, n));
      res.m_s = res.rounds.back().m_s;
      res.m_t = res.rounds.back().m_t;
      save_dpas_round(n, res.rounds.back());
    }
    res.miou_t = eval_miou(res.m_t);
    res.miou_s = eval_miou(res.m_s);
    save_final(res.m_s, res.m_t, res.dpit);
    write_log();
    return res;
  }

  // Checkpoint helpers; all are no-ops when no output directory is configured.

  void save_segmenters(const std::string& phase, const SegmenterParams<float>* m_s,
                       const SegmenterParams<float>* m_t,
                       const std::vector<std::pair<std::string, std::string>>& meta) const {
    if (cfg_.out.empty()) return;
    CheckpointWriter w(cfg_.out / ("phase_" + phase));
    if (m_s) w.add_model("ms", *m_s);
    if (m_t) w.add_model("mt", *m_t);
    add_common_meta(w);
    for (const auto& [k, v] : meta) w.add_meta(k, v);
    w.finish();
  }

  void save_translators(const std::string& phase, const TranslatorSet& t) const {
    if (cfg_.out.empty()) return;
    CheckpointWriter w(cfg_.out / ("phase_" + phase));
    w.add_model("g_st", t.g_st);
    w.add_model("g_ts", t.g_ts);
    w.add_model("d_source", t.d_source);
    w.add_model("d_target", t.d_target);
    w.add_meta("recon_initial", t.recon_initial);
    w.add_meta("recon_final", t.recon_final);
    add_common_meta(w);
    w.finish();
  }

  void save_dpas_round(std::size_t n, const DpasResult& r) const {
    if (cfg_.out.empty()) return;
    const auto dir = cfg_.out / ("phase_dpas_" + std::to_string(n));
    CheckpointWriter w(dir);
    w.add_model("ms", r.m_s);
    w.add_model("mt", r.m_t);
    add_common_meta(w);
    w.add_meta("n", std::to_string(n));
    w.add_meta("pseudo_hash_start", std::to_string(r.hash_start));
    w.add_meta("pseudo_hash_end", std::to_string(r.hash_end));
    w.add_meta("pseudo_count", std::to_string(count_labeled(r.pseudo_labels)));
    w.finish();
    std::filesystem::create_directories(dir / "pseudo");
    for (std::size_t k = 0; k < r.pseudo_labels.size(); ++k) {
      save_tensor(dir / "pseudo" / indexed_name("lbl", k), r.pseudo_labels[k]);
    }
    if (!r.source_path_labels.empty()) {
      std::filesystem::create_directories(dir / "pseudo_source_path");
      for (std::size_t k = 0; k < r.source_path_labels.size(); ++k) {
        save_tensor(dir / "pseudo_source_path" / indexed_name("lbl", k), r.source_path_labels[k]);
      }
    }
  }

  void save_final(const SegmenterParams<float>& m_s, const SegmenterParams<float>& m_t,
                  const TranslatorSet& t) const {
    if (cfg_.out.empty()) return;
    CheckpointWriter w(cfg_.out / "final");
    w.add_model("ms", m_s);
    w.add_model("mt", m_t);
    w.add_model("g_st", t.g_st);
    w.add_model("g_ts", t.g_ts);
    add_common_meta(w);
    w.finish();
  }

  void write_log(const std::string& name = "metrics.csv") const {
    if (cfg_.out.empty()) return;
    std::filesystem::create_directories(cfg_.out);
    const std::string text = log_.csv();
    write_bytes(cfg_.out / name,
                std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  }

 private:
  struct PathItem {
    const FeatureGrid<float>* labeled_features;  // image with ground truth (or corrected) labels
    const LabelMap* labeled;
    const FeatureGrid<float>* pseudo_features;   // image with pseudo labels; may be null
    const LabelMap* pseudo;
  };

  struct PathStats {
    double labeled = 0.0, unlabeled = 0.0, adv = 0.0, total = 0.0;
    std::size_t count = 0;
    double mean_labeled() const { return count ? labeled / count : 0.0; }
    double mean_unlabeled() const { return count ? unlabeled / count : 0.0; }
    double mean_seg() const { return count ? (labeled + unlabeled) / count : 0.0; }
    double mean_adv() const { return count ? adv / count : 0.0; }
    double mean_total() const { return count ? total / count : 0.0; }
  };

  /// One alternating update over a batch: feature discriminator first, then
  /// the segmenter on seg loss plus the weighted adversarial term.
  void train_path_batch(SegmenterParams<float>& m, FeatDiscParams<float>& disc,
                        const std::vector<PathItem>& batch, PathStats& stats) const {
    const double inv = 1.0 / static_cast<double>(batch.size());
    const double lambda_adv = cfg_.hp.lambda_adv;
    const bool adversarial = lambda_adv > 0.0 && batch.front().pseudo_features != nullptr;

    if (adversarial) {
      for (std::size_t step = 0; step < cfg_.feat_disc_steps; ++step) {
        FeatDiscParams<float> grad(classes());
        for (const auto& item : batch) {
          const ProbMap p_src = softmax(segmenter_scores(m, *item.labeled_features));
          const ProbMap p_tgt = softmax(segmenter_scores(m, *item.pseudo_features));
          const auto l = adv_feature_loss(feat_disc_forward(disc, p_src),
                                          feat_disc_forward(disc, p_tgt),
                                          AdversarialRole::kDiscriminator);
          accumulate(grad, feat_disc_backward(disc, p_src, l.grad_first).params, inv);
          accumulate(grad, feat_disc_backward(disc, p_tgt, l.grad_second).params, inv);
        }
        disc = sgd_step(disc, grad, cfg_.lr_feat_disc);
      }
    }

    SegmenterParams<float> grad(m.classes);
    for (const auto& item : batch) {
      const ScoreMap s_src = segmenter_scores(m, *item.labeled_features);
      auto ce_src = seg_cross_entropy(s_src, *item.labeled, cfg_.normalize_by_labeled);
      double item_total = ce_src.value;
      stats.labeled += ce_src.value;
      if (adversarial) {
        const ProbMap p_src = softmax(s_src);
        const auto adv = adv_feature_loss(feat_disc_forward(disc, p_src), 0.0,
                                          AdversarialRole::kGenerator);
        const ProbMap g_prob = feat_disc_backward(disc, p_src, adv.grad_first).input;
        const ScoreMap g_scores = softmax_backward(p_src, g_prob);
        for (std::size_t k = 0; k < g_scores.size(); ++k) {
          ce_src.grad.data()[k] += static_cast<float>(lambda_adv * g_scores.data()[k]);
        }
        stats.adv += adv.value;
        item_total += lambda_adv * adv.value;
      }
      accumulate(grad, segmenter_backward(m, *item.labeled_features, ce_src.grad), inv);
      if (item.pseudo_features != nullptr) {
        const ScoreMap s_tgt = segmenter_scores(m, *item.pseudo_features);
        const auto ce_tgt = seg_cross_entropy(s_tgt, *item.pseudo, cfg_.normalize_by_labeled);
        stats.unlabeled += ce_tgt.value;
        item_total += ce_tgt.value;
        accumulate(grad, segmenter_backward(m, *item.pseudo_features, ce_tgt.grad), inv);
      }
      stats.total += item_total;
      ++stats.count;
      if (!std::isfinite(item_total)) throw Error(ErrorCode::kDivergence, "segmentation loss");
    }
    m = sgd_step(m, grad, cfg_.lr_segmenter);
    if (!all_finite(m) || !all_finite(disc)) {
      throw Error(ErrorCode::kDivergence, "non-finite segmenter parameters");
    }
  }

  double mean_cycle_error(const TranslatorSet& set) const {
    double sum = 0.0;
    for (const auto& s : data_.source_images) {
      sum += recon_loss(s, translator_forward(set.g_ts, translator_forward(set.g_st, s))).value;
    }
    for (const auto& t : data_.target_images) {
      sum += recon_loss(t, translator_forward(set.g_st, translator_forward(set.g_ts, t))).value;
    }
    return sum / static_cast<double>(data_.source_images.size() + data_.target_images.size());
  }

  TranslatorParams<float> jittered_identity(std::mt19937_64& rng) const {
    TranslatorParams<float> p = TranslatorParams<float>::identity();
    if (cfg_.translator_init_std <= 0.0) return p;
    std::normal_distribution<double> noise(0.0, cfg_.translator_init_std);
    for (float& v : p.values) v = static_cast<float>(v + noise(rng));
    return p;
  }

  std::vector<FeatureGrid<float>> features_of(const std::vector<Image>& images) const {
    std::vector<FeatureGrid<float>> out;
    out.reserve(images.size());
    for (const auto& img : images) out.push_back(extract_features(img));
    return out;
  }

  std::mt19937_64 phase_rng(std::uint64_t phase) const {
    std::seed_seq seq{static_cast<std::uint32_t>(cfg_.hp.seed),
                      static_cast<std::uint32_t>(cfg_.hp.seed >> 32),
                      static_cast<std::uint32_t>(phase)};
    return std::mt19937_64(seq);
  }

  static std::vector<std::size_t> shuffled(std::size_t n, std::mt19937_64& rng) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    // Fisher-Yates with an explicit draw so the order does not depend on the
    // standard library's shuffle implementation.
    for (std::size_t k = n; k > 1; --k) {
      const std::size_t j = static_cast<std::size_t>(rng() % k);
      std::swap(order[k - 1], order[j]);
    }
    return order;
  }

  std::optional<double> eval_miou(const SegmenterParams<float>& m) const {
    if (eval_ == nullptr || eval_->images.empty()) return std::nullopt;
    return evaluate_miou(m, eval_->images, eval_->labels);
  }

  void add_common_meta(CheckpointWriter& w) const {
    const HyperParams& hp = cfg_.hp;
    w.add_meta("delta", hp.delta);
    w.add_meta("mpt_threshold", hp.mpt_threshold);
    w.add_meta("alpha", hp.alpha);
    w.add_meta("lambda_adv", hp.lambda_adv);
    w.add_meta("lambda_recon", hp.lambda_recon);
    w.add_meta("lambda_dual_per", hp.lambda_dual_per);
    w.add_meta("iterations", std::to_string(hp.iterations));
    w.add_meta("seed", std::to_string(hp.seed));
    w.add_meta("strategy", std::string(to_string(cfg_.strategy)));
  }

  TrainConfig cfg_;
  const TrainingData& data_;
  const EvalData* eval_;
  MetricsLog log_;
};

}  // namespace dpl
