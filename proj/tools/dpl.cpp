// dpl: synthesize the benchmark, train in one go or phase by phase, run
// inference and produce metric reports.

#include <iostream>
#include <optional>
#include <regex>
#include <string>

#include "CLI11.hpp"
#include "dpl/checkpoint.hpp"
#include "dpl/cli_support.hpp"
#include "dpl/metrics.hpp"
#include "dpl/trainer.hpp"

namespace fs = std::filesystem;
using namespace dpl;

namespace {

struct Loaded {
  ExperimentConfig exp;
  DatasetManifest dataset;
  TrainingData train;
  EvalData eval;
};

ExperimentConfig read_config(const std::string& path, std::optional<std::uint64_t> seed,
                             const std::string& out) {
  KeyValues kv = load_config_with_overrides(path, seed);
  ExperimentConfig e = experiment_config_from(kv);
  if (!out.empty()) e.train.out = out;
  return e;
}

Loaded load_everything(const std::string& config, std::optional<std::uint64_t> seed,
                       const std::string& out) {
  Loaded l;
  l.exp = read_config(config, seed, out);
  if (l.exp.train.dataset.empty()) {
    throw Error(ErrorCode::kConfig, "config must name a dataset directory (dataset = ...)");
  }
  l.dataset = read_manifest(l.exp.train.dataset);
  l.train = load_training_data(l.dataset);
  l.eval = load_eval_data(l.dataset);
  return l;
}

void print_miou(const char* name, const std::optional<double>& v) {
  std::cout << name << " target mIoU: " << (v ? format_double(*v) : std::string("NA")) << "\n";
}

// Latest phase_dpas_<n> under `dir`, or 0 when none exists.
std::size_t latest_round(const fs::path& dir) {
  static const std::regex pattern("phase_dpas_([0-9]+)");
  std::size_t best = 0;
  if (!fs::is_directory(dir)) return 0;
  for (const auto& entry : fs::directory_iterator(dir)) {
    std::smatch m;
    const std::string name = entry.path().filename().string();
    if (entry.is_directory() && std::regex_match(name, m, pattern)) {
      best = std::max<std::size_t>(best, std::stoul(m[1]));
    }
  }
  return best;
}

int cmd_synth(const std::string& config, const std::string& out) {
  KeyValues kv = KeyValues::load(config);
  ExperimentConfig e = experiment_config_from(kv);
  e.data.root = out;
  write_dataset(e.data);
  std::cout << "wrote dataset to " << out << "\n"
            << "  " << e.data.train_source << " source, " << e.data.train_target << " target, "
            << e.data.eval_target << " eval images of " << e.data.spec.height << "x"
            << e.data.spec.width << "\n"
            << "  shift condition number " << format_double(shift_condition_number(e.data.spec))
            << "\n";
  return kExitOk;
}

int cmd_run(const std::string& config, const std::string& out, std::optional<std::uint64_t> seed) {
  Loaded l = load_everything(config, seed, out);
  DplTrainer trainer(l.exp.train, l.train, &l.eval);
  const DplResult r = trainer.run();
  print_miou("M_S^(0)", r.miou_s0);
  print_miou("M_T^(0)", r.miou_t0);
  print_miou("M_T^(N)", r.miou_t);
  std::cout << "DPL-Dual target mIoU: "
            << format_double(evaluate_dual_miou(r.m_t, r.m_s, r.dpit.g_ts, l.eval.images,
                                                l.eval.labels))
            << "\n";
  return kExitOk;
}

int cmd_warmup(const std::string& config, const std::string& out,
               std::optional<std::uint64_t> seed) {
  Loaded l = load_everything(config, seed, out);
  DplTrainer trainer(l.exp.train, l.train, &l.eval);
  const auto m_s = trainer.warmup_source();
  trainer.save_segmenters("warmup_source", &m_s, nullptr, {});
  const auto naive = trainer.train_naive_translators(m_s);
  trainer.save_translators("naive_translation", naive);
  const auto wt = trainer.warmup_target(m_s, naive);
  trainer.save_segmenters("warmup_target", nullptr, &wt.m_t, {});
  trainer.write_log("metrics_warmup.csv");
  print_miou("M_S^(0)", evaluate_miou(m_s, l.eval.images, l.eval.labels));
  print_miou("M_T^(0)", evaluate_miou(wt.m_t, l.eval.images, l.eval.labels));
  return kExitOk;
}

int cmd_dpit(const std::string& config, const std::string& out, const std::string& resume,
             std::optional<std::uint64_t> seed) {
  Loaded l = load_everything(config, seed, out);
  const auto m_s = load_segmenter(fs::path(resume) / "phase_warmup_source", "ms");
  const auto m_t = load_segmenter(fs::path(resume) / "phase_warmup_target", "mt");
  DplTrainer trainer(l.exp.train, l.train, &l.eval);
  const auto set = trainer.train_dpit(m_s, m_t);
  trainer.save_translators("dpit", set);
  trainer.write_log("metrics_dpit.csv");
  std::cout << "cycle MAE " << format_double(set.recon_initial) << " -> "
            << format_double(set.recon_final) << "\n";
  return kExitOk;
}

int cmd_dpas(const std::string& config, const std::string& out, const std::string& resume,
             std::optional<std::uint64_t> seed) {
  Loaded l = load_everything(config, seed, out);
  const fs::path from(resume);
  const std::size_t done = latest_round(from);
  SegmenterParams<float> m_s, m_t;
  if (done == 0) {
    m_s = load_segmenter(from / "phase_warmup_source", "ms");
    m_t = load_segmenter(from / "phase_warmup_target", "mt");
  } else {
    const fs::path last = from / ("phase_dpas_" + std::to_string(done));
    m_s = load_segmenter(last, "ms");
    m_t = load_segmenter(last, "mt");
  }
  TranslatorSet set;
  set.g_st = load_translator(from / "phase_dpit", "g_st");
  set.g_ts = load_translator(from / "phase_dpit", "g_ts");

  DplTrainer trainer(l.exp.train, l.train, &l.eval);
  for (std::size_t k = 1; k <= l.exp.train.hp.iterations; ++k) {
    const std::size_t n = done + k;
    const DpasResult r = trainer.dpas_iteration(m_s, m_t, set, n);
    m_s = r.m_s;
    m_t = r.m_t;
    trainer.save_dpas_round(n, r);
    print_miou(("M_T^(" + std::to_string(n) + ")").c_str(),
               evaluate_miou(m_t, l.eval.images, l.eval.labels));
  }
  trainer.save_final(m_s, m_t, set);
  trainer.write_log("metrics_dpas.csv");
  return kExitOk;
}

int cmd_infer(const std::string& model_dir, const std::string& images, bool dual,
              const std::string& out, bool dump_probs) {
  const fs::path dir(model_dir);
  const auto m_t = load_segmenter(dir, "mt");
  std::optional<SegmenterParams<float>> m_s;
  std::optional<TranslatorParams<float>> g_ts;
  if (dual) {
    if (!fs::exists(dir / "model_g_ts.dplt")) {
      throw Error(ErrorCode::kMissingData,
                  "--dual needs a target-to-source translator (model_g_ts.dplt) in " + model_dir);
    }
    m_s = load_segmenter(dir, "ms");
    g_ts = load_translator(dir, "g_ts");
  }
  fs::create_directories(out);
  const auto files = list_tensors(images, "img");
  if (files.empty()) throw Error(ErrorCode::kMissingData, "no img_*.dplt files in " + images);
  for (const auto& file : files) {
    const Image img = load_tensor_as<Image>(file);
    const ProbMap p = dual ? infer_dpl_dual(m_t, *m_s, *g_ts, img) : infer_dpl(m_t, img);
    save_tensor(fs::path(out) / swap_prefix(file, "img", "lbl"), argmax_labels(p));
    if (dump_probs) save_tensor(fs::path(out) / swap_prefix(file, "img", "prob"), p);
  }
  std::cout << "labelled " << files.size() << " images into " << out << "\n";
  return kExitOk;
}

// Pairs lbl_* files of two directories by name.
template <typename F>
void for_each_label_pair(const std::string& a_dir, const std::string& gt_dir, F&& f) {
  const auto files = list_tensors(a_dir, "lbl");
  if (files.empty()) throw Error(ErrorCode::kMissingData, "no lbl_*.dplt files in " + a_dir);
  for (const auto& file : files) {
    const fs::path gt = fs::path(gt_dir) / file.filename();
    if (!fs::exists(gt)) throw Error(ErrorCode::kMissingData, "no ground truth " + gt.string());
    f(load_tensor_as<LabelMap>(file), load_tensor_as<LabelMap>(gt));
  }
}

void write_text(const std::string& path, const std::string& text) {
  if (path == "-") {
    std::cout << text;
    return;
  }
  write_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

int cmd_eval(const std::string& pred_dir, const std::string& gt_dir, const std::string& out,
             std::size_t classes) {
  ConfusionMatrix cm(classes);
  for_each_label_pair(pred_dir, gt_dir, [&](const LabelMap& p, const LabelMap& g) {
    cm.accumulate(p, g);
  });
  std::ostringstream csv;
  write_iou_report(csv, cm);
  write_text(out, csv.str());
  return kExitOk;
}

int cmd_analyze(const std::string& pseudo_dir, const std::string& gt_dir, const std::string& out,
                std::size_t classes) {
  PseudoQualityCounts counts(classes);
  for_each_label_pair(pseudo_dir, gt_dir, [&](const LabelMap& p, const LabelMap& g) {
    counts.accumulate(p, g);
  });
  std::ostringstream csv;
  write_pseudo_report(csv, counts);
  write_text(out, csv.str());
  return kExitOk;
}

int cmd_export_ppm(const std::string& in, const std::string& out) {
  const TensorPayload t = load_tensor(in);
  std::vector<std::uint8_t> bytes;
  if (const auto* img = std::get_if<Image>(&t)) {
    bytes = encode_ppm(*img);
  } else if (const auto* lbl = std::get_if<LabelMap>(&t)) {
    bytes = encode_ppm(*lbl);
  } else {
    throw Error(ErrorCode::kBadKind, "export-ppm handles Image and LabelMap tensors only");
  }
  write_bytes(out, bytes);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-path domain-adaptive segmentation on a synthetic benchmark"};
  app.require_subcommand(1);

  std::string config, out, resume, model_dir, images, pred_dir, gt_dir, pseudo_dir, in;
  std::optional<std::uint64_t> seed;
  bool dual = false, dump_probs = false;
  std::size_t classes = kSceneClasses;

  auto* synth = app.add_subcommand("synth", "write the synthetic dataset tree");
  synth->add_option("--config", config, "key = value config")->required()->check(CLI::ExistingFile);
  synth->add_option("--out", out, "dataset root")->required();

  auto add_train_flags = [&](CLI::App* cmd) {
    cmd->add_option("--config", config, "key = value config")->required()->check(CLI::ExistingFile);
    cmd->add_option("--out", out, "checkpoint directory")->required();
    cmd->add_option("--seed", seed, "overrides DPL_SEED and the config seed");
  };
  auto* run = app.add_subcommand("run", "all phases end to end");
  add_train_flags(run);
  auto* warmup = app.add_subcommand("warmup", "source warm-up, naive translators, target warm-up");
  add_train_flags(warmup);
  auto* dpit = app.add_subcommand("dpit", "dual path image translation from warm-up checkpoints");
  add_train_flags(dpit);
  dpit->add_option("--resume", resume, "directory holding the warm-up phases")->required();
  auto* dpas = app.add_subcommand("dpas", "adaptive segmentation rounds from checkpoints");
  add_train_flags(dpas);
  dpas->add_option("--resume", resume, "directory holding warm-up, dpit and earlier rounds")
      ->required();

  auto* infer = app.add_subcommand("infer", "label target images");
  infer->add_option("--model-dir", model_dir, "checkpoint directory with model_mt.dplt")->required();
  infer->add_option("--images", images, "directory of img_*.dplt")->required();
  infer->add_flag("--dual", dual, "fuse with M_S on translated images");
  infer->add_option("--out", out, "output directory")->required();
  infer->add_flag("--dump-probs", dump_probs, "also write prob_*.dplt probability maps");

  auto* eval = app.add_subcommand("eval", "per-class IoU and mIoU CSV");
  eval->add_option("--pred-dir", pred_dir, "directory of predicted lbl_*.dplt")->required();
  eval->add_option("--gt-dir", gt_dir, "directory of ground-truth lbl_*.dplt")->required();
  eval->add_option("--out", out, "CSV path, or - for stdout")->required();
  eval->add_option("--classes", classes, "number of classes");

  auto* analyze = app.add_subcommand("analyze", "pseudo-label accuracy and pixel ratio CSV");
  analyze->add_option("--pseudo-dir", pseudo_dir, "directory of pseudo lbl_*.dplt")->required();
  analyze->add_option("--gt-dir", gt_dir, "directory of ground-truth lbl_*.dplt")->required();
  analyze->add_option("--out", out, "CSV path, or - for stdout")->required();
  analyze->add_option("--classes", classes, "number of classes");

  auto* ppm = app.add_subcommand("export-ppm", "render an Image or LabelMap as binary PPM");
  ppm->add_option("--in", in, "input .dplt")->required();
  ppm->add_option("--out", out, "output .ppm")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*synth) return cmd_synth(config, out);
    if (*run) return cmd_run(config, out, seed);
    if (*warmup) return cmd_warmup(config, out, seed);
    if (*dpit) return cmd_dpit(config, out, resume, seed);
    if (*dpas) return cmd_dpas(config, out, resume, seed);
    if (*infer) return cmd_infer(model_dir, images, dual, out, dump_probs);
    if (*eval) return cmd_eval(pred_dir, gt_dir, out, classes);
    if (*analyze) return cmd_analyze(pseudo_dir, gt_dir, out, classes);
    if (*ppm) return cmd_export_ppm(in, out);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitOther;
  }
  return kExitOther;
}
