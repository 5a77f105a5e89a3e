#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>

#include "dpl/checkpoint.hpp"
#include "dpl/cli_support.hpp"
#include "dpl/trainer.hpp"
#include "support.hpp"

namespace dpl {
namespace {

namespace fs = std::filesystem;

const char* const kTinyConfig =
    "height = 12\nwidth = 12\ntrain_source = 6\ntrain_target = 6\neval_target = 3\n"
    "epochs_warmup_source = 1\nepochs_naive_translation = 1\nepochs_warmup_target = 1\n"
    "epochs_dpit = 1\nepochs_dpas = 1\n";

// Runs the tool through the shell with an optional environment prefix and
// returns its exit status. Output goes to `log` so failures can be inspected.
int run_cli(const std::string& args, const fs::path& log, const std::string& env = "") {
  const std::string cmd = (env.empty() ? "" : env + " ") + "\"" DPL_CLI_PATH "\" " + args + " > \"" +
                          log.string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  const auto bytes = read_bytes(p);
  return {bytes.begin(), bytes.end()};
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream(p) << text;
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = test::scratch_dir(std::string("cli_") +
                             ::testing::UnitTest::GetInstance()->current_test_info()->name());
    log_ = dir_ / "log.txt";
    write_file(dir_ / "data.cfg", kTinyConfig);
    ASSERT_EQ(run_cli("synth --config " + q(dir_ / "data.cfg") + " --out " + q(dir_ / "data"), log_),
              0)
        << slurp(log_);
    write_file(dir_ / "train.cfg", std::string(kTinyConfig) + "dataset = " +
                                       (dir_ / "data").string() + "\nseed = 5\n");
  }

  static std::string q(const fs::path& p) { return "\"" + p.string() + "\""; }

  std::string seed_after_warmup(const std::string& extra, const std::string& env) {
    const fs::path out = dir_ / "seed_run";
    fs::remove_all(out);
    EXPECT_EQ(run_cli("warmup --config " + q(dir_ / "train.cfg") + " --out " + q(out) + extra, log_,
                      env),
              0)
        << slurp(log_);
    return read_checkpoint_manifest(out / "phase_warmup_source").meta.at("seed");
  }

  fs::path dir_;
  fs::path log_;
};

TEST_F(CliTest, SynthWritesLayout) {
  EXPECT_TRUE(fs::exists(dir_ / "data" / "manifest.txt"));
  EXPECT_TRUE(fs::exists(dir_ / "data" / "source" / "lbl_00005.dplt"));
  EXPECT_TRUE(fs::exists(dir_ / "data" / "eval" / "lbl_00002.dplt"));
  EXPECT_NE(slurp(log_).find("6 source"), std::string::npos);
  // Same config twice gives the same bytes.
  const auto before = slurp(dir_ / "data" / "target" / "img_00004.dplt");
  ASSERT_EQ(run_cli("synth --config " + q(dir_ / "data.cfg") + " --out " + q(dir_ / "data2"), log_),
            0);
  EXPECT_EQ(slurp(dir_ / "data2" / "target" / "img_00004.dplt"), before);
}

TEST_F(CliTest, SeedPrecedence) {
  EXPECT_EQ(seed_after_warmup("", ""), "5");
  EXPECT_EQ(seed_after_warmup("", "DPL_SEED=6"), "6");
  EXPECT_EQ(seed_after_warmup(" --seed 7", "DPL_SEED=6"), "7");
  EXPECT_EQ(run_cli("warmup --config " + q(dir_ / "train.cfg") + " --out " + q(dir_ / "x"), log_,
                    "DPL_SEED=abc"),
            kExitConfig);
}

TEST_F(CliTest, PhaseWiseMatchesRun) {
  const fs::path whole = dir_ / "whole";
  const fs::path phases = dir_ / "phases";
  const std::string cfg = q(dir_ / "train.cfg");
  ASSERT_EQ(run_cli("run --config " + cfg + " --out " + q(whole), log_), 0) << slurp(log_);
  EXPECT_NE(slurp(log_).find("DPL-Dual target mIoU"), std::string::npos);
  ASSERT_EQ(run_cli("warmup --config " + cfg + " --out " + q(phases), log_), 0) << slurp(log_);
  ASSERT_EQ(run_cli("dpit --config " + cfg + " --out " + q(phases) + " --resume " + q(phases), log_),
            0)
      << slurp(log_);
  ASSERT_EQ(run_cli("dpas --config " + cfg + " --out " + q(phases) + " --resume " + q(phases), log_),
            0)
      << slurp(log_);
  for (const char* file : {"phase_warmup_target/model_mt.dplt", "phase_dpit/model_g_ts.dplt",
                           "phase_dpas_1/model_mt.dplt", "phase_dpas_1/pseudo/lbl_00002.dplt",
                           "final/model_ms.dplt"}) {
    EXPECT_EQ(slurp(phases / file), slurp(whole / file)) << file;
  }
  EXPECT_TRUE(fs::exists(phases / "metrics_warmup.csv"));
  EXPECT_TRUE(fs::exists(phases / "metrics_dpit.csv"));
  EXPECT_TRUE(fs::exists(phases / "metrics_dpas.csv"));

  // A second dpas continues the round numbering from the latest checkpoint.
  ASSERT_EQ(run_cli("dpas --config " + cfg + " --out " + q(phases) + " --resume " + q(phases), log_),
            0)
      << slurp(log_);
  EXPECT_EQ(read_checkpoint_manifest(phases / "phase_dpas_2").meta.at("n"), "2");
}

TEST_F(CliTest, InferEvalAnalyzeAndExport) {
  const fs::path run = dir_ / "run";
  ASSERT_EQ(run_cli("run --config " + q(dir_ / "train.cfg") + " --out " + q(run), log_), 0)
      << slurp(log_);
  const fs::path pred = dir_ / "pred";
  ASSERT_EQ(run_cli("infer --model-dir " + q(run / "final") + " --images " + q(dir_ / "data/eval") +
                        " --out " + q(pred) + " --dump-probs",
                    log_),
            0)
      << slurp(log_);
  // Default mode: argmax of M_T's probabilities.
  const auto m_t = load_segmenter(run / "final", "mt");
  const Image img = load_tensor_as<Image>(dir_ / "data/eval/img_00001.dplt");
  EXPECT_EQ(load_tensor_as<LabelMap>(pred / "lbl_00001.dplt"), argmax_labels(infer_dpl(m_t, img)));
  EXPECT_EQ(load_tensor_as<ProbMap>(pred / "prob_00001.dplt"), infer_dpl(m_t, img));

  const fs::path dual = dir_ / "pred_dual";
  ASSERT_EQ(run_cli("infer --dual --model-dir " + q(run / "final") + " --images " +
                        q(dir_ / "data/eval") + " --out " + q(dual),
                    log_),
            0);
  const auto m_s = load_segmenter(run / "final", "ms");
  const auto g_ts = load_translator(run / "final", "g_ts");
  EXPECT_EQ(load_tensor_as<LabelMap>(dual / "lbl_00001.dplt"),
            argmax_labels(infer_dpl_dual(m_t, m_s, g_ts, img)));

  ASSERT_EQ(run_cli("eval --pred-dir " + q(pred) + " --gt-dir " + q(dir_ / "data/eval") +
                        " --out " + q(dir_ / "eval.csv"),
                    log_),
            0);
  const std::string csv = slurp(dir_ / "eval.csv");
  EXPECT_EQ(csv.rfind("class,iou\n", 0), 0u);
  EXPECT_NE(csv.find("\nmIoU,"), std::string::npos);

  ASSERT_EQ(run_cli("analyze --pseudo-dir " + q(run / "phase_dpas_1/pseudo") + " --gt-dir " +
                        q(dir_ / "data/eval") + " --out -",
                    log_),
            kExitIo)
      << "training pseudo labels have no eval ground truth of the same count";
  ASSERT_EQ(run_cli("analyze --pseudo-dir " + q(pred) + " --gt-dir " + q(dir_ / "data/eval") +
                        " --out -",
                    log_),
            0);
  EXPECT_NE(slurp(log_).find("pixel_ratio,1,"), std::string::npos);

  ASSERT_EQ(run_cli("export-ppm --in " + q(pred / "lbl_00000.dplt") + " --out " +
                        q(dir_ / "l.ppm"),
                    log_),
            0);
  EXPECT_EQ(slurp(dir_ / "l.ppm").rfind("P6\n12 12\n255\n", 0), 0u);
  ASSERT_EQ(run_cli("export-ppm --in " + q(dir_ / "data/eval/img_00000.dplt") + " --out " +
                        q(dir_ / "i.ppm"),
                    log_),
            0);
  EXPECT_EQ(slurp(dir_ / "i.ppm").size(), std::string("P6\n12 12\n255\n").size() + 12 * 12 * 3);
  EXPECT_EQ(run_cli("export-ppm --in " + q(pred / "prob_00000.dplt") + " --out " +
                        q(dir_ / "p.ppm"),
                    log_),
            kExitIo);
}

TEST_F(CliTest, DualFixedPointMatchesDefault) {
  // M_S == M_T and an identity translator: fusion averages two equal maps.
  const fs::path models = dir_ / "models";
  auto rng = test::rng_for(91);
  SegmenterParams<float> m(kSceneClasses);
  std::normal_distribution<double> n(0.0, 1.0);
  for (float& v : m.values) v = static_cast<float>(n(rng));
  CheckpointWriter w(models);
  w.add_model("ms", m);
  w.add_model("mt", m);
  w.add_model("g_ts", TranslatorParams<float>::identity());
  w.finish();
  ASSERT_EQ(run_cli("infer --model-dir " + q(models) + " --images " + q(dir_ / "data/eval") +
                        " --out " + q(dir_ / "a"),
                    log_),
            0);
  ASSERT_EQ(run_cli("infer --dual --model-dir " + q(models) + " --images " +
                        q(dir_ / "data/eval") + " --out " + q(dir_ / "b"),
                    log_),
            0);
  for (const char* f : {"lbl_00000.dplt", "lbl_00001.dplt", "lbl_00002.dplt"}) {
    EXPECT_EQ(slurp(dir_ / "a" / f), slurp(dir_ / "b" / f));
  }
}

TEST_F(CliTest, ExitCodes) {
  // Parse errors and bad configs.
  EXPECT_EQ(run_cli("frobnicate", log_), kExitConfig);
  EXPECT_EQ(run_cli("run --out x", log_), kExitConfig);
  write_file(dir_ / "bad.cfg", "dataset = " + (dir_ / "data").string() + "\nbogus_key = 1\n");
  EXPECT_EQ(run_cli("run --config " + q(dir_ / "bad.cfg") + " --out " + q(dir_ / "o"), log_),
            kExitConfig);
  EXPECT_NE(slurp(log_).find("bogus_key"), std::string::npos);
  write_file(dir_ / "nodata.cfg", "epochs_dpit = 1\n");
  EXPECT_EQ(run_cli("run --config " + q(dir_ / "nodata.cfg") + " --out " + q(dir_ / "o"), log_),
            kExitConfig);

  // I/O: missing dataset, missing checkpoints, corrupt tensors.
  write_file(dir_ / "missing.cfg", "dataset = " + (dir_ / "nowhere").string() + "\n");
  EXPECT_EQ(run_cli("run --config " + q(dir_ / "missing.cfg") + " --out " + q(dir_ / "o"), log_),
            kExitIo);
  EXPECT_EQ(run_cli("dpit --config " + q(dir_ / "train.cfg") + " --out " + q(dir_ / "o") +
                        " --resume " + q(dir_ / "empty"),
                    log_),
            kExitIo);
  write_file(dir_ / "junk.dplt", "not a tensor");
  EXPECT_EQ(run_cli("export-ppm --in " + q(dir_ / "junk.dplt") + " --out " + q(dir_ / "j.ppm"),
                    log_),
            kExitIo);

  // --dual without a translator checkpoint.
  CheckpointWriter w(dir_ / "only_mt");
  w.add_model("mt", SegmenterParams<float>(kSceneClasses));
  w.finish();
  EXPECT_EQ(run_cli("infer --dual --model-dir " + q(dir_ / "only_mt") + " --images " +
                        q(dir_ / "data/eval") + " --out " + q(dir_ / "d"),
                    log_),
            kExitIo);
  EXPECT_NE(slurp(log_).find("--dual"), std::string::npos);

  // Numeric divergence.
  write_file(dir_ / "wild.cfg", std::string(kTinyConfig) + "dataset = " +
                                    (dir_ / "data").string() + "\nlr_segmenter = 1e300\n");
  EXPECT_EQ(run_cli("run --config " + q(dir_ / "wild.cfg") + " --out " + q(dir_ / "w"), log_),
            kExitDivergence);
}

}  // namespace
}  // namespace dpl
