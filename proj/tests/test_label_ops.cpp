#include <gtest/gtest.h>

#include "dpl/label_ops.hpp"
#include "support.hpp"

namespace dpl {
namespace {

ProbMap pixel(std::initializer_list<float> values) {
  ProbMap p(1, 1, values.size());
  std::copy(values.begin(), values.end(), p.data().begin());
  return p;
}

LabelMap single_label(std::uint8_t v) { return make_label_map(1, 1, v); }

std::size_t labeled(const LabelMap& y) { return test::count_labeled(y); }

// Sharp-ish maps so that thresholds near 0.9 select a non-trivial subset.
ProbMap random_map(std::mt19937_64& rng, std::size_t side = 8, std::size_t classes = 4) {
  return test::random_probs(rng, side, side, classes, 3.0);
}

TEST(CorrectLabels, Examples) {
  EXPECT_EQ(correct_labels(single_label(0), pixel({0.2f, 0.7f, 0.1f}), 0.3)(0, 0), 1);
  EXPECT_EQ(correct_labels(single_label(0), pixel({0.45f, 0.55f}), 0.3)(0, 0), 0);
  // Predicted class equals the ground truth: gap 0, nothing to replace.
  EXPECT_EQ(correct_labels(single_label(1), pixel({0.1f, 0.9f}), 0.0)(0, 0), 1);
  EXPECT_EQ(correct_labels(single_label(kUnlabeled), pixel({0.0f, 1.0f}), 0.0)(0, 0),
            kUnlabeled);
}

TEST(CorrectLabels, IdentityForLargeDelta) {
  auto rng = test::rng_for(31);
  for (int trial = 0; trial < 100; ++trial) {
    const ProbMap p = random_map(rng);
    const LabelMap y = test::random_labels(rng, 8, 8, 4, 0.1);
    for (double delta : {1.0, 1.5, 10.0}) EXPECT_EQ(correct_labels(y, p, delta), y);
  }
  // Even a one-hot prediction against the ground truth has gap exactly 1.
  EXPECT_EQ(correct_labels(single_label(0), pixel({0.0f, 1.0f}), 1.0)(0, 0), 0);
}

TEST(CorrectLabels, ReplacementsShrinkWithDelta) {
  auto rng = test::rng_for(32);
  for (int trial = 0; trial < 100; ++trial) {
    const ProbMap p = random_map(rng);
    const LabelMap y = test::random_labels(rng, 8, 8, 4, 0.1);
    std::size_t previous = y.pixels() + 1;
    LabelMap previous_map;
    for (double delta = 0.0; delta <= 1.0001; delta += 0.05) {
      const LabelMap corrected = correct_labels(y, p, delta);
      const std::size_t changed = count_changed(y, corrected);
      EXPECT_LE(changed, previous);
      if (!previous_map.empty()) {
        // The replacement set itself shrinks, not only its size.
        for (std::size_t k = 0; k < y.pixels(); ++k) {
          if (corrected.data()[k] != y.data()[k]) {
            EXPECT_EQ(previous_map.data()[k], corrected.data()[k]);
          }
        }
      }
      previous = changed;
      previous_map = corrected;
    }
  }
}

TEST(CorrectLabels, Errors) {
  EXPECT_THROW(correct_labels(make_label_map(2, 2, 0), ProbMap(1, 1, 2, 0.5f), 0.3), Error);
  EXPECT_THROW(correct_labels(single_label(0), pixel({0.5f, 0.5f}), -0.1), Error);
  EXPECT_THROW(correct_labels(single_label(3), pixel({0.5f, 0.5f}), 0.3), Error);
}

TEST(FuseWeighted, Examples) {
  const ProbMap fused = fuse_weighted(pixel({0.8f, 0.2f}), pixel({0.4f, 0.6f}), 0.5);
  EXPECT_NEAR(fused(0, 0, 0), 0.6f, 1e-7);
  EXPECT_NEAR(fused(0, 0, 1), 0.4f, 1e-7);
  EXPECT_NO_THROW(validate(fused));
}

TEST(FuseWeighted, EndpointsAndFixedPointAreExact) {
  auto rng = test::rng_for(33);
  for (int trial = 0; trial < 50; ++trial) {
    const ProbMap a = random_map(rng);
    const ProbMap b = random_map(rng);
    EXPECT_EQ(fuse_weighted(a, b, 1.0), a);
    EXPECT_EQ(fuse_weighted(a, b, 0.0), b);
    EXPECT_EQ(fuse_inference(a, a), a);
    for (double alpha : {0.1, 0.5, 0.9}) EXPECT_EQ(fuse_weighted(a, a, alpha), a);
  }
}

TEST(FuseWeighted, Errors) {
  EXPECT_THROW(fuse_weighted(pixel({0.5f, 0.5f}), pixel({0.2f, 0.3f, 0.5f})), Error);
  EXPECT_THROW(fuse_weighted(pixel({0.5f, 0.5f}), pixel({0.5f, 0.5f}), 1.5), Error);
  EXPECT_THROW(fuse_weighted(pixel({0.5f, 0.5f}), pixel({0.5f, 0.5f}), -0.5), Error);
}

TEST(FuseInference, IsTheAverage) {
  const ProbMap f = fuse_inference(pixel({0.9f, 0.1f}), pixel({0.3f, 0.7f}));
  EXPECT_NEAR(f(0, 0, 0), 0.6f, 1e-7);
  EXPECT_NEAR(f(0, 0, 1), 0.4f, 1e-7);
}

TEST(MptSelect, Examples) {
  EXPECT_EQ(mpt_select(pixel({0.92f, 0.08f}), 0.9)(0, 0), 0);
  EXPECT_EQ(mpt_select(pixel({0.88f, 0.12f}), 0.9)(0, 0), kUnlabeled);
  EXPECT_EQ(spplg(pixel({0.05f, 0.95f}), 0.9)(0, 0), 1);
}

TEST(MptSelect, Boundaries) {
  auto rng = test::rng_for(34);
  for (int trial = 0; trial < 100; ++trial) {
    const ProbMap p = random_map(rng);
    EXPECT_EQ(labeled(mpt_select(p, 0.0)), p.pixels());
    EXPECT_EQ(mpt_select(p, 0.0), argmax_labels(p));
    EXPECT_EQ(labeled(mpt_select(p, 1.0)), 0u);
  }
  // A fully confident pixel is still rejected at lambda = 1.
  EXPECT_EQ(mpt_select(pixel({1.0f, 0.0f}), 1.0)(0, 0), kUnlabeled);
  EXPECT_THROW(mpt_select(pixel({1.0f, 0.0f}), 1.1), Error);
}

TEST(MptSelect, CountNonIncreasingInLambda) {
  auto rng = test::rng_for(35);
  for (int trial = 0; trial < 100; ++trial) {
    const ProbMap p = random_map(rng);
    std::size_t previous = p.pixels();
    for (double lambda = 0.0; lambda <= 1.0; lambda += 0.02) {
      const std::size_t n = labeled(mpt_select(p, lambda));
      EXPECT_LE(n, previous);
      previous = n;
    }
  }
}

TEST(DpplgWeighted, Examples) {
  EXPECT_EQ(dpplg_weighted(pixel({0.95f, 0.05f}), pixel({0.86f, 0.14f}), 0.5, 0.9)(0, 0), 0);
  // Compose the fusion and MPT hand examples: (0.6, 0.4) is below 0.9.
  EXPECT_EQ(dpplg_weighted(pixel({0.8f, 0.2f}), pixel({0.4f, 0.6f}), 0.5, 0.9)(0, 0), kUnlabeled);
  EXPECT_EQ(dpplg_weighted(pixel({0.8f, 0.2f}), pixel({0.4f, 0.6f}), 0.5, 0.5)(0, 0), 0);
  const ProbMap one_hot = pixel({0.0f, 0.0f, 1.0f});
  EXPECT_EQ(dpplg_weighted(one_hot, one_hot), mpt_select(one_hot, 0.9));
}

TEST(DpplgMax, Examples) {
  EXPECT_EQ(dpplg_max(pixel({0.91f, 0.09f}), pixel({0.99f, 0.01f}), 0.9)(0, 0), 0);
  EXPECT_EQ(dpplg_max(pixel({0.6f, 0.4f}), pixel({0.55f, 0.45f}), 0.9)(0, 0), kUnlabeled);
  // Path-S is more confident and disagrees: its class wins.
  EXPECT_EQ(dpplg_max(pixel({0.92f, 0.08f}), pixel({0.03f, 0.97f}), 0.9)(0, 0), 1);
  // Equal maxima resolve to path-T.
  EXPECT_EQ(dpplg_max(pixel({0.95f, 0.05f}), pixel({0.05f, 0.95f}), 0.9)(0, 0), 0);
  auto rng = test::rng_for(36);
  const ProbMap p = random_map(rng);
  EXPECT_EQ(dpplg_max(p, p, 0.9), mpt_select(p, 0.9));
}

TEST(DpplgJoint, Examples) {
  EXPECT_EQ(dpplg_joint(pixel({0.05f, 0.95f}), pixel({0.5f, 0.5f}), 0.9)(0, 0), kUnlabeled);
  EXPECT_EQ(dpplg_joint(pixel({0.02f, 0.95f, 0.03f}), pixel({0.03f, 0.04f, 0.93f}), 0.9)(0, 0),
            kUnlabeled);
  EXPECT_EQ(dpplg_joint(pixel({0.05f, 0.95f}), pixel({0.04f, 0.96f}), 0.9)(0, 0), 1);
  const ProbMap one_hot = pixel({0.0f, 1.0f, 0.0f});
  EXPECT_EQ(dpplg_joint(one_hot, one_hot), mpt_select(one_hot, 0.9));
}

TEST(DpplgJoint, SubsetOfEachPath) {
  auto rng = test::rng_for(37);
  for (int trial = 0; trial < 100; ++trial) {
    const ProbMap pt = random_map(rng);
    const ProbMap ps = random_map(rng);
    for (double lambda : {0.0, 0.5, 0.8, 0.9}) {
      const LabelMap joint = dpplg_joint(pt, ps, lambda);
      const LabelMap lt = mpt_select(pt, lambda);
      const LabelMap ls = mpt_select(ps, lambda);
      for (std::size_t k = 0; k < joint.pixels(); ++k) {
        if (joint.data()[k] == kUnlabeled) continue;
        EXPECT_EQ(joint.data()[k], lt.data()[k]);
        EXPECT_EQ(joint.data()[k], ls.data()[k]);
      }
    }
  }
}

TEST(Strategies, AgreeWhereArgmaxesAgree) {
  auto rng = test::rng_for(38);
  std::size_t agreeing = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const ProbMap pt = random_map(rng);
    // Correlate the paths so that agreement is common.
    ProbMap ps = fuse_weighted(pt, random_map(rng), 0.5);
    const LabelMap at = argmax_labels(pt);
    const LabelMap as = argmax_labels(ps);
    std::vector<LabelMap> outputs;
    for (double alpha : {0.0, 0.25, 0.5, 0.75, 1.0}) {
      outputs.push_back(dpplg_weighted(pt, ps, alpha, 0.0));
      outputs.push_back(dpplg_weighted(pt, ps, alpha, 0.6));
    }
    outputs.push_back(dpplg_max(pt, ps, 0.0));
    outputs.push_back(dpplg_max(pt, ps, 0.6));
    outputs.push_back(dpplg_joint(pt, ps, 0.0));
    outputs.push_back(dpplg_joint(pt, ps, 0.6));
    for (std::size_t k = 0; k < pt.pixels(); ++k) {
      if (at.data()[k] != as.data()[k]) continue;
      ++agreeing;
      for (const LabelMap& out : outputs) {
        const auto v = out.data()[k];
        EXPECT_TRUE(v == kUnlabeled || v == at.data()[k]);
      }
    }
  }
  EXPECT_GT(agreeing, 5000u);
}

TEST(Strategies, Deterministic) {
  auto rng = test::rng_for(39);
  const ProbMap pt = random_map(rng);
  const ProbMap ps = random_map(rng);
  for (auto s : {PseudoLabelStrategy::kWeighted, PseudoLabelStrategy::kMax,
                 PseudoLabelStrategy::kJoint}) {
    EXPECT_EQ(dual_path_pseudo_labels(s, pt, ps, 0.5, 0.7),
              dual_path_pseudo_labels(s, pt, ps, 0.5, 0.7));
  }
  EXPECT_EQ(correct_labels(argmax_labels(ps), pt, 0.3), correct_labels(argmax_labels(ps), pt, 0.3));
  EXPECT_THROW(dual_path_pseudo_labels(PseudoLabelStrategy::kSingle, pt, ps, 0.5, 0.9), Error);
}

TEST(Strategies, ParseNames) {
  for (auto s : {PseudoLabelStrategy::kWeighted, PseudoLabelStrategy::kMax,
                 PseudoLabelStrategy::kJoint, PseudoLabelStrategy::kSingle}) {
    EXPECT_EQ(parse_strategy(to_string(s)), s);
  }
  EXPECT_THROW(parse_strategy("average"), Error);
}

}  // namespace
}  // namespace dpl
