#pragma once

// Random generators and small helpers shared by the test binaries.

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>

#include "dpl/core_types.hpp"

namespace dpl::test {

inline std::mt19937_64 rng_for(std::uint64_t seed, std::uint64_t salt = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(salt),
                    0x5eedu};
  return std::mt19937_64(seq);
}

template <typename T = float>
BasicScoreMap<T> random_scores(std::mt19937_64& rng, std::size_t h, std::size_t w, std::size_t c,
                               double scale = 2.0) {
  std::normal_distribution<double> n(0.0, scale);
  BasicScoreMap<T> s(h, w, c);
  for (T& v : s.data()) v = static_cast<T>(n(rng));
  return s;
}

template <typename T = float>
BasicProbMap<T> random_probs(std::mt19937_64& rng, std::size_t h, std::size_t w, std::size_t c,
                             double scale = 2.0) {
  return softmax(random_scores<T>(rng, h, w, c, scale));
}

template <typename T = float>
BasicImage<T> random_image(std::mt19937_64& rng, std::size_t h, std::size_t w, double lo = 0.0,
                           double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  BasicImage<T> img(h, w, 3);
  for (T& v : img.data()) v = static_cast<T>(u(rng));
  return img;
}

/// Labels in [0, classes), with roughly `unlabeled_fraction` set to UNLABELED.
inline LabelMap random_labels(std::mt19937_64& rng, std::size_t h, std::size_t w,
                              std::size_t classes, double unlabeled_fraction = 0.0) {
  std::uniform_int_distribution<int> cls(0, static_cast<int>(classes) - 1);
  std::bernoulli_distribution drop(unlabeled_fraction);
  LabelMap y = make_label_map(h, w);
  for (auto& v : y.data()) v = drop(rng) ? kUnlabeled : static_cast<std::uint8_t>(cls(rng));
  return y;
}

inline std::size_t count_labeled(const LabelMap& y) {
  std::size_t n = 0;
  for (auto v : y.data()) n += v != kUnlabeled;
  return n;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("dpl_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace dpl::test
