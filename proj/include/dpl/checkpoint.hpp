#pragma once

// Model checkpoints reuse the DPLT container with ScoreMap kind as a flat f32
// tensor. Each checkpoint directory carries a manifest.txt whose lines are
// either `name H W C` (one per stored tensor) or `key=value` metadata.

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dpl/config.hpp"
#include "dpl/models.hpp"
#include "dpl/tensor_io.hpp"

namespace dpl {

/// Segmenter: rows 0..K-1 hold the weight matrix, row K the bias; C = classes.
inline ScoreMap params_to_tensor(const SegmenterParams<float>& p) {
  ScoreMap t(kFeatureCount + 1, 1, p.classes);
  std::copy(p.values.begin(), p.values.end(), t.data().begin());
  return t;
}

/// Translator: 3 x 4 grid, columns 0-2 the matrix row, column 3 the bias.
inline ScoreMap params_to_tensor(const TranslatorParams<float>& p) {
  ScoreMap t(3, 4, 1);
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t s = 0; s < 3; ++s) t(r, s) = p.matrix(r, s);
    t(r, 3) = p.bias(r);
  }
  return t;
}

inline ScoreMap params_to_tensor(const ImageDiscParams<float>& p) {
  ScoreMap t(1, 1, p.values.size());
  std::copy(p.values.begin(), p.values.end(), t.data().begin());
  return t;
}

inline ScoreMap params_to_tensor(const FeatDiscParams<float>& p) {
  ScoreMap t(1, 1, p.values.size());
  std::copy(p.values.begin(), p.values.end(), t.data().begin());
  return t;
}

inline void require_dims(const ScoreMap& t, std::size_t h, std::size_t w, std::size_t c,
                         const char* what) {
  if (t.height() != h || t.width() != w || (c != 0 && t.channels() != c)) {
    throw Error(ErrorCode::kShapeMismatch, std::string("checkpoint tensor for ") + what);
  }
}

inline SegmenterParams<float> segmenter_from_tensor(const ScoreMap& t) {
  require_dims(t, kFeatureCount + 1, 1, 0, "segmenter");
  SegmenterParams<float> p(t.channels());
  std::copy(t.data().begin(), t.data().end(), p.values.begin());
  return p;
}

inline TranslatorParams<float> translator_from_tensor(const ScoreMap& t) {
  require_dims(t, 3, 4, 1, "translator");
  TranslatorParams<float> p;
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t s = 0; s < 3; ++s) p.matrix(r, s) = t(r, s);
    p.bias(r) = t(r, 3);
  }
  return p;
}

inline ImageDiscParams<float> image_disc_from_tensor(const ScoreMap& t) {
  require_dims(t, 1, 1, kImageStatCount + 1, "image discriminator");
  ImageDiscParams<float> p;
  std::copy(t.data().begin(), t.data().end(), p.values.begin());
  return p;
}

inline FeatDiscParams<float> feat_disc_from_tensor(const ScoreMap& t) {
  require_dims(t, 1, 1, 0, "feature discriminator");
  if (t.channels() < 2) throw Error(ErrorCode::kShapeMismatch, "feature discriminator size");
  FeatDiscParams<float> p(t.channels() - 1);
  std::copy(t.data().begin(), t.data().end(), p.values.begin());
  return p;
}

/// Collects tensors and metadata for one checkpoint directory.
class CheckpointWriter {
 public:
  explicit CheckpointWriter(std::filesystem::path dir) : dir_(std::move(dir)) {
    std::error_code ec;
    std::filesystem::create_directories(dir_, ec);
    if (ec) throw Error(ErrorCode::kIo, "cannot create " + dir_.string());
  }

  template <typename P>
  void add_model(const std::string& tag, const P& params) {
    const ScoreMap t = params_to_tensor(params);
    save_tensor(dir_ / ("model_" + tag + ".dplt"), t);
    tensors_.push_back("model_" + tag + " " + std::to_string(t.height()) + " " +
                       std::to_string(t.width()) + " " + std::to_string(t.channels()));
  }

  void add_meta(const std::string& key, const std::string& value) { meta_[key] = value; }
  void add_meta(const std::string& key, double value) { meta_[key] = format_double(value); }

  const std::filesystem::path& dir() const { return dir_; }

  void finish() const {
    std::string text;
    for (const auto& line : tensors_) text += line + "\n";
    for (const auto& [k, v] : meta_) text += k + "=" + v + "\n";
    write_bytes(dir_ / "manifest.txt",
                std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  }

 private:
  std::filesystem::path dir_;
  std::vector<std::string> tensors_;
  std::map<std::string, std::string> meta_;
};

struct TensorEntry {
  std::string name;
  std::size_t height = 0, width = 0, channels = 0;
};

struct CheckpointManifest {
  std::vector<TensorEntry> tensors;
  std::map<std::string, std::string> meta;
};

inline CheckpointManifest read_checkpoint_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.txt");
  if (!in) throw Error(ErrorCode::kIo, "no manifest.txt in " + dir.string());
  CheckpointManifest m;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (const auto eq = line.find('='); eq != std::string::npos) {
      m.meta[line.substr(0, eq)] = line.substr(eq + 1);
      continue;
    }
    std::istringstream ss(line);
    TensorEntry e;
    if (!(ss >> e.name >> e.height >> e.width >> e.channels)) {
      throw Error(ErrorCode::kConfig, "bad manifest line in " + dir.string() + ": " + line);
    }
    m.tensors.push_back(std::move(e));
  }
  return m;
}

inline ScoreMap load_model_tensor(const std::filesystem::path& dir, const std::string& tag) {
  const auto path = dir / ("model_" + tag + ".dplt");
  if (!std::filesystem::exists(path)) {
    throw Error(ErrorCode::kMissingData, "missing checkpoint " + path.string());
  }
  return load_tensor_as<ScoreMap>(path);
}

inline SegmenterParams<float> load_segmenter(const std::filesystem::path& dir,
                                             const std::string& tag) {
  return segmenter_from_tensor(load_model_tensor(dir, tag));
}

inline TranslatorParams<float> load_translator(const std::filesystem::path& dir,
                                               const std::string& tag) {
  return translator_from_tensor(load_model_tensor(dir, tag));
}

inline ImageDiscParams<float> load_image_disc(const std::filesystem::path& dir,
                                              const std::string& tag) {
  return image_disc_from_tensor(load_model_tensor(dir, tag));
}

}  // namespace dpl
