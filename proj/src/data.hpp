#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rng.hpp"

namespace caps::data {

// Viewpoint annotations carried by datasets that have them (stereo toy set);
// valid==false everywhere else.
struct ViewMeta {
  bool valid = false;
  int instance = -1;
  int elevation = -1;  // index 0..8
  int azimuth = -1;    // degrees, even multiple of 20 in [0, 340]
  int lighting = -1;
};

struct LabeledImage {
  int label = 0;
  int channels = 1;
  int height = 0;
  int width = 0;
  std::vector<float> pixels;  // [channel][row][col]
  ViewMeta meta;

  float& px(int c, int y, int x) { return pixels[(static_cast<size_t>(c) * height + y) * width + x]; }
  float px(int c, int y, int x) const { return pixels[(static_cast<size_t>(c) * height + y) * width + x]; }
  double mean() const;
};

struct Dataset {
  std::string id;
  int num_classes = 0;
  std::vector<LabeledImage> items;
  size_t size() const { return items.size(); }
};

// Loaders. All validate magic numbers, counts and record sizes and throw
// DataError with the offending path/field rather than returning partial data.
Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 const std::string& id, int num_classes);
Dataset load_smallnorb(const std::string& dat_path, const std::string& cat_path,
                       const std::string& info_path);
Dataset load_cifar10(const std::vector<std::string>& batch_paths);

// Resolves conventional file names (with .gz fallback) under data_dir.
// id: mnist | fashion-mnist | smallnorb | cifar10; split: train | test.
Dataset load_dataset(const std::string& id, const std::string& data_dir, const std::string& split);

struct AugmentSpec {
  double jitter = 0.0;   // brightness/contrast factor; 0 disables
  int pad_to = 0;        // centered zero-pad target side; 0 disables
  int crop = 0;          // random crop side; 0 disables
  double hflip_p = 0.0;  // horizontal flip probability
  bool clamp01 = true;   // clamp jitter output to [0,1] (off for standardized inputs)
};

struct EvalSpec {
  int pad_to = 0;  // centered zero-pad target side; 0 disables
  int crop = 0;    // center crop side; 0 disables
};

// Per-dataset preprocessing recipe plus the geometry the network sees.
struct Recipe {
  int height = 0;
  int width = 0;
  int channels = 1;
  AugmentSpec train;
  EvalSpec eval;
};
Recipe recipe_for(const std::string& dataset_id);

// Random brightness/contrast: g(x) = alpha*f(x) + beta with
// alpha ~ U[1-factor, 1+factor] and beta ~ U[-factor*mean(f), factor*mean(f)]
// (alpha drawn first), optionally clamped to [0,1].
LabeledImage jitter_image(const LabeledImage& img, double factor, Rng& rng, bool clamp01 = true);

LabeledImage pad_centered(const LabeledImage& img, int side);
LabeledImage crop_image(const LabeledImage& img, int oy, int ox, int side);
LabeledImage hflip_image(const LabeledImage& img);

// Full train-time pipeline: jitter, pad, random crop, random flip (that
// order; rng draws are consumed in the same order for reproducibility).
LabeledImage augment_train(const LabeledImage& img, const AugmentSpec& spec, Rng& rng);
// Deterministic eval-time pipeline: pad and/or center crop.
LabeledImage transform_eval(const LabeledImage& img, const EvalSpec& spec);

enum class ViewMode { azimuth, elevation };

// Restricted-viewpoint protocol. Training images whose viewpoint falls
// outside the familiar set are discarded; every test image lands in exactly
// one of familiar/novel.
struct ViewpointSplit {
  Dataset train;     // train-source images with familiar viewpoints
  Dataset familiar;  // test-source images with familiar viewpoints
  Dataset novel;     // test-source images with novel viewpoints
};
ViewpointSplit viewpoint_split(const Dataset& train_src, const Dataset& test_src, ViewMode mode);
bool viewpoint_is_familiar(const ViewMeta& meta, ViewMode mode);

// Seeded shuffle, first `count` items (count > size is an error).
Dataset subset(const Dataset& ds, size_t count, uint64_t seed);

}  // namespace caps::data
