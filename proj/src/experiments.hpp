#pragma once

// Drivers behind the CLI experiment subcommands: capsule-dimension
// perturbation sweeps, reconstruction under channel transforms, viewpoint
// generalization runs, and last-layer routing-weight dumps.

#include <array>
#include <string>
#include <vector>

#include "data.hpp"
#include "models.hpp"
#include "tensor.hpp"
#include "training.hpp"

namespace caps::experiments {

// ---- capsule-dimension perturbation (FC-decoder checkpoints) ----

// -0.25, -0.20, ..., 0.25 (11 values)
std::vector<double> perturb_deltas();

// Decodes the `label` capsule of `caps` [N, D] once per delta applied to
// entry `dim`; returns the reconstructions side by side as [h, n_deltas * w]
// row-major pixels. The delta-0 column is the plain masked reconstruction.
std::vector<double> perturb_strip(const models::Model& m, const Tensor& caps, int label, int dim,
                                  int* out_h, int* out_w);

struct PerturbResult {
  std::vector<std::string> pgm_paths;  // one per (image, dimension)
  std::string index_csv;
};

// For the first `num_images` eval-transformed test images: one PGM strip per
// capsule dimension of the true-class capsule, plus index.csv describing
// every strip. Requires the FC decoder.
PerturbResult run_perturb(const models::Model& m, const data::Dataset& test_set,
                          const data::Recipe& recipe, int num_images, const std::string& out_dir);

// ---- reconstruction under channel transforms (conv-decoder checkpoints) ----

struct TransformCase {
  std::string name;
  std::array<double, 6> grid_T;   // applied to the last capsule grid
  std::array<double, 6> image_T;  // the same map at image scale (translations
                                  // doubled: the decoder upsamples 2x)
};

// The 18 cases, identity (rotation 0) first: rotations 0..315 step 45,
// horizontal and vertical flip, shifts of 1/2/4 grid pixels, scales
// 0.5/0.75/1.2/1.5/2.
std::vector<TransformCase> transform_suite();

struct TransformReconResult {
  std::string pgm_path;  // one image row per sample: ground truth + 18 recons
  std::string csv_path;  // per-transform mean reconstruction error
  std::vector<double> mean_mse;  // aligned with transform_suite()
};

// For the first `num_images` test images: transforms the final capsule grid,
// reconstructs through the conv decoder, and scores each reconstruction
// against the ground-truth image moved by the same map. Requires the conv
// decoder and a single-channel input.
TransformReconResult run_transform_recon(const models::Model& m, const data::Dataset& test_set,
                                         const data::Recipe& recipe, int num_images,
                                         const std::string& out_dir);

// ---- routing-weight dump (global last layer) ----

struct RoutingVizResult {
  std::string csv_path;
  double within_l1 = 0;   // mean pairwise L1 between same-class weight rows
  double between_l1 = 0;  // mean pairwise L1 between cross-class weight rows
  int rows = 0;
};

// For the first `num_images` test images: routing weights c[g] of the final
// layer at (channel, dim) as CSV rows `sample,<label>,c_0..c_{G-1}`, followed
// by per-class `mean`/`std` rows. The last layer must have 1x1 spatial
// extent. Also reports mean pairwise L1 distances within/between classes.
RoutingVizResult run_routing_viz(const models::Model& m, const data::Dataset& test_set,
                                 const data::Recipe& recipe, int channel, int dim, int num_images,
                                 const std::string& out_csv);

// ---- restricted-viewpoint generalization ----

struct ViewpointEpoch {
  int epoch = 0;
  double familiar_acc = 0;
  double novel_acc = 0;
};

struct ViewpointReport {
  std::vector<ViewpointEpoch> rows;  // one per epoch
  int selected_epoch = -1;
  double familiar_acc = 0;  // at the selected epoch
  double novel_acc = 0;
  std::vector<int> familiar_values;  // azimuth degrees or elevation indices
  std::vector<int> novel_values;
  std::string csv_path;      // epoch,familiar_acc,novel_acc,selected
  std::string summary_path;  // human-readable report echoing the split
};

// Splits by viewpoint, trains on the familiar-train set with the familiar
// test set as the eval split, and tracks novel-set accuracy per epoch. The
// reported epoch is the one whose familiar accuracy is closest below
// `target_familiar` (NaN or no qualifying epoch: the best familiar epoch).
ViewpointReport run_viewpoints(models::Model& model, const data::Dataset& train_src,
                               const data::Dataset& test_src, data::ViewMode mode,
                               const training::TrainConfig& cfg, const data::Recipe& recipe,
                               double target_familiar, const std::string& out_dir);

}  // namespace caps::experiments
