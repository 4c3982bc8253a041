#pragma once

// Network variants, heads, decoders and checkpointing.
//
// A variant is an ordered list of capsule layer configs plus a linear
// classifier over the flattened final grid and an optional decoder. The
// input image enters as a single capsule channel whose capsule dimension is
// the image channel count, so the first layer of a 4-channel net on
// grayscale input has 4*K*D*(9+1) weights+biases per the documented counts.

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "routing.hpp"
#include "tensor.hpp"

namespace caps::models {

enum class DecoderKind { none, fc, conv };

struct VariantSpec {
  std::string name;
  int in_h = 0, in_w = 0, in_ch = 1;
  int num_classes = 10;
  std::vector<routing::LayerConfig> layers;
  DecoderKind decoder = DecoderKind::none;

  void validate() const;
  // Per-layer output (H, W) under the 3x3 neighborhood geometry.
  std::vector<std::pair<int, int>> grid_sizes() const;
  int head_features() const;  // flattened final grid size
};

// Builds the named variant for the given input geometry.
//
//   M-variant1..4, or generic CxKyDz: five layers, C channels with G = C
//   after the first layer, K votes, capsule dim D, strides 1,2,1,2,1.
//   S-variant1..4, or generic NxKyDz: five layers, single output channel,
//   N clusters per layer (all reading that channel), strides 1,2,1,2,1.
//   tiny:        three C2K2D8 layers (strides 1,2,1), linear head.
//   tiny-global: four C2K2D8 layers (strides 2,2,2,1, last two unpadded)
//                ending in a 1x1 grid, so last-layer routing is global.
//   recon:       three C4K4 layers with dims 32,8,4 (strides 1,2,1), no
//                layer normalization, plus the convolutional decoder.
//   disentangle: five C4K5D8 layers, last one with 10 output channels and
//                a 1x1 grid (strides 1,2,2,2,1), plus the FC decoder.
VariantSpec resolve_variant(const std::string& name, int in_h, int in_w, int in_ch,
                            int num_classes);

// Ablation switches applied uniformly to every layer. Sliced votes only
// apply to layers whose vote count divides the capsule dimension; the rest
// keep full votes.
void apply_options(VariantSpec& spec, bool constant_routing, bool no_layer_norm, bool sliced);

// Classifier parametrization: logits = (kHeadGain / sqrt(F)) W f + b with
// W ~ U(-1/kHeadGain, 1/kHeadGain). Layer-normed capsule features have
// sum f^2 = F, so the 1/sqrt(F) scale keeps the SGD logit step independent
// of the feature count (unscaled, training at the documented lr moves logits
// by hundreds of units per step and diverges), while the gain multiplies the
// head's effective step by kHeadGain^2 relative to the capsule layers, which
// need a much smaller rate to stay quasi-stationary. Init logits stay O(1)
// and parameter counts are unchanged.
inline constexpr double kHeadGain = 12.0;

struct Model {
  VariantSpec spec;
  std::vector<routing::LayerParams> layers;
  Tensor head_w, head_b;  // [classes, F], [classes]
  // decoder == fc: three affine maps 512 / 1024 / 784
  Tensor fc1_w, fc1_b, fc2_w, fc2_b, fc3_w, fc3_b;
  // decoder == conv: 3x3 convs, 32 filters then 1
  Tensor conv1_w, conv1_b, conv2_w, conv2_b;
};

Model build_variant(const VariantSpec& spec, uint64_t seed);

// (name, tensor) in serialization order: layer params, head, decoder.
std::vector<std::pair<std::string, Tensor>> named_params(const Model& m);

// Closed form: per layer C*G*K*D_out*(fan_in+1) (+ 2*C*D_out with layer
// norm), head classes*(F+1), plus decoder maps.
int64_t count_params(const VariantSpec& spec);
int64_t count_params(const Model& m);  // sums actual tensor sizes

// image [C, H, W] -> capsule grid [H, W, 1, C]
Tensor image_to_grid(const Tensor& img);

// Runs all capsule layers; returns the flattened final grid [F]. Optionally
// exposes the final grid [H, W, C, D] and its routing weights
// [H, W, C, G, D].
Tensor forward_features(const Model& m, const Tensor& grid, Tensor* last_grid = nullptr,
                        Tensor* last_routing = nullptr);

// logits [num_classes] from flattened features [F] (applies the 1/sqrt(F) scale)
Tensor head_logits(const Model& m, const Tensor& features);

// logits [num_classes] for one image [C, H, W]
Tensor classify(const Model& m, const Tensor& image);

// Zeroes every row except `keep`. caps [N, D].
Tensor mask_capsules(const Tensor& caps, int keep);

// Returns a copy with capsule[dim] += delta. caps rank-1 [D].
Tensor perturb_dimension(const Tensor& caps, int dim, double delta);

// masked capsules [N, D] -> image [28, 28] in [0, 1]
Tensor decode_fc(const Model& m, const Tensor& masked);

// final grid [H, W, C, D] -> image [2H, 2W] in [0, 1]
Tensor decode_conv(const Model& m, const Tensor& grid);

// 3x3 convolution helper: x [H, W, F_in], w [F_out, 9*F_in], b [F_out]
// -> [H, W, F_out] (stride 1, zero pad 1).
Tensor conv3x3(const Tensor& x, const Tensor& w, const Tensor& b);

// Affine resampling of every (channel, dim) slice about the spatial center:
// out(p) = in(T^-1(p)), bilinear, zero outside. T = {a, b, tx, c, d, ty}
// maps (x, y) -> (a*x + b*y + tx, c*x + d*y + ty) in center-relative
// coordinates. Rejects |det| < 1e-12. Plain data op (never recorded).
Tensor transform_channels(const Tensor& grid, const std::array<double, 6>& T);

std::array<double, 6> make_rotation(double degrees);
std::array<double, 6> make_scale(double factor);
std::array<double, 6> make_translation(double dx, double dy);
std::array<double, 6> make_hflip();
std::array<double, 6> make_vflip();

// ---- checkpoint container ----
// Little-endian layout: "CCAP", u32 version, u64 text length + variant text,
// u64 blob count, then per blob u64 name length, name, u64 element count,
// f64 elements. Round-trips bit-exactly.

struct CheckpointBlob {
  std::string name;
  std::vector<double> data;
};

void write_checkpoint(const std::string& path, const std::string& spec_text,
                      const std::vector<CheckpointBlob>& blobs);
struct Checkpoint {
  std::string spec_text;
  std::vector<CheckpointBlob> blobs;
};
Checkpoint read_checkpoint(const std::string& path);

std::string spec_to_text(const VariantSpec& spec);
VariantSpec spec_from_text(const std::string& text);

// Model state plus any extra blobs (optimizer velocity, counters). Loading
// rebuilds the variant from the embedded text and fills parameters by name;
// unmatched blobs are returned through `extra`.
void save_model(const std::string& path, const Model& m,
                const std::vector<CheckpointBlob>& extra = {});
Model load_model(const std::string& path, std::vector<CheckpointBlob>* extra = nullptr);

}  // namespace caps::models
