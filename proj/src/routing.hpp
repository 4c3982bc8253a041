#pragma once

// Capsule layer with non-iterative cluster routing.
//
// Each output position gathers the 3x3 neighborhood of the input grid
// (a 9*D_in vector per input group), then every cluster (c_out, g) casts K
// votes through learned affine maps. Votes are summarized per cluster by
//   centroid  m[d] = mean_k vote[k][d]
//   agreement a[d] = -log(std_k vote[k][d] + eps)      (population std)
// and the G clusters feeding one output channel are fused with elementwise
// routing weights c = softmax_g(a) (or the constant 1/G), s = sum_g c * m,
// followed by layer normalization. No iterative refinement takes place.

#include <cstdint>

#include "rng.hpp"
#include "tensor.hpp"

namespace caps::routing {

inline constexpr double kAgreementEps = 1e-8;
inline constexpr double kLayerNormEps = 1e-5;

enum class RoutingMode { data_dependent, constant };

struct LayerConfig {
  int groups_in = 1;      // G: input channels read per output channel
  int channels_out = 1;   // C_out
  int votes = 1;          // K votes per cluster
  int dims_in = 1;        // D_in
  int dims_out = 1;       // D_out
  int stride = 1;
  int pad = 1;
  RoutingMode mode = RoutingMode::data_dependent;
  bool layer_norm = true;
  // When set, vote k reads only the k-th contiguous D_in/K slice of each
  // window cell instead of the full 9*D_in vector.
  bool sliced = false;

  void validate() const;
  int vote_fan_in() const;  // 9*D_in, or 9*(D_in/K) when sliced
};

struct LayerParams {
  Tensor weights;           // [C_out, G, K, D_out, vote_fan_in]
  Tensor biases;            // [C_out, G, K, D_out]
  Tensor ln_gain, ln_bias;  // [C_out, D_out]; only defined when layer_norm
};

// Uniform +/- 1/sqrt(fan_in) weights, zero biases, unit gain / zero shift.
LayerParams init_layer_params(const LayerConfig& cfg, Rng& rng);

void check_params(const LayerParams& params, const LayerConfig& cfg);

// caps_in [H, W, C_in, D_in] -> votes [H', W', C_out, G, K, D_out].
// C_in must equal G (each group reads its own channel) or 1 (all groups
// read the single input channel).
Tensor compute_votes(const Tensor& caps_in, const LayerParams& params, const LayerConfig& cfg);

struct ClusterStats {
  Tensor centroid;   // votes shape with the K axis removed
  Tensor agreement;  // same shape as centroid
};

// Reduces the second-to-last axis (K). votes [..., K, D] -> stats [..., D].
ClusterStats cluster_stats(const Tensor& votes, double eps = kAgreementEps);

// agreements [..., G, D] -> weights of the same shape. data_dependent:
// per-dim softmax over G (max-subtracted); constant: exactly 1/G.
Tensor routing_weights(const Tensor& agreements, RoutingMode mode);

// centroids and weights [..., G, D] -> [..., D]: s[d] = sum_g c[g,d]*m[g,d]
Tensor fuse(const Tensor& centroids, const Tensor& weights);

// Full layer: votes -> stats -> weights -> fuse -> layer_norm (optional).
// caps_in [H, W, C_in, D_in] -> [H', W', C_out, D_out]. When routing_out is
// non-null it receives the routing weights [H', W', C_out, G, D_out].
Tensor layer_forward(const Tensor& caps_in, const LayerParams& params, const LayerConfig& cfg,
                     Tensor* routing_out = nullptr);

// Same semantics via plain nested loops over positions/clusters/votes/dims;
// independent of the engine ops. Test oracle only.
Tensor layer_forward_oracle(const Tensor& caps_in, const LayerParams& params,
                            const LayerConfig& cfg);

}  // namespace caps::routing
