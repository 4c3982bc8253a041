#include "routing.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace caps::routing {

static void req(bool cond, const std::string& msg) {
  if (!cond) throw ConfigError(msg);
}

void LayerConfig::validate() const {
  req(groups_in >= 1 && channels_out >= 1 && votes >= 1 && dims_in >= 1 && dims_out >= 1,
      "layer config: G, C_out, K, D_in, D_out must all be >= 1");
  req(stride == 1 || stride == 2, "layer config: stride must be 1 or 2");
  req(pad == 0 || pad == 1, "layer config: pad must be 0 or 1");
  if (sliced)
    req(dims_in % votes == 0, "layer config: sliced votes need K to divide D_in, got K=" +
                                  std::to_string(votes) + " D_in=" + std::to_string(dims_in));
}

int LayerConfig::vote_fan_in() const { return 9 * (sliced ? dims_in / votes : dims_in); }

LayerParams init_layer_params(const LayerConfig& cfg, Rng& rng) {
  cfg.validate();
  int fan_in = cfg.vote_fan_in();
  double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Shape ws{cfg.channels_out, cfg.groups_in, cfg.votes, cfg.dims_out, fan_in};
  std::vector<double> wv(static_cast<size_t>(shape_numel(ws)));
  for (double& v : wv) v = rng.uniform(-bound, bound);
  LayerParams p;
  p.weights = Tensor::param(ws, std::move(wv));
  // Vote biases start spread out, not at zero: with equal biases a blank
  // input patch makes all votes of a cluster coincide, and the agreement's
  // -log(std + 1e-8) slope (up to 1e8 near std = 0) floods the biases with
  // gradient. A spread start keeps every vote cluster non-degenerate.
  std::vector<double> bv(static_cast<size_t>(cfg.channels_out) * cfg.groups_in * cfg.votes *
                         cfg.dims_out);
  for (double& v : bv) v = rng.uniform(-0.5, 0.5);
  p.biases = Tensor::param({cfg.channels_out, cfg.groups_in, cfg.votes, cfg.dims_out},
                           std::move(bv));
  if (cfg.layer_norm) {
    int64_t n = static_cast<int64_t>(cfg.channels_out) * cfg.dims_out;
    p.ln_gain = Tensor::param({cfg.channels_out, cfg.dims_out},
                              std::vector<double>(static_cast<size_t>(n), 1.0));
    p.ln_bias = Tensor::param({cfg.channels_out, cfg.dims_out},
                              std::vector<double>(static_cast<size_t>(n), 0.0));
  }
  return p;
}

void check_params(const LayerParams& params, const LayerConfig& cfg) {
  cfg.validate();
  Shape ws{cfg.channels_out, cfg.groups_in, cfg.votes, cfg.dims_out, cfg.vote_fan_in()};
  req(params.weights.defined() && params.weights.shape() == ws,
      "layer params: weights must be " + shape_str(ws) + ", got " +
          (params.weights.defined() ? shape_str(params.weights.shape()) : "undefined"));
  Shape bs{cfg.channels_out, cfg.groups_in, cfg.votes, cfg.dims_out};
  req(params.biases.defined() && params.biases.shape() == bs,
      "layer params: biases must be " + shape_str(bs));
  if (cfg.layer_norm) {
    Shape ls{cfg.channels_out, cfg.dims_out};
    req(params.ln_gain.defined() && params.ln_gain.shape() == ls &&
            params.ln_bias.defined() && params.ln_bias.shape() == ls,
        "layer params: layer-norm gain/bias must be " + shape_str(ls));
  }
}

static void check_input(const Tensor& caps_in, const LayerConfig& cfg) {
  req(caps_in.defined() && caps_in.rank() == 4,
      "layer input must be [H, W, C_in, D_in], got " +
          (caps_in.defined() ? shape_str(caps_in.shape()) : "undefined"));
  int cin = caps_in.shape()[2];
  req(cin == cfg.groups_in || cin == 1,
      "layer input has " + std::to_string(cin) + " channels; config expects " +
          std::to_string(cfg.groups_in) + " (or 1 broadcast to all groups)");
  req(caps_in.shape()[3] == cfg.dims_in,
      "layer input has D=" + std::to_string(caps_in.shape()[3]) + ", config expects D_in=" +
          std::to_string(cfg.dims_in));
}

Tensor compute_votes(const Tensor& caps_in, const LayerParams& params, const LayerConfig& cfg) {
  check_params(params, cfg);
  check_input(caps_in, cfg);
  int cin = caps_in.shape()[2];
  int g = cfg.groups_in, c = cfg.channels_out, k = cfg.votes, d = cfg.dims_out;
  int din = cfg.dims_in;

  Tensor nb = neighborhood_gather(caps_in, 3, cfg.stride, cfg.pad);  // [H',W',C_in,9*D_in]
  int oh = nb.shape()[0], ow = nb.shape()[1];
  int p = oh * ow;
  Tensor flat;  // [P, G, 9*D_in]
  if (cin == 1 && g > 1)
    flat = expand_axis(reshape(nb, {p, 9 * din}), 1, g);
  else
    flat = reshape(nb, {p, g, 9 * din});

  if (!cfg.sliced) {
    int f = 9 * din;
    Tensor w2 = reshape(permute(params.weights, {1, 0, 2, 3, 4}), {g, c * k * d, f});
    Tensor b2 = reshape(permute(params.biases, {1, 0, 2, 3}), {g, c * k * d});
    Tensor v = group_affine(flat, w2, b2);          // [P, G, C*K*D]
    v = permute(reshape(v, {p, g, c, k, d}), {0, 2, 1, 3, 4});
    return reshape(v, {oh, ow, c, g, k, d});
  }

  // sliced: vote k reads dims [k*s, (k+1)*s) of each window cell
  int s = din / k;
  Tensor cells = reshape(flat, {p, g, 9, din});
  Tensor wp = permute(params.weights, {2, 1, 0, 3, 4});  // [K, G, C, D, 9*s]
  Tensor bp = permute(params.biases, {2, 1, 0, 3});      // [K, G, C, D]
  std::vector<Tensor> per_k;
  per_k.reserve(static_cast<size_t>(k));
  for (int ki = 0; ki < k; ++ki) {
    Tensor xk = reshape(narrow(cells, 3, ki * s, s), {p, g, 9 * s});
    Tensor wk = reshape(narrow(wp, 0, ki, 1), {g, c * d, 9 * s});
    Tensor bk = reshape(narrow(bp, 0, ki, 1), {g, c * d});
    per_k.push_back(group_affine(xk, wk, bk));  // [P, G, C*D]
  }
  Tensor v = stack(per_k, 2);  // [P, G, K, C*D]
  v = permute(reshape(v, {p, g, k, c, d}), {0, 3, 1, 2, 4});
  return reshape(v, {oh, ow, c, g, k, d});
}

ClusterStats cluster_stats(const Tensor& votes, double eps) {
  req(eps > 0, "cluster_stats: eps must be positive");
  req(votes.defined() && votes.rank() >= 2,
      "cluster_stats: votes must be [..., K, D], got " +
          (votes.defined() ? shape_str(votes.shape()) : "undefined"));
  int k_axis = votes.rank() - 2;
  int k = votes.shape()[k_axis];
  Tensor m = reduce_mean(votes, k_axis);
  Tensor dev = sub(votes, expand_axis(m, k_axis, k));
  Tensor var = reduce_mean(mul(dev, dev), k_axis);
  Tensor a = negate(caps::log(add_scalar(caps::sqrt(var), eps)));
  return ClusterStats{m, a};
}

Tensor routing_weights(const Tensor& agreements, RoutingMode mode) {
  req(agreements.defined() && agreements.rank() >= 2,
      "routing_weights: agreements must be [..., G, D]");
  int g_axis = agreements.rank() - 2;
  if (mode == RoutingMode::constant)
    return Tensor::full(agreements.shape(), 1.0 / agreements.shape()[g_axis]);
  return softmax(agreements, g_axis);
}

Tensor fuse(const Tensor& centroids, const Tensor& weights) {
  req(centroids.defined() && weights.defined() && centroids.rank() >= 2,
      "fuse: centroids and weights must be [..., G, D]");
  req(centroids.shape() == weights.shape(),
      "fuse: centroids " + shape_str(centroids.shape()) + " vs weights " +
          shape_str(weights.shape()));
  return reduce_sum(mul(weights, centroids), centroids.rank() - 2);
}

Tensor layer_forward(const Tensor& caps_in, const LayerParams& params, const LayerConfig& cfg,
                     Tensor* routing_out) {
  Tensor votes = compute_votes(caps_in, params, cfg);  // [H',W',C,G,K,D]
  ClusterStats st = cluster_stats(votes, kAgreementEps);
  Tensor c = routing_weights(st.agreement, cfg.mode);  // [H',W',C,G,D]
  if (routing_out) *routing_out = c;
  Tensor s = fuse(st.centroid, c);  // [H',W',C,D]
  if (!cfg.layer_norm) return s;
  return layer_norm(s, params.ln_gain, params.ln_bias, kLayerNormEps);
}

Tensor layer_forward_oracle(const Tensor& caps_in, const LayerParams& params,
                            const LayerConfig& cfg) {
  check_params(params, cfg);
  check_input(caps_in, cfg);
  int h = caps_in.shape()[0], w = caps_in.shape()[1];
  int cin = caps_in.shape()[2], din = cfg.dims_in;
  int g = cfg.groups_in, c = cfg.channels_out, k = cfg.votes, d = cfg.dims_out;
  int oh = (h + 2 * cfg.pad - 3) / cfg.stride + 1;
  int ow = (w + 2 * cfg.pad - 3) / cfg.stride + 1;
  int s_sl = cfg.sliced ? din / k : din;

  Tensor out = Tensor::zeros({oh, ow, c, d});
  std::vector<double>& ov = out.values();

  std::vector<double> nb(static_cast<size_t>(9 * din));
  std::vector<double> votes(static_cast<size_t>(k) * d);
  std::vector<double> m(static_cast<size_t>(g) * d), a(static_cast<size_t>(g) * d);
  std::vector<double> fused(static_cast<size_t>(d));

  for (int oy = 0; oy < oh; ++oy)
    for (int ox = 0; ox < ow; ++ox)
      for (int co = 0; co < c; ++co) {
        for (int gi = 0; gi < g; ++gi) {
          int src_c = (cin == g) ? gi : 0;
          std::fill(nb.begin(), nb.end(), 0.0);
          for (int wy = 0; wy < 3; ++wy)
            for (int wx = 0; wx < 3; ++wx) {
              int iy = oy * cfg.stride - cfg.pad + wy;
              int ix = ox * cfg.stride - cfg.pad + wx;
              if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
              for (int dn = 0; dn < din; ++dn)
                nb[static_cast<size_t>((wy * 3 + wx) * din + dn)] =
                    caps_in.at({iy, ix, src_c, dn});
            }
          for (int ki = 0; ki < k; ++ki)
            for (int dn = 0; dn < d; ++dn) {
              double v = params.biases.at({co, gi, ki, dn});
              if (!cfg.sliced) {
                for (int f = 0; f < 9 * din; ++f)
                  v += params.weights.at({co, gi, ki, dn, f}) * nb[static_cast<size_t>(f)];
              } else {
                for (int cell = 0; cell < 9; ++cell)
                  for (int j = 0; j < s_sl; ++j)
                    v += params.weights.at({co, gi, ki, dn, cell * s_sl + j}) *
                         nb[static_cast<size_t>(cell * din + ki * s_sl + j)];
              }
              votes[static_cast<size_t>(ki) * d + dn] = v;
            }
          for (int dn = 0; dn < d; ++dn) {
            double mean = 0;
            for (int ki = 0; ki < k; ++ki) mean += votes[static_cast<size_t>(ki) * d + dn];
            mean /= k;
            double var = 0;
            for (int ki = 0; ki < k; ++ki) {
              double dev = votes[static_cast<size_t>(ki) * d + dn] - mean;
              var += dev * dev;
            }
            var /= k;
            m[static_cast<size_t>(gi) * d + dn] = mean;
            a[static_cast<size_t>(gi) * d + dn] = -std::log(std::sqrt(var) + kAgreementEps);
          }
        }
        for (int dn = 0; dn < d; ++dn) {
          double sum = 0;
          for (int gi = 0; gi < g; ++gi) sum += std::exp(a[static_cast<size_t>(gi) * d + dn]);
          double sv = 0;
          for (int gi = 0; gi < g; ++gi) {
            double cw = cfg.mode == RoutingMode::constant
                            ? 1.0 / g
                            : std::exp(a[static_cast<size_t>(gi) * d + dn]) / sum;
            sv += cw * m[static_cast<size_t>(gi) * d + dn];
          }
          fused[static_cast<size_t>(dn)] = sv;
        }
        int64_t base = ((static_cast<int64_t>(oy) * ow + ox) * c + co) * d;
        if (!cfg.layer_norm) {
          for (int dn = 0; dn < d; ++dn) ov[static_cast<size_t>(base + dn)] = fused[dn];
          continue;
        }
        double mean = 0;
        for (int dn = 0; dn < d; ++dn) mean += fused[dn];
        mean /= d;
        double var = 0;
        for (int dn = 0; dn < d; ++dn) {
          double dev = fused[dn] - mean;
          var += dev * dev;
        }
        var /= d;
        double inv = 1.0 / std::sqrt(var + kLayerNormEps);
        for (int dn = 0; dn < d; ++dn)
          ov[static_cast<size_t>(base + dn)] =
              params.ln_gain.at({co, dn}) * ((fused[dn] - mean) * inv) +
              params.ln_bias.at({co, dn});
      }
  return out;
}

}  // namespace caps::routing
