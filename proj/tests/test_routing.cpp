#include <cmath>
#include <vector>

#include "doctest.h"
#include "routing.hpp"
#include "test_util.hpp"

using namespace caps;
using namespace caps::routing;
using testutil::max_abs_diff;
using testutil::rand_tensor;

static LayerParams rand_params(const LayerConfig& cfg, uint64_t seed) {
  Rng rng(seed);
  LayerParams p = init_layer_params(cfg, rng);
  // shake the zero-initialized pieces so tests exercise non-trivial values
  for (double& v : p.biases.values()) v = rng.uniform(-0.5, 0.5);
  if (cfg.layer_norm) {
    for (double& v : p.ln_gain.values()) v = rng.uniform(0.5, 1.5);
    for (double& v : p.ln_bias.values()) v = rng.uniform(-0.5, 0.5);
  }
  return p;
}

TEST_CASE("config validation") {
  LayerConfig cfg;
  cfg.stride = 3;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.stride = 1;
  cfg.pad = 2;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.pad = 1;
  cfg.votes = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.votes = 3;
  cfg.dims_in = 4;
  cfg.sliced = true;  // 3 does not divide 4
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.votes = 2;
  CHECK_NOTHROW(cfg.validate());
  CHECK(cfg.vote_fan_in() == 9 * 2);
  cfg.sliced = false;
  CHECK(cfg.vote_fan_in() == 9 * 4);
}

TEST_CASE("init_layer_params shapes and ranges") {
  LayerConfig cfg;
  cfg.groups_in = 3;
  cfg.channels_out = 2;
  cfg.votes = 4;
  cfg.dims_in = 8;
  cfg.dims_out = 5;
  Rng rng(5);
  LayerParams p = init_layer_params(cfg, rng);
  CHECK(p.weights.shape() == Shape{2, 3, 4, 5, 72});
  CHECK(p.biases.shape() == Shape{2, 3, 4, 5});
  CHECK(p.ln_gain.shape() == Shape{2, 5});
  double bound = 1.0 / std::sqrt(72.0);
  for (double v : p.weights.values()) CHECK(std::fabs(v) <= bound);
  for (double v : p.biases.values()) CHECK(v == 0.0);
  for (double v : p.ln_gain.values()) CHECK(v == 1.0);
  for (double v : p.ln_bias.values()) CHECK(v == 0.0);

  cfg.layer_norm = false;
  LayerParams p2 = init_layer_params(cfg, rng);
  CHECK_FALSE(p2.ln_gain.defined());

  cfg.sliced = true;  // K=4 divides D_in=8
  LayerParams p3 = init_layer_params(cfg, rng);
  CHECK(p3.weights.shape() == Shape{2, 3, 4, 5, 18});
}

TEST_CASE("cluster_stats hand values") {
  // two scalar votes 1 and 3: centroid 2, std 1, agreement ~ 0
  Tensor votes = Tensor::from({2, 1}, {1, 3});
  ClusterStats st = cluster_stats(votes);
  CHECK(st.centroid.shape() == Shape{1});
  CHECK(st.centroid.value() == doctest::Approx(2.0));
  CHECK(st.agreement.value() == doctest::Approx(-std::log(1.0 + 1e-8)));
  CHECK(std::fabs(st.agreement.value()) < 1e-7);

  // identical votes: zero variance pins agreement at -log(eps)
  Tensor same = Tensor::from({3, 2}, {4, -1, 4, -1, 4, -1});
  ClusterStats st2 = cluster_stats(same);
  CHECK(st2.centroid.values() == std::vector<double>{4, -1});
  for (double v : st2.agreement.values())
    CHECK(v == doctest::Approx(18.420680743952367));

  // K = 1: centroid is the vote itself, agreement -log(eps)
  Tensor single = Tensor::from({1, 3}, {0.5, -2, 7});
  ClusterStats st3 = cluster_stats(single);
  CHECK(st3.centroid.values() == std::vector<double>{0.5, -2, 7});
  for (double v : st3.agreement.values())
    CHECK(v == doctest::Approx(-std::log(1e-8)));

  // leading axes pass through: [P, K, D] -> [P, D]
  Rng rng(3);
  Tensor batch = rand_tensor(rng, {5, 4, 3});
  ClusterStats st4 = cluster_stats(batch);
  CHECK(st4.centroid.shape() == Shape{5, 3});
  CHECK(st4.agreement.shape() == Shape{5, 3});

  CHECK_THROWS_AS(cluster_stats(votes, 0.0), ConfigError);
}

TEST_CASE("routing_weights") {
  // singleton softmax
  Tensor one = Tensor::from({1, 3}, {2, -5, 0.1});
  Tensor c1 = routing_weights(one, RoutingMode::data_dependent);
  for (double v : c1.values()) CHECK(v == 1.0);

  // equal agreements -> 1/G
  Tensor eq = Tensor::full({4, 2}, 3.3);
  Tensor ceq = routing_weights(eq, RoutingMode::data_dependent);
  for (double v : ceq.values()) CHECK(v == doctest::Approx(0.25));

  // G=2, a1=0, a2=ln3 -> [0.25, 0.75]
  Tensor two = Tensor::from({2, 1}, {0.0, std::log(3.0)});
  Tensor c2 = routing_weights(two, RoutingMode::data_dependent);
  CHECK(c2.at({0, 0}) == doctest::Approx(0.25));
  CHECK(c2.at({1, 0}) == doctest::Approx(0.75));

  // constant mode: exactly 1/G regardless of agreements
  Tensor cc = routing_weights(two, RoutingMode::constant);
  CHECK(cc.at({0, 0}) == 0.5);
  CHECK(cc.at({1, 0}) == 0.5);

  // normalization: per dim, weights sum to 1 within 1e-6 and lie in (0, 1)
  Rng rng(7);
  Tensor a = rand_tensor(rng, {5, 6}, -20, 20);
  Tensor c = routing_weights(a, RoutingMode::data_dependent);
  for (int d = 0; d < 6; ++d) {
    double sum = 0;
    for (int g = 0; g < 5; ++g) {
      double v = c.at({g, d});
      CHECK(v > 0.0);
      CHECK(v < 1.0);
      sum += v;
    }
    CHECK(std::fabs(sum - 1.0) < 1e-6);
  }

  // shift invariance: adding a per-dim constant across all G leaves c alone
  Tensor shifted = a.clone();
  for (int g = 0; g < 5; ++g)
    for (int d = 0; d < 6; ++d)
      shifted.values()[static_cast<size_t>(g * 6 + d)] += (d % 2 == 0) ? 5.0 : -2.5;
  Tensor cs = routing_weights(shifted, RoutingMode::data_dependent);
  CHECK(max_abs_diff(c, cs) < 1e-12);
}

TEST_CASE("fuse") {
  Tensor m1 = Tensor::from({1, 3}, {1, 2, 3});
  CHECK(fuse(m1, routing_weights(m1, RoutingMode::data_dependent)).values() ==
        std::vector<double>{1, 2, 3});

  // constant mode with G=2 averages the centroids
  Tensor m2 = Tensor::from({2, 2}, {1, 0, 3, 2});
  Tensor cm = Tensor::full({2, 2}, 0.5);
  CHECK(fuse(m2, cm).values() == std::vector<double>{2, 1});

  // hand example
  Tensor c = Tensor::from({2, 2}, {0.25, 0.5, 0.75, 0.5});
  Tensor s = fuse(m2, c);
  CHECK(s.values() == std::vector<double>{2.5, 1.0});

  CHECK_THROWS_AS(fuse(m2, Tensor::full({2, 3}, 0.5)), Error);
}

// identity-selecting weights: K=1, G=1, D_out=D_in, center window cell copied
static LayerParams identity_params(int d, bool ln) {
  LayerConfig cfg;
  cfg.dims_in = d;
  cfg.dims_out = d;
  cfg.layer_norm = ln;
  std::vector<double> w(static_cast<size_t>(d) * 9 * d, 0.0);
  for (int i = 0; i < d; ++i) w[static_cast<size_t>(i) * 9 * d + 4 * d + i] = 1.0;
  LayerParams p;
  p.weights = Tensor::from({1, 1, 1, d, 9 * d}, std::move(w));
  p.biases = Tensor::zeros({1, 1, 1, d});
  if (ln) {
    p.ln_gain = Tensor::full({1, d}, 1.0);
    p.ln_bias = Tensor::zeros({1, d});
  }
  return p;
}

TEST_CASE("compute_votes") {
  LayerConfig cfg;
  cfg.dims_in = 2;
  cfg.dims_out = 3;
  cfg.votes = 2;
  Rng rng(11);
  LayerParams p = rand_params(cfg, 21);

  // 1x1 input with pad=1: only the center window cell is occupied, so the
  // vote is W restricted to the center columns applied to u, plus bias
  Tensor u = rand_tensor(rng, {1, 1, 1, 2});
  Tensor v = compute_votes(u, p, cfg);
  REQUIRE(v.shape() == Shape{1, 1, 1, 1, 2, 3});
  for (int k = 0; k < 2; ++k)
    for (int d = 0; d < 3; ++d) {
      double want = p.biases.at({0, 0, k, d});
      for (int f = 0; f < 2; ++f)
        want += p.weights.at({0, 0, k, d, 4 * 2 + f}) * u.at({0, 0, 0, f});
      CHECK(v.at({0, 0, 0, 0, k, d}) == doctest::Approx(want).epsilon(1e-12));
    }

  // identity weights: every vote equals the input capsule
  LayerParams pid = identity_params(4, true);
  LayerConfig cid;
  cid.dims_in = 4;
  cid.dims_out = 4;
  Tensor x = rand_tensor(rng, {3, 3, 1, 4});
  Tensor vid = compute_votes(x, pid, cid);
  REQUIRE(vid.shape() == Shape{3, 3, 1, 1, 1, 4});
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int d = 0; d < 4; ++d)
        CHECK(vid.at({i, j, 0, 0, 0, d}) == x.at({i, j, 0, d}));

  // mismatched params are rejected
  LayerConfig bad = cfg;
  bad.dims_out = 5;
  CHECK_THROWS_AS(compute_votes(u, p, bad), ConfigError);
  CHECK_THROWS_AS(compute_votes(rand_tensor(rng, {2, 2, 3, 2}), p, cfg), ConfigError);
  CHECK_THROWS_AS(compute_votes(rand_tensor(rng, {2, 2, 1, 5}), p, cfg), ConfigError);
}

TEST_CASE("layer_forward reduces to identity for identity weights") {
  LayerConfig cfg;
  cfg.dims_in = 3;
  cfg.dims_out = 3;
  cfg.layer_norm = false;
  LayerParams p = identity_params(3, false);
  Rng rng(13);
  Tensor x = rand_tensor(rng, {4, 5, 1, 3});
  Tensor y = layer_forward(x, p, cfg);
  REQUIRE(y.shape() == x.shape());
  CHECK(max_abs_diff(y, x) == 0.0);
}

TEST_CASE("constant mode equals data-dependent mode when agreements tie") {
  // K=1 gives zero variance everywhere, so all agreements are equal
  LayerConfig cfg;
  cfg.groups_in = 3;
  cfg.channels_out = 2;
  cfg.votes = 1;
  cfg.dims_in = 2;
  cfg.dims_out = 4;
  LayerParams p = rand_params(cfg, 31);
  Rng rng(17);
  Tensor x = rand_tensor(rng, {3, 3, 3, 2});
  Tensor ydd = layer_forward(x, p, cfg);
  LayerConfig ccfg = cfg;
  ccfg.mode = RoutingMode::constant;
  Tensor yc = layer_forward(x, p, ccfg);
  CHECK(max_abs_diff(ydd, yc) < 1e-12);
}

TEST_CASE("vote permutation within a cluster leaves the output unchanged") {
  LayerConfig cfg;
  cfg.groups_in = 2;
  cfg.channels_out = 2;
  cfg.votes = 3;
  cfg.dims_in = 2;
  cfg.dims_out = 3;
  LayerParams p = rand_params(cfg, 41);
  Rng rng(19);
  Tensor x = rand_tensor(rng, {3, 4, 2, 2});
  Tensor y1 = layer_forward(x, p, cfg);

  // swap vote matrices k=0 and k=1 inside cluster (c_out=1, g=0)
  LayerParams p2;
  p2.weights = p.weights.clone();
  p2.biases = p.biases.clone();
  p2.ln_gain = p.ln_gain;
  p2.ln_bias = p.ln_bias;
  int d = cfg.dims_out, f = cfg.vote_fan_in();
  auto wofs = [&](int co, int g, int k) {
    return ((static_cast<int64_t>(co) * cfg.groups_in + g) * cfg.votes + k) * d * f;
  };
  auto bofs = [&](int co, int g, int k) {
    return ((static_cast<int64_t>(co) * cfg.groups_in + g) * cfg.votes + k) * d;
  };
  for (int i = 0; i < d * f; ++i)
    std::swap(p2.weights.values()[wofs(1, 0, 0) + i], p2.weights.values()[wofs(1, 0, 1) + i]);
  for (int i = 0; i < d; ++i)
    std::swap(p2.biases.values()[bofs(1, 0, 0) + i], p2.biases.values()[bofs(1, 0, 1) + i]);

  Tensor y2 = layer_forward(x, p2, cfg);
  CHECK(max_abs_diff(y1, y2) == 0.0);  // exact: m and a are symmetric in k
}

static LayerParams permute_clusters(const LayerParams& p, const LayerConfig& cfg,
                                    const std::vector<int>& perm) {
  LayerParams q;
  q.weights = p.weights.clone();
  q.biases = p.biases.clone();
  q.ln_gain = p.ln_gain;
  q.ln_bias = p.ln_bias;
  int c = cfg.channels_out, g = cfg.groups_in, k = cfg.votes, d = cfg.dims_out;
  int f = cfg.vote_fan_in();
  for (int co = 0; co < c; ++co)
    for (int gi = 0; gi < g; ++gi) {
      int64_t dst = (static_cast<int64_t>(co) * g + gi) * k * d;
      int64_t src = (static_cast<int64_t>(co) * g + perm[gi]) * k * d;
      for (int i = 0; i < k * d * f; ++i)
        q.weights.values()[dst * f + i] = p.weights.values()[src * f + i];
      for (int i = 0; i < k * d; ++i) q.biases.values()[dst + i] = p.biases.values()[src + i];
    }
  return q;
}

TEST_CASE("cluster permutation equivariance") {
  LayerConfig cfg;
  cfg.groups_in = 2;
  cfg.channels_out = 2;
  cfg.votes = 2;
  cfg.dims_in = 3;
  cfg.dims_out = 3;
  LayerParams p = rand_params(cfg, 51);
  Rng rng(23);
  // single input channel: both groups read it, so a cluster swap is a pure
  // relabeling and the fused output must not move
  Tensor x = rand_tensor(rng, {3, 3, 1, 3});
  Tensor y1 = layer_forward(x, p, cfg);
  Tensor y2 = layer_forward(x, permute_clusters(p, cfg, {1, 0}), cfg);
  CHECK(max_abs_diff(y1, y2) == 0.0);  // two-term sums commute exactly

  LayerConfig cfg3 = cfg;
  cfg3.groups_in = 3;
  LayerParams p3 = rand_params(cfg3, 52);
  Tensor y3 = layer_forward(x, p3, cfg3);
  Tensor y4 = layer_forward(x, permute_clusters(p3, cfg3, {2, 0, 1}), cfg3);
  CHECK(max_abs_diff(y3, y4) < 1e-12);
}

TEST_CASE("smaller vote spread strictly raises a cluster's routing weight") {
  // two clusters, fixed centroids 1.0; cluster 0 spread shrinks
  auto weight_of_cluster0 = [](double delta) {
    Tensor votes = Tensor::from({2, 2, 1}, {1.0 - delta, 1.0 + delta, 0.5, 1.5});
    ClusterStats st = cluster_stats(votes);
    Tensor c = routing_weights(st.agreement, RoutingMode::data_dependent);
    return c.at({0, 0});
  };
  double loose = weight_of_cluster0(0.4);
  double tight = weight_of_cluster0(0.1);
  double tighter = weight_of_cluster0(0.01);
  CHECK(tight > loose);
  CHECK(tighter > tight);
  CHECK(weight_of_cluster0(0.5) == doctest::Approx(0.5));  // equal spreads tie
}

TEST_CASE("layer_forward matches the loop oracle over random configs") {
  int tested = 0;
  for (uint64_t seed = 1; tested < 56; ++seed) {
    Rng rng(seed * 977);
    LayerConfig cfg;
    cfg.groups_in = rng.uniform_int(1, 3);
    cfg.channels_out = rng.uniform_int(1, 3);
    cfg.votes = rng.uniform_int(1, 3);
    cfg.dims_out = rng.uniform_int(1, 4);
    cfg.stride = rng.uniform_int(1, 2);
    cfg.pad = rng.uniform_int(0, 1);
    cfg.mode = rng.bernoulli(0.5) ? RoutingMode::data_dependent : RoutingMode::constant;
    cfg.layer_norm = rng.bernoulli(0.5);
    cfg.sliced = rng.bernoulli(0.3);
    cfg.dims_in = cfg.sliced ? cfg.votes * rng.uniform_int(1, 2) : rng.uniform_int(1, 3);
    int min_hw = cfg.pad == 1 ? 1 : 3;
    int h = rng.uniform_int(min_hw, 4), w = rng.uniform_int(min_hw, 4);
    int cin = rng.bernoulli(0.5) ? 1 : cfg.groups_in;
    LayerParams p = rand_params(cfg, seed * 31 + 7);
    Tensor x = rand_tensor(rng, {h, w, cin, cfg.dims_in}, -1.5, 1.5);
    Tensor fast = layer_forward(x, p, cfg);
    Tensor slow = layer_forward_oracle(x, p, cfg);
    REQUIRE(fast.shape() == slow.shape());
    CHECK(max_abs_diff(fast, slow) < 1e-9);
    ++tested;
  }
}

TEST_CASE("gradients flow through the whole layer including agreements") {
  LayerConfig cfg;
  cfg.groups_in = 2;
  cfg.channels_out = 2;
  cfg.votes = 2;
  cfg.dims_in = 2;
  cfg.dims_out = 3;
  LayerParams p = rand_params(cfg, 61);
  Rng rng(29);
  Tensor x = rand_tensor(rng, {3, 3, 2, 2});
  Tensor mask = rand_tensor(rng, {3, 3, 2, 3});

  auto loss_with = [&](const LayerParams& pp, const Tensor& xx) {
    return sum_all(mul(layer_forward(xx, pp, cfg), mask));
  };

  double ew = grad_check(
      [&](const Tensor& t) {
        LayerParams pp = p;
        pp.weights = t;
        return loss_with(pp, x);
      },
      p.weights);
  CHECK(ew < 1e-4);

  double eb = grad_check(
      [&](const Tensor& t) {
        LayerParams pp = p;
        pp.biases = t;
        return loss_with(pp, x);
      },
      p.biases);
  CHECK(eb < 1e-4);

  double eg = grad_check(
      [&](const Tensor& t) {
        LayerParams pp = p;
        pp.ln_gain = t;
        return loss_with(pp, x);
      },
      p.ln_gain);
  CHECK(eg < 1e-4);

  double ex = grad_check([&](const Tensor& t) { return loss_with(p, t); }, x);
  CHECK(ex < 1e-4);

  // sliced mode too
  LayerConfig scfg = cfg;
  scfg.sliced = true;  // K=2 divides D_in=2
  LayerParams sp = rand_params(scfg, 62);
  double es = grad_check(
      [&](const Tensor& t) {
        LayerParams pp = sp;
        pp.weights = t;
        return sum_all(mul(layer_forward(x, pp, scfg), mask));
      },
      sp.weights);
  CHECK(es < 1e-4);
}

TEST_CASE("routing weight capture reports the constant mode exactly") {
  LayerConfig cfg;
  cfg.groups_in = 4;
  cfg.channels_out = 1;
  cfg.votes = 2;
  cfg.dims_in = 2;
  cfg.dims_out = 2;
  cfg.mode = RoutingMode::constant;
  LayerParams p = rand_params(cfg, 71);
  Rng rng(37);
  Tensor x = rand_tensor(rng, {3, 3, 4, 2});
  Tensor c;
  Tensor y = layer_forward(x, p, cfg, &c);
  REQUIRE(c.shape() == Shape{3, 3, 1, 4, 2});
  for (double v : c.values()) CHECK(v == 0.25);

  cfg.mode = RoutingMode::data_dependent;
  Tensor cdd;
  layer_forward(x, p, cfg, &cdd);
  REQUIRE(cdd.shape() == Shape{3, 3, 1, 4, 2});
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int d = 0; d < 2; ++d) {
        double sum = 0;
        for (int g = 0; g < 4; ++g) sum += cdd.at({i, j, 0, g, d});
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
      }
}
