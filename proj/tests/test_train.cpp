#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "training.hpp"
#include "test_util.hpp"

using namespace caps;
using namespace caps::training;

namespace {

data::Dataset fixture_subset(const char* split, size_t count, uint64_t seed) {
  static data::Dataset train = data::load_dataset("mnist", testutil::fixtures_dir(), "train");
  static data::Dataset test = data::load_dataset("mnist", testutil::fixtures_dir(), "test");
  return data::subset(std::string(split) == "train" ? train : test, count, seed);
}

bool params_bitwise_equal(const models::Model& a, const models::Model& b) {
  auto pa = models::named_params(a);
  auto pb = models::named_params(b);
  if (pa.size() != pb.size()) return false;
  for (size_t i = 0; i < pa.size(); ++i) {
    const auto& va = pa[i].second.values();
    const auto& vb = pb[i].second.values();
    if (va.size() != vb.size() ||
        std::memcmp(va.data(), vb.data(), va.size() * sizeof(double)) != 0)
      return false;
  }
  return true;
}

std::string csv_without_seconds(const Metrics& m) {
  std::string out;
  for (const auto& r : m.epochs) {
    Metrics one;
    one.epochs.push_back(r);
    std::string row = metrics_csv(one);
    row = row.substr(row.find('\n') + 1);        // drop header
    row = row.substr(0, row.rfind(','));         // drop seconds column
    out += row + "\n";
  }
  return out;
}

}  // namespace

TEST_CASE("cross entropy: frozen values, batching, gradient") {
  // uniform logits over 10 classes
  Tensor uniform = Tensor::zeros({10});
  CHECK(cross_entropy(uniform, {3}).value() == doctest::Approx(std::log(10.0)).epsilon(1e-12));

  // hand softmax: logits [0, ln 3] -> p = [0.25, 0.75]
  Tensor two = Tensor::from({2}, {0.0, std::log(3.0)});
  CHECK(cross_entropy(two, {1}).value() == doctest::Approx(-std::log(0.75)).epsilon(1e-12));
  CHECK(cross_entropy(two, {0}).value() == doctest::Approx(-std::log(0.25)).epsilon(1e-12));

  // confident-correct limit
  Tensor confident = Tensor::from({2}, {0.0, 60.0});
  CHECK(cross_entropy(confident, {1}).value() < 1e-20);
  CHECK(cross_entropy(confident, {1}).value() >= 0.0);

  // batch form averages the per-row losses
  Tensor batch = Tensor::from({2, 2}, {0.0, std::log(3.0), 0.0, std::log(3.0)});
  double want = 0.5 * (-std::log(0.75) - std::log(0.25));
  CHECK(cross_entropy(batch, {1, 0}).value() == doctest::Approx(want).epsilon(1e-12));

  // stability at large magnitudes
  Tensor big = Tensor::from({2}, {1000.0, 1000.0});
  CHECK(cross_entropy(big, {0}).value() == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  CHECK_THROWS_AS(cross_entropy(uniform, {10}), ConfigError);
  CHECK_THROWS_AS(cross_entropy(uniform, {-1}), ConfigError);
  CHECK_THROWS_AS(cross_entropy(batch, {0}), ConfigError);  // one label, two rows

  // non-negativity on random logits
  Rng rng(4);
  for (int i = 0; i < 20; ++i) {
    Tensor l = testutil::rand_tensor(rng, {4, 6}, -3.0, 3.0);
    CHECK(cross_entropy(l, {0, 1, 2, 3}).value() >= 0.0);
  }

  Tensor x = testutil::rand_tensor(rng, {3, 5}, -2.0, 2.0);
  const std::vector<int> labels = {4, 0, 2};
  double err = grad_check([&labels](const Tensor& t) { return cross_entropy(t, labels); }, x);
  CHECK(err < 1e-6);
}

TEST_CASE("mse: frozen values and gradient") {
  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  CHECK(mse(a, a).value() == 0.0);

  Tensor zeros = Tensor::zeros({3, 3});
  Tensor ones = Tensor::full({3, 3}, 1.0);
  CHECK(mse(zeros, ones).value() == 1.0);

  Tensor p = Tensor::from({2}, {0.0, 1.0});
  Tensor q = Tensor::from({2}, {1.0, 1.0});
  CHECK(mse(p, q).value() == 0.5);

  CHECK_THROWS_AS(mse(zeros, p), ConfigError);

  Rng rng(12);
  Tensor target = testutil::rand_tensor(rng, {4, 4});
  Tensor x = testutil::rand_tensor(rng, {4, 4});
  double err = grad_check([&target](const Tensor& t) { return mse(t, target); }, x);
  CHECK(err < 1e-6);
}

TEST_CASE("learning-rate schedule") {
  TrainConfig cfg;
  cfg.lr0 = 0.1;
  cfg.decay_every = 100;
  cfg.decay_rate = 0.1;
  CHECK(lr_schedule(0, cfg) == doctest::Approx(0.1).epsilon(1e-15));
  CHECK(lr_schedule(99, cfg) == doctest::Approx(0.1).epsilon(1e-15));
  CHECK(lr_schedule(100, cfg) == doctest::Approx(0.01).epsilon(1e-12));
  CHECK(lr_schedule(299, cfg) == doctest::Approx(0.001).epsilon(1e-12));
  CHECK_THROWS_AS(lr_schedule(-1, cfg), ConfigError);

  TrainConfig desk;  // desk defaults decay every 3 epochs
  CHECK(desk.decay_every == 3);
  CHECK(lr_schedule(3, desk) == doctest::Approx(0.01).epsilon(1e-12));
}

TEST_CASE("train config validation") {
  TrainConfig cfg;
  cfg.validate();
  TrainConfig bad = cfg;
  bad.lr0 = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.decay_rate = 1.5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.momentum = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("sgd: frozen updates, momentum recursion, state round-trip") {
  auto make_param = [](double v) { return Tensor::param({1}, {v}); };

  // plain descent
  Tensor p = make_param(1.0);
  p.grad() = {2.0};
  SGD plain({{"p", p}}, 0.0);
  plain.step(0.1);
  CHECK(p.values()[0] == doctest::Approx(0.8).epsilon(1e-15));

  // zero gradient leaves parameters alone
  Tensor q = make_param(0.5);
  q.grad() = {0.0};
  SGD zero({{"q", q}}, 0.9);
  zero.step(0.1);
  CHECK(q.values()[0] == 0.5);

  // momentum 0.9, constant g=1, lr=0.1: drops 0.1 then 0.19
  Tensor r = make_param(1.0);
  SGD mom({{"r", r}}, 0.9);
  r.grad() = {1.0};
  mom.step(0.1);
  CHECK(r.values()[0] == doctest::Approx(0.9).epsilon(1e-15));
  r.zero_grad();
  r.grad() = {1.0};
  mom.step(0.1);
  CHECK(r.values()[0] == doctest::Approx(0.71).epsilon(1e-12));

  // lr 0 is a no-op within 1e-15
  Tensor s = make_param(0.25);
  SGD still({{"s", s}}, 0.9);
  s.grad() = {3.0};
  still.step(0.0);
  CHECK(std::abs(s.values()[0] - 0.25) <= 1e-15);

  // missing gradient is an error
  Tensor t = make_param(1.0);
  SGD strict({{"t", t}}, 0.0);
  CHECK_THROWS_AS(strict.step(0.1), Error);

  // velocity snapshot round-trips
  auto blobs = mom.velocity_blobs();
  REQUIRE(blobs.size() == 1);
  CHECK(blobs[0].name == "opt.velocity.r");
  CHECK(blobs[0].data == std::vector<double>({1.9}));
  SGD mom2({{"r", r}}, 0.9);
  mom2.load_velocity(blobs);
  CHECK(mom2.velocity_blobs()[0].data == std::vector<double>({1.9}));

  // grad_scale folds in the batch mean
  Tensor u = make_param(1.0);
  u.grad() = {4.0};
  SGD scaled({{"u", u}}, 0.0);
  scaled.step(0.1, 0.25);
  CHECK(u.values()[0] == doctest::Approx(0.9).epsilon(1e-15));
}

TEST_CASE("image tensor conversion and argmax") {
  data::LabeledImage img;
  img.channels = 2;
  img.height = 2;
  img.width = 3;
  img.pixels = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12};
  Tensor t = image_tensor(img);
  CHECK(t.shape() == Shape({2, 2, 3}));
  CHECK(t.at({0, 0, 0}) == 1.0);
  CHECK(t.at({1, 1, 2}) == 12.0);

  CHECK(argmax(Tensor::from({4}, {0.1, 0.9, 0.3, 0.2})) == 1);
  CHECK(argmax(Tensor::from({3}, {5, 5, 4})) == 0);  // first max wins
}

TEST_CASE("evaluate: chance level untrained, shuffle invariance") {
  models::Model m = models::build_variant(models::resolve_variant("tiny", 28, 28, 1, 10), 77);
  data::Dataset test = fixture_subset("test", 1000, 3);
  data::Recipe recipe = data::recipe_for("mnist");
  double err = evaluate(m, test, recipe.eval);
  CHECK(err >= 0.80);
  CHECK(err <= 0.98);

  data::Dataset shuffled = data::subset(test, test.items.size(), 99);
  CHECK(evaluate(m, shuffled, recipe.eval) == doctest::Approx(err).epsilon(1e-12));

  data::Dataset empty;
  CHECK_THROWS_AS(evaluate(m, empty, recipe.eval), ConfigError);
}

TEST_CASE("train: zero epochs leaves the model untouched") {
  models::Model m = models::build_variant(models::resolve_variant("tiny", 28, 28, 1, 10), 5);
  models::Model before = models::build_variant(models::resolve_variant("tiny", 28, 28, 1, 10), 5);
  data::Dataset train_set = fixture_subset("train", 64, 1);
  data::Dataset eval_set = fixture_subset("test", 64, 1);
  data::Recipe recipe = data::recipe_for("mnist");
  TrainConfig cfg;
  cfg.epochs = 0;

  std::string out = testutil::temp_dir("train_zero");
  Metrics metrics = train(m, train_set, eval_set, recipe, cfg, out);
  CHECK(metrics.epochs.empty());
  CHECK(params_bitwise_equal(m, before));
  CHECK(io::file_exists(out + "/final.ccap"));
  std::vector<models::CheckpointBlob> extra;
  models::Model loaded = models::load_model(out + "/final.ccap", &extra);
  CHECK(params_bitwise_equal(loaded, before));
  bool saw_epoch = false;
  for (const auto& blob : extra)
    if (blob.name == "meta.epoch") {
      saw_epoch = true;
      CHECK(blob.data[0] == -1.0);
    }
  CHECK(saw_epoch);
}

TEST_CASE("train: loss decreases, metrics and artifacts are consistent") {
  models::Model m = models::build_variant(models::resolve_variant("tiny", 28, 28, 1, 10), 5);
  data::Dataset train_set = fixture_subset("train", 256, 1);
  data::Dataset eval_set = fixture_subset("test", 128, 1);
  data::Recipe recipe = data::recipe_for("mnist");
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 64;
  cfg.seed = 11;

  std::string out = testutil::temp_dir("train_small");
  int hook_calls = 0;
  TrainHooks hooks;
  hooks.on_epoch = [&hook_calls](const EpochMetrics&) { ++hook_calls; };
  Metrics metrics = train(m, train_set, eval_set, recipe, cfg, out, hooks);

  REQUIRE(metrics.epochs.size() == 2);
  CHECK(hook_calls == 2);
  CHECK(metrics.epochs[0].epoch == 0);
  CHECK(metrics.epochs[1].epoch == 1);
  CHECK(metrics.epochs[1].train_loss < metrics.epochs[0].train_loss);
  for (const auto& r : metrics.epochs) {
    CHECK(std::isfinite(r.train_loss));
    CHECK(r.train_acc >= 0.0);
    CHECK(r.train_acc <= 1.0);
    CHECK(r.eval_err >= 0.0);
    CHECK(r.eval_err <= 1.0);
    CHECK(r.lr == doctest::Approx(0.1));
  }

  // metrics file round-trips
  Metrics parsed = parse_metrics_csv(out + "/metrics.csv");
  REQUIRE(parsed.epochs.size() == 2);
  CHECK(parsed.epochs[1].train_loss == metrics.epochs[1].train_loss);
  CHECK(parsed.epochs[1].eval_err == metrics.epochs[1].eval_err);

  // best checkpoint carries the lowest eval error seen
  CHECK(io::file_exists(out + "/best.ccap"));
  CHECK(io::file_exists(out + "/final.ccap"));
  std::vector<models::CheckpointBlob> extra;
  models::load_model(out + "/best.ccap", &extra);
  double best_err = -1, best_epoch = -1;
  for (const auto& blob : extra) {
    if (blob.name == "meta.best_eval_err") best_err = blob.data[0];
    if (blob.name == "meta.epoch") best_epoch = blob.data[0];
  }
  double min_err = std::min(metrics.epochs[0].eval_err, metrics.epochs[1].eval_err);
  CHECK(best_err == min_err);
  CHECK(best_epoch >= 0);
}

TEST_CASE("train: bit-identical rerun with the same seed") {
  data::Dataset train_set = fixture_subset("train", 192, 2);
  data::Dataset eval_set = fixture_subset("test", 96, 2);
  data::Recipe recipe = data::recipe_for("mnist");
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 64;
  cfg.seed = 21;

  models::Model a = models::build_variant(models::resolve_variant("tiny", 28, 28, 1, 10), 9);
  models::Model b = models::build_variant(models::resolve_variant("tiny", 28, 28, 1, 10), 9);
  Metrics ma = train(a, train_set, eval_set, recipe, cfg, "");
  Metrics mb = train(b, train_set, eval_set, recipe, cfg, "");
  CHECK(params_bitwise_equal(a, b));
  CHECK(csv_without_seconds(ma) == csv_without_seconds(mb));
  CHECK(!csv_without_seconds(ma).empty());
}

TEST_CASE("train: resuming from the final checkpoint continues the same stream") {
  data::Dataset train_set = fixture_subset("train", 192, 4);
  data::Dataset eval_set = fixture_subset("test", 96, 4);
  data::Recipe recipe = data::recipe_for("mnist");
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 64;
  cfg.seed = 31;

  // uninterrupted reference
  models::Model full = models::build_variant(models::resolve_variant("tiny", 28, 28, 1, 10), 13);
  std::string out_full = testutil::temp_dir("train_full");
  Metrics m_full = train(full, train_set, eval_set, recipe, cfg, out_full);

  // run the first two epochs, then resume for the third
  models::Model part = models::build_variant(models::resolve_variant("tiny", 28, 28, 1, 10), 13);
  std::string out_part = testutil::temp_dir("train_part");
  TrainConfig two = cfg;
  two.epochs = 2;
  train(part, train_set, eval_set, recipe, two, out_part);

  std::vector<models::CheckpointBlob> extra;
  models::Model resumed = models::load_model(out_part + "/final.ccap", &extra);
  int finished = -1;
  for (const auto& blob : extra)
    if (blob.name == "meta.epoch") finished = int(blob.data[0]);
  REQUIRE(finished == 1);

  TrainHooks hooks;
  hooks.start_epoch = finished + 1;
  hooks.velocity = extra;
  Metrics m_res = train(resumed, train_set, eval_set, recipe, cfg, out_part, hooks);

  CHECK(params_bitwise_equal(full, resumed));
  REQUIRE(m_res.epochs.size() == 3);  // resumed run re-reads its own history
  CHECK(m_res.epochs[2].train_loss == m_full.epochs[2].train_loss);
  CHECK(m_res.epochs[2].train_acc == m_full.epochs[2].train_acc);
  CHECK(m_res.epochs[2].eval_err == m_full.epochs[2].eval_err);
  CHECK(csv_without_seconds(m_res) == csv_without_seconds(m_full));
}

TEST_CASE("train: non-finite loss aborts with location") {
  models::Model m = models::build_variant(models::resolve_variant("tiny", 28, 28, 1, 10), 5);
  m.head_w.values()[0] = std::numeric_limits<double>::quiet_NaN();
  data::Dataset train_set = fixture_subset("train", 64, 1);
  data::Dataset eval_set = fixture_subset("test", 32, 1);
  data::Recipe recipe = data::recipe_for("mnist");
  TrainConfig cfg;
  cfg.epochs = 1;

  try {
    train(m, train_set, eval_set, recipe, cfg, "");
    FAIL("expected DivergedError");
  } catch (const DivergedError& e) {
    std::string msg = e.what();
    CHECK(msg.find("batch") != std::string::npos);
    CHECK(msg.find("epoch 0") != std::string::npos);
  }
}

TEST_CASE("train: finite losses across seeds on the small variant") {
  data::Dataset train_set = fixture_subset("train", 400, 6);
  data::Dataset eval_set = fixture_subset("test", 32, 6);
  data::Recipe recipe = data::recipe_for("mnist");
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    models::Model m = models::build_variant(models::resolve_variant("tiny", 28, 28, 1, 10), seed);
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 8;  // 50 optimizer steps
    cfg.seed = seed;
    Metrics metrics = train(m, train_set, eval_set, recipe, cfg, "");
    REQUIRE(metrics.epochs.size() == 1);
    CHECK(std::isfinite(metrics.epochs[0].train_loss));  // would have thrown otherwise
  }
}
