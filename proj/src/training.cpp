#include "training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "io_util.hpp"

namespace caps::training {
namespace {

constexpr uint64_t kShuffleDomain = 0x73687566ull;
constexpr uint64_t kAugmentDomain = 0x61756721ull;

std::string fmt_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(lr0 > 0)) throw ConfigError("lr0 must be > 0");
  if (!(decay_rate > 0) || decay_rate > 1) throw ConfigError("decay_rate must be in (0, 1]");
  if (decay_every < 1) throw ConfigError("decay_every must be >= 1");
  if (momentum < 0 || momentum >= 1) throw ConfigError("momentum must be in [0, 1)");
  if (recon_lambda < 0) throw ConfigError("recon_lambda must be >= 0");
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  Tensor l2 = logits;
  if (logits.rank() == 1) l2 = reshape(logits, {1, logits.shape()[0]});
  if (l2.rank() != 2) throw ConfigError("cross_entropy wants logits [B, C]");
  int b = l2.shape()[0], c = l2.shape()[1];
  if (int(labels.size()) != b)
    throw ConfigError("got " + std::to_string(labels.size()) + " labels for a batch of " +
                      std::to_string(b));
  std::vector<double> mask(size_t(b) * c, 0.0);
  for (int i = 0; i < b; ++i) {
    if (labels[i] < 0 || labels[i] >= c)
      throw ConfigError("label " + std::to_string(labels[i]) + " out of range for " +
                        std::to_string(c) + " classes");
    mask[size_t(i) * c + labels[i]] = 1.0;
  }
  Tensor picked = mul(log_softmax(l2, 1), Tensor::from({b, c}, std::move(mask)));
  return mul_scalar(sum_all(picked), -1.0 / b);
}

Tensor mse(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ConfigError("mse shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor d = sub(a, b);
  return mean_all(mul(d, d));
}

double lr_schedule(int epoch, const TrainConfig& cfg) {
  if (epoch < 0) throw ConfigError("negative epoch");
  return cfg.lr0 * std::pow(cfg.decay_rate, double(epoch / cfg.decay_every));
}

SGD::SGD(std::vector<std::pair<std::string, Tensor>> params, double momentum)
    : params_(std::move(params)), momentum_(momentum) {
  velocity_.resize(params_.size());
  for (size_t i = 0; i < params_.size(); ++i)
    velocity_[i].assign(size_t(params_[i].second.size()), 0.0);
}

void SGD::step(double lr, double grad_scale) {
  for (size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i].second;
    const auto& g = p.grad_ref();
    if (g.empty()) throw Error("no gradient for parameter " + params_[i].first);
    auto& v = velocity_[i];
    auto& x = p.values();
    for (size_t j = 0; j < v.size(); ++j) {
      v[j] = momentum_ * v[j] + g[j] * grad_scale;
      x[j] -= lr * v[j];
    }
  }
}

void SGD::zero_grad() {
  for (auto& [name, p] : params_) p.zero_grad();
}

std::vector<models::CheckpointBlob> SGD::velocity_blobs() const {
  std::vector<models::CheckpointBlob> out;
  for (size_t i = 0; i < params_.size(); ++i)
    out.push_back({"opt.velocity." + params_[i].first, velocity_[i]});
  return out;
}

void SGD::load_velocity(const std::vector<models::CheckpointBlob>& blobs) {
  for (size_t i = 0; i < params_.size(); ++i) {
    std::string want = "opt.velocity." + params_[i].first;
    for (const auto& blob : blobs) {
      if (blob.name != want) continue;
      if (blob.data.size() != velocity_[i].size())
        throw DataError("optimizer state " + want + " has wrong size");
      velocity_[i] = blob.data;
      break;
    }
  }
}

Tensor image_tensor(const data::LabeledImage& img) {
  std::vector<double> v(img.pixels.begin(), img.pixels.end());
  return Tensor::from({img.channels, img.height, img.width}, std::move(v));
}

int argmax(const Tensor& logits) {
  const auto& v = logits.values();
  if (v.empty()) throw ConfigError("argmax of empty tensor");
  return int(std::max_element(v.begin(), v.end()) - v.begin());
}

double evaluate(const models::Model& m, const data::Dataset& ds, const data::EvalSpec& eval) {
  if (ds.items.empty()) throw ConfigError("evaluate on empty dataset");
  int64_t wrong = 0;
  for (const auto& item : ds.items) {
    data::LabeledImage prepared = data::transform_eval(item, eval);
    Tensor logits = models::classify(m, image_tensor(prepared));
    if (argmax(logits) != item.label) ++wrong;
  }
  return double(wrong) / double(ds.items.size());
}

namespace {

// forward + loss for one training item; returns (loss tensor, correct?)
std::pair<Tensor, bool> item_loss(const models::Model& model, const data::LabeledImage& item,
                                  const Tensor& img, double recon_lambda) {
  Tensor grid = models::image_to_grid(img);
  Tensor last_grid;
  Tensor features = models::forward_features(model, grid, &last_grid);
  Tensor logits = models::head_logits(model, features);
  Tensor loss = cross_entropy(logits, {item.label});
  if (model.spec.decoder != models::DecoderKind::none && recon_lambda > 0) {
    if (model.spec.in_ch != 1)
      throw ConfigError("reconstruction training expects single-channel images");
    Tensor target = reshape(img, {model.spec.in_h, model.spec.in_w});
    Tensor rec;
    if (model.spec.decoder == models::DecoderKind::fc) {
      const auto& lc = model.spec.layers.back();
      Tensor caps = reshape(last_grid, {lc.channels_out, lc.dims_out});
      rec = models::decode_fc(model, models::mask_capsules(caps, item.label));
    } else {
      rec = models::decode_conv(model, last_grid);
    }
    loss = add(loss, mul_scalar(mse(rec, target), recon_lambda));
  }
  return {loss, argmax(logits) == item.label};
}

}  // namespace

Metrics train(models::Model& model, const data::Dataset& train_set, const data::Dataset& eval_set,
              const data::Recipe& recipe, const TrainConfig& cfg, const std::string& out_dir,
              const TrainHooks& hooks) {
  cfg.validate();
  if (train_set.items.empty()) throw ConfigError("empty training set");
  if (hooks.start_epoch < 0 || hooks.start_epoch > cfg.epochs)
    throw ConfigError("start epoch out of range");

  SGD opt(models::named_params(model), cfg.momentum);
  if (!hooks.velocity.empty()) opt.load_velocity(hooks.velocity);

  Metrics metrics;
  std::string csv_path = out_dir.empty() ? "" : io::join_path(out_dir, "metrics.csv");
  if (!out_dir.empty()) {
    io::ensure_dir(out_dir);
    // keep the rows of the interrupted run when resuming
    if (hooks.start_epoch > 0 && io::file_exists(csv_path)) {
      for (const auto& row : parse_metrics_csv(csv_path).epochs)
        if (row.epoch < hooks.start_epoch) metrics.epochs.push_back(row);
    }
  }
  double best_err = std::numeric_limits<double>::infinity();
  for (const auto& row : metrics.epochs) best_err = std::min(best_err, row.eval_err);

  auto write_artifacts = [&](const char* checkpoint_name, int finished_epoch) {
    if (out_dir.empty()) return;
    auto extra = opt.velocity_blobs();
    extra.push_back({"meta.epoch", {double(finished_epoch)}});
    extra.push_back({"meta.best_eval_err", {best_err}});
    models::save_model(io::join_path(out_dir, checkpoint_name), model, extra);
  };

  for (int epoch = hooks.start_epoch; epoch < cfg.epochs; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    double lr = lr_schedule(epoch, cfg);

    std::vector<size_t> order(train_set.items.size());
    std::iota(order.begin(), order.end(), size_t(0));
    Rng shuffle_rng(mix_seed(mix_seed(cfg.seed, kShuffleDomain), uint64_t(epoch)));
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[size_t(shuffle_rng.uniform_int(0, int(i) - 1))]);

    double loss_sum = 0;
    int64_t correct = 0;
    size_t done = 0;
    int batch_index = 0;
    while (done < order.size()) {
      size_t batch_n = std::min(size_t(cfg.batch_size), order.size() - done);
      opt.zero_grad();
      for (size_t k = 0; k < batch_n; ++k) {
        size_t idx = order[done + k];
        Rng aug_rng(mix_seed(mix_seed(cfg.seed, kAugmentDomain), uint64_t(epoch), uint64_t(idx)));
        data::LabeledImage prepared =
            data::augment_train(train_set.items[idx], recipe.train, aug_rng);
        Tensor img = image_tensor(prepared);
        Tape tape;
        Tape::Scope scope(tape);
        auto [loss, ok] = item_loss(model, train_set.items[idx], img, cfg.recon_lambda);
        double lv = loss.value();
        if (!std::isfinite(lv))
          throw DivergedError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                              std::to_string(batch_index) + ", item " + std::to_string(idx));
        loss_sum += lv;
        correct += ok ? 1 : 0;
        tape.backward(loss);
      }
      opt.step(lr, 1.0 / double(batch_n));
      done += batch_n;
      ++batch_index;
    }

    EpochMetrics row;
    row.epoch = epoch;
    row.lr = lr;
    row.train_loss = loss_sum / double(order.size());
    row.train_acc = double(correct) / double(order.size());
    row.eval_err = evaluate(model, eval_set, recipe.eval);
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    metrics.epochs.push_back(row);

    if (!out_dir.empty()) io::write_file_atomic(csv_path, metrics_csv(metrics));
    if (row.eval_err < best_err) {
      best_err = row.eval_err;
      write_artifacts("best.ccap", epoch);
    }
    write_artifacts("final.ccap", epoch);
    if (hooks.on_epoch) hooks.on_epoch(row);
  }

  if (cfg.epochs == hooks.start_epoch) write_artifacts("final.ccap", hooks.start_epoch - 1);
  return metrics;
}

std::string metrics_csv(const Metrics& metrics) {
  std::string out = "epoch,lr,train_loss,train_acc,eval_err,seconds\n";
  for (const auto& r : metrics.epochs) {
    out += std::to_string(r.epoch) + "," + fmt_g17(r.lr) + "," + fmt_g17(r.train_loss) + "," +
           fmt_g17(r.train_acc) + "," + fmt_g17(r.eval_err) + "," + fmt_g17(r.seconds) + "\n";
  }
  return out;
}

Metrics parse_metrics_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open " + path);
  Metrics metrics;
  std::string line;
  if (!std::getline(f, line) || line != "epoch,lr,train_loss,train_acc,eval_err,seconds")
    throw DataError(path + ": unexpected metrics header");
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    EpochMetrics r;
    char c;
    ls >> r.epoch >> c >> r.lr >> c >> r.train_loss >> c >> r.train_acc >> c >> r.eval_err >> c >>
        r.seconds;
    if (!ls) throw DataError(path + ": bad metrics row '" + line + "'");
    metrics.epochs.push_back(r);
  }
  return metrics;
}

}  // namespace caps::training
