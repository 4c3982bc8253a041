#pragma once

// Losses, SGD with momentum, the step-decay schedule, the training loop
// (per-item tape, gradient accumulation over a batch, shuffle and
// augmentation streams derived from the seed) and evaluation.

#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "data.hpp"
#include "models.hpp"
#include "tensor.hpp"

namespace caps::training {

struct TrainConfig {
  int epochs = 5;
  int batch_size = 64;
  double lr0 = 0.1;
  int decay_every = 3;
  double decay_rate = 0.1;
  double momentum = 0.9;
  uint64_t seed = 1;
  double recon_lambda = 1.0;  // weight of the reconstruction term

  void validate() const;
};

struct EpochMetrics {
  int epoch = 0;
  double lr = 0;
  double train_loss = 0;
  double train_acc = 0;
  double eval_err = 0;
  double seconds = 0;
};

struct Metrics {
  std::vector<EpochMetrics> epochs;
};

// mean over the batch of -log softmax(logits)[label]; logits [B, C] with B
// labels, or [C] with one label.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);

// mean squared difference; shapes must match exactly
Tensor mse(const Tensor& a, const Tensor& b);

// lr0 * decay_rate^floor(epoch / decay_every)
double lr_schedule(int epoch, const TrainConfig& cfg);

// v <- momentum*v + g;  p <- p - lr*v
class SGD {
 public:
  SGD(std::vector<std::pair<std::string, Tensor>> params, double momentum);

  // grad_scale folds the 1/batch mean into the update; throws if any managed
  // parameter has no gradient.
  void step(double lr, double grad_scale = 1.0);
  void zero_grad();

  std::vector<models::CheckpointBlob> velocity_blobs() const;  // "opt.velocity.<name>"
  void load_velocity(const std::vector<models::CheckpointBlob>& blobs);

 private:
  std::vector<std::pair<std::string, Tensor>> params_;
  std::vector<std::vector<double>> velocity_;
  double momentum_;
};

// [channels, height, width] double tensor from a loaded image
Tensor image_tensor(const data::LabeledImage& img);

int argmax(const Tensor& logits);

// fraction misclassified under the dataset's deterministic eval transform
double evaluate(const models::Model& m, const data::Dataset& ds, const data::EvalSpec& eval);

struct TrainHooks {
  // called after each epoch's evaluation; the caller owns the model and may
  // inspect it here (extra validation sets, early snapshots, ...)
  std::function<void(const EpochMetrics&)> on_epoch;
  int start_epoch = 0;  // resume point; epochs [start_epoch, cfg.epochs) run
  std::vector<models::CheckpointBlob> velocity;  // resumed optimizer state
};

// Runs the training loop. When out_dir is non-empty, writes metrics.csv
// after every epoch plus best.ccap (lowest eval error) and final.ccap, all
// with optimizer state and progress counters embedded. Aborts with
// DivergedError (naming epoch and batch) on a non-finite loss. Deterministic
// in cfg.seed; resuming from final.ccap at an epoch boundary continues the
// exact same stream.
Metrics train(models::Model& model, const data::Dataset& train_set, const data::Dataset& eval_set,
              const data::Recipe& recipe, const TrainConfig& cfg, const std::string& out_dir,
              const TrainHooks& hooks = {});

std::string metrics_csv(const Metrics& metrics);
Metrics parse_metrics_csv(const std::string& path);

}  // namespace caps::training
