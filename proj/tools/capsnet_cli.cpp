// Command-line front end. Links only the C API.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "CLI11.hpp"
#include "capsnet.h"

namespace {

struct Args {
  std::string variant = "tiny";
  std::string dataset = "mnist";
  std::string data_dir;
  std::string out_dir = "out";
  std::string checkpoint;
  std::string mode = "azimuth";
  uint64_t seed = 1;
  uint64_t train_items = 0;
  uint64_t eval_items = 0;
  int images = 8;
  int channel = 0;
  int dim = 0;
  int runs = 1;
  double target = std::nan("");
  bool ablation = false;
  bool no_layer_norm = false;
  bool sliced_votes = false;
  bool resume = false;
  caps_train_config train{};
};

int exit_code(caps_status st) {
  switch (st) {
    case CAPS_OK:
      return 0;
    case CAPS_ERR_CONFIG:
      return 2;
    case CAPS_ERR_DATA:
      return 3;
    case CAPS_ERR_DIVERGED:
      return 1;
    default:
      return 4;
  }
}

// prints the error and returns the mapped exit code; call as `return fail(st)`
int fail(caps_status st) {
  std::fprintf(stderr, "error: %s\n", caps_last_error());
  return exit_code(st);
}

#define TRY(call)                      \
  do {                                 \
    caps_status st_ = (call);          \
    if (st_ != CAPS_OK) return fail(st_); \
  } while (0)

struct DatasetHandle {
  caps_dataset* ds = nullptr;
  ~DatasetHandle() { caps_dataset_free(ds); }
};
struct ModelHandle {
  caps_model* m = nullptr;
  ~ModelHandle() { caps_model_free(m); }
};

int load_split(const Args& a, const char* split, DatasetHandle& out) {
  caps_status st = caps_dataset_load(a.dataset.c_str(), a.data_dir.c_str(), split, &out.ds);
  if (st != CAPS_OK) return fail(st);
  uint64_t limit = std::string(split) == "train" ? a.train_items : a.eval_items;
  if (limit > 0) {
    caps_dataset* sub = nullptr;
    st = caps_dataset_subset(out.ds, limit, a.seed, &sub);
    if (st != CAPS_OK) return fail(st);
    caps_dataset_free(out.ds);
    out.ds = sub;
  }
  return 0;
}

int make_model(const Args& a, const DatasetHandle& ds, uint64_t seed, bool constant_routing,
               ModelHandle& out) {
  int h = 0, w = 0, ch = 0, classes = 0;
  TRY(caps_dataset_geometry(ds.ds, &h, &w, &ch));
  TRY(caps_dataset_classes(ds.ds, &classes));
  caps_model_options opt{constant_routing ? 1 : 0, a.no_layer_norm ? 1 : 0,
                         a.sliced_votes ? 1 : 0};
  caps_status st = caps_model_create(a.variant.c_str(), h, w, ch, classes, &opt, seed, &out.m);
  return st == CAPS_OK ? 0 : fail(st);
}

int load_checkpoint(const Args& a, ModelHandle& out) {
  if (a.checkpoint.empty()) {
    std::fprintf(stderr, "error: this subcommand needs --checkpoint\n");
    return 2;
  }
  caps_status st = caps_model_load(a.checkpoint.c_str(), &out.m);
  return st == CAPS_OK ? 0 : fail(st);
}

void print_epoch(const caps_epoch_metrics* m, void*) {
  std::printf("epoch %d  lr %.6g  train_loss %.6f  train_acc %.4f  eval_err %.4f  (%.1fs)\n",
              m->epoch, m->lr, m->train_loss, m->train_acc, m->eval_err, m->seconds);
  std::fflush(stdout);
}

int train_into(const Args& a, ModelHandle& model, const DatasetHandle& train_ds,
               const DatasetHandle& eval_ds, const std::string& out_dir, uint64_t seed,
               double* final_err) {
  caps_train_config cfg = a.train;
  cfg.seed = seed;
  caps_status st =
      a.resume
          ? caps_train_resume(model.m, train_ds.ds, eval_ds.ds, &cfg, out_dir.c_str(),
                              print_epoch, nullptr)
          : caps_train(model.m, train_ds.ds, eval_ds.ds, &cfg, out_dir.c_str(), print_epoch,
                       nullptr);
  if (st != CAPS_OK) return fail(st);
  TRY(caps_evaluate(model.m, eval_ds.ds, final_err));
  return 0;
}

int cmd_train(const Args& a) {
  DatasetHandle train_ds, test_ds;
  if (int rc = load_split(a, "train", train_ds)) return rc;
  if (int rc = load_split(a, "test", test_ds)) return rc;
  ModelHandle model;
  if (int rc = make_model(a, train_ds, a.seed, a.ablation, model)) return rc;
  if (a.ablation) {
    double dev = 0;
    TRY(caps_verify_constant_routing(model.m, train_ds.ds, 0, &dev));
    std::printf("constant routing check: max |c - 1/G| = %.3g\n", dev);
  }
  double err = 0;
  if (int rc = train_into(a, model, train_ds, test_ds, a.out_dir, a.seed, &err)) return rc;
  int64_t params = 0;
  TRY(caps_model_param_count(model.m, &params));
  std::printf("final error %.4f  params %lld  artifacts %s\n", err,
              static_cast<long long>(params), a.out_dir.c_str());
  return 0;
}

int cmd_eval(const Args& a) {
  ModelHandle model;
  if (int rc = load_checkpoint(a, model)) return rc;
  DatasetHandle test_ds;
  if (int rc = load_split(a, "test", test_ds)) return rc;
  double err = 0;
  TRY(caps_evaluate(model.m, test_ds.ds, &err));
  std::printf("eval error %.4f\n", err);
  return 0;
}

int cmd_ablation(const Args& a) {
  if (a.runs < 1) {
    std::fprintf(stderr, "error: --runs must be >= 1\n");
    return 2;
  }
  DatasetHandle train_ds, test_ds;
  if (int rc = load_split(a, "train", train_ds)) return rc;
  if (int rc = load_split(a, "test", test_ds)) return rc;

  std::string csv = "seed,dd_err,const_err\n";
  for (int r = 0; r < a.runs; ++r) {
    uint64_t seed = a.seed + uint64_t(r);
    double errs[2] = {0, 0};
    for (int variant = 0; variant < 2; ++variant) {
      bool constant = variant == 1;
      ModelHandle model;
      if (int rc = make_model(a, train_ds, seed, constant, model)) return rc;
      if (constant) {
        double dev = 0;
        TRY(caps_verify_constant_routing(model.m, train_ds.ds, 0, &dev));
        std::printf("seed %llu constant routing check: max |c - 1/G| = %.3g\n",
                    static_cast<unsigned long long>(seed), dev);
      }
      std::string run_dir = a.out_dir + "/" + (constant ? "const_seed" : "dd_seed") +
                            std::to_string(static_cast<unsigned long long>(seed));
      if (int rc = train_into(a, model, train_ds, test_ds, run_dir, seed, &errs[variant]))
        return rc;
    }
    char row[128];
    std::snprintf(row, sizeof row, "%llu,%.17g,%.17g\n", static_cast<unsigned long long>(seed),
                  errs[0], errs[1]);
    csv += row;
    std::printf("seed %llu  dd_err %.4f  const_err %.4f\n",
                static_cast<unsigned long long>(seed), errs[0], errs[1]);
  }

  std::filesystem::create_directories(a.out_dir);
  std::string path = a.out_dir + "/ablation.csv";
  std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    f << csv;
    if (!f) {
      std::fprintf(stderr, "error: cannot write %s\n", tmp.c_str());
      return 4;
    }
  }
  std::filesystem::rename(tmp, path);
  std::printf("comparison CSV: %s\n", path.c_str());
  return 0;
}

int cmd_perturb(const Args& a) {
  ModelHandle model;
  if (int rc = load_checkpoint(a, model)) return rc;
  DatasetHandle test_ds;
  if (int rc = load_split(a, "test", test_ds)) return rc;
  TRY(caps_run_perturb(model.m, test_ds.ds, a.images, a.out_dir.c_str()));
  std::printf("perturbation strips and index.csv written to %s\n", a.out_dir.c_str());
  return 0;
}

int cmd_transform_recon(const Args& a) {
  ModelHandle model;
  if (int rc = load_checkpoint(a, model)) return rc;
  DatasetHandle test_ds;
  if (int rc = load_split(a, "test", test_ds)) return rc;
  double mse[18] = {0};
  TRY(caps_run_transform_recon(model.m, test_ds.ds, a.images, a.out_dir.c_str(), mse, 18));
  double avg = 0;
  for (double v : mse) avg += v;
  avg /= 18.0;
  std::printf("identity MSE %.6f  average MSE over 18 transforms %.6f\n", mse[0], avg);
  std::printf("sheet and per-transform CSV written to %s\n", a.out_dir.c_str());
  return 0;
}

int cmd_viewpoints(const Args& a) {
  DatasetHandle train_ds, test_ds;
  if (int rc = load_split(a, "train", train_ds)) return rc;
  if (int rc = load_split(a, "test", test_ds)) return rc;
  ModelHandle model;
  if (int rc = make_model(a, train_ds, a.seed, a.ablation, model)) return rc;
  caps_train_config cfg = a.train;
  cfg.seed = a.seed;
  double familiar = 0, novel = 0;
  int epoch = -1;
  int view_mode = a.mode == "azimuth" ? 0 : 1;
  TRY(caps_run_viewpoints(model.m, train_ds.ds, test_ds.ds, view_mode, &cfg, a.target,
                          a.out_dir.c_str(), &familiar, &novel, &epoch));
  std::printf("mode %s  selected epoch %d  familiar %.4f  novel %.4f\n", a.mode.c_str(), epoch,
              familiar, novel);
  std::printf("report: %s/viewpoints_report.txt\n", a.out_dir.c_str());
  return 0;
}

int cmd_routing_viz(const Args& a) {
  ModelHandle model;
  if (int rc = load_checkpoint(a, model)) return rc;
  DatasetHandle test_ds;
  if (int rc = load_split(a, "test", test_ds)) return rc;
  std::filesystem::create_directories(a.out_dir);
  std::string csv = a.out_dir + "/routing.csv";
  double within = 0, between = 0;
  TRY(caps_run_routing_viz(model.m, test_ds.ds, a.channel, a.dim, a.images, csv.c_str(), &within,
                           &between));
  std::printf("within-class mean L1 %.6f  between-class mean L1 %.6f\n", within, between);
  std::printf("routing weights CSV: %s\n", csv.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  Args a;
  caps_train_config_default(&a.train);
  const char* env_dir = std::getenv("DATA_DIR");
  a.data_dir = env_dir && *env_dir ? env_dir : "data";

  CLI::App app{"capsule-network training and experiments (engine " +
               std::string(caps_version()) + ")"};
  app.set_config("--config", "", "flat key=value config file; command-line flags override");
  app.require_subcommand(1);
  app.fallthrough();  // options may appear after the subcommand name

  app.add_option("--variant", a.variant, "network variant name");
  app.add_option("--dataset", a.dataset, "dataset id")
      ->check(CLI::IsMember({"mnist", "fashion-mnist", "smallnorb", "cifar10"}));
  app.add_option("--data-dir", a.data_dir, "dataset directory (default: $DATA_DIR or ./data)");
  app.add_option("--out-dir", a.out_dir, "artifact directory");
  app.add_option("--checkpoint", a.checkpoint, "model checkpoint (.ccap)");
  app.add_option("--seed", a.seed, "RNG seed");
  app.add_option("--train-items", a.train_items, "random train subset size (0 = all)");
  app.add_option("--eval-items", a.eval_items, "random eval subset size (0 = all)");
  app.add_option("--epochs", a.train.epochs, "training epochs");
  app.add_option("--batch-size", a.train.batch_size, "SGD batch size");
  app.add_option("--lr", a.train.lr0, "initial learning rate");
  app.add_option("--momentum", a.train.momentum, "SGD momentum");
  app.add_option("--decay-every", a.train.decay_every, "epochs per lr decay step");
  app.add_option("--decay-rate", a.train.decay_rate, "lr decay factor");
  app.add_option("--recon-lambda", a.train.recon_lambda, "reconstruction loss weight");
  app.add_option("--mode", a.mode, "viewpoint mode")
      ->check(CLI::IsMember({"azimuth", "elevation"}));
  app.add_option("--images", a.images, "sample images for experiment subcommands");
  app.add_option("--channel", a.channel, "capsule channel for routing-viz");
  app.add_option("--dim", a.dim, "capsule dimension for routing-viz");
  app.add_option("--runs", a.runs, "seed count for ablation pairs");
  app.add_option("--target", a.target, "familiar-accuracy target for viewpoint selection");
  app.add_flag("--ablation", a.ablation, "constant routing weights (1/G)");
  app.add_flag("--resume", a.resume, "continue a train run from out-dir/final.ccap");
  app.add_flag("--no-layer-norm", a.no_layer_norm, "drop per-layer normalization");
  app.add_flag("--sliced-votes", a.sliced_votes, "slice input capsules across votes");

  auto* sc_train = app.add_subcommand("train", "train a variant, write metrics and checkpoints");
  auto* sc_eval = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  auto* sc_ablation =
      app.add_subcommand("ablation", "paired runs: learned vs constant routing");
  auto* sc_perturb =
      app.add_subcommand("perturb", "capsule-dimension perturbation strips (FC decoder)");
  auto* sc_transform = app.add_subcommand(
      "transform-recon", "reconstructions under capsule-grid transforms (conv decoder)");
  auto* sc_viewpoints =
      app.add_subcommand("viewpoints", "restricted-viewpoint generalization protocol");
  auto* sc_routing =
      app.add_subcommand("routing-viz", "per-image routing weights of a global last layer");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) ? 2 : 0;  // help/version exit 0, everything else is a config error
  }

  if (sc_train->parsed()) return cmd_train(a);
  if (sc_eval->parsed()) return cmd_eval(a);
  if (sc_ablation->parsed()) return cmd_ablation(a);
  if (sc_perturb->parsed()) return cmd_perturb(a);
  if (sc_transform->parsed()) return cmd_transform_recon(a);
  if (sc_viewpoints->parsed()) return cmd_viewpoints(a);
  if (sc_routing->parsed()) return cmd_routing_viz(a);
  return 2;
}
