#include "capsnet.h"

#include <cmath>
#include <cstring>
#include <string>

#include "data.hpp"
#include "experiments.hpp"
#include "io_util.hpp"
#include "models.hpp"
#include "training.hpp"

struct caps_dataset {
  caps::data::Dataset ds;
};
struct caps_model {
  caps::models::Model m;
};

namespace {

thread_local std::string g_error;

template <typename F>
caps_status wrap(F&& f) {
  try {
    f();
    return CAPS_OK;
  } catch (const caps::ConfigError& e) {
    g_error = e.what();
    return CAPS_ERR_CONFIG;
  } catch (const caps::DataError& e) {
    g_error = e.what();
    return CAPS_ERR_DATA;
  } catch (const caps::DivergedError& e) {
    g_error = e.what();
    return CAPS_ERR_DIVERGED;
  } catch (const caps::IoError& e) {
    g_error = e.what();
    return CAPS_ERR_IO;
  } catch (const std::exception& e) {
    g_error = e.what();
    return CAPS_ERR_INTERNAL;
  } catch (...) {
    g_error = "unknown error";
    return CAPS_ERR_INTERNAL;
  }
}

caps_status invalid(const char* msg) {
  g_error = msg;
  return CAPS_ERR_INVALID;
}

std::string str_or_empty(const char* s) { return s ? std::string(s) : std::string(); }

caps::training::TrainConfig to_cpp(const caps_train_config& c) {
  caps::training::TrainConfig cfg;
  cfg.epochs = c.epochs;
  cfg.batch_size = c.batch_size;
  cfg.lr0 = c.lr0;
  cfg.decay_every = c.decay_every;
  cfg.decay_rate = c.decay_rate;
  cfg.momentum = c.momentum;
  cfg.seed = c.seed;
  cfg.recon_lambda = c.recon_lambda;
  return cfg;
}

}  // namespace

extern "C" {

const char* caps_version(void) { return "1.0.0"; }

const char* caps_last_error(void) { return g_error.c_str(); }

caps_status caps_dataset_load(const char* id, const char* data_dir, const char* split,
                              caps_dataset** out) {
  if (!id || !data_dir || !split || !out) return invalid("caps_dataset_load: null argument");
  return wrap([&] {
    auto* h = new caps_dataset{caps::data::load_dataset(id, data_dir, split)};
    *out = h;
  });
}

void caps_dataset_free(caps_dataset* ds) { delete ds; }

caps_status caps_dataset_size(const caps_dataset* ds, size_t* out) {
  if (!ds || !out) return invalid("caps_dataset_size: null argument");
  *out = ds->ds.size();
  return CAPS_OK;
}

caps_status caps_dataset_classes(const caps_dataset* ds, int* out) {
  if (!ds || !out) return invalid("caps_dataset_classes: null argument");
  *out = ds->ds.num_classes;
  return CAPS_OK;
}

caps_status caps_dataset_geometry(const caps_dataset* ds, int* out_h, int* out_w, int* out_ch) {
  if (!ds || !out_h || !out_w || !out_ch) return invalid("caps_dataset_geometry: null argument");
  return wrap([&] {
    caps::data::Recipe recipe = caps::data::recipe_for(ds->ds.id);
    *out_h = recipe.height;
    *out_w = recipe.width;
    *out_ch = recipe.channels;
  });
}

caps_status caps_dataset_subset(const caps_dataset* ds, size_t count, uint64_t seed,
                                caps_dataset** out) {
  if (!ds || !out) return invalid("caps_dataset_subset: null argument");
  return wrap([&] { *out = new caps_dataset{caps::data::subset(ds->ds, count, seed)}; });
}

caps_status caps_viewpoint_split(const caps_dataset* train_src, const caps_dataset* test_src,
                                 int mode, caps_dataset** out_train, caps_dataset** out_familiar,
                                 caps_dataset** out_novel) {
  if (!train_src || !test_src || !out_train || !out_familiar || !out_novel)
    return invalid("caps_viewpoint_split: null argument");
  if (mode != 0 && mode != 1) return invalid("caps_viewpoint_split: mode must be 0 or 1");
  return wrap([&] {
    caps::data::ViewpointSplit split = caps::data::viewpoint_split(
        train_src->ds, test_src->ds,
        mode == 0 ? caps::data::ViewMode::azimuth : caps::data::ViewMode::elevation);
    *out_train = new caps_dataset{std::move(split.train)};
    *out_familiar = new caps_dataset{std::move(split.familiar)};
    *out_novel = new caps_dataset{std::move(split.novel)};
  });
}

caps_status caps_model_create(const char* variant, int in_h, int in_w, int in_ch, int num_classes,
                              const caps_model_options* options, uint64_t seed, caps_model** out) {
  if (!variant || !out) return invalid("caps_model_create: null argument");
  return wrap([&] {
    caps::models::VariantSpec spec =
        caps::models::resolve_variant(variant, in_h, in_w, in_ch, num_classes);
    if (options)
      caps::models::apply_options(spec, options->constant_routing != 0,
                                  options->no_layer_norm != 0, options->sliced_votes != 0);
    *out = new caps_model{caps::models::build_variant(spec, seed)};
  });
}

caps_status caps_model_load(const char* path, caps_model** out) {
  if (!path || !out) return invalid("caps_model_load: null argument");
  return wrap([&] { *out = new caps_model{caps::models::load_model(path)}; });
}

caps_status caps_model_save(const caps_model* model, const char* path) {
  if (!model || !path) return invalid("caps_model_save: null argument");
  return wrap([&] { caps::models::save_model(path, model->m); });
}

void caps_model_free(caps_model* model) { delete model; }

caps_status caps_model_param_count(const caps_model* model, int64_t* out) {
  if (!model || !out) return invalid("caps_model_param_count: null argument");
  *out = caps::models::count_params(model->m);
  return CAPS_OK;
}

caps_status caps_model_describe(const caps_model* model, char* buf, size_t buf_len,
                                size_t* needed) {
  if (!model || (!buf && buf_len)) return invalid("caps_model_describe: null argument");
  return wrap([&] {
    std::string text = caps::models::spec_to_text(model->m.spec);
    if (needed) *needed = text.size();
    if (buf && buf_len) {
      size_t n = std::min(buf_len - 1, text.size());
      std::memcpy(buf, text.data(), n);
      buf[n] = '\0';
    }
  });
}

void caps_train_config_default(caps_train_config* cfg) {
  if (!cfg) return;
  caps::training::TrainConfig d;
  cfg->epochs = d.epochs;
  cfg->batch_size = d.batch_size;
  cfg->lr0 = d.lr0;
  cfg->decay_every = d.decay_every;
  cfg->decay_rate = d.decay_rate;
  cfg->momentum = d.momentum;
  cfg->seed = d.seed;
  cfg->recon_lambda = d.recon_lambda;
}

caps_status caps_train(caps_model* model, const caps_dataset* train_set,
                       const caps_dataset* eval_set, const caps_train_config* cfg,
                       const char* out_dir, caps_epoch_callback on_epoch, void* user) {
  if (!model || !train_set || !eval_set || !cfg) return invalid("caps_train: null argument");
  return wrap([&] {
    caps::data::Recipe recipe = caps::data::recipe_for(train_set->ds.id);
    caps::training::TrainHooks hooks;
    if (on_epoch)
      hooks.on_epoch = [&](const caps::training::EpochMetrics& e) {
        caps_epoch_metrics m{e.epoch, e.lr, e.train_loss, e.train_acc, e.eval_err, e.seconds};
        on_epoch(&m, user);
      };
    caps::training::train(model->m, train_set->ds, eval_set->ds, recipe, to_cpp(*cfg),
                          str_or_empty(out_dir), hooks);
  });
}

caps_status caps_train_resume(caps_model* model, const caps_dataset* train_set,
                              const caps_dataset* eval_set, const caps_train_config* cfg,
                              const char* out_dir, caps_epoch_callback on_epoch, void* user) {
  if (!model || !train_set || !eval_set || !cfg)
    return invalid("caps_train_resume: null argument");
  if (!out_dir || !*out_dir) return invalid("caps_train_resume: out_dir required");
  return wrap([&] {
    std::string ckpt = std::string(out_dir) + "/final.ccap";
    std::vector<caps::models::CheckpointBlob> extra;
    caps::models::Model loaded = caps::models::load_model(ckpt, &extra);
    int finished = -1;
    for (const auto& blob : extra)
      if (blob.name == "meta.epoch" && !blob.data.empty()) finished = int(blob.data[0]);
    if (finished < 0) throw caps::DataError(ckpt + ": no epoch counter");
    std::string want = caps::models::spec_to_text(model->m.spec);
    std::string got = caps::models::spec_to_text(loaded.spec);
    if (want != got)
      throw caps::ConfigError("resume variant mismatch: model is " + want +
                              ", checkpoint holds " + got);
    caps::data::Recipe recipe = caps::data::recipe_for(train_set->ds.id);
    caps::training::TrainHooks hooks;
    hooks.start_epoch = finished + 1;
    hooks.velocity = extra;
    if (on_epoch)
      hooks.on_epoch = [&](const caps::training::EpochMetrics& e) {
        caps_epoch_metrics m{e.epoch, e.lr, e.train_loss, e.train_acc, e.eval_err, e.seconds};
        on_epoch(&m, user);
      };
    model->m = std::move(loaded);
    caps::training::train(model->m, train_set->ds, eval_set->ds, recipe, to_cpp(*cfg), out_dir,
                          hooks);
  });
}

caps_status caps_evaluate(const caps_model* model, const caps_dataset* ds, double* out_err) {
  if (!model || !ds || !out_err) return invalid("caps_evaluate: null argument");
  return wrap([&] {
    caps::data::Recipe recipe = caps::data::recipe_for(ds->ds.id);
    *out_err = caps::training::evaluate(model->m, ds->ds, recipe.eval);
  });
}

caps_status caps_verify_constant_routing(const caps_model* model, const caps_dataset* ds,
                                         size_t item, double* out_max_dev) {
  if (!model || !ds || !out_max_dev) return invalid("caps_verify_constant_routing: null argument");
  return wrap([&] {
    if (item >= ds->ds.size())
      throw caps::ConfigError("item " + std::to_string(item) + " out of range");
    caps::data::Recipe recipe = caps::data::recipe_for(ds->ds.id);
    caps::Tensor img = caps::training::image_tensor(
        caps::data::transform_eval(ds->ds.items[item], recipe.eval));
    caps::Tensor last_grid, last_routing;
    caps::models::forward_features(model->m, caps::models::image_to_grid(img), &last_grid,
                                   &last_routing);
    double uniform = 1.0 / model->m.spec.layers.back().groups_in;
    double worst = 0;
    for (double c : last_routing.values()) worst = std::max(worst, std::abs(c - uniform));
    *out_max_dev = worst;
  });
}

caps_status caps_run_perturb(const caps_model* model, const caps_dataset* test_set, int num_images,
                             const char* out_dir) {
  if (!model || !test_set || !out_dir) return invalid("caps_run_perturb: null argument");
  return wrap([&] {
    caps::experiments::run_perturb(model->m, test_set->ds, caps::data::recipe_for(test_set->ds.id),
                                   num_images, out_dir);
  });
}

caps_status caps_run_transform_recon(const caps_model* model, const caps_dataset* test_set,
                                     int num_images, const char* out_dir, double* mean_mse,
                                     size_t mse_len) {
  if (!model || !test_set || !out_dir) return invalid("caps_run_transform_recon: null argument");
  return wrap([&] {
    caps::experiments::TransformReconResult res = caps::experiments::run_transform_recon(
        model->m, test_set->ds, caps::data::recipe_for(test_set->ds.id), num_images, out_dir);
    if (mean_mse)
      for (size_t i = 0; i < mse_len && i < res.mean_mse.size(); ++i) mean_mse[i] = res.mean_mse[i];
  });
}

caps_status caps_run_routing_viz(const caps_model* model, const caps_dataset* test_set,
                                 int channel, int dim, int num_images, const char* out_csv,
                                 double* within_l1, double* between_l1) {
  if (!model || !test_set || !out_csv) return invalid("caps_run_routing_viz: null argument");
  return wrap([&] {
    caps::experiments::RoutingVizResult res = caps::experiments::run_routing_viz(
        model->m, test_set->ds, caps::data::recipe_for(test_set->ds.id), channel, dim, num_images,
        out_csv);
    if (within_l1) *within_l1 = res.within_l1;
    if (between_l1) *between_l1 = res.between_l1;
  });
}

caps_status caps_run_viewpoints(caps_model* model, const caps_dataset* train_src,
                                const caps_dataset* test_src, int mode,
                                const caps_train_config* cfg, double target_familiar,
                                const char* out_dir, double* familiar_acc, double* novel_acc,
                                int* selected_epoch) {
  if (!model || !train_src || !test_src || !cfg) return invalid("caps_run_viewpoints: null argument");
  if (mode != 0 && mode != 1) return invalid("caps_run_viewpoints: mode must be 0 or 1");
  return wrap([&] {
    caps::experiments::ViewpointReport rep = caps::experiments::run_viewpoints(
        model->m, train_src->ds, test_src->ds,
        mode == 0 ? caps::data::ViewMode::azimuth : caps::data::ViewMode::elevation, to_cpp(*cfg),
        caps::data::recipe_for(train_src->ds.id), target_familiar, str_or_empty(out_dir));
    if (familiar_acc) *familiar_acc = rep.familiar_acc;
    if (novel_acc) *novel_acc = rep.novel_acc;
    if (selected_epoch) *selected_epoch = rep.selected_epoch;
  });
}

}  // extern "C"
