#ifndef CAPSNET_H
#define CAPSNET_H

/* C API for the capsule-network engine: opaque handles, status codes, and
 * thread-local error text. Every function returns caps_status unless noted;
 * on failure the out-parameters are untouched and caps_last_error() holds a
 * message until the next call on the same thread. */

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum caps_status {
  CAPS_OK = 0,
  CAPS_ERR_CONFIG = 1,   /* bad variant/flag/config value */
  CAPS_ERR_DATA = 2,     /* unreadable or malformed dataset/checkpoint */
  CAPS_ERR_DIVERGED = 3, /* non-finite loss during training */
  CAPS_ERR_IO = 4,       /* filesystem failure */
  CAPS_ERR_INVALID = 5,  /* null handle or out-of-range argument */
  CAPS_ERR_INTERNAL = 6
} caps_status;

const char* caps_version(void);

/* Message for the most recent failure on this thread; never NULL. */
const char* caps_last_error(void);

/* ---- datasets ---- */

typedef struct caps_dataset caps_dataset;

/* id: mnist | fashion-mnist | smallnorb | cifar10; split: train | test.
 * Files are searched under data_dir and data_dir/<id>, gzipped or plain. */
caps_status caps_dataset_load(const char* id, const char* data_dir, const char* split,
                              caps_dataset** out);
void caps_dataset_free(caps_dataset* ds);

caps_status caps_dataset_size(const caps_dataset* ds, size_t* out);
caps_status caps_dataset_classes(const caps_dataset* ds, int* out);

/* Model input geometry for this dataset (after its standard train/eval
 * transforms), i.e. what caps_model_create should be given. */
caps_status caps_dataset_geometry(const caps_dataset* ds, int* out_h, int* out_w, int* out_ch);

/* Seeded shuffle, first `count` items. */
caps_status caps_dataset_subset(const caps_dataset* ds, size_t count, uint64_t seed,
                                caps_dataset** out);

/* Restricted-viewpoint split (datasets with viewpoint annotations only).
 * mode: 0 = azimuth, 1 = elevation. Training items outside the familiar set
 * are discarded; test items land in exactly one of familiar/novel. */
caps_status caps_viewpoint_split(const caps_dataset* train_src, const caps_dataset* test_src,
                                 int mode, caps_dataset** out_train, caps_dataset** out_familiar,
                                 caps_dataset** out_novel);

/* ---- models ---- */

typedef struct caps_model caps_model;

typedef struct caps_model_options {
  int constant_routing; /* routing weights pinned to 1/G */
  int no_layer_norm;    /* drop the per-layer normalization */
  int sliced_votes;     /* votes read D_in/K-dim slices where K divides D_in */
} caps_model_options;

/* variant: M-variant1..4, S-variant1..4, CxKyDz, NxKyDz, tiny, tiny-global,
 * recon, disentangle. options may be NULL for defaults. */
caps_status caps_model_create(const char* variant, int in_h, int in_w, int in_ch, int num_classes,
                              const caps_model_options* options, uint64_t seed, caps_model** out);
caps_status caps_model_load(const char* path, caps_model** out);
caps_status caps_model_save(const caps_model* model, const char* path);
void caps_model_free(caps_model* model);

caps_status caps_model_param_count(const caps_model* model, int64_t* out);

/* Canonical variant description text. Writes at most buf_len bytes
 * (NUL-terminated, truncating if needed); *needed gets the full length
 * excluding the NUL (pass NULL if not wanted). */
caps_status caps_model_describe(const caps_model* model, char* buf, size_t buf_len,
                                size_t* needed);

/* ---- training ---- */

typedef struct caps_train_config {
  int epochs;
  int batch_size;
  double lr0;
  int decay_every;
  double decay_rate;
  double momentum;
  uint64_t seed;
  double recon_lambda;
} caps_train_config;

void caps_train_config_default(caps_train_config* cfg);

typedef struct caps_epoch_metrics {
  int epoch;
  double lr;
  double train_loss;
  double train_acc;
  double eval_err;
  double seconds;
} caps_epoch_metrics;

typedef void (*caps_epoch_callback)(const caps_epoch_metrics* metrics, void* user);

/* Trains in place. out_dir may be NULL or empty (no artifacts); otherwise
 * metrics.csv, best.ccap and final.ccap are maintained there and a run is
 * resumable from final.ccap. on_epoch may be NULL. */
caps_status caps_train(caps_model* model, const caps_dataset* train_set,
                       const caps_dataset* eval_set, const caps_train_config* cfg,
                       const char* out_dir, caps_epoch_callback on_epoch, void* user);

/* Continues an interrupted run: loads out_dir/final.ccap into the model
 * (which must have been created with the same variant), restores optimizer
 * state and the epoch counter, and trains on to cfg->epochs. out_dir is
 * required here. */
caps_status caps_train_resume(caps_model* model, const caps_dataset* train_set,
                              const caps_dataset* eval_set, const caps_train_config* cfg,
                              const char* out_dir, caps_epoch_callback on_epoch, void* user);

/* Fraction misclassified under the dataset's deterministic eval transform. */
caps_status caps_evaluate(const caps_model* model, const caps_dataset* ds, double* out_err);

/* Max |c - 1/G| over the final layer's routing weights on one dataset item;
 * ~0 for constant-routing models. */
caps_status caps_verify_constant_routing(const caps_model* model, const caps_dataset* ds,
                                         size_t item, double* out_max_dev);

/* ---- experiments ---- */

/* One 28x(11*28) PGM per (image, capsule dimension) sweeping the true-class
 * capsule by -0.25..0.25 step 0.05, plus index.csv. FC-decoder models. */
caps_status caps_run_perturb(const caps_model* model, const caps_dataset* test_set, int num_images,
                             const char* out_dir);

/* Transform grid PGM (rows: images; columns: ground truth + 18 transforms)
 * plus per-transform mean reconstruction MSE. mean_mse may be NULL;
 * otherwise it receives min(mse_len, 18) values. Conv-decoder models. */
caps_status caps_run_transform_recon(const caps_model* model, const caps_dataset* test_set,
                                     int num_images, const char* out_dir, double* mean_mse,
                                     size_t mse_len);

/* Routing-weight rows at (channel, dim) of the global final layer plus
 * per-class mean/std, written to out_csv. within/between get the mean
 * pairwise L1 distances of same/different-class rows (NULL to skip). */
caps_status caps_run_routing_viz(const caps_model* model, const caps_dataset* test_set,
                                 int channel, int dim, int num_images, const char* out_csv,
                                 double* within_l1, double* between_l1);

/* Viewpoint protocol: split, train on familiar viewpoints (model trained in
 * place), track familiar/novel accuracy per epoch, select the epoch whose
 * familiar accuracy is closest below target_familiar (NaN: best familiar).
 * Writes viewpoints.csv and viewpoints_report.txt under out_dir. Any of the
 * three out-pointers may be NULL. */
caps_status caps_run_viewpoints(caps_model* model, const caps_dataset* train_src,
                                const caps_dataset* test_src, int mode,
                                const caps_train_config* cfg, double target_familiar,
                                const char* out_dir, double* familiar_acc, double* novel_acc,
                                int* selected_epoch);

#ifdef __cplusplus
}
#endif

#endif /* CAPSNET_H */
