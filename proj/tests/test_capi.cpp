// C API: status mapping, handle lifecycle, train/evaluate round trips.

#include <cstring>
#include <string>
#include <vector>

#include "capsnet.h"
#include "doctest.h"
#include "test_util.hpp"

namespace {

struct Ds {
  caps_dataset* p = nullptr;
  ~Ds() { caps_dataset_free(p); }
};
struct Mdl {
  caps_model* p = nullptr;
  ~Mdl() { caps_model_free(p); }
};

void load_mnist(const char* split, Ds& out) {
  REQUIRE(caps_dataset_load("mnist", testutil::fixtures_dir().c_str(), split, &out.p) == CAPS_OK);
}

std::string read_text(const std::string& path) {
  auto bytes = caps::io::read_file(path);
  return std::string(bytes.begin(), bytes.end());
}

}  // namespace

TEST_CASE("capi version and error text are always available") {
  CHECK(caps_version() != nullptr);
  CHECK(std::string(caps_version()).find('.') != std::string::npos);
  CHECK(caps_last_error() != nullptr);  // never NULL, even before any failure
}

TEST_CASE("capi status codes distinguish config, data and invalid-argument errors") {
  caps_dataset* ds = nullptr;
  CHECK(caps_dataset_load(nullptr, "x", "train", &ds) == CAPS_ERR_INVALID);
  CHECK(std::string(caps_last_error()).size() > 0);
  CHECK(caps_dataset_load("mnist", "x", "train", nullptr) == CAPS_ERR_INVALID);
  CHECK(caps_dataset_load("nope", testutil::fixtures_dir().c_str(), "train", &ds) ==
        CAPS_ERR_CONFIG);
  CHECK(caps_dataset_load("mnist", "/nonexistent", "train", &ds) == CAPS_ERR_DATA);
  CHECK(std::string(caps_last_error()).find("nonexistent") != std::string::npos);
  CHECK(ds == nullptr);  // out-parameter untouched on failure

  caps_model* m = nullptr;
  CHECK(caps_model_create("bogus", 28, 28, 1, 10, nullptr, 1, &m) == CAPS_ERR_CONFIG);
  CHECK(std::string(caps_last_error()).find("bogus") != std::string::npos);
  CHECK(caps_model_load("/nonexistent/x.ccap", &m) == CAPS_ERR_DATA);
  CHECK(m == nullptr);
}

TEST_CASE("capi dataset handles expose size, classes, geometry and subsets") {
  Ds test;
  load_mnist("test", test);
  size_t n = 0;
  REQUIRE(caps_dataset_size(test.p, &n) == CAPS_OK);
  CHECK(n == 10000);
  int classes = 0;
  REQUIRE(caps_dataset_classes(test.p, &classes) == CAPS_OK);
  CHECK(classes == 10);
  int h = 0, w = 0, ch = 0;
  REQUIRE(caps_dataset_geometry(test.p, &h, &w, &ch) == CAPS_OK);
  CHECK(h == 28);
  CHECK(w == 28);
  CHECK(ch == 1);

  Ds sub, sub2;
  REQUIRE(caps_dataset_subset(test.p, 64, 5, &sub.p) == CAPS_OK);
  REQUIRE(caps_dataset_subset(test.p, 64, 5, &sub2.p) == CAPS_OK);
  REQUIRE(caps_dataset_size(sub.p, &n) == CAPS_OK);
  CHECK(n == 64);
  double e1 = 0, e2 = 0;  // same seed -> same subset, checked through a model
  Mdl m;
  REQUIRE(caps_model_create("tiny", 28, 28, 1, 10, nullptr, 3, &m.p) == CAPS_OK);
  REQUIRE(caps_evaluate(m.p, sub.p, &e1) == CAPS_OK);
  REQUIRE(caps_evaluate(m.p, sub2.p, &e2) == CAPS_OK);
  CHECK(e1 == e2);

  CHECK(caps_dataset_subset(test.p, 20000, 5, &sub.p) == CAPS_ERR_CONFIG);
}

TEST_CASE("capi model describe reports canonical text and truncates politely") {
  Mdl m;
  REQUIRE(caps_model_create("C2K3D4", 28, 28, 1, 10, nullptr, 1, &m.p) == CAPS_OK);
  size_t needed = 0;
  REQUIRE(caps_model_describe(m.p, nullptr, 0, &needed) == CAPS_OK);
  CHECK(needed > 1);
  std::vector<char> buf(needed + 1);
  REQUIRE(caps_model_describe(m.p, buf.data(), buf.size(), nullptr) == CAPS_OK);
  std::string full(buf.data());
  CHECK(full.size() == needed);
  CHECK(full.find("C2K3D4") != std::string::npos);

  char small[8];
  REQUIRE(caps_model_describe(m.p, small, sizeof small, &needed) == CAPS_OK);
  CHECK(std::strlen(small) == 7);  // truncated but NUL-terminated
  CHECK(std::memcmp(small, full.data(), 7) == 0);

  int64_t params = 0;
  REQUIRE(caps_model_param_count(m.p, &params) == CAPS_OK);
  CHECK(params > 0);
}

TEST_CASE("capi model save/load round trip preserves behaviour") {
  Ds test;
  load_mnist("test", test);
  Ds sub;
  REQUIRE(caps_dataset_subset(test.p, 32, 1, &sub.p) == CAPS_OK);

  Mdl m;
  REQUIRE(caps_model_create("tiny", 28, 28, 1, 10, nullptr, 11, &m.p) == CAPS_OK);
  std::string path = testutil::temp_dir("capi") + "/round.ccap";
  REQUIRE(caps_model_save(m.p, path.c_str()) == CAPS_OK);

  Mdl back;
  REQUIRE(caps_model_load(path.c_str(), &back.p) == CAPS_OK);
  int64_t p1 = 0, p2 = 0;
  REQUIRE(caps_model_param_count(m.p, &p1) == CAPS_OK);
  REQUIRE(caps_model_param_count(back.p, &p2) == CAPS_OK);
  CHECK(p1 == p2);
  double e1 = 0, e2 = 0;
  REQUIRE(caps_evaluate(m.p, sub.p, &e1) == CAPS_OK);
  REQUIRE(caps_evaluate(back.p, sub.p, &e2) == CAPS_OK);
  CHECK(e1 == e2);
}

TEST_CASE("capi train smoke: callback fires per epoch and artifacts appear") {
  Ds train;
  load_mnist("train", train);
  Ds tr_sub, ev_sub;
  REQUIRE(caps_dataset_subset(train.p, 48, 2, &tr_sub.p) == CAPS_OK);
  REQUIRE(caps_dataset_subset(train.p, 32, 3, &ev_sub.p) == CAPS_OK);

  Mdl m;
  REQUIRE(caps_model_create("tiny", 28, 28, 1, 10, nullptr, 4, &m.p) == CAPS_OK);
  caps_train_config cfg;
  caps_train_config_default(&cfg);
  CHECK(cfg.epochs == 5);
  CHECK(cfg.momentum == doctest::Approx(0.9));
  cfg.epochs = 2;
  cfg.batch_size = 16;
  cfg.lr0 = 0.05;

  std::vector<caps_epoch_metrics> seen;
  auto cb = [](const caps_epoch_metrics* mt, void* user) {
    static_cast<std::vector<caps_epoch_metrics>*>(user)->push_back(*mt);
  };
  std::string out = testutil::temp_dir("capi_train");
  REQUIRE(caps_train(m.p, tr_sub.p, ev_sub.p, &cfg, out.c_str(), cb, &seen) == CAPS_OK);
  REQUIRE(seen.size() == 2);
  CHECK(seen[0].epoch == 0);
  CHECK(seen[1].epoch == 1);
  CHECK(seen[0].lr == doctest::Approx(0.05));
  CHECK(seen[1].eval_err >= 0.0);
  CHECK(seen[1].eval_err <= 1.0);

  std::string metrics = read_text(out + "/metrics.csv");
  CHECK(metrics.find("epoch") != std::string::npos);
  double err = 0;
  REQUIRE(caps_evaluate(m.p, ev_sub.p, &err) == CAPS_OK);
  CHECK(err == doctest::Approx(seen[1].eval_err));

  // invalid config surfaces as CAPS_ERR_CONFIG
  cfg.batch_size = 0;
  CHECK(caps_train(m.p, tr_sub.p, ev_sub.p, &cfg, nullptr, nullptr, nullptr) == CAPS_ERR_CONFIG);
}

TEST_CASE("capi train resume continues the interrupted stream exactly") {
  Ds train;
  load_mnist("train", train);
  Ds tr_sub, ev_sub;
  REQUIRE(caps_dataset_subset(train.p, 64, 7, &tr_sub.p) == CAPS_OK);
  REQUIRE(caps_dataset_subset(train.p, 32, 8, &ev_sub.p) == CAPS_OK);

  caps_train_config cfg;
  caps_train_config_default(&cfg);
  cfg.epochs = 2;
  cfg.batch_size = 16;
  cfg.lr0 = 0.05;
  cfg.seed = 9;

  Mdl full;
  REQUIRE(caps_model_create("tiny", 28, 28, 1, 10, nullptr, 9, &full.p) == CAPS_OK);
  std::string out_full = testutil::temp_dir("capi_res_full");
  REQUIRE(caps_train(full.p, tr_sub.p, ev_sub.p, &cfg, out_full.c_str(), nullptr, nullptr) ==
          CAPS_OK);

  Mdl part;
  REQUIRE(caps_model_create("tiny", 28, 28, 1, 10, nullptr, 9, &part.p) == CAPS_OK);
  std::string out_part = testutil::temp_dir("capi_res_part");
  caps_train_config one = cfg;
  one.epochs = 1;
  REQUIRE(caps_train(part.p, tr_sub.p, ev_sub.p, &one, out_part.c_str(), nullptr, nullptr) ==
          CAPS_OK);
  REQUIRE(caps_train_resume(part.p, tr_sub.p, ev_sub.p, &cfg, out_part.c_str(), nullptr,
                            nullptr) == CAPS_OK);

  double ef = 0, ep = 0;
  REQUIRE(caps_evaluate(full.p, ev_sub.p, &ef) == CAPS_OK);
  REQUIRE(caps_evaluate(part.p, ev_sub.p, &ep) == CAPS_OK);
  CHECK(ef == ep);

  // wrong-variant model rejects the checkpoint; missing dir is a data error
  Mdl other;
  REQUIRE(caps_model_create("tiny-global", 28, 28, 1, 10, nullptr, 9, &other.p) == CAPS_OK);
  CHECK(caps_train_resume(other.p, tr_sub.p, ev_sub.p, &cfg, out_part.c_str(), nullptr,
                          nullptr) == CAPS_ERR_CONFIG);
  CHECK(caps_train_resume(part.p, tr_sub.p, ev_sub.p, &cfg, "/nonexistent", nullptr, nullptr) ==
        CAPS_ERR_DATA);
  CHECK(caps_train_resume(part.p, tr_sub.p, ev_sub.p, &cfg, nullptr, nullptr, nullptr) ==
        CAPS_ERR_INVALID);
}

TEST_CASE("capi constant-routing verification separates the two model families") {
  Ds test;
  load_mnist("test", test);
  caps_model_options constant{1, 0, 0};
  Mdl cm, dm;
  REQUIRE(caps_model_create("tiny", 28, 28, 1, 10, &constant, 5, &cm.p) == CAPS_OK);
  REQUIRE(caps_model_create("tiny", 28, 28, 1, 10, nullptr, 5, &dm.p) == CAPS_OK);
  double dev_c = -1, dev_d = -1;
  REQUIRE(caps_verify_constant_routing(cm.p, test.p, 0, &dev_c) == CAPS_OK);
  REQUIRE(caps_verify_constant_routing(dm.p, test.p, 0, &dev_d) == CAPS_OK);
  CHECK(dev_c == 0.0);  // constant mode emits exactly 1/G
  CHECK(dev_d > 1e-6);

  CHECK(caps_verify_constant_routing(cm.p, test.p, 1u << 30, &dev_c) == CAPS_ERR_CONFIG);
}

TEST_CASE("capi experiment entry points delegate with argument checking") {
  Ds test;
  load_mnist("test", test);
  Mdl global;
  REQUIRE(caps_model_create("tiny-global", 28, 28, 1, 10, nullptr, 6, &global.p) == CAPS_OK);

  std::string csv = testutil::temp_dir("capi_viz") + "/routing.csv";
  double within = -1, between = -1;
  REQUIRE(caps_run_routing_viz(global.p, test.p, 0, 0, 8, csv.c_str(), &within, &between) ==
          CAPS_OK);
  CHECK(within >= 0.0);
  CHECK(between >= 0.0);
  CHECK(read_text(csv).find("row_type") != std::string::npos);

  // wrong architecture for the experiment -> config error, not crash
  CHECK(caps_run_perturb(global.p, test.p, 1, testutil::temp_dir("capi_px").c_str()) ==
        CAPS_ERR_CONFIG);
  double mse[18];
  CHECK(caps_run_transform_recon(global.p, test.p, 1, testutil::temp_dir("capi_tx").c_str(), mse,
                                 18) == CAPS_ERR_CONFIG);
  CHECK(caps_run_routing_viz(global.p, test.p, 99, 0, 4, csv.c_str(), nullptr, nullptr) ==
        CAPS_ERR_CONFIG);
}
