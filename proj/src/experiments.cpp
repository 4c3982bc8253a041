#include "experiments.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include "io_util.hpp"

namespace caps::experiments {

namespace {

std::string fmt_g17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt_g(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

// eval-transformed tensor [C, H, W] for item i
Tensor eval_tensor(const data::Dataset& ds, size_t i, const data::Recipe& recipe) {
  return training::image_tensor(data::transform_eval(ds.items[i], recipe.eval));
}

void check_sample_count(const data::Dataset& ds, int num_images) {
  if (num_images <= 0) throw ConfigError("need a positive number of sample images");
  if (size_t(num_images) > ds.size())
    throw ConfigError("asked for " + std::to_string(num_images) + " sample images, dataset has " +
                      std::to_string(ds.size()));
}

// copies src [h, w] into dst laid out [rows*h, cols*w] at cell (row, col)
void blit(std::vector<double>& dst, int cols, int h, int w, int row, int col,
          const std::vector<double>& src) {
  size_t stride = size_t(cols) * w;
  for (int y = 0; y < h; ++y)
    std::copy(src.begin() + size_t(y) * w, src.begin() + size_t(y + 1) * w,
              dst.begin() + size_t(row) * h * stride + size_t(y) * stride + size_t(col) * w);
}

// caps [N, D] with caps[row][dim] += delta
Tensor perturb_at(const Tensor& caps, int row, int dim, double delta) {
  int n = caps.shape()[0], d = caps.shape()[1];
  std::vector<double> v(size_t(n) * d, 0.0);
  v[size_t(row) * d + dim] = delta;
  return add(caps, Tensor::from({n, d}, std::move(v)));
}

}  // namespace

std::vector<double> perturb_deltas() {
  std::vector<double> out;
  for (int i = -5; i <= 5; ++i) out.push_back(i * 0.05);
  return out;
}

std::vector<double> perturb_strip(const models::Model& m, const Tensor& caps, int label, int dim,
                                  int* out_h, int* out_w) {
  if (caps.rank() != 2) throw ConfigError("perturb_strip wants capsules [N, D]");
  int d = caps.shape()[1];
  if (dim < 0 || dim >= d)
    throw ConfigError("perturbed dimension " + std::to_string(dim) + " out of range for D=" +
                      std::to_string(d));
  Tensor masked = models::mask_capsules(caps, label);

  std::vector<double> deltas = perturb_deltas();
  int cols = int(deltas.size());
  std::vector<double> strip;
  int h = 0, w = 0;
  for (int k = 0; k < cols; ++k) {
    Tensor rec = models::decode_fc(m, perturb_at(masked, label, dim, deltas[k]));
    h = rec.shape()[0];
    w = rec.shape()[1];
    if (strip.empty()) strip.assign(size_t(h) * cols * w, 0.0);
    blit(strip, cols, h, w, 0, k, rec.values());
  }
  *out_h = h;
  *out_w = cols * w;
  return strip;
}

PerturbResult run_perturb(const models::Model& m, const data::Dataset& test_set,
                          const data::Recipe& recipe, int num_images, const std::string& out_dir) {
  if (m.spec.decoder != models::DecoderKind::fc)
    throw ConfigError("perturbation sweeps need a checkpoint with the FC decoder");
  check_sample_count(test_set, num_images);
  io::ensure_dir(out_dir);

  const auto& lc = m.spec.layers.back();
  std::vector<double> deltas = perturb_deltas();
  PerturbResult result;
  std::ostringstream csv;
  csv << "image,label,dim,path,delta_min,delta_step,delta_max\n";

  for (int i = 0; i < num_images; ++i) {
    Tensor img = eval_tensor(test_set, size_t(i), recipe);
    Tensor last_grid;
    models::forward_features(m, models::image_to_grid(img), &last_grid);
    Tensor caps = reshape(last_grid, {lc.channels_out, lc.dims_out});
    int label = test_set.items[i].label;

    for (int dim = 0; dim < lc.dims_out; ++dim) {
      int h = 0, w = 0;
      std::vector<double> strip = perturb_strip(m, caps, label, dim, &h, &w);
      std::string name = "perturb_img" + std::to_string(i) + "_dim" + std::to_string(dim) + ".pgm";
      std::string path = io::join_path(out_dir, name);
      io::write_pgm(path, h, w, strip);
      result.pgm_paths.push_back(path);
      csv << i << ',' << label << ',' << dim << ',' << name << ',' << fmt_g(deltas.front()) << ','
          << "0.05," << fmt_g(deltas.back()) << '\n';
    }
  }

  result.index_csv = io::join_path(out_dir, "index.csv");
  io::write_file_atomic(result.index_csv, csv.str());
  return result;
}

std::vector<TransformCase> transform_suite() {
  std::vector<TransformCase> out;
  for (int a = 0; a < 360; a += 45)
    out.push_back({"rot" + std::to_string(a), models::make_rotation(a), models::make_rotation(a)});
  out.push_back({"hflip", models::make_hflip(), models::make_hflip()});
  out.push_back({"vflip", models::make_vflip(), models::make_vflip()});
  // grid shifts; the decoder doubles resolution, so the image-space shift is 2x
  for (int s : {1, 2, 4})
    out.push_back({"shift" + std::to_string(s), models::make_translation(s, 0),
                   models::make_translation(2 * s, 0)});
  for (double f : {0.5, 0.75, 1.2, 1.5, 2.0})
    out.push_back({"scale" + fmt_g(f), models::make_scale(f), models::make_scale(f)});
  return out;
}

TransformReconResult run_transform_recon(const models::Model& m, const data::Dataset& test_set,
                                         const data::Recipe& recipe, int num_images,
                                         const std::string& out_dir) {
  if (m.spec.decoder != models::DecoderKind::conv)
    throw ConfigError("transform reconstruction needs a checkpoint with the conv decoder");
  if (m.spec.in_ch != 1) throw ConfigError("transform reconstruction expects single-channel input");
  check_sample_count(test_set, num_images);
  io::ensure_dir(out_dir);

  std::vector<TransformCase> suite = transform_suite();
  int cols = 1 + int(suite.size());  // ground truth first
  int h = m.spec.in_h, w = m.spec.in_w;
  std::vector<double> sheet(size_t(num_images) * h * cols * w, 0.0);
  std::vector<double> mse_sum(suite.size(), 0.0);

  for (int i = 0; i < num_images; ++i) {
    Tensor img = eval_tensor(test_set, size_t(i), recipe);
    Tensor gt = reshape(img, {h, w});
    Tensor last_grid;
    models::forward_features(m, models::image_to_grid(img), &last_grid);
    blit(sheet, cols, h, w, i, 0, gt.values());

    for (size_t t = 0; t < suite.size(); ++t) {
      Tensor rec = models::decode_conv(m, models::transform_channels(last_grid, suite[t].grid_T));
      Tensor target = reshape(
          models::transform_channels(reshape(gt, {h, w, 1, 1}), suite[t].image_T), {h, w});
      mse_sum[t] += training::mse(rec, target).values()[0];
      blit(sheet, cols, h, w, i, 1 + int(t), rec.values());
    }
  }

  TransformReconResult result;
  for (size_t t = 0; t < suite.size(); ++t) result.mean_mse.push_back(mse_sum[t] / num_images);

  result.pgm_path = io::join_path(out_dir, "transform_recon.pgm");
  io::write_pgm(result.pgm_path, num_images * h, cols * w, sheet);

  std::ostringstream csv;
  csv << "transform,mean_mse\n";
  for (size_t t = 0; t < suite.size(); ++t)
    csv << suite[t].name << ',' << fmt_g17(result.mean_mse[t]) << '\n';
  result.csv_path = io::join_path(out_dir, "transform_mse.csv");
  io::write_file_atomic(result.csv_path, csv.str());
  return result;
}

RoutingVizResult run_routing_viz(const models::Model& m, const data::Dataset& test_set,
                                 const data::Recipe& recipe, int channel, int dim, int num_images,
                                 const std::string& out_csv) {
  auto grids = m.spec.grid_sizes();
  if (grids.back().first != 1 || grids.back().second != 1)
    throw ConfigError("routing dump needs a global last layer (1x1 grid), got " +
                      std::to_string(grids.back().first) + "x" + std::to_string(grids.back().second));
  const auto& lc = m.spec.layers.back();
  if (channel < 0 || channel >= lc.channels_out)
    throw ConfigError("channel " + std::to_string(channel) + " out of range");
  if (dim < 0 || dim >= lc.dims_out) throw ConfigError("dim " + std::to_string(dim) + " out of range");
  check_sample_count(test_set, num_images);

  int g = lc.groups_in;
  std::vector<std::vector<double>> rows;   // per image: c[g] at (channel, dim)
  std::vector<int> labels;
  for (int i = 0; i < num_images; ++i) {
    Tensor img = eval_tensor(test_set, size_t(i), recipe);
    Tensor last_grid, last_routing;
    models::forward_features(m, models::image_to_grid(img), &last_grid, &last_routing);
    const std::vector<double>& c = last_routing.values();  // [1, 1, C, G, D]
    std::vector<double> row(g);
    for (int k = 0; k < g; ++k) row[k] = c[(size_t(channel) * g + k) * lc.dims_out + dim];
    rows.push_back(std::move(row));
    labels.push_back(test_set.items[i].label);
  }

  RoutingVizResult result;
  result.rows = num_images;
  double within = 0, between = 0;
  int64_t n_within = 0, n_between = 0;
  for (size_t i = 0; i < rows.size(); ++i)
    for (size_t j = i + 1; j < rows.size(); ++j) {
      double l1 = 0;
      for (int k = 0; k < g; ++k) l1 += std::abs(rows[i][k] - rows[j][k]);
      if (labels[i] == labels[j]) {
        within += l1;
        ++n_within;
      } else {
        between += l1;
        ++n_between;
      }
    }
  result.within_l1 = n_within ? within / n_within : 0.0;
  result.between_l1 = n_between ? between / n_between : 0.0;

  std::ostringstream csv;
  csv << "row_type,label";
  for (int k = 0; k < g; ++k) csv << ",c" << k;
  csv << '\n';
  for (size_t i = 0; i < rows.size(); ++i) {
    csv << "sample," << labels[i];
    for (int k = 0; k < g; ++k) csv << ',' << fmt_g17(rows[i][k]);
    csv << '\n';
  }
  for (int cls = 0; cls < m.spec.num_classes; ++cls) {
    std::vector<double> mean(g, 0.0), var(g, 0.0);
    int n = 0;
    for (size_t i = 0; i < rows.size(); ++i)
      if (labels[i] == cls) {
        ++n;
        for (int k = 0; k < g; ++k) mean[k] += rows[i][k];
      }
    if (n) {
      for (int k = 0; k < g; ++k) mean[k] /= n;
      for (size_t i = 0; i < rows.size(); ++i)
        if (labels[i] == cls)
          for (int k = 0; k < g; ++k) var[k] += (rows[i][k] - mean[k]) * (rows[i][k] - mean[k]);
      for (int k = 0; k < g; ++k) var[k] /= n;
    }
    csv << "mean," << cls;
    for (int k = 0; k < g; ++k) csv << ',' << fmt_g17(mean[k]);
    csv << '\n';
    csv << "std," << cls;
    for (int k = 0; k < g; ++k) csv << ',' << fmt_g17(std::sqrt(var[k]));
    csv << '\n';
  }
  result.csv_path = out_csv;
  if (!out_csv.empty()) io::write_file_atomic(out_csv, csv.str());
  return result;
}

ViewpointReport run_viewpoints(models::Model& model, const data::Dataset& train_src,
                               const data::Dataset& test_src, data::ViewMode mode,
                               const training::TrainConfig& cfg, const data::Recipe& recipe,
                               double target_familiar, const std::string& out_dir) {
  data::ViewpointSplit split = data::viewpoint_split(train_src, test_src, mode);

  ViewpointReport report;
  auto collect = [&](const data::Dataset& ds, std::vector<int>& out) {
    for (const auto& it : ds.items) {
      int v = mode == data::ViewMode::azimuth ? it.meta.azimuth : it.meta.elevation;
      if (std::find(out.begin(), out.end(), v) == out.end()) out.push_back(v);
    }
    std::sort(out.begin(), out.end());
  };
  collect(split.familiar, report.familiar_values);
  collect(split.novel, report.novel_values);

  training::TrainHooks hooks;
  hooks.on_epoch = [&](const training::EpochMetrics& e) {
    double novel_acc = 1.0 - training::evaluate(model, split.novel, recipe.eval);
    report.rows.push_back({e.epoch, 1.0 - e.eval_err, novel_acc});
  };
  training::train(model, split.train, split.familiar, recipe, cfg, out_dir, hooks);
  if (report.rows.empty()) throw ConfigError("viewpoint run needs at least one epoch");

  // pick the epoch with familiar accuracy closest below the target; without a
  // target (or when nothing qualifies) fall back to the best familiar epoch
  int chosen = -1;
  if (std::isfinite(target_familiar)) {
    for (size_t i = 0; i < report.rows.size(); ++i) {
      if (report.rows[i].familiar_acc > target_familiar) continue;
      if (chosen < 0 || report.rows[i].familiar_acc > report.rows[chosen].familiar_acc)
        chosen = int(i);
    }
  }
  if (chosen < 0)
    for (size_t i = 0; i < report.rows.size(); ++i)
      if (chosen < 0 || report.rows[i].familiar_acc > report.rows[chosen].familiar_acc)
        chosen = int(i);
  report.selected_epoch = report.rows[chosen].epoch;
  report.familiar_acc = report.rows[chosen].familiar_acc;
  report.novel_acc = report.rows[chosen].novel_acc;

  if (!out_dir.empty()) {
    std::ostringstream csv;
    csv << "epoch,familiar_acc,novel_acc,selected\n";
    for (const auto& r : report.rows)
      csv << r.epoch << ',' << fmt_g17(r.familiar_acc) << ',' << fmt_g17(r.novel_acc) << ','
          << (r.epoch == report.selected_epoch ? 1 : 0) << '\n';
    report.csv_path = io::join_path(out_dir, "viewpoints.csv");
    io::write_file_atomic(report.csv_path, csv.str());

    auto join_ints = [](const std::vector<int>& v) {
      std::string s;
      for (size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + std::to_string(v[i]);
      return s;
    };
    bool disjoint = true;
    for (int v : report.familiar_values)
      if (std::find(report.novel_values.begin(), report.novel_values.end(), v) !=
          report.novel_values.end())
        disjoint = false;
    std::ostringstream txt;
    txt << "mode: " << (mode == data::ViewMode::azimuth ? "azimuth" : "elevation") << '\n'
        << "familiar viewpoints: " << join_ints(report.familiar_values) << '\n'
        << "novel viewpoints: " << join_ints(report.novel_values) << '\n'
        << "disjoint: " << (disjoint ? "yes" : "NO") << '\n'
        << "selection: "
        << (std::isfinite(target_familiar)
                ? "familiar accuracy closest below " + fmt_g(target_familiar)
                : std::string("best familiar accuracy"))
        << '\n'
        << "selected epoch: " << report.selected_epoch << '\n'
        << "familiar accuracy: " << fmt_g17(report.familiar_acc) << '\n'
        << "novel accuracy: " << fmt_g17(report.novel_acc) << '\n'
        << "train/familiar/novel sizes: " << split.train.size() << '/' << split.familiar.size()
        << '/' << split.novel.size() << '\n';
    report.summary_path = io::join_path(out_dir, "viewpoints_report.txt");
    io::write_file_atomic(report.summary_path, txt.str());
  }
  return report;
}

}  // namespace caps::experiments
