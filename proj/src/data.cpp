#include "data.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "io_util.hpp"
#include "tensor.hpp"

namespace caps::data {
namespace {

uint32_t be32(const uint8_t* p) {
  return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) | uint32_t(p[3]);
}

uint32_t le32(const uint8_t* p) {
  return uint32_t(p[0]) | (uint32_t(p[1]) << 8) | (uint32_t(p[2]) << 16) | (uint32_t(p[3]) << 24);
}

[[noreturn]] void fail(const std::string& path, const std::string& what) {
  throw DataError(path + ": " + what);
}

void need(const std::vector<uint8_t>& buf, size_t at, size_t n, const std::string& path) {
  if (at + n > buf.size())
    fail(path, "truncated (need " + std::to_string(at + n) + " bytes, have " + std::to_string(buf.size()) + ")");
}

// Little-endian matrix container used by the stereo toy set: magic, ndim,
// then max(ndim, 3) dimension words, then the elements.
struct BinMatrix {
  std::vector<uint32_t> dims;  // exactly ndim entries
  const uint8_t* data = nullptr;
  size_t elem_count = 0;
  bool is_int = false;  // else byte
};

BinMatrix parse_bin_matrix(const std::vector<uint8_t>& buf, const std::string& path) {
  BinMatrix m;
  need(buf, 0, 8, path);
  uint32_t magic = le32(buf.data());
  if (magic == 0x1E3D4C55u)
    m.is_int = false;
  else if (magic == 0x1E3D4C54u)
    m.is_int = true;
  else
    fail(path, "bad matrix magic 0x" + std::to_string(magic));
  uint32_t ndim = le32(buf.data() + 4);
  if (ndim == 0 || ndim > 8) fail(path, "implausible dimension count " + std::to_string(ndim));
  uint32_t stored = std::max(ndim, 3u);
  need(buf, 8, size_t(stored) * 4, path);
  size_t count = 1;
  for (uint32_t i = 0; i < stored; ++i) {
    uint32_t d = le32(buf.data() + 8 + 4 * i);
    if (i < ndim) {
      m.dims.push_back(d);
      count *= d;
    } else if (d != 1) {
      fail(path, "padding dimension is not 1");
    }
  }
  size_t header = 8 + size_t(stored) * 4;
  size_t bytes = count * (m.is_int ? 4 : 1);
  need(buf, header, bytes, path);
  if (buf.size() != header + bytes) fail(path, "trailing bytes after matrix data");
  m.data = buf.data() + header;
  m.elem_count = count;
  return m;
}

int32_t bin_matrix_int(const BinMatrix& m, size_t idx) {
  return static_cast<int32_t>(le32(m.data + idx * 4));
}

std::string find_input(const std::string& data_dir, const std::string& id,
                       const std::vector<std::string>& names) {
  std::vector<std::string> tried;
  for (const std::string& base : {data_dir, io::join_path(data_dir, id)}) {
    for (const std::string& name : names) {
      for (const std::string& suffix : {std::string(), std::string(".gz")}) {
        std::string path = io::join_path(base, name + suffix);
        if (io::file_exists(path)) return path;
        tried.push_back(path);
      }
    }
  }
  std::string msg = "no input file found; tried:";
  for (const auto& t : tried) msg += "\n  " + t;
  throw DataError(msg);
}

}  // namespace

double LabeledImage::mean() const {
  if (pixels.empty()) return 0.0;
  double s = std::accumulate(pixels.begin(), pixels.end(), 0.0);
  return s / double(pixels.size());
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 const std::string& id, int num_classes) {
  auto ibuf = io::read_file(images_path);
  auto lbuf = io::read_file(labels_path);

  need(ibuf, 0, 16, images_path);
  if (be32(ibuf.data()) != 0x00000803u) fail(images_path, "bad image magic (want 0x00000803)");
  uint32_t count = be32(ibuf.data() + 4);
  uint32_t rows = be32(ibuf.data() + 8);
  uint32_t cols = be32(ibuf.data() + 12);
  if (rows == 0 || cols == 0 || rows > 4096 || cols > 4096) fail(images_path, "implausible image size");
  size_t want = 16 + size_t(count) * rows * cols;
  if (ibuf.size() != want)
    fail(images_path, "size mismatch (header implies " + std::to_string(want) + " bytes, have " +
                          std::to_string(ibuf.size()) + ")");

  need(lbuf, 0, 8, labels_path);
  if (be32(lbuf.data()) != 0x00000801u) fail(labels_path, "bad label magic (want 0x00000801)");
  uint32_t lcount = be32(lbuf.data() + 4);
  if (lbuf.size() != 8 + size_t(lcount)) fail(labels_path, "size mismatch");
  if (lcount != count)
    fail(labels_path, "label count " + std::to_string(lcount) + " does not match image count " +
                          std::to_string(count));

  Dataset ds;
  ds.id = id;
  ds.num_classes = num_classes;
  ds.items.resize(count);
  for (uint32_t i = 0; i < count; ++i) {
    LabeledImage& img = ds.items[i];
    int label = lbuf[8 + i];
    if (label < 0 || label >= num_classes)
      fail(labels_path, "label " + std::to_string(label) + " out of range at index " + std::to_string(i));
    img.label = label;
    img.channels = 1;
    img.height = int(rows);
    img.width = int(cols);
    img.pixels.resize(size_t(rows) * cols);
    const uint8_t* src = ibuf.data() + 16 + size_t(i) * rows * cols;
    for (size_t p = 0; p < img.pixels.size(); ++p) img.pixels[p] = float(src[p]) / 255.0f;
  }
  return ds;
}

Dataset load_smallnorb(const std::string& dat_path, const std::string& cat_path,
                       const std::string& info_path) {
  auto dbuf = io::read_file(dat_path);
  auto cbuf = io::read_file(cat_path);
  auto nbuf = io::read_file(info_path);
  BinMatrix dat = parse_bin_matrix(dbuf, dat_path);
  BinMatrix cat = parse_bin_matrix(cbuf, cat_path);
  BinMatrix info = parse_bin_matrix(nbuf, info_path);

  if (dat.is_int) fail(dat_path, "expected a byte matrix");
  if (dat.dims.size() != 4 || dat.dims[1] != 2 || dat.dims[2] != 96 || dat.dims[3] != 96)
    fail(dat_path, "expected dimensions [N, 2, 96, 96]");
  size_t n = dat.dims[0];
  if (!cat.is_int || cat.dims.size() != 1 || cat.dims[0] != n)
    fail(cat_path, "expected an int matrix of [N] labels matching the image file");
  if (!info.is_int || info.dims.size() != 2 || info.dims[0] != n || info.dims[1] != 4)
    fail(info_path, "expected an int matrix of [N, 4] viewpoint rows");

  constexpr int kIn = 96, kOut = 48;
  Dataset ds;
  ds.id = "smallnorb";
  ds.num_classes = 5;
  ds.items.resize(n);
  for (size_t i = 0; i < n; ++i) {
    LabeledImage& img = ds.items[i];
    int label = bin_matrix_int(cat, i);
    if (label < 0 || label >= 5) fail(cat_path, "label " + std::to_string(label) + " out of range");
    img.label = label;
    img.channels = 2;
    img.height = kOut;
    img.width = kOut;
    img.pixels.resize(2 * kOut * kOut);
    // 2x2 box average halves each stereo view from 96 to 48.
    for (int c = 0; c < 2; ++c) {
      const uint8_t* src = dat.data + (i * 2 + c) * size_t(kIn) * kIn;
      for (int y = 0; y < kOut; ++y)
        for (int x = 0; x < kOut; ++x) {
          int s = int(src[(2 * y) * kIn + 2 * x]) + int(src[(2 * y) * kIn + 2 * x + 1]) +
                  int(src[(2 * y + 1) * kIn + 2 * x]) + int(src[(2 * y + 1) * kIn + 2 * x + 1]);
          img.px(c, y, x) = float(s) / (4.0f * 255.0f);
        }
    }
    // Standardize the stereo pair to zero mean and unit variance.
    double mu = img.mean();
    double var = 0.0;
    for (float v : img.pixels) var += (v - mu) * (v - mu);
    var /= double(img.pixels.size());
    double sd = std::sqrt(var);
    if (sd < 1e-8) sd = 1.0;
    for (float& v : img.pixels) v = float((v - mu) / sd);

    int instance = bin_matrix_int(info, i * 4 + 0);
    int elevation = bin_matrix_int(info, i * 4 + 1);
    int azimuth_raw = bin_matrix_int(info, i * 4 + 2);
    int lighting = bin_matrix_int(info, i * 4 + 3);
    if (elevation < 0 || elevation > 8)
      fail(info_path, "elevation index " + std::to_string(elevation) + " out of range");
    if (azimuth_raw < 0 || azimuth_raw > 34 || azimuth_raw % 2 != 0)
      fail(info_path, "azimuth code " + std::to_string(azimuth_raw) + " is not an even value in [0, 34]");
    if (lighting < 0) fail(info_path, "negative lighting index");
    img.meta.valid = true;
    img.meta.instance = instance;
    img.meta.elevation = elevation;
    img.meta.azimuth = azimuth_raw * 10;  // even codes 0..34 encode degrees 0..340 in steps of 20
    img.meta.lighting = lighting;
  }
  return ds;
}

Dataset load_cifar10(const std::vector<std::string>& batch_paths) {
  constexpr size_t kRecord = 3073;  // label byte + 3*32*32 pixels
  Dataset ds;
  ds.id = "cifar10";
  ds.num_classes = 10;
  for (const std::string& path : batch_paths) {
    auto buf = io::read_file(path);
    if (buf.empty() || buf.size() % kRecord != 0)
      fail(path, "size " + std::to_string(buf.size()) + " is not a multiple of " + std::to_string(kRecord));
    size_t n = buf.size() / kRecord;
    for (size_t i = 0; i < n; ++i) {
      const uint8_t* rec = buf.data() + i * kRecord;
      LabeledImage img;
      int label = rec[0];
      if (label < 0 || label > 9) fail(path, "label " + std::to_string(label) + " out of range");
      img.label = label;
      img.channels = 3;
      img.height = 32;
      img.width = 32;
      img.pixels.resize(3 * 32 * 32);
      for (size_t p = 0; p < img.pixels.size(); ++p) img.pixels[p] = float(rec[1 + p]) / 255.0f;
      ds.items.push_back(std::move(img));
    }
  }
  if (ds.items.empty()) throw DataError("no input batches given");
  return ds;
}

Dataset load_dataset(const std::string& id, const std::string& data_dir, const std::string& split) {
  bool train = (split == "train");
  if (!train && split != "test") throw ConfigError("unknown split '" + split + "' (want train or test)");
  if (id == "mnist" || id == "fashion-mnist") {
    std::string prefix = train ? "train" : "t10k";
    std::string images = find_input(data_dir, id, {prefix + "-images-idx3-ubyte"});
    std::string labels = find_input(data_dir, id, {prefix + "-labels-idx1-ubyte"});
    return load_idx(images, labels, id, 10);
  }
  if (id == "smallnorb") {
    std::string canon = train ? "smallnorb-5x46789x9x18x6x2x96x96-training" : "smallnorb-5x01235x9x18x6x2x96x96-testing";
    std::string alias = train ? "train" : "test";
    std::string dat = find_input(data_dir, id, {canon + "-dat.mat", alias + "-dat.mat"});
    std::string cat = find_input(data_dir, id, {canon + "-cat.mat", alias + "-cat.mat"});
    std::string info = find_input(data_dir, id, {canon + "-info.mat", alias + "-info.mat"});
    return load_smallnorb(dat, cat, info);
  }
  if (id == "cifar10") {
    std::vector<std::string> paths;
    if (train) {
      for (int b = 1; b <= 5; ++b)
        paths.push_back(find_input(data_dir, id, {"data_batch_" + std::to_string(b) + ".bin",
                                                  "cifar-10-batches-bin/data_batch_" + std::to_string(b) + ".bin"}));
    } else {
      paths.push_back(find_input(data_dir, id, {"test_batch.bin", "cifar-10-batches-bin/test_batch.bin"}));
    }
    return load_cifar10(paths);
  }
  throw ConfigError("unknown dataset '" + id + "'");
}

Recipe recipe_for(const std::string& dataset_id) {
  Recipe r;
  if (dataset_id == "mnist") {
    r.height = r.width = 28;
    r.channels = 1;
    // Digits train fine without augmentation at this scale.
    return r;
  }
  if (dataset_id == "fashion-mnist") {
    r.height = r.width = 32;
    r.channels = 1;
    r.train = {0.2, 36, 32, 0.5, true};
    r.eval = {32, 0};
    return r;
  }
  if (dataset_id == "smallnorb") {
    r.height = r.width = 32;
    r.channels = 2;
    // Inputs are standardized, so jitter output is left unclamped.
    r.train = {0.2, 56, 32, 0.0, false};
    r.eval = {0, 32};
    return r;
  }
  if (dataset_id == "cifar10") {
    r.height = r.width = 32;
    r.channels = 3;
    r.train = {0.2, 40, 32, 0.5, true};
    r.eval = {0, 0};
    return r;
  }
  throw ConfigError("unknown dataset '" + dataset_id + "'");
}

LabeledImage jitter_image(const LabeledImage& img, double factor, Rng& rng, bool clamp01) {
  if (factor < 0) throw ConfigError("jitter factor must be non-negative");
  LabeledImage out = img;
  if (factor == 0) return out;
  double alpha = rng.uniform(1.0 - factor, 1.0 + factor);
  double mu = img.mean();
  double beta = rng.uniform(-factor * mu, factor * mu);
  for (float& v : out.pixels) {
    double g = alpha * double(v) + beta;
    if (clamp01) g = std::min(1.0, std::max(0.0, g));
    v = float(g);
  }
  return out;
}

LabeledImage pad_centered(const LabeledImage& img, int side) {
  if (side < img.height || side < img.width)
    throw ConfigError("pad target " + std::to_string(side) + " smaller than image");
  LabeledImage out;
  out.label = img.label;
  out.meta = img.meta;
  out.channels = img.channels;
  out.height = out.width = side;
  out.pixels.assign(size_t(img.channels) * side * side, 0.0f);
  int oy = (side - img.height) / 2;
  int ox = (side - img.width) / 2;
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) out.px(c, y + oy, x + ox) = img.px(c, y, x);
  return out;
}

LabeledImage crop_image(const LabeledImage& img, int oy, int ox, int side) {
  if (side <= 0 || oy < 0 || ox < 0 || oy + side > img.height || ox + side > img.width)
    throw ConfigError("crop window out of bounds");
  LabeledImage out;
  out.label = img.label;
  out.meta = img.meta;
  out.channels = img.channels;
  out.height = out.width = side;
  out.pixels.resize(size_t(img.channels) * side * side);
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x) out.px(c, y, x) = img.px(c, y + oy, x + ox);
  return out;
}

LabeledImage hflip_image(const LabeledImage& img) {
  LabeledImage out = img;
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) out.px(c, y, x) = img.px(c, y, img.width - 1 - x);
  return out;
}

LabeledImage augment_train(const LabeledImage& img, const AugmentSpec& spec, Rng& rng) {
  LabeledImage cur = (spec.jitter > 0) ? jitter_image(img, spec.jitter, rng, spec.clamp01) : img;
  if (spec.pad_to > 0) cur = pad_centered(cur, spec.pad_to);
  if (spec.crop > 0) {
    if (cur.height < spec.crop || cur.width < spec.crop)
      throw ConfigError("crop larger than padded image");
    int oy = int(rng.uniform_int(0, cur.height - spec.crop));
    int ox = int(rng.uniform_int(0, cur.width - spec.crop));
    cur = crop_image(cur, oy, ox, spec.crop);
  }
  if (spec.hflip_p > 0 && rng.bernoulli(spec.hflip_p)) cur = hflip_image(cur);
  return cur;
}

LabeledImage transform_eval(const LabeledImage& img, const EvalSpec& spec) {
  LabeledImage cur = img;
  if (spec.pad_to > 0) cur = pad_centered(cur, spec.pad_to);
  if (spec.crop > 0) {
    int oy = (cur.height - spec.crop) / 2;
    int ox = (cur.width - spec.crop) / 2;
    cur = crop_image(cur, oy, ox, spec.crop);
  }
  return cur;
}

bool viewpoint_is_familiar(const ViewMeta& meta, ViewMode mode) {
  if (!meta.valid) throw DataError("image has no viewpoint annotations");
  if (mode == ViewMode::azimuth) {
    int a = meta.azimuth;
    return a == 300 || a == 320 || a == 340 || a == 0 || a == 20 || a == 40;
  }
  return meta.elevation >= 0 && meta.elevation <= 2;
}

ViewpointSplit viewpoint_split(const Dataset& train_src, const Dataset& test_src, ViewMode mode) {
  ViewpointSplit out;
  out.train.id = train_src.id;
  out.train.num_classes = train_src.num_classes;
  out.familiar.id = out.novel.id = test_src.id;
  out.familiar.num_classes = out.novel.num_classes = test_src.num_classes;
  for (const auto& img : train_src.items)
    if (viewpoint_is_familiar(img.meta, mode)) out.train.items.push_back(img);
  for (const auto& img : test_src.items)
    (viewpoint_is_familiar(img.meta, mode) ? out.familiar : out.novel).items.push_back(img);
  if (out.train.items.empty()) throw DataError("viewpoint split produced an empty training set");
  return out;
}

Dataset subset(const Dataset& ds, size_t count, uint64_t seed) {
  if (count > ds.items.size())
    throw ConfigError("subset of " + std::to_string(count) + " from " + std::to_string(ds.items.size()) +
                      " items");
  std::vector<size_t> idx(ds.items.size());
  std::iota(idx.begin(), idx.end(), size_t(0));
  Rng rng(mix_seed(seed, 0x5b5e7u));
  for (size_t i = idx.size(); i > 1; --i) {
    size_t j = size_t(rng.uniform_int(0, int(i) - 1));
    std::swap(idx[i - 1], idx[j]);
  }
  Dataset out;
  out.id = ds.id;
  out.num_classes = ds.num_classes;
  out.items.reserve(count);
  for (size_t i = 0; i < count; ++i) out.items.push_back(ds.items[idx[i]]);
  return out;
}

}  // namespace caps::data
