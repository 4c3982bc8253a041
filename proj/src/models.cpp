#include "models.hpp"

#include <cmath>
#include <cstring>
#include <regex>
#include <sstream>

#include "io_util.hpp"

namespace caps::models {
namespace {

void req(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

routing::LayerConfig layer(int g, int c, int k, int din, int dout, int stride, int pad,
                           bool ln = true) {
  routing::LayerConfig cfg;
  cfg.groups_in = g;
  cfg.channels_out = c;
  cfg.votes = k;
  cfg.dims_in = din;
  cfg.dims_out = dout;
  cfg.stride = stride;
  cfg.pad = pad;
  cfg.layer_norm = ln;
  return cfg;
}

Tensor init_affine_w(int rows, int cols, Rng& rng, double bound = 0.0) {
  if (bound <= 0.0) bound = 1.0 / std::sqrt(double(cols));
  std::vector<double> v(size_t(rows) * cols);
  for (double& x : v) x = rng.uniform(-bound, bound);
  return Tensor::param({rows, cols}, std::move(v));
}

Tensor zero_param(Shape shape) {
  size_t n = size_t(shape_numel(shape));
  return Tensor::param(std::move(shape), std::vector<double>(n, 0.0));
}

int64_t affine_count(int rows, int cols) { return int64_t(rows) * (cols + 1); }

void append_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char(uint8_t(v >> (8 * i))));
}
void append_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(char(uint8_t(v >> (8 * i))));
}
void append_f64(std::string& out, double d) {
  uint64_t bits;
  std::memcpy(&bits, &d, 8);
  append_u64(out, bits);
}

struct Reader {
  const uint8_t* p;
  size_t n, at = 0;
  std::string path;
  void need(size_t k) const {
    if (at + k > n) throw DataError(path + ": truncated checkpoint");
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= uint32_t(p[at + i]) << (8 * i);
    at += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= uint64_t(p[at + i]) << (8 * i);
    at += 8;
    return v;
  }
  std::string str(size_t k) {
    need(k);
    std::string s(reinterpret_cast<const char*>(p + at), k);
    at += k;
    return s;
  }
  double f64() {
    uint64_t bits = u64();
    double d;
    std::memcpy(&d, &bits, 8);
    return d;
  }
};

}  // namespace

void VariantSpec::validate() const {
  req(!name.empty(), "variant has no name");
  req(in_h > 0 && in_w > 0 && in_ch > 0, "bad input geometry");
  req(num_classes > 1, "need at least two classes");
  req(!layers.empty(), "variant has no layers");
  for (const auto& cfg : layers) cfg.validate();
  req(layers.front().dims_in == in_ch,
      "first layer capsule dimension must equal the image channel count");
  for (size_t i = 1; i < layers.size(); ++i) {
    int cin = layers[i - 1].channels_out;
    req(layers[i].groups_in == cin || cin == 1,
        "layer " + std::to_string(i) + " reads " + std::to_string(layers[i].groups_in) +
            " groups but gets " + std::to_string(cin) + " channels");
    req(layers[i].dims_in == layers[i - 1].dims_out,
        "layer " + std::to_string(i) + " capsule dimension mismatch");
  }
  auto sizes = grid_sizes();  // throws if a layer shrinks below 1x1
  auto [fh, fw] = sizes.back();
  const auto& last = layers.back();
  if (decoder == DecoderKind::fc) {
    req(last.channels_out == num_classes,
        "FC decoder needs one last-layer capsule channel per class");
    req(in_h * in_w == 784, "FC decoder reconstructs 28x28 images");
    req(fh == 1 && fw == 1, "FC decoder needs a 1x1 final grid");
  }
  if (decoder == DecoderKind::conv)
    req(2 * fh == in_h && 2 * fw == in_w,
        "conv decoder upsamples the final grid once, so it must be half the input size");
}

std::vector<std::pair<int, int>> VariantSpec::grid_sizes() const {
  std::vector<std::pair<int, int>> out;
  int h = in_h, w = in_w;
  for (size_t i = 0; i < layers.size(); ++i) {
    const auto& cfg = layers[i];
    req(h + 2 * cfg.pad >= 3 && w + 2 * cfg.pad >= 3,
        "grid vanished before layer " + std::to_string(i));
    h = (h + 2 * cfg.pad - 3) / cfg.stride + 1;
    w = (w + 2 * cfg.pad - 3) / cfg.stride + 1;
    out.emplace_back(h, w);
  }
  return out;
}

int VariantSpec::head_features() const {
  auto [h, w] = grid_sizes().back();
  return h * w * layers.back().channels_out * layers.back().dims_out;
}

VariantSpec resolve_variant(const std::string& name, int in_h, int in_w, int in_ch,
                            int num_classes) {
  VariantSpec spec;
  spec.name = name;
  spec.in_h = in_h;
  spec.in_w = in_w;
  spec.in_ch = in_ch;
  spec.num_classes = num_classes;

  std::string code = name;
  if (name == "M-variant1") code = "C4K5D6";
  else if (name == "M-variant2") code = "C4K5D8";
  else if (name == "M-variant3") code = "C4K8D16";
  else if (name == "M-variant4") code = "C4K8D24";
  else if (name == "S-variant1") code = "N4K4D13";
  else if (name == "S-variant2") code = "N4K4D16";
  else if (name == "S-variant3") code = "N8K8D16";
  else if (name == "S-variant4") code = "N8K8D32";

  static const std::regex kCode(R"(^([CN])(\d+)K(\d+)D(\d+)$)");
  std::smatch m;
  if (std::regex_match(code, m, kCode)) {
    int x = std::stoi(m[2]), k = std::stoi(m[3]), d = std::stoi(m[4]);
    req(x >= 1 && k >= 1 && d >= 1, "bad variant code " + code);
    const int strides[5] = {1, 2, 1, 2, 1};
    if (m[1] == "C") {
      for (int i = 0; i < 5; ++i)
        spec.layers.push_back(layer(i == 0 ? 1 : x, x, k, i == 0 ? in_ch : d, d, strides[i], 1));
    } else {
      // Single-channel family: every layer keeps one capsule channel and
      // routes over N clusters that all read it.
      for (int i = 0; i < 5; ++i)
        spec.layers.push_back(layer(x, 1, k, i == 0 ? in_ch : d, d, strides[i], 1));
    }
  } else if (name == "tiny") {
    spec.layers = {layer(1, 2, 2, in_ch, 8, 1, 1), layer(2, 2, 2, 8, 8, 2, 1),
                   layer(2, 2, 2, 8, 8, 1, 1)};
  } else if (name == "tiny-global") {
    spec.layers = {layer(1, 2, 2, in_ch, 8, 2, 1), layer(2, 2, 2, 8, 8, 2, 1),
                   layer(2, 2, 2, 8, 8, 2, 0), layer(2, 2, 2, 8, 8, 1, 0)};
  } else if (name == "recon") {
    spec.layers = {layer(1, 4, 4, in_ch, 32, 1, 1, false), layer(4, 4, 4, 32, 8, 2, 1, false),
                   layer(4, 4, 4, 8, 4, 1, 1, false)};
    spec.decoder = DecoderKind::conv;
  } else if (name == "disentangle") {
    spec.layers = {layer(1, 4, 5, in_ch, 8, 1, 1), layer(4, 4, 5, 8, 8, 2, 1),
                   layer(4, 4, 5, 8, 8, 2, 1), layer(4, 4, 5, 8, 8, 2, 0),
                   layer(4, 10, 5, 8, 8, 1, 0)};
    spec.decoder = DecoderKind::fc;
  } else {
    throw ConfigError("unknown variant '" + name +
                      "'; known: M-variant1..4, S-variant1..4, CxKyDz, NxKyDz, tiny, tiny-global, "
                      "recon, disentangle");
  }
  spec.validate();
  return spec;
}

void apply_options(VariantSpec& spec, bool constant_routing, bool no_layer_norm, bool sliced) {
  for (auto& cfg : spec.layers) {
    if (constant_routing) cfg.mode = routing::RoutingMode::constant;
    if (no_layer_norm) cfg.layer_norm = false;
    // Slicing carves the capsule into one slice per vote, so it only applies
    // to layers where the vote count divides the capsule dimension.
    if (sliced && cfg.dims_in % cfg.votes == 0) cfg.sliced = true;
  }
  spec.validate();
}

Model build_variant(const VariantSpec& spec, uint64_t seed) {
  spec.validate();
  Model m;
  m.spec = spec;
  Rng rng(mix_seed(seed, 0x6d6f64656cull));
  for (const auto& cfg : spec.layers) m.layers.push_back(routing::init_layer_params(cfg, rng));

  int f = spec.head_features();
  m.head_w = init_affine_w(spec.num_classes, f, rng, 1.0 / kHeadGain);
  m.head_b = zero_param({spec.num_classes});

  if (spec.decoder == DecoderKind::fc) {
    int in0 = spec.num_classes * spec.layers.back().dims_out;
    m.fc1_w = init_affine_w(512, in0, rng);
    m.fc1_b = zero_param({512});
    m.fc2_w = init_affine_w(1024, 512, rng);
    m.fc2_b = zero_param({1024});
    m.fc3_w = init_affine_w(784, 1024, rng);
    m.fc3_b = zero_param({784});
  } else if (spec.decoder == DecoderKind::conv) {
    int f0 = spec.layers.back().channels_out * spec.layers.back().dims_out;
    m.conv1_w = init_affine_w(32, 9 * f0, rng);
    m.conv1_b = zero_param({32});
    m.conv2_w = init_affine_w(1, 9 * 32, rng);
    m.conv2_b = zero_param({1});
  }
  return m;
}

std::vector<std::pair<std::string, Tensor>> named_params(const Model& m) {
  std::vector<std::pair<std::string, Tensor>> out;
  for (size_t i = 0; i < m.layers.size(); ++i) {
    std::string p = "layer" + std::to_string(i) + ".";
    out.emplace_back(p + "weights", m.layers[i].weights);
    out.emplace_back(p + "biases", m.layers[i].biases);
    if (m.spec.layers[i].layer_norm) {
      out.emplace_back(p + "ln_gain", m.layers[i].ln_gain);
      out.emplace_back(p + "ln_bias", m.layers[i].ln_bias);
    }
  }
  out.emplace_back("head.weights", m.head_w);
  out.emplace_back("head.biases", m.head_b);
  if (m.spec.decoder == DecoderKind::fc) {
    out.emplace_back("decoder.fc1.weights", m.fc1_w);
    out.emplace_back("decoder.fc1.biases", m.fc1_b);
    out.emplace_back("decoder.fc2.weights", m.fc2_w);
    out.emplace_back("decoder.fc2.biases", m.fc2_b);
    out.emplace_back("decoder.fc3.weights", m.fc3_w);
    out.emplace_back("decoder.fc3.biases", m.fc3_b);
  } else if (m.spec.decoder == DecoderKind::conv) {
    out.emplace_back("decoder.conv1.weights", m.conv1_w);
    out.emplace_back("decoder.conv1.biases", m.conv1_b);
    out.emplace_back("decoder.conv2.weights", m.conv2_w);
    out.emplace_back("decoder.conv2.biases", m.conv2_b);
  }
  return out;
}

int64_t count_params(const VariantSpec& spec) {
  int64_t total = 0;
  for (const auto& cfg : spec.layers) {
    total += int64_t(cfg.channels_out) * cfg.groups_in * cfg.votes * cfg.dims_out *
             (cfg.vote_fan_in() + 1);
    if (cfg.layer_norm) total += 2LL * cfg.channels_out * cfg.dims_out;
  }
  total += affine_count(spec.num_classes, spec.head_features());
  if (spec.decoder == DecoderKind::fc) {
    int in0 = spec.num_classes * spec.layers.back().dims_out;
    total += affine_count(512, in0) + affine_count(1024, 512) + affine_count(784, 1024);
  } else if (spec.decoder == DecoderKind::conv) {
    int f0 = spec.layers.back().channels_out * spec.layers.back().dims_out;
    total += affine_count(32, 9 * f0) + affine_count(1, 9 * 32);
  }
  return total;
}

int64_t count_params(const Model& m) {
  int64_t total = 0;
  for (const auto& [name, t] : named_params(m)) total += t.size();
  return total;
}

Tensor image_to_grid(const Tensor& img) {
  if (img.rank() != 3) throw ConfigError("image_to_grid wants [C, H, W], got " + shape_str(img.shape()));
  int c = img.shape()[0], h = img.shape()[1], w = img.shape()[2];
  return reshape(permute(img, {1, 2, 0}), {h, w, 1, c});
}

Tensor forward_features(const Model& m, const Tensor& grid, Tensor* last_grid,
                        Tensor* last_routing) {
  Tensor cur = grid;
  for (size_t i = 0; i < m.layers.size(); ++i) {
    Tensor* rout = (i + 1 == m.layers.size()) ? last_routing : nullptr;
    cur = routing::layer_forward(cur, m.layers[i], m.spec.layers[i], rout);
  }
  if (last_grid) *last_grid = cur;
  return reshape(cur, {int(cur.size())});
}

Tensor head_logits(const Model& m, const Tensor& features) {
  double scale = kHeadGain / std::sqrt(double(m.spec.head_features()));
  return affine_map(mul_scalar(features, scale), m.head_w, m.head_b);
}

Tensor classify(const Model& m, const Tensor& image) {
  if (image.rank() != 3 || image.shape()[0] != m.spec.in_ch || image.shape()[1] != m.spec.in_h ||
      image.shape()[2] != m.spec.in_w)
    throw ConfigError("image geometry " + shape_str(image.shape()) + " does not match variant input [" +
                      std::to_string(m.spec.in_ch) + ", " + std::to_string(m.spec.in_h) + ", " +
                      std::to_string(m.spec.in_w) + "]");
  return head_logits(m, forward_features(m, image_to_grid(image)));
}

Tensor mask_capsules(const Tensor& caps, int keep) {
  if (caps.rank() != 2) throw ConfigError("mask_capsules wants [N, D]");
  int n = caps.shape()[0], d = caps.shape()[1];
  if (keep < 0 || keep >= n) throw ConfigError("mask index " + std::to_string(keep) + " out of range");
  std::vector<double> mv(size_t(n) * d, 0.0);
  for (int j = 0; j < d; ++j) mv[size_t(keep) * d + j] = 1.0;
  return mul(caps, Tensor::from({n, d}, std::move(mv)));
}

Tensor perturb_dimension(const Tensor& caps, int dim, double delta) {
  if (caps.rank() != 1) throw ConfigError("perturb_dimension wants a rank-1 capsule");
  int d = caps.shape()[0];
  if (dim < 0 || dim >= d) throw ConfigError("dimension " + std::to_string(dim) + " out of range");
  std::vector<double> dv(size_t(d), 0.0);
  dv[dim] = delta;
  return add(caps, Tensor::from({d}, std::move(dv)));
}

Tensor decode_fc(const Model& m, const Tensor& masked) {
  if (m.spec.decoder != DecoderKind::fc) throw ConfigError("variant has no FC decoder");
  if (masked.rank() != 2) throw ConfigError("decode_fc wants masked capsules [N, D]");
  int in0 = m.fc1_w.shape()[1];
  if (masked.size() != in0)
    throw ConfigError("decoder input size " + std::to_string(masked.size()) + ", want " +
                      std::to_string(in0));
  Tensor h = reshape(masked, {in0});
  h = relu(affine_map(h, m.fc1_w, m.fc1_b));
  h = relu(affine_map(h, m.fc2_w, m.fc2_b));
  h = sigmoid(affine_map(h, m.fc3_w, m.fc3_b));
  return reshape(h, {28, 28});
}

Tensor conv3x3(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() != 3) throw ConfigError("conv3x3 wants [H, W, F]");
  int h = x.shape()[0], wd = x.shape()[1], f = x.shape()[2];
  if (w.rank() != 2 || w.shape()[1] != 9 * f)
    throw ConfigError("conv3x3 weights want " + std::to_string(9 * f) + " inputs");
  Tensor g = neighborhood_gather(reshape(x, {h, wd, 1, f}), 3, 1, 1);
  return affine_map(reshape(g, {h, wd, 9 * f}), w, b);
}

Tensor decode_conv(const Model& m, const Tensor& grid) {
  if (m.spec.decoder != DecoderKind::conv) throw ConfigError("variant has no conv decoder");
  if (grid.rank() != 4) throw ConfigError("decode_conv wants a capsule grid [H, W, C, D]");
  int h = grid.shape()[0], w = grid.shape()[1];
  int f0 = grid.shape()[2] * grid.shape()[3];
  if (2 * h != m.spec.in_h || 2 * w != m.spec.in_w)
    throw ConfigError("decode_conv grid " + std::to_string(h) + "x" + std::to_string(w) +
                      " does not upsample to the input size");
  if (9 * f0 != m.conv1_w.shape()[1]) throw ConfigError("decode_conv channel mismatch");
  Tensor up = upsample2x(reshape(grid, {h, w, f0}));
  Tensor mid = relu(conv3x3(up, m.conv1_w, m.conv1_b));
  Tensor out = sigmoid(conv3x3(mid, m.conv2_w, m.conv2_b));
  return reshape(out, {2 * h, 2 * w});
}

Tensor transform_channels(const Tensor& grid, const std::array<double, 6>& T) {
  if (grid.rank() != 4) throw ConfigError("transform_channels wants [H, W, C, D]");
  double a = T[0], b = T[1], tx = T[2], c = T[3], d = T[4], ty = T[5];
  double det = a * d - b * c;
  if (std::abs(det) < 1e-12) throw ConfigError("transform is degenerate (zero determinant)");
  int h = grid.shape()[0], w = grid.shape()[1], ch = grid.shape()[2], dim = grid.shape()[3];
  double cx = (w - 1) / 2.0, cy = (h - 1) / 2.0;
  Tensor out = Tensor::zeros(grid.shape());
  const double* src = grid.data();
  double* dst = out.data();
  int inner = ch * dim;
  for (int yo = 0; yo < h; ++yo)
    for (int xo = 0; xo < w; ++xo) {
      // Invert p = A q + t (center-relative): q = A^-1 (p - t).
      double rx = (xo - cx) - tx, ry = (yo - cy) - ty;
      double sx = (d * rx - b * ry) / det + cx;
      double sy = (-c * rx + a * ry) / det + cy;
      int x0 = int(std::floor(sx)), y0 = int(std::floor(sy));
      double fx = sx - x0, fy = sy - y0;
      const double wgt[4] = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
      const int xs[4] = {x0, x0 + 1, x0, x0 + 1};
      const int ys[4] = {y0, y0, y0 + 1, y0 + 1};
      double* o = dst + (size_t(yo) * w + xo) * inner;
      for (int t = 0; t < 4; ++t) {
        if (wgt[t] == 0.0 || xs[t] < 0 || xs[t] >= w || ys[t] < 0 || ys[t] >= h) continue;
        const double* s = src + (size_t(ys[t]) * w + xs[t]) * inner;
        for (int j = 0; j < inner; ++j) o[j] += wgt[t] * s[j];
      }
    }
  return out;
}

std::array<double, 6> make_rotation(double degrees) {
  double r = degrees * 3.14159265358979323846 / 180.0;
  double cs = std::cos(r), sn = std::sin(r);
  return {cs, -sn, 0.0, sn, cs, 0.0};
}
std::array<double, 6> make_scale(double factor) { return {factor, 0.0, 0.0, 0.0, factor, 0.0}; }
std::array<double, 6> make_translation(double dx, double dy) { return {1, 0, dx, 0, 1, dy}; }
std::array<double, 6> make_hflip() { return {-1, 0, 0, 0, 1, 0}; }
std::array<double, 6> make_vflip() { return {1, 0, 0, 0, -1, 0}; }

// ---- checkpoint container ----

void write_checkpoint(const std::string& path, const std::string& spec_text,
                      const std::vector<CheckpointBlob>& blobs) {
  std::string out;
  out += "CCAP";
  append_u32(out, 1);
  append_u64(out, spec_text.size());
  out += spec_text;
  append_u64(out, blobs.size());
  for (const auto& blob : blobs) {
    append_u64(out, blob.name.size());
    out += blob.name;
    append_u64(out, blob.data.size());
    for (double v : blob.data) append_f64(out, v);
  }
  io::write_file_atomic(path, out);
}

Checkpoint read_checkpoint(const std::string& path) {
  auto buf = io::read_file(path);
  Reader r{buf.data(), buf.size(), 0, path};
  if (r.str(4) != "CCAP") throw DataError(path + ": not a checkpoint (bad magic)");
  uint32_t version = r.u32();
  if (version != 1) throw DataError(path + ": unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  ck.spec_text = r.str(r.u64());
  uint64_t nblobs = r.u64();
  if (nblobs > (1ull << 20)) throw DataError(path + ": implausible blob count");
  for (uint64_t i = 0; i < nblobs; ++i) {
    CheckpointBlob blob;
    blob.name = r.str(r.u64());
    uint64_t count = r.u64();
    r.need(count * 8);
    blob.data.resize(count);
    for (uint64_t j = 0; j < count; ++j) blob.data[j] = r.f64();
    ck.blobs.push_back(std::move(blob));
  }
  if (r.at != r.n) throw DataError(path + ": trailing bytes after checkpoint data");
  return ck;
}

std::string spec_to_text(const VariantSpec& spec) {
  std::ostringstream os;
  os << "capsnet-variant 1\n";
  os << "name " << spec.name << "\n";
  os << "input " << spec.in_h << " " << spec.in_w << " " << spec.in_ch << "\n";
  os << "classes " << spec.num_classes << "\n";
  os << "decoder "
     << (spec.decoder == DecoderKind::none ? "none" : spec.decoder == DecoderKind::fc ? "fc" : "conv")
     << "\n";
  os << "layers " << spec.layers.size() << "\n";
  for (const auto& cfg : spec.layers) {
    os << "layer " << cfg.groups_in << " " << cfg.channels_out << " " << cfg.votes << " "
       << cfg.dims_in << " " << cfg.dims_out << " " << cfg.stride << " " << cfg.pad << " "
       << (cfg.mode == routing::RoutingMode::constant ? "const" : "dd") << " "
       << (cfg.layer_norm ? 1 : 0) << " " << (cfg.sliced ? 1 : 0) << "\n";
  }
  return os.str();
}

VariantSpec spec_from_text(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  auto fail = [](const std::string& what) -> void { throw DataError("bad variant text: " + what); };
  if (!std::getline(is, line) || line != "capsnet-variant 1") fail("missing version line");
  VariantSpec spec;
  size_t expect_layers = 0;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "name") {
      ls >> spec.name;
    } else if (key == "input") {
      ls >> spec.in_h >> spec.in_w >> spec.in_ch;
      if (!ls) fail("short input line");
    } else if (key == "classes") {
      ls >> spec.num_classes;
      if (!ls) fail("short classes line");
    } else if (key == "decoder") {
      std::string d;
      ls >> d;
      if (d == "none") spec.decoder = DecoderKind::none;
      else if (d == "fc") spec.decoder = DecoderKind::fc;
      else if (d == "conv") spec.decoder = DecoderKind::conv;
      else fail("unknown decoder '" + d + "'");
    } else if (key == "layers") {
      ls >> expect_layers;
    } else if (key == "layer") {
      routing::LayerConfig cfg;
      std::string mode;
      int ln = 1, sliced = 0;
      ls >> cfg.groups_in >> cfg.channels_out >> cfg.votes >> cfg.dims_in >> cfg.dims_out >>
          cfg.stride >> cfg.pad >> mode >> ln >> sliced;
      if (!ls) fail("short layer line");
      if (mode == "const") cfg.mode = routing::RoutingMode::constant;
      else if (mode == "dd") cfg.mode = routing::RoutingMode::data_dependent;
      else fail("unknown routing mode '" + mode + "'");
      cfg.layer_norm = ln != 0;
      cfg.sliced = sliced != 0;
      spec.layers.push_back(cfg);
    } else {
      fail("unknown key '" + key + "'");
    }
  }
  if (spec.layers.size() != expect_layers) fail("layer count mismatch");
  try {
    spec.validate();
  } catch (const ConfigError& e) {
    throw DataError(std::string("bad variant text: ") + e.what());
  }
  return spec;
}

void save_model(const std::string& path, const Model& m, const std::vector<CheckpointBlob>& extra) {
  std::vector<CheckpointBlob> blobs;
  for (const auto& [name, t] : named_params(m)) blobs.push_back({name, t.values()});
  for (const auto& blob : extra) blobs.push_back(blob);
  write_checkpoint(path, spec_to_text(m.spec), blobs);
}

Model load_model(const std::string& path, std::vector<CheckpointBlob>* extra) {
  Checkpoint ck = read_checkpoint(path);
  VariantSpec spec = spec_from_text(ck.spec_text);
  Model m = build_variant(spec, 0);
  auto params = named_params(m);
  std::vector<bool> used(ck.blobs.size(), false);
  for (auto& [name, t] : params) {
    bool found = false;
    for (size_t i = 0; i < ck.blobs.size(); ++i) {
      if (used[i] || ck.blobs[i].name != name) continue;
      if (int64_t(ck.blobs[i].data.size()) != t.size())
        throw DataError(path + ": parameter " + name + " has " +
                        std::to_string(ck.blobs[i].data.size()) + " values, want " +
                        std::to_string(t.size()));
      t.values() = ck.blobs[i].data;
      used[i] = found = true;
      break;
    }
    if (!found) throw DataError(path + ": checkpoint is missing parameter " + name);
  }
  if (extra) {
    extra->clear();
    for (size_t i = 0; i < ck.blobs.size(); ++i)
      if (!used[i]) extra->push_back(std::move(ck.blobs[i]));
  }
  return m;
}

}  // namespace caps::models
