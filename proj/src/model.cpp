#include "puuma/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace puuma {

using json = nlohmann::json;

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::puuma: return "puuma";
    case Variant::umamba_global: return "umamba_global";
    case Variant::unet: return "unet";
  }
  return "?";
}

Variant variant_from_name(const std::string& name) {
  if (name == "puuma") return Variant::puuma;
  if (name == "umamba_global") return Variant::umamba_global;
  if (name == "unet") return Variant::unet;
  throw std::invalid_argument("unknown model variant '" + name + "'");
}

// ---- config ---------------------------------------------------------------

int ModelConfig::stage_channels(int stage) const {
  int ch = base_channels;
  for (int i = 1; i < stage; ++i) ch = std::min(ch * 2, base_channels * 8);
  return ch;
}

std::array<int, 3> ModelConfig::bottleneck_spatial(std::array<int, 3> input,
                                                   int depth) const {
  for (int i = 0; i < depth; ++i)
    for (int a = 0; a < 3; ++a) input[size_t(a)] /= 2;
  return input;
}

namespace {
int64_t prod3(const std::array<int, 3>& a) {
  return int64_t(a[0]) * a[1] * a[2];
}
}  // namespace

int ModelConfig::global_bottleneck_channels() const {
  return int(global_latent_dim / prod3(bottleneck_spatial(volume_shape, global_depth)));
}

int ModelConfig::local_bottleneck_channels() const {
  return int(local_latent_dim / prod3(bottleneck_spatial(patch_shape, local_depth)));
}

void ModelConfig::validate() const {
  if (num_classes != 4)
    throw std::invalid_argument("config: num_classes must be 4 (EPT,VPT,LPT,Term)");
  if (global_depth < 1) throw std::invalid_argument("config: global_depth must be >= 1");
  if (base_channels < 1) throw std::invalid_argument("config: base_channels must be >= 1");
  if (ssm_state_dim < 1) throw std::invalid_argument("config: ssm_state_dim must be >= 1");
  const int gdiv = 1 << global_depth;
  for (int e : volume_shape)
    if (e % gdiv != 0 || e / gdiv < 1)
      throw std::invalid_argument(
          "config: volume extent " + std::to_string(e) +
          " not divisible by 2^global_depth=" + std::to_string(gdiv));
  const int64_t gsp = prod3(bottleneck_spatial(volume_shape, global_depth));
  if (global_latent_dim % gsp != 0)
    throw std::invalid_argument("config: global_latent_dim " +
                                std::to_string(global_latent_dim) +
                                " not divisible by bottleneck voxel count " +
                                std::to_string(gsp));
  if (has_local_branch()) {
    if (local_depth < 1 || local_depth >= global_depth)
      throw std::invalid_argument("config: require 1 <= local_depth < global_depth");
    const int ldiv = 1 << local_depth;
    for (int e : patch_shape)
      if (e % ldiv != 0 || e / ldiv < 1)
        throw std::invalid_argument(
            "config: patch extent " + std::to_string(e) +
            " not divisible by 2^local_depth=" + std::to_string(ldiv));
    const int64_t lsp = prod3(bottleneck_spatial(patch_shape, local_depth));
    if (local_latent_dim % lsp != 0)
      throw std::invalid_argument("config: local_latent_dim " +
                                  std::to_string(local_latent_dim) +
                                  " not divisible by bottleneck voxel count " +
                                  std::to_string(lsp));
  }
}

ModelConfig ModelConfig::paper_preset(Variant v) {
  ModelConfig c;
  c.variant = v;
  c.global_depth = 6;
  c.global_latent_dim = 5120;
  c.fcl_hidden = 16;
  c.base_channels = 16;
  c.volume_shape = {128, 128, 64};
  c.patch_shape = {16, 16, 16};
  if (v == Variant::puuma) {
    c.local_depth = 3;
    c.local_latent_dim = 4096;
  }
  c.validate();
  return c;
}

ModelConfig ModelConfig::desk_preset(Variant v) {
  ModelConfig c;
  c.variant = v;
  c.global_depth = 3;
  c.global_latent_dim = 256;
  c.fcl_hidden = 16;
  c.base_channels = 4;
  c.volume_shape = {32, 32, 16};
  c.patch_shape = {8, 8, 8};
  if (v == Variant::puuma) {
    c.local_depth = 2;
    c.local_latent_dim = 128;
  }
  c.validate();
  return c;
}

std::string ModelConfig::canonical_text() const {
  json j;
  j["base_channels"] = base_channels;
  j["fcl_hidden"] = fcl_hidden;
  j["global_depth"] = global_depth;
  j["global_latent_dim"] = global_latent_dim;
  j["local_depth"] = local_depth;
  j["local_latent_dim"] = local_latent_dim;
  j["num_classes"] = num_classes;
  j["patch_shape"] = patch_shape;
  j["ssm_state_dim"] = ssm_state_dim;
  j["variant"] = variant_name(variant);
  j["volume_shape"] = volume_shape;
  return j.dump();  // nlohmann objects are key-sorted
}

ModelConfig ModelConfig::from_canonical_text(const std::string& text) {
  json j = json::parse(text);
  ModelConfig c;
  c.base_channels = j.at("base_channels").get<int>();
  c.fcl_hidden = j.at("fcl_hidden").get<int>();
  c.global_depth = j.at("global_depth").get<int>();
  c.global_latent_dim = j.at("global_latent_dim").get<int>();
  c.local_depth = j.at("local_depth").get<int>();
  c.local_latent_dim = j.at("local_latent_dim").get<int>();
  c.num_classes = j.at("num_classes").get<int>();
  c.patch_shape = j.at("patch_shape").get<std::array<int, 3>>();
  c.ssm_state_dim = j.at("ssm_state_dim").get<int>();
  c.variant = variant_from_name(j.at("variant").get<std::string>());
  c.volume_shape = j.at("volume_shape").get<std::array<int, 3>>();
  c.validate();
  return c;
}

// ---- construction -----------------------------------------------------------

namespace {

Tensor he_conv(Rng& rng, int co, int ci, int k) {
  const float std_dev = float(std::sqrt(2.0 / (double(ci) * k * k * k)));
  return Tensor::randn({co, ci, k, k, k}, rng, std_dev, true);
}

Tensor he_linear(Rng& rng, int out, int in) {
  const float std_dev = float(std::sqrt(2.0 / double(in)));
  return Tensor::randn({out, in}, rng, std_dev, true);
}

ConvStage make_stage(Rng& rng, int c_in, int c_out, bool with_mamba, int state_dim) {
  ConvStage s;
  s.w = he_conv(rng, c_out, c_in, 3);
  s.b = Tensor::zeros({c_out}, true);
  if (with_mamba) s.mamba = MambaBlock::init(c_out, state_dim, rng);
  s.wd = he_conv(rng, c_out, c_out, 3);
  s.bd = Tensor::zeros({c_out}, true);
  return s;
}

PredictionHead make_head(Rng& rng, int latent, int hidden, int classes) {
  PredictionHead h;
  h.w_hidden = he_linear(rng, hidden, latent);
  h.b_hidden = Tensor::zeros({hidden}, true);
  h.w_reg = he_linear(rng, 1, hidden);
  h.b_reg = Tensor::zeros({1}, true);
  h.w_cls = he_linear(rng, classes, hidden);
  h.b_cls = Tensor::zeros({classes}, true);
  return h;
}

Tensor flatten_row(const Tensor& t) { return reshape(t, {1, int(t.numel())}); }

}  // namespace

std::pair<Tensor, Tensor> PredictionHead::forward(const Tensor& latent_row) const {
  Tensor hid = leaky_relu(linear(latent_row, w_hidden, b_hidden));
  Tensor ga = reshape(linear(hid, w_reg, b_reg), {1});
  Tensor cls = reshape(linear(hid, w_cls, b_cls), {4});
  return {ga, cls};
}

GlobalBranch::Out GlobalBranch::forward(const Tensor& volume,
                                        const ModelConfig& cfg) const {
  const auto& vs = cfg.volume_shape;
  if (volume.shape() != Shape{1, vs[0], vs[1], vs[2]})
    throw std::invalid_argument("global_branch: volume shape " +
                                shape_str(volume.shape()) + " does not match config");
  Tensor x = volume;
  std::vector<Tensor> skips;
  for (const ConvStage& st : stages) {
    x = leaky_relu(instance_norm(conv3d(x, st.w, st.b, 1, 1)));
    if (st.mamba) x = st.mamba->forward(x);
    skips.push_back(x);
    x = conv3d(x, st.wd, st.bd, 2, 1);
  }
  Tensor bottleneck = leaky_relu(instance_norm(conv3d(x, w_bottleneck, b_bottleneck, 1, 1)));

  Out out;
  auto [ga, cls] = head.forward(flatten_row(bottleneck));
  out.ga = ga;
  out.class_logits = cls;

  Tensor z = bottleneck;
  for (size_t i = 0; i < decoder.size(); ++i) {
    const DecoderStage& d = decoder[i];
    z = conv3d(upsample_nearest2x(z), d.wu, d.bu, 1, 1);
    const Tensor& skip = skips[skips.size() - 1 - i];
    Tensor both[] = {z, skip};
    z = concat(std::span<const Tensor>(both, 2), 0);
    z = leaky_relu(instance_norm(conv3d(z, d.wm, d.bm, 1, 1)));
  }
  out.seg_logits = conv3d(z, w_seg, b_seg, 1, 0);
  return out;
}

std::pair<Tensor, Tensor> LocalBranch::forward(const Tensor& patch,
                                               const ModelConfig& cfg) const {
  const auto& ps = cfg.patch_shape;
  if (patch.shape() != Shape{1, ps[0], ps[1], ps[2]})
    throw std::invalid_argument("local_branch: patch shape " +
                                shape_str(patch.shape()) + " does not match config");
  Tensor x = patch;
  for (const ConvStage& st : stages) {
    x = leaky_relu(instance_norm(conv3d(x, st.w, st.b, 1, 1)));
    if (st.mamba) x = st.mamba->forward(x);
    x = conv3d(x, st.wd, st.bd, 2, 1);
  }
  Tensor bottleneck = leaky_relu(instance_norm(conv3d(x, w_bottleneck, b_bottleneck, 1, 1)));
  return head.forward(flatten_row(bottleneck));
}

Tensor fuse(const FusionHead& head, const Tensor& ga_global,
            const Tensor& class_probs_global, const Tensor& ga_local,
            const Tensor& class_probs_local, float ga_scan_weeks) {
  if (ga_scan_weeks < 15.0f || ga_scan_weeks >= 37.0f)
    throw std::invalid_argument("fuse: ga_scan " + std::to_string(ga_scan_weeks) +
                                " outside the [15,37) acquisition window");
  Tensor scan = Tensor::scalar(ga_scan_weeks);
  Tensor parts[] = {ga_global, class_probs_global, ga_local, class_probs_local, scan};
  Tensor inputs = concat(std::span<const Tensor>(parts, 5), 0);  // [11]
  return reshape(linear(reshape(inputs, {1, 11}), head.w, head.b), {1});
}

ModelOutput Model::forward(const Tensor& volume, const Tensor* patch,
                           float ga_scan_weeks) const {
  ModelOutput out;
  GlobalBranch::Out g = global.forward(volume, config);
  out.seg_logits = g.seg_logits;
  out.ga_global = g.ga;
  out.class_logits_global = g.class_logits;
  if (config.has_local_branch()) {
    if (!patch)
      throw std::invalid_argument("model forward: puuma variant requires a patch input");
    auto [gl, cl] = local->forward(*patch, config);
    out.ga_local = gl;
    out.class_logits_local = cl;
    out.ga_final = fuse(*fusion, g.ga, softmax_lastdim(g.class_logits), gl,
                        softmax_lastdim(cl), ga_scan_weeks);
  } else {
    out.ga_final = g.ga;
  }
  return out;
}

std::vector<std::pair<std::string, Tensor>> Model::parameters() const {
  std::vector<std::pair<std::string, Tensor>> ps;
  auto add_stage = [&ps](const std::string& prefix, const ConvStage& s) {
    ps.push_back({prefix + ".conv.w", s.w});
    ps.push_back({prefix + ".conv.b", s.b});
    if (s.mamba) {
      const MambaBlock& m = *s.mamba;
      ps.push_back({prefix + ".mamba.w_in", m.w_in});
      ps.push_back({prefix + ".mamba.b_in", m.b_in});
      ps.push_back({prefix + ".mamba.log_decay", m.ssm.log_decay});
      ps.push_back({prefix + ".mamba.w_b", m.ssm.w_b});
      ps.push_back({prefix + ".mamba.w_c", m.ssm.w_c});
      ps.push_back({prefix + ".mamba.w_delta", m.ssm.w_delta});
      ps.push_back({prefix + ".mamba.b_delta", m.ssm.b_delta});
      ps.push_back({prefix + ".mamba.w_out", m.w_out});
      ps.push_back({prefix + ".mamba.b_out", m.b_out});
    }
    ps.push_back({prefix + ".down.w", s.wd});
    ps.push_back({prefix + ".down.b", s.bd});
  };
  auto add_head = [&ps](const std::string& prefix, const PredictionHead& h) {
    ps.push_back({prefix + ".hidden.w", h.w_hidden});
    ps.push_back({prefix + ".hidden.b", h.b_hidden});
    ps.push_back({prefix + ".reg.w", h.w_reg});
    ps.push_back({prefix + ".reg.b", h.b_reg});
    ps.push_back({prefix + ".cls.w", h.w_cls});
    ps.push_back({prefix + ".cls.b", h.b_cls});
  };

  for (size_t i = 0; i < global.stages.size(); ++i)
    add_stage("global.stage" + std::to_string(i), global.stages[i]);
  ps.push_back({"global.bottleneck.w", global.w_bottleneck});
  ps.push_back({"global.bottleneck.b", global.b_bottleneck});
  add_head("global.head", global.head);
  for (size_t i = 0; i < global.decoder.size(); ++i) {
    const std::string p = "global.decoder" + std::to_string(i);
    ps.push_back({p + ".up.w", global.decoder[i].wu});
    ps.push_back({p + ".up.b", global.decoder[i].bu});
    ps.push_back({p + ".merge.w", global.decoder[i].wm});
    ps.push_back({p + ".merge.b", global.decoder[i].bm});
  }
  ps.push_back({"global.seg.w", global.w_seg});
  ps.push_back({"global.seg.b", global.b_seg});

  if (local) {
    for (size_t i = 0; i < local->stages.size(); ++i)
      add_stage("local.stage" + std::to_string(i), local->stages[i]);
    ps.push_back({"local.bottleneck.w", local->w_bottleneck});
    ps.push_back({"local.bottleneck.b", local->b_bottleneck});
    add_head("local.head", local->head);
  }
  if (fusion) {
    ps.push_back({"fusion.w", fusion->w});
    ps.push_back({"fusion.b", fusion->b});
  }
  return ps;
}

int64_t Model::parameter_count() const {
  int64_t n = 0;
  for (const auto& [name, t] : parameters()) n += t.numel();
  return n;
}

void Model::set_requires_grad(bool on) {
  for (auto& [name, t] : parameters()) t.node()->requires_grad = on;
}

Model build_model(const ModelConfig& config, uint64_t seed) {
  config.validate();
  Rng rng(Rng::mix(seed, 0x70b1c5u));
  Model m;
  m.config = config;

  const bool mamba = config.has_mamba();
  int c_in = 1;
  for (int s = 1; s <= config.global_depth; ++s) {
    const int c_out = config.stage_channels(s);
    m.global.stages.push_back(make_stage(rng, c_in, c_out, mamba, config.ssm_state_dim));
    c_in = c_out;
  }
  const int gb = config.global_bottleneck_channels();
  m.global.w_bottleneck = he_conv(rng, gb, c_in, 3);
  m.global.b_bottleneck = Tensor::zeros({gb}, true);
  m.global.head = make_head(rng, config.global_latent_dim, config.fcl_hidden,
                            config.num_classes);
  int prev = gb;
  for (int s = config.global_depth; s >= 1; --s) {
    const int c = config.stage_channels(s);
    DecoderStage d;
    d.wu = he_conv(rng, c, prev, 3);
    d.bu = Tensor::zeros({c}, true);
    d.wm = he_conv(rng, c, 2 * c, 3);
    d.bm = Tensor::zeros({c}, true);
    m.global.decoder.push_back(std::move(d));
    prev = c;
  }
  m.global.w_seg = he_conv(rng, 1, prev, 1);
  m.global.b_seg = Tensor::zeros({1}, true);

  if (config.has_local_branch()) {
    LocalBranch lb;
    int lc_in = 1;
    for (int s = 1; s <= config.local_depth; ++s) {
      const int c_out = config.stage_channels(s);
      lb.stages.push_back(make_stage(rng, lc_in, c_out, mamba, config.ssm_state_dim));
      lc_in = c_out;
    }
    const int lbch = config.local_bottleneck_channels();
    lb.w_bottleneck = he_conv(rng, lbch, lc_in, 3);
    lb.b_bottleneck = Tensor::zeros({lbch}, true);
    lb.head = make_head(rng, config.local_latent_dim, config.fcl_hidden,
                        config.num_classes);
    m.local = std::move(lb);

    FusionHead f;
    f.w = he_linear(rng, 1, 11);
    f.b = Tensor::zeros({1}, true);
    m.fusion = std::move(f);
  }
  return m;
}

// ---- checkpoint io ----------------------------------------------------------

namespace {
constexpr char kCkptMagic[4] = {'P', 'U', 'M', 'C'};

void write_u32le(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {(unsigned char)(v), (unsigned char)(v >> 8),
                        (unsigned char)(v >> 16), (unsigned char)(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

void write_u64le(std::ostream& os, uint64_t v) {
  write_u32le(os, uint32_t(v));
  write_u32le(os, uint32_t(v >> 32));
}

uint32_t read_u32le(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return uint32_t(b[0]) | (uint32_t(b[1]) << 8) | (uint32_t(b[2]) << 16) |
         (uint32_t(b[3]) << 24);
}

uint64_t read_u64le(std::istream& is) {
  uint64_t lo = read_u32le(is);
  uint64_t hi = read_u32le(is);
  return lo | (hi << 32);
}
}  // namespace

void save_checkpoint(const std::string& path, const Model& model) {
  std::ostringstream blob;
  for (const auto& [name, t] : model.parameters()) write_tensor(blob, t);
  const std::string blob_str = blob.str();
  const std::string cfg = model.config.canonical_text();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write checkpoint '" + path + "'");
  os.write(kCkptMagic, 4);
  write_u32le(os, uint32_t(cfg.size()));
  os.write(cfg.data(), std::streamsize(cfg.size()));
  write_u64le(os, uint64_t(blob_str.size()));
  os.write(blob_str.data(), std::streamsize(blob_str.size()));
  if (!os) throw std::runtime_error("failed writing checkpoint '" + path + "'");
}

Model load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint '" + path + "'");
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kCkptMagic, 4) != 0)
    throw std::runtime_error("bad checkpoint magic in '" + path + "'");
  const uint32_t cfg_len = read_u32le(is);
  std::string cfg(cfg_len, '\0');
  is.read(cfg.data(), cfg_len);
  if (!is) throw std::runtime_error("checkpoint: truncated config in '" + path + "'");
  ModelConfig config = ModelConfig::from_canonical_text(cfg);
  (void)read_u64le(is);  // blob length, implied by the parameter list

  Model m = build_model(config, /*seed=*/0);
  for (auto& [name, t] : m.parameters()) {
    Tensor loaded = read_tensor(is);
    if (loaded.shape() != t.shape())
      throw std::runtime_error("checkpoint: shape mismatch for " + name);
    std::memcpy(t.raw().data(), loaded.data().data(),
                loaded.data().size() * sizeof(float));
  }
  return m;
}

}  // namespace puuma
