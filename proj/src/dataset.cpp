#include "puuma/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace puuma {

namespace fs = std::filesystem;
using json = nlohmann::json;

const char* category_name(PretermCategory c) {
  switch (c) {
    case PretermCategory::EPT: return "EPT";
    case PretermCategory::VPT: return "VPT";
    case PretermCategory::LPT: return "LPT";
    case PretermCategory::Term: return "Term";
  }
  return "?";
}

PretermCategory category_from_name(const std::string& name) {
  for (int i = 0; i < kNumCategories; ++i)
    if (name == category_name(PretermCategory(i))) return PretermCategory(i);
  throw std::invalid_argument("unknown preterm category '" + name + "'");
}

PretermCategory categorize(double ga_birth_weeks) {
  if (!(ga_birth_weeks > 0.0))
    throw std::invalid_argument("categorize: gestational age must be positive, got " +
                                std::to_string(ga_birth_weeks));
  if (ga_birth_weeks < 28.0) return PretermCategory::EPT;
  if (ga_birth_weeks < 32.0) return PretermCategory::VPT;
  if (ga_birth_weeks < 37.0) return PretermCategory::LPT;
  return PretermCategory::Term;
}

void Case::validate() const {
  if (!(ga_scan_weeks >= 15.0f && ga_scan_weeks < 37.0f))
    throw std::invalid_argument("case " + id + ": ga_scan " +
                                std::to_string(ga_scan_weeks) + " outside [15,37)");
  if (!(ga_birth_weeks >= ga_scan_weeks))
    throw std::invalid_argument("case " + id + ": ga_birth before ga_scan");
  if (t2star.dims != placenta_mask.dims)
    throw std::invalid_argument("case " + id + ": mask/volume shape mismatch");
  if (placenta_mask.count() == 0)
    throw std::invalid_argument("case " + id + ": empty placenta mask");
  for (float v : t2star.voxels)
    if (!(v >= 0.0f && v <= 300.0f))
      throw std::invalid_argument("case " + id + ": t2star outside [0,300] ms");
}

// ---- stratified split -------------------------------------------------------

namespace {

// 8:1:1 by largest remainder; remainder ties resolved in split order.
std::array<int, 3> allocate_811(int n) {
  const double ratios[3] = {0.8, 0.1, 0.1};
  std::array<int, 3> out{};
  double fracs[3];
  int assigned = 0;
  for (int s = 0; s < 3; ++s) {
    const double q = ratios[s] * n;
    out[size_t(s)] = int(std::floor(q + 1e-9));
    fracs[s] = q - out[size_t(s)];
    assigned += out[size_t(s)];
  }
  int leftover = n - assigned;
  while (leftover > 0) {
    int best = -1;
    for (int s = 0; s < 3; ++s)
      if (best < 0 || fracs[s] > fracs[best] + 1e-12) best = s;
    out[size_t(best)] += 1;
    fracs[best] = -1.0;
    --leftover;
  }
  return out;
}

}  // namespace

SplitIndices stratified_split(std::span<const PretermCategory> categories,
                              uint64_t seed) {
  std::array<std::vector<size_t>, kNumCategories> groups;
  for (size_t i = 0; i < categories.size(); ++i)
    groups[size_t(int(categories[i]))].push_back(i);

  SplitIndices out;
  for (int c = 0; c < kNumCategories; ++c) {
    auto& g = groups[size_t(c)];
    if (g.empty()) continue;
    if (g.size() < 3)
      throw std::invalid_argument(std::string("stratified_split: category ") +
                                  category_name(PretermCategory(c)) + " has only " +
                                  std::to_string(g.size()) +
                                  " cases, need at least 3");
    Rng rng(Rng::mix(seed, 0x5EED0000u + uint64_t(c)));
    for (size_t i = g.size(); i > 1; --i)
      std::swap(g[i - 1], g[size_t(rng.uniform_int(0, int64_t(i) - 1))]);
    const auto alloc = allocate_811(int(g.size()));
    size_t pos = 0;
    for (int s = 0; s < alloc[0]; ++s) out.train.push_back(g[pos++]);
    for (int s = 0; s < alloc[1]; ++s) out.val.push_back(g[pos++]);
    for (int s = 0; s < alloc[2]; ++s) out.test.push_back(g[pos++]);
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.val.begin(), out.val.end());
  std::sort(out.test.begin(), out.test.end());
  return out;
}

// ---- balanced sampling ------------------------------------------------------

BalancedSampler::BalancedSampler(std::span<const PretermCategory> categories,
                                 uint64_t seed)
    : rng_(Rng::mix(seed, 0xBA1A9CEDull)) {
  std::array<int64_t, kNumCategories> counts{};
  for (PretermCategory c : categories) counts[size_t(int(c))] += 1;
  for (int c = 0; c < kNumCategories; ++c)
    if (counts[size_t(c)] == 0)
      throw std::invalid_argument(std::string("balanced_sampler: empty category ") +
                                  category_name(PretermCategory(c)));
  cumulative_.resize(categories.size());
  double acc = 0.0;
  for (size_t i = 0; i < categories.size(); ++i) {
    acc += 1.0 / double(counts[size_t(int(categories[i]))]);
    cumulative_[i] = acc;
  }
  for (double& v : cumulative_) v /= acc;
}

size_t BalancedSampler::next() {
  const double u = rng_.next_double();
  auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), u);
  if (it == cumulative_.end()) --it;
  return size_t(it - cumulative_.begin());
}

// ---- augmentation -----------------------------------------------------------

namespace {

struct Mat3 {
  double m[3][3];
};

Mat3 rotation_matrix(double a0, double a1, double a2) {
  const double c0 = std::cos(a0), s0 = std::sin(a0);
  const double c1 = std::cos(a1), s1 = std::sin(a1);
  const double c2 = std::cos(a2), s2 = std::sin(a2);
  // R = R2 * R1 * R0 (rotations about the three index axes)
  Mat3 r0{{{1, 0, 0}, {0, c0, -s0}, {0, s0, c0}}};
  Mat3 r1{{{c1, 0, s1}, {0, 1, 0}, {-s1, 0, c1}}};
  Mat3 r2{{{c2, -s2, 0}, {s2, c2, 0}, {0, 0, 1}}};
  auto mulm = [](const Mat3& a, const Mat3& b) {
    Mat3 out{};
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double acc = 0.0;
        for (int k = 0; k < 3; ++k) acc += a.m[i][k] * b.m[k][j];
        out.m[i][j] = acc;
      }
    return out;
  };
  return mulm(r2, mulm(r1, r0));
}

template <class MapFn>
void warp(Volume& vol, Mask& mask, MapFn src_of) {
  const Volume vin = vol;
  const Mask min_ = mask;
  for (int i = 0; i < vol.dims[0]; ++i)
    for (int j = 0; j < vol.dims[1]; ++j)
      for (int k = 0; k < vol.dims[2]; ++k) {
        double s0, s1, s2;
        src_of(i, j, k, s0, s1, s2);
        vol.at(i, j, k) = sample_trilinear(vin, s0, s1, s2, 0.0f);
        mask.at(i, j, k) = sample_nearest(min_, s0, s1, s2) ? 1 : 0;
      }
}

void clip_volume(Volume& v) {
  for (float& x : v.voxels) x = std::clamp(x, 0.0f, 300.0f);
}

}  // namespace

std::pair<Volume, Mask> augment(const Volume& volume, const Mask& mask,
                                uint64_t seed, const AugmentConfig& cfg) {
  if (volume.dims != mask.dims)
    throw std::invalid_argument("augment: volume/mask shape mismatch");
  Rng rng(Rng::mix(seed, 0xA06u));
  Volume vol = volume;
  Mask msk = mask;
  const double c0 = 0.5 * (vol.dims[0] - 1);
  const double c1 = 0.5 * (vol.dims[1] - 1);
  const double c2 = 0.5 * (vol.dims[2] - 1);

  // 1. affine (small rotation + translation)
  if (rng.bernoulli(cfg.p_affine)) {
    const double d2r = 3.14159265358979323846 / 180.0;
    const double a0 = rng.uniform(-cfg.rot_max_deg, cfg.rot_max_deg) * d2r;
    const double a1 = rng.uniform(-cfg.rot_max_deg, cfg.rot_max_deg) * d2r;
    const double a2 = rng.uniform(-cfg.rot_max_deg, cfg.rot_max_deg) * d2r;
    const double t0 = rng.uniform(-cfg.translate_max_vox, cfg.translate_max_vox);
    const double t1 = rng.uniform(-cfg.translate_max_vox, cfg.translate_max_vox);
    const double t2 = rng.uniform(-cfg.translate_max_vox, cfg.translate_max_vox);
    const Mat3 r = rotation_matrix(a0, a1, a2);
    // inverse: R^T applied to (p - c - t)
    warp(vol, msk, [&](int i, int j, int k, double& s0, double& s1, double& s2) {
      const double p0 = i - c0 - t0, p1 = j - c1 - t1, p2 = k - c2 - t2;
      s0 = r.m[0][0] * p0 + r.m[1][0] * p1 + r.m[2][0] * p2 + c0;
      s1 = r.m[0][1] * p0 + r.m[1][1] * p1 + r.m[2][1] * p2 + c1;
      s2 = r.m[0][2] * p0 + r.m[1][2] * p1 + r.m[2][2] * p2 + c2;
    });
  }

  // 2. elastic, displacement interpolated from a coarse grid
  if (rng.bernoulli(cfg.p_elastic)) {
    const int g = std::max(2, cfg.elastic_grid);
    std::vector<double> disp(size_t(3) * g * g * g);
    for (double& d : disp) d = rng.uniform(-cfg.elastic_max_vox, cfg.elastic_max_vox);
    auto grid_at = [&](int axis, double gi, double gj, double gk) {
      const auto cl = [g](double x) { return std::clamp(x, 0.0, double(g - 1)); };
      gi = cl(gi); gj = cl(gj); gk = cl(gk);
      const int i0 = int(gi), j0 = int(gj), k0 = int(gk);
      const int i1 = std::min(i0 + 1, g - 1), j1 = std::min(j0 + 1, g - 1),
                k1 = std::min(k0 + 1, g - 1);
      const double fi = gi - i0, fj = gj - j0, fk = gk - k0;
      auto v = [&](int a, int b, int c) {
        return disp[((size_t(axis) * g + a) * g + b) * g + c];
      };
      double acc = 0.0;
      const int ii[2] = {i0, i1}, jj[2] = {j0, j1}, kk[2] = {k0, k1};
      const double wi[2] = {1 - fi, fi}, wj[2] = {1 - fj, fj}, wk[2] = {1 - fk, fk};
      for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b)
          for (int c = 0; c < 2; ++c)
            acc += wi[a] * wj[b] * wk[c] * v(ii[a], jj[b], kk[c]);
      return acc;
    };
    warp(vol, msk, [&](int i, int j, int k, double& s0, double& s1, double& s2) {
      const double gi = double(i) / (vol.dims[0] - 1) * (g - 1);
      const double gj = double(j) / (vol.dims[1] - 1) * (g - 1);
      const double gk = double(k) / (vol.dims[2] - 1) * (g - 1);
      s0 = i + grid_at(0, gi, gj, gk);
      s1 = j + grid_at(1, gi, gj, gk);
      s2 = k + grid_at(2, gi, gj, gk);
    });
  }

  // 3. zoom about the center
  if (rng.bernoulli(cfg.p_zoom)) {
    const double f = rng.uniform(cfg.zoom_min, cfg.zoom_max);
    if (f < 0.1)
      throw std::invalid_argument("augment: degenerate zoom factor " +
                                  std::to_string(f));
    if (f != 1.0) {
      warp(vol, msk, [&](int i, int j, int k, double& s0, double& s1, double& s2) {
        s0 = c0 + (i - c0) / f;
        s1 = c1 + (j - c1) / f;
        s2 = c2 + (k - c2) / f;
      });
    }
  }

  // 4. linear contrast about the volume mean
  if (rng.bernoulli(cfg.p_contrast)) {
    const double gamma = rng.uniform(cfg.contrast_min, cfg.contrast_max);
    double mu = 0.0;
    for (float v : vol.voxels) mu += v;
    mu /= double(vol.size());
    for (float& v : vol.voxels) v = float(mu + (v - mu) * gamma);
    clip_volume(vol);
  }

  // 5. multiplicative low-order bias field
  if (rng.bernoulli(cfg.p_bias)) {
    double coef[9];
    for (double& c : coef) c = rng.uniform(-cfg.bias_amp, cfg.bias_amp);
    for (int i = 0; i < vol.dims[0]; ++i)
      for (int j = 0; j < vol.dims[1]; ++j)
        for (int k = 0; k < vol.dims[2]; ++k) {
          const double x = vol.dims[0] > 1 ? 2.0 * i / (vol.dims[0] - 1) - 1.0 : 0.0;
          const double y = vol.dims[1] > 1 ? 2.0 * j / (vol.dims[1] - 1) - 1.0 : 0.0;
          const double z = vol.dims[2] > 1 ? 2.0 * k / (vol.dims[2] - 1) - 1.0 : 0.0;
          const double field = coef[0] * x + coef[1] * y + coef[2] * z +
                               coef[3] * x * y + coef[4] * y * z + coef[5] * x * z +
                               coef[6] * x * x + coef[7] * y * y + coef[8] * z * z;
          vol.at(i, j, k) = float(vol.at(i, j, k) * std::exp(field));
        }
    clip_volume(vol);
  }

  // 6. additive Gaussian noise
  if (rng.bernoulli(cfg.p_noise)) {
    for (float& v : vol.voxels) v = float(v + rng.normal(0.0, cfg.noise_sigma));
    clip_volume(vol);
  }

  return {std::move(vol), std::move(msk)};
}

// ---- patch sampling ---------------------------------------------------------

double patch_mask_fraction(const Mask& mask, Dims3 origin, Dims3 shape) {
  int64_t inside = 0;
  for (int i = 0; i < shape[0]; ++i)
    for (int j = 0; j < shape[1]; ++j)
      for (int k = 0; k < shape[2]; ++k)
        inside += mask.at(origin[0] + i, origin[1] + j, origin[2] + k) != 0;
  return double(inside) / double(int64_t(shape[0]) * shape[1] * shape[2]);
}

std::vector<Dims3> enumerate_valid_origins(const Mask& mask, Dims3 patch_shape,
                                           double threshold, bool strict) {
  std::vector<Dims3> out;
  for (int i = 0; i + patch_shape[0] <= mask.dims[0]; ++i)
    for (int j = 0; j + patch_shape[1] <= mask.dims[1]; ++j)
      for (int k = 0; k + patch_shape[2] <= mask.dims[2]; ++k) {
        const double f = patch_mask_fraction(mask, {i, j, k}, patch_shape);
        if (strict ? f > threshold : f >= threshold) out.push_back({i, j, k});
      }
  return out;
}

PatchSample sample_patch(const Volume& volume, const Mask& mask, Dims3 patch_shape,
                         uint64_t seed) {
  if (volume.dims != mask.dims)
    throw std::invalid_argument("sample_patch: volume/mask shape mismatch");
  for (int a = 0; a < 3; ++a)
    if (patch_shape[size_t(a)] < 1 || patch_shape[size_t(a)] > volume.dims[size_t(a)])
      throw std::invalid_argument("sample_patch: patch does not fit the volume");

  Rng rng(Rng::mix(seed, 0x9A7C4ull));
  Dims3 origin{};
  for (int attempt = 0; attempt < 1000; ++attempt) {
    for (int a = 0; a < 3; ++a)
      origin[size_t(a)] =
          int(rng.uniform_int(0, volume.dims[size_t(a)] - patch_shape[size_t(a)]));
    const double f = patch_mask_fraction(mask, origin, patch_shape);
    if (f >= kPatchOverlapThreshold)
      return {origin, extract_patch(volume, origin, patch_shape), f};
  }
  // deterministic fallback: pick uniformly among all valid origins
  const auto valid =
      enumerate_valid_origins(mask, patch_shape, kPatchOverlapThreshold, false);
  if (valid.empty())
    throw std::runtime_error("sample_patch: no origin reaches the 33% mask overlap");
  origin = valid[size_t(rng.uniform_int(0, int64_t(valid.size()) - 1))];
  return {origin, extract_patch(volume, origin, patch_shape),
          patch_mask_fraction(mask, origin, patch_shape)};
}

// ---- dataset directory ------------------------------------------------------

namespace {

void write_raw_f32(const std::string& path, std::span<const float> data) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write '" + path + "'");
  static_assert(sizeof(float) == 4);
  os.write(reinterpret_cast<const char*>(data.data()),
           std::streamsize(data.size() * sizeof(float)));
}

std::vector<float> read_raw_f32(const std::string& path, size_t count) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open '" + path + "'");
  std::vector<float> data(count);
  is.read(reinterpret_cast<char*>(data.data()), std::streamsize(count * sizeof(float)));
  if (!is) throw std::runtime_error("truncated raw file '" + path + "'");
  return data;
}

}  // namespace

std::vector<PretermCategory> Dataset::categories() const {
  std::vector<PretermCategory> out;
  out.reserve(cases.size());
  for (const CaseRecord& r : cases) out.push_back(r.data.category());
  return out;
}

void save_case(const std::string& dir, const CaseRecord& rec,
               const std::vector<Volume>& echoes) {
  fs::create_directories(dir);
  const Case& c = rec.data;

  json meta;
  meta["id"] = c.id;
  meta["ga_scan_weeks"] = c.ga_scan_weeks;
  meta["ga_birth_weeks"] = c.ga_birth_weeks;
  if (c.cervical_length_mm)
    meta["cervical_length_mm"] = *c.cervical_length_mm;
  else
    meta["cervical_length_mm"] = nullptr;
  meta["category"] = category_name(c.category());
  meta["dims"] = c.t2star.dims;
  meta["echo_times"] = rec.echo_times_ms;
  meta["seed"] = rec.seed;
  std::ofstream mf(dir + "/meta.json", std::ios::trunc);
  if (!mf) throw std::runtime_error("cannot write '" + dir + "/meta.json'");
  mf << meta.dump(2) << "\n";

  std::vector<float> echo_blob;
  echo_blob.reserve(echoes.size() * size_t(c.t2star.size()));
  for (const Volume& e : echoes)
    echo_blob.insert(echo_blob.end(), e.voxels.begin(), e.voxels.end());
  write_raw_f32(dir + "/echoes.raw", echo_blob);
  write_raw_f32(dir + "/t2star.raw", c.t2star.voxels);

  std::ofstream ms(dir + "/mask.raw", std::ios::binary | std::ios::trunc);
  if (!ms) throw std::runtime_error("cannot write '" + dir + "/mask.raw'");
  ms.write(reinterpret_cast<const char*>(c.placenta_mask.voxels.data()),
           std::streamsize(c.placenta_mask.voxels.size()));
}

CaseRecord load_case(const std::string& dir, bool load_echoes,
                     std::vector<Volume>* echoes_out) {
  std::ifstream mf(dir + "/meta.json");
  if (!mf) throw std::runtime_error("cannot open '" + dir + "/meta.json'");
  json meta = json::parse(mf);

  CaseRecord rec;
  Case& c = rec.data;
  c.id = meta.at("id").get<std::string>();
  c.ga_scan_weeks = meta.at("ga_scan_weeks").get<float>();
  c.ga_birth_weeks = meta.at("ga_birth_weeks").get<float>();
  if (!meta.at("cervical_length_mm").is_null())
    c.cervical_length_mm = meta.at("cervical_length_mm").get<float>();
  rec.echo_times_ms = meta.at("echo_times").get<std::vector<float>>();
  rec.seed = meta.at("seed").get<uint64_t>();
  const Dims3 dims = meta.at("dims").get<Dims3>();

  const size_t nvox = size_t(dims[0]) * dims[1] * dims[2];
  c.t2star.dims = dims;
  c.t2star.voxels = read_raw_f32(dir + "/t2star.raw", nvox);

  c.placenta_mask.dims = dims;
  c.placenta_mask.voxels.resize(nvox);
  std::ifstream ms(dir + "/mask.raw", std::ios::binary);
  if (!ms) throw std::runtime_error("cannot open '" + dir + "/mask.raw'");
  ms.read(reinterpret_cast<char*>(c.placenta_mask.voxels.data()),
          std::streamsize(nvox));
  if (!ms) throw std::runtime_error("truncated mask in '" + dir + "'");

  if (load_echoes && echoes_out) {
    const size_t ne = rec.echo_times_ms.size();
    auto blob = read_raw_f32(dir + "/echoes.raw", ne * nvox);
    echoes_out->clear();
    for (size_t e = 0; e < ne; ++e) {
      Volume v(dims);
      std::copy(blob.begin() + int64_t(e * nvox), blob.begin() + int64_t((e + 1) * nvox),
                v.voxels.begin());
      echoes_out->push_back(std::move(v));
    }
  }
  c.validate();
  return rec;
}

void save_splits(const std::string& dataset_dir, const Dataset& ds) {
  json j;
  auto ids_of = [&ds](const std::vector<size_t>& idx) {
    std::vector<std::string> ids;
    for (size_t i : idx) ids.push_back(ds.cases[i].data.id);
    return ids;
  };
  j["train"] = ids_of(ds.splits.train);
  j["val"] = ids_of(ds.splits.val);
  j["test"] = ids_of(ds.splits.test);
  std::ofstream os(dataset_dir + "/splits.json", std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write splits.json in '" + dataset_dir + "'");
  os << j.dump(2) << "\n";
}

Dataset load_dataset(const std::string& dataset_dir) {
  const fs::path cases_dir = fs::path(dataset_dir) / "cases";
  if (!fs::is_directory(cases_dir))
    throw std::runtime_error("dataset directory '" + dataset_dir + "' has no cases/");

  std::vector<std::string> ids;
  for (const auto& e : fs::directory_iterator(cases_dir))
    if (e.is_directory()) ids.push_back(e.path().filename().string());
  std::sort(ids.begin(), ids.end());

  Dataset ds;
  for (const std::string& id : ids)
    ds.cases.push_back(load_case((cases_dir / id).string()));

  std::ifstream sf(dataset_dir + "/splits.json");
  if (!sf) throw std::runtime_error("missing splits.json in '" + dataset_dir + "'");
  json j = json::parse(sf);
  auto fill = [&ds](const json& arr, std::vector<size_t>& out) {
    for (const auto& idj : arr) {
      const std::string id = idj.get<std::string>();
      auto it = std::find_if(ds.cases.begin(), ds.cases.end(),
                             [&id](const CaseRecord& r) { return r.data.id == id; });
      if (it == ds.cases.end())
        throw std::runtime_error("splits.json references unknown case '" + id + "'");
      out.push_back(size_t(it - ds.cases.begin()));
    }
  };
  fill(j.at("train"), ds.splits.train);
  fill(j.at("val"), ds.splits.val);
  fill(j.at("test"), ds.splits.test);
  return ds;
}

}  // namespace puuma
