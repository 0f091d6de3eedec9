#include "puuma/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "puuma/relaxometry.hpp"

namespace puuma {

std::vector<float> PhantomSpec::default_echo_times() {
  // number of echoes and times are not published; 5 echoes over 13..180 ms
  std::vector<float> te(5);
  for (int i = 0; i < 5; ++i) te[size_t(i)] = float(13.0 + (180.0 - 13.0) * i / 4.0);
  return te;
}

void PhantomSpec::validate() const {
  for (int e : volume_shape)
    if (e < 8) throw std::invalid_argument("phantom: volume extent too small");
  if (echo_times_ms.size() < 2)
    throw std::invalid_argument("phantom: need at least 2 echo times");
  for (size_t i = 1; i < echo_times_ms.size(); ++i)
    if (!(echo_times_ms[i] > echo_times_ms[i - 1]))
      throw std::invalid_argument("phantom: echo times must be strictly increasing");
  if (!(frac_lo >= 0.02 && frac_hi <= 0.25 && frac_lo < frac_hi))
    throw std::invalid_argument("phantom: placental fraction band outside [0.02,0.25]");
  if (!(uterus_ax_min > 0.1 && uterus_ax_max < 0.5 && uterus_ax_min <= uterus_ax_max))
    throw std::invalid_argument("phantom: bad uterus semi-axis range");
  if (noise_sigma < 0) throw std::invalid_argument("phantom: negative noise sigma");
}

namespace {

struct Vec3 {
  double x[3];
};

Vec3 random_unit(Rng& rng) {
  // rejection-free: normal deviates normalized
  Vec3 v{{rng.normal(), rng.normal(), rng.normal()}};
  double n = std::sqrt(v.x[0] * v.x[0] + v.x[1] * v.x[1] + v.x[2] * v.x[2]);
  if (n < 1e-9) return {{1.0, 0.0, 0.0}};
  for (double& c : v.x) c /= n;
  return v;
}

}  // namespace

std::array<int, 4> allocate_categories(int n_cases, const std::array<double, 4>& mix) {
  double total = mix[0] + mix[1] + mix[2] + mix[3];
  if (!(total > 0)) throw std::invalid_argument("category mix must be positive");
  std::array<int, 4> out{};
  double fracs[4];
  int assigned = 0;
  for (int c = 0; c < 4; ++c) {
    const double q = double(n_cases) * mix[size_t(c)] / total;
    out[size_t(c)] = int(std::floor(q + 1e-9));
    fracs[c] = q - out[size_t(c)];
    assigned += out[size_t(c)];
  }
  int leftover = n_cases - assigned;
  while (leftover > 0) {
    int best = -1;
    for (int c = 0; c < 4; ++c)
      if (best < 0 || fracs[c] > fracs[best] + 1e-12) best = c;
    out[size_t(best)] += 1;
    fracs[best] = -1.0;
    --leftover;
  }
  return out;
}

PhantomResult generate_phantom(const PhantomSpec& spec, uint64_t seed,
                               double ga_scan_weeks, double ga_birth_weeks,
                               const std::string& id) {
  spec.validate();
  if (!(ga_scan_weeks >= 15.0 && ga_scan_weeks < 37.0))
    throw std::invalid_argument("phantom: ga_scan outside [15,37)");
  if (!(ga_birth_weeks >= ga_scan_weeks))
    throw std::invalid_argument("phantom: ga_birth before ga_scan");

  Rng rng(Rng::mix(seed, 0xFA47u));
  const Dims3 dims = spec.volume_shape;
  const int64_t nvox = int64_t(dims[0]) * dims[1] * dims[2];

  // geometry draws (fixed order for determinism)
  double center[3], semi[3];
  for (int a = 0; a < 3; ++a) {
    center[a] = 0.5 * (dims[size_t(a)] - 1) +
                rng.uniform(-spec.center_jitter, spec.center_jitter) * dims[size_t(a)];
    semi[a] = rng.uniform(spec.uterus_ax_min, spec.uterus_ax_max) * dims[size_t(a)];
  }
  const Vec3 pdir = random_unit(rng);
  const double lob_phase = rng.uniform(0.0, 6.283185307179586);
  const double frac_jitter = rng.uniform(0.9, 1.1);

  // texture field: three low-frequency sinusoids
  double tex_k[3][3], tex_ph[3];
  for (int s = 0; s < 3; ++s) {
    for (int a = 0; a < 3; ++a)
      tex_k[s][a] = rng.uniform(0.5, 1.5) * 6.283185307179586 / dims[size_t(a)] *
                    (rng.bernoulli(0.5) ? 1.0 : -1.0);
    tex_ph[s] = rng.uniform(0.0, 6.283185307179586);
  }

  // per-voxel normalized radius and lobulated polar angle around pdir
  std::vector<float> rho(size_t(nvox), 0.0f);
  std::vector<float> angle_eff(size_t(nvox), 0.0f);
  // orthonormal frame around the placenta direction
  Vec3 e1 = std::abs(pdir.x[0]) < 0.9 ? Vec3{{1, 0, 0}} : Vec3{{0, 1, 0}};
  {
    const double d = e1.x[0] * pdir.x[0] + e1.x[1] * pdir.x[1] + e1.x[2] * pdir.x[2];
    for (int a = 0; a < 3; ++a) e1.x[a] -= d * pdir.x[a];
    double n = std::sqrt(e1.x[0] * e1.x[0] + e1.x[1] * e1.x[1] + e1.x[2] * e1.x[2]);
    for (double& c : e1.x) c /= n;
  }
  const Vec3 e2{{pdir.x[1] * e1.x[2] - pdir.x[2] * e1.x[1],
                 pdir.x[2] * e1.x[0] - pdir.x[0] * e1.x[2],
                 pdir.x[0] * e1.x[1] - pdir.x[1] * e1.x[0]}};

  for (int i = 0; i < dims[0]; ++i)
    for (int j = 0; j < dims[1]; ++j)
      for (int k = 0; k < dims[2]; ++k) {
        const int64_t v = (int64_t(i) * dims[1] + j) * dims[2] + k;
        const double d[3] = {(i - center[0]) / semi[0], (j - center[1]) / semi[1],
                             (k - center[2]) / semi[2]};
        const double r = std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
        rho[size_t(v)] = float(r);
        double ct = 0.0, u1 = 0.0, u2 = 0.0;
        if (r > 1e-9) {
          for (int a = 0; a < 3; ++a) {
            ct += d[a] / r * pdir.x[a];
            u1 += d[a] * e1.x[a];
            u2 += d[a] * e2.x[a];
          }
        } else {
          ct = 1.0;
        }
        const double theta = std::acos(std::clamp(ct, -1.0, 1.0));
        const double phi = std::atan2(u2, u1);
        const double wobble =
            1.0 + spec.lobularity * std::sin(3.0 * phi + lob_phase);
        angle_eff[size_t(v)] = float(theta / std::max(wobble, 0.2));
      }

  // pick the angular cap so the placental fraction hits its GA target
  const double ga_t = std::clamp((ga_birth_weeks - 24.0) / 18.0, 0.0, 1.0);
  double target_frac =
      std::clamp((spec.frac_lo + (spec.frac_hi - spec.frac_lo) * ga_t) * frac_jitter,
                 0.025, 0.22);
  std::vector<float> shell_angles;
  const double rho_lo = 1.0 - spec.placenta_thickness, rho_hi = 0.97;
  for (int64_t v = 0; v < nvox; ++v)
    if (rho[size_t(v)] >= rho_lo && rho[size_t(v)] <= rho_hi)
      shell_angles.push_back(angle_eff[size_t(v)]);
  if (shell_angles.empty()) throw std::runtime_error("phantom: degenerate uterus shell");
  int64_t want = int64_t(std::llround(target_frac * double(nvox)));
  want = std::clamp<int64_t>(want, 8, int64_t(shell_angles.size()));
  std::nth_element(shell_angles.begin(), shell_angles.begin() + (want - 1),
                   shell_angles.end());
  const float angle_cut = shell_angles[size_t(want - 1)];

  Mask mask(dims);
  for (int64_t v = 0; v < nvox; ++v)
    mask.voxels[size_t(v)] = (rho[size_t(v)] >= rho_lo && rho[size_t(v)] <= rho_hi &&
                              angle_eff[size_t(v)] <= angle_cut)
                                 ? 1
                                 : 0;

  // ground-truth T2* and proton density per tissue
  const double mean_placenta_t2s = spec.t2s_base +
                                   spec.t2s_birth_slope * (ga_birth_weeks - 37.0) +
                                   spec.t2s_scan_slope * (ga_scan_weeks - 30.0);
  const double shortfall = std::max(0.0, 37.0 - ga_birth_weeks);
  const double tex_amp = spec.texture_base + spec.texture_shortfall * shortfall;

  Volume truth(dims);
  Volume s0(dims);
  const double body_scale = 1.25;  // body ellipsoid margin around the uterus
  for (int i = 0; i < dims[0]; ++i)
    for (int j = 0; j < dims[1]; ++j)
      for (int k = 0; k < dims[2]; ++k) {
        const int64_t v = (int64_t(i) * dims[1] + j) * dims[2] + k;
        const double r = rho[size_t(v)];
        double t2s, pd;
        if (mask.voxels[size_t(v)]) {
          double tex = 0.0;
          for (int s = 0; s < 3; ++s)
            tex += std::sin(tex_k[s][0] * i + tex_k[s][1] * j + tex_k[s][2] * k +
                            tex_ph[s]);
          t2s = std::clamp(mean_placenta_t2s + tex_amp * tex / 3.0, 15.0, 250.0);
          pd = 100.0;
        } else if (r <= rho_lo) {
          t2s = 160.0;  // amniotic fluid
          pd = 110.0;
        } else if (r <= 1.0) {
          t2s = 70.0;  // uterine wall
          pd = 90.0;
        } else if (r <= body_scale) {
          t2s = 25.0;  // maternal tissue
          pd = 80.0;
        } else {
          t2s = 0.0;  // air
          pd = 0.0;
        }
        truth.voxels[size_t(v)] = float(t2s);
        s0.voxels[size_t(v)] = float(pd);
      }

  // simulate multi-echo magnitudes and fit the map the same way the real
  // pipeline does
  std::vector<Volume> echoes;
  echoes.reserve(spec.echo_times_ms.size());
  for (float te : spec.echo_times_ms) {
    Volume e(dims);
    for (int64_t v = 0; v < nvox; ++v) {
      const double t2s = truth.voxels[size_t(v)];
      const double amp = t2s > 0.0 ? s0.voxels[size_t(v)] * std::exp(-double(te) / t2s)
                                   : 0.0;
      e.voxels[size_t(v)] = float(amp);
    }
    echoes.push_back(std::move(e));
  }
  if (spec.noise_sigma > 0.0) {
    for (Volume& e : echoes)
      for (float& v : e.voxels) v = float(v + rng.normal(0.0, spec.noise_sigma));
  }

  auto [fitted, flags] = fit_t2star_volume(echoes, spec.echo_times_ms);

  PhantomResult out;
  out.rec.seed = seed;
  out.rec.echo_times_ms = spec.echo_times_ms;
  out.echoes = std::move(echoes);
  out.qc_flags = std::move(flags);
  Case& c = out.rec.data;
  c.id = id;
  c.ga_scan_weeks = float(ga_scan_weeks);
  c.ga_birth_weeks = float(ga_birth_weeks);
  // shorter cervix goes with earlier birth; synthetic-only relation
  c.cervical_length_mm = float(
      std::clamp(8.0 + 0.9 * ga_birth_weeks + rng.normal(0.0, 2.0), 5.0, 55.0));
  c.t2star = std::move(fitted);
  c.placenta_mask = std::move(mask);
  c.validate();

  const double frac = double(c.placenta_mask.count()) / double(nvox);
  if (frac < 0.02 || frac > 0.25)
    throw std::runtime_error("phantom: placental fraction " + std::to_string(frac) +
                             " outside [0.02,0.25]");
  return out;
}

PhantomResult generate_cohort_case(const PhantomSpec& spec, uint64_t master_seed,
                                   int index, PretermCategory category) {
  Rng rng(Rng::mix(master_seed, 0xC0407ull + uint64_t(index)));
  double lo = 37.0, hi = 42.0;
  switch (category) {
    case PretermCategory::EPT: lo = 24.0; hi = 27.9; break;
    case PretermCategory::VPT: lo = 28.0; hi = 31.9; break;
    case PretermCategory::LPT: lo = 32.0; hi = 36.9; break;
    case PretermCategory::Term: lo = 37.0; hi = 42.0; break;
  }
  const double ga_birth = rng.uniform(lo, hi);
  const double ga_scan = rng.uniform(15.0, std::min(ga_birth - 0.1, 36.5));

  char id[32];
  std::snprintf(id, sizeof id, "case_%04d", index);
  return generate_phantom(spec, Rng::mix(master_seed, uint64_t(index)), ga_scan,
                          ga_birth, id);
}

}  // namespace puuma
