#pragma once
// Synthetic whole-uterus phantoms standing in for the private cohort.
// A case is a uterus ellipsoid with an attached lobulated placental shell;
// gestational outcomes are encoded in the placenta: volume fraction grows
// with GA at birth, mean T2* falls as birth moves earlier (larger 37-week
// shortfall), and texture heterogeneity rises with the shortfall. Multi-echo
// magnitudes are simulated so the T2* map is produced by the actual fit.

#include <array>
#include <string>
#include <vector>

#include "puuma/dataset.hpp"

namespace puuma {

struct PhantomSpec {
  Dims3 volume_shape{36, 36, 18};

  // uterus ellipsoid; semi-axes as fractions of each extent
  double uterus_ax_min = 0.32, uterus_ax_max = 0.44;
  double center_jitter = 0.04;

  // placenta shell: radial band [1-thickness, 0.97] of normalized radius,
  // angular cap around a random direction, lobulated boundary
  double placenta_thickness = 0.38;
  double lobularity = 0.25;
  double frac_lo = 0.035, frac_hi = 0.11;  // target volume fraction band

  // signal model (ms); mean placental T2* at ga_birth=37, ga_scan=30 is
  // t2s_base, sloped per week in both GAs
  double t2s_base = 60.0;
  double t2s_birth_slope = 1.5;
  double t2s_scan_slope = -1.0;
  double texture_base = 3.0;        // smooth field amplitude at term
  double texture_shortfall = 0.5;   // extra amplitude per week before 37

  double noise_sigma = 1.0;         // additive echo noise (a.u.)
  std::vector<float> echo_times_ms = default_echo_times();

  static std::vector<float> default_echo_times();  // 5 echoes spanning 13..180 ms
  void validate() const;
};

struct PhantomResult {
  CaseRecord rec;
  std::vector<Volume> echoes;
  std::vector<uint8_t> qc_flags;  // 1 where the fit saw non-positive signal
};

// Deterministic in (spec, seed, ga_scan, ga_birth).
PhantomResult generate_phantom(const PhantomSpec& spec, uint64_t seed,
                               double ga_scan_weeks, double ga_birth_weeks,
                               const std::string& id);

// Category counts for an n-case cohort by largest remainder over the mix.
std::array<int, 4> allocate_categories(int n_cases, const std::array<double, 4>& mix);

// paper-like imbalance: (20,30,60,290)/400
inline constexpr std::array<double, 4> kPaperImbalanceMix{0.05, 0.075, 0.15, 0.725};

// Case `index` of the cohort: draws GA at birth inside the category band and
// GA at scan in [15, min(birth, 36.5)], then generates the phantom.
PhantomResult generate_cohort_case(const PhantomSpec& spec, uint64_t master_seed,
                                   int index, PretermCategory category);

}  // namespace puuma
