#pragma once
// Cases, preterm categories, stratified splitting, class-balanced sampling,
// augmentation, and placenta-overlap patch sampling.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "puuma/rng.hpp"
#include "puuma/volume.hpp"

namespace puuma {

enum class PretermCategory { EPT = 0, VPT = 1, LPT = 2, Term = 3 };
inline constexpr int kNumCategories = 4;

const char* category_name(PretermCategory c);
PretermCategory category_from_name(const std::string& name);

// EPT < 28, VPT [28,32), LPT [32,37), Term >= 37. Half-open boundaries so the
// categories partition the axis. ga must be positive.
PretermCategory categorize(double ga_birth_weeks);

struct Case {
  std::string id;
  float ga_scan_weeks = 0.0f;
  float ga_birth_weeks = 0.0f;
  std::optional<float> cervical_length_mm;
  Volume t2star;  // ms, clipped to [0,300]
  Mask placenta_mask;

  PretermCategory category() const { return categorize(ga_birth_weeks); }
  void validate() const;  // throws on invariant violations
};

// ---- stratified split -------------------------------------------------------

struct SplitIndices {
  std::vector<size_t> train, val, test;
};

// Largest-remainder 8:1:1 allocation within every category; ties go to the
// earlier split (train, val, test). Deterministic shuffle per seed; the three
// parts partition the input indices exactly.
SplitIndices stratified_split(std::span<const PretermCategory> categories,
                              uint64_t seed);

// ---- balanced sampling ------------------------------------------------------

// Draw weight of case i is 1/count(category(i)): each category is drawn with
// frequency 1/4 in expectation.
class BalancedSampler {
 public:
  BalancedSampler(std::span<const PretermCategory> categories, uint64_t seed);
  size_t next();

 private:
  std::vector<double> cumulative_;
  Rng rng_;
};

// ---- augmentation -----------------------------------------------------------

struct AugmentConfig {
  // application probability per augmentation
  double p_affine = 0.3, p_elastic = 0.3, p_zoom = 0.3;
  double p_contrast = 0.3, p_bias = 0.3, p_noise = 0.3;

  double rot_max_deg = 10.0;
  double translate_max_vox = 2.0;
  int elastic_grid = 4;
  double elastic_max_vox = 2.0;
  double zoom_min = 0.9, zoom_max = 1.1;
  double contrast_min = 0.8, contrast_max = 1.25;
  double bias_amp = 0.08;
  double noise_sigma = 5.0;

  static AugmentConfig none() {
    AugmentConfig c;
    c.p_affine = c.p_elastic = c.p_zoom = c.p_contrast = c.p_bias = c.p_noise = 0.0;
    return c;
  }
};

// Six augmentations applied independently with their configured
// probabilities. Spatial transforms move volume (trilinear) and mask
// (nearest) identically; intensity transforms leave the mask untouched.
// Output intensities stay clipped to [0,300]. All-probabilities-zero is the
// bit-exact identity.
std::pair<Volume, Mask> augment(const Volume& volume, const Mask& mask,
                                uint64_t seed, const AugmentConfig& config);

// ---- patch sampling ---------------------------------------------------------

inline constexpr double kPatchOverlapThreshold = 0.33;

struct PatchSample {
  Dims3 origin{0, 0, 0};
  Volume patch;
  double mask_fraction = 0.0;
};

double patch_mask_fraction(const Mask& mask, Dims3 origin, Dims3 shape);

// Uniform over origins whose patch covers >= 33% placental mask. Rejection
// sampling with a deterministic exhaustive-enumeration fallback after 1000
// rejects. Throws when no origin qualifies.
PatchSample sample_patch(const Volume& volume, const Mask& mask, Dims3 patch_shape,
                         uint64_t seed);

// all origins satisfying fraction >= threshold (or > threshold when strict)
std::vector<Dims3> enumerate_valid_origins(const Mask& mask, Dims3 patch_shape,
                                           double threshold, bool strict);

// ---- dataset directory ------------------------------------------------------
// cases/<id>/meta.json, echoes.raw (f32 LE, echo-major), t2star.raw (f32),
// mask.raw (u8); splits.json at the top level.

struct CaseRecord {
  Case data;
  std::vector<float> echo_times_ms;
  uint64_t seed = 0;
};

struct Dataset {
  std::vector<CaseRecord> cases;
  SplitIndices splits;

  const Case& at(size_t i) const { return cases[i].data; }
  std::vector<PretermCategory> categories() const;
};

void save_case(const std::string& dir, const CaseRecord& rec,
               const std::vector<Volume>& echoes);
CaseRecord load_case(const std::string& dir, bool load_echoes = false,
                     std::vector<Volume>* echoes_out = nullptr);

void save_splits(const std::string& dataset_dir, const Dataset& ds);
Dataset load_dataset(const std::string& dataset_dir);

}  // namespace puuma
