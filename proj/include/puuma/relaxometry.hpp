#pragma once
// Mono-exponential T2* fitting from multi-echo magnitudes:
// log-linear least squares of ln S(TE) = ln S0 - TE/T2*, clipped to [0,300] ms.

#include <span>
#include <vector>

#include "puuma/volume.hpp"

namespace puuma {

inline constexpr float kT2StarMaxMs = 300.0f;

struct T2StarFit {
  float t2star_ms = 0.0f;
  bool flagged = false;  // non-positive signal seen; value forced to 0
};

// signals: one value per echo; echo_times strictly increasing, >= 2 entries
T2StarFit fit_t2star(std::span<const float> signals, std::span<const float> echo_times);

// per-voxel fit over a stack of echo volumes; returns the map and QC flags
std::pair<Volume, std::vector<uint8_t>> fit_t2star_volume(
    const std::vector<Volume>& echoes, std::span<const float> echo_times);

}  // namespace puuma
