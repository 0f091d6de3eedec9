#pragma once
// Dense 3D scalar fields and binary masks at native phantom resolution.
// Index order (i,j,k) matches shape {d0,d1,d2}, k fastest.

#include <array>
#include <cstdint>
#include <vector>

#include "puuma/tensor.hpp"

namespace puuma {

using Dims3 = std::array<int, 3>;

struct Volume {
  Dims3 dims{0, 0, 0};
  std::vector<float> voxels;

  Volume() = default;
  explicit Volume(Dims3 d, float fill = 0.0f)
      : dims(d), voxels(size_t(d[0]) * d[1] * d[2], fill) {}

  int64_t size() const { return int64_t(dims[0]) * dims[1] * dims[2]; }
  int64_t index(int i, int j, int k) const {
    return (int64_t(i) * dims[1] + j) * dims[2] + k;
  }
  float& at(int i, int j, int k) { return voxels[size_t(index(i, j, k))]; }
  float at(int i, int j, int k) const { return voxels[size_t(index(i, j, k))]; }
};

struct Mask {
  Dims3 dims{0, 0, 0};
  std::vector<uint8_t> voxels;

  Mask() = default;
  explicit Mask(Dims3 d, uint8_t fill = 0)
      : dims(d), voxels(size_t(d[0]) * d[1] * d[2], fill) {}

  int64_t size() const { return int64_t(dims[0]) * dims[1] * dims[2]; }
  int64_t index(int i, int j, int k) const {
    return (int64_t(i) * dims[1] + j) * dims[2] + k;
  }
  uint8_t& at(int i, int j, int k) { return voxels[size_t(index(i, j, k))]; }
  uint8_t at(int i, int j, int k) const { return voxels[size_t(index(i, j, k))]; }
  int64_t count() const;
};

// center-aligned resampling (align_corners=false convention);
// out-of-range samples clamp to the border
Volume resize_trilinear(const Volume& v, Dims3 target);
Mask resize_nearest(const Mask& m, Dims3 target);

// trilinear sample at continuous (x0,x1,x2) in voxel coordinates;
// outside the volume returns `outside`
float sample_trilinear(const Volume& v, double x0, double x1, double x2,
                       float outside = 0.0f);
uint8_t sample_nearest(const Mask& m, double x0, double x1, double x2);

Volume extract_patch(const Volume& v, Dims3 origin, Dims3 shape);

// [1,d0,d1,d2] channels-first tensors for the networks
Tensor volume_to_tensor(const Volume& v);
Tensor mask_to_tensor(const Mask& m);

}  // namespace puuma
