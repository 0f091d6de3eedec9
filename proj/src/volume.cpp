#include "puuma/volume.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace puuma {

int64_t Mask::count() const {
  int64_t n = 0;
  for (uint8_t v : voxels) n += (v != 0);
  return n;
}

float sample_trilinear(const Volume& v, double x0, double x1, double x2,
                       float outside) {
  if (x0 < -0.5 || x1 < -0.5 || x2 < -0.5 || x0 > v.dims[0] - 0.5 ||
      x1 > v.dims[1] - 0.5 || x2 > v.dims[2] - 0.5)
    return outside;
  const auto clampi = [](int x, int hi) { return std::max(0, std::min(x, hi)); };
  const int i0 = clampi(int(std::floor(x0)), v.dims[0] - 1);
  const int j0 = clampi(int(std::floor(x1)), v.dims[1] - 1);
  const int k0 = clampi(int(std::floor(x2)), v.dims[2] - 1);
  const int i1 = std::min(i0 + 1, v.dims[0] - 1);
  const int j1 = std::min(j0 + 1, v.dims[1] - 1);
  const int k1 = std::min(k0 + 1, v.dims[2] - 1);
  const double fi = std::clamp(x0 - i0, 0.0, 1.0);
  const double fj = std::clamp(x1 - j0, 0.0, 1.0);
  const double fk = std::clamp(x2 - k0, 0.0, 1.0);
  double acc = 0.0;
  const int ii[2] = {i0, i1};
  const int jj[2] = {j0, j1};
  const int kk[2] = {k0, k1};
  const double wi[2] = {1.0 - fi, fi};
  const double wj[2] = {1.0 - fj, fj};
  const double wk[2] = {1.0 - fk, fk};
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 2; ++b)
      for (int c = 0; c < 2; ++c)
        acc += wi[a] * wj[b] * wk[c] * v.at(ii[a], jj[b], kk[c]);
  return float(acc);
}

uint8_t sample_nearest(const Mask& m, double x0, double x1, double x2) {
  const int i = int(std::lround(x0));
  const int j = int(std::lround(x1));
  const int k = int(std::lround(x2));
  if (i < 0 || j < 0 || k < 0 || i >= m.dims[0] || j >= m.dims[1] || k >= m.dims[2])
    return 0;
  return m.at(i, j, k);
}

Volume resize_trilinear(const Volume& v, Dims3 target) {
  Volume out(target);
  const double s0 = double(v.dims[0]) / target[0];
  const double s1 = double(v.dims[1]) / target[1];
  const double s2 = double(v.dims[2]) / target[2];
  for (int i = 0; i < target[0]; ++i)
    for (int j = 0; j < target[1]; ++j)
      for (int k = 0; k < target[2]; ++k) {
        const double x0 = (i + 0.5) * s0 - 0.5;
        const double x1 = (j + 0.5) * s1 - 0.5;
        const double x2 = (k + 0.5) * s2 - 0.5;
        // border samples clamp rather than read `outside`
        const double c0 = std::clamp(x0, 0.0, double(v.dims[0] - 1));
        const double c1 = std::clamp(x1, 0.0, double(v.dims[1] - 1));
        const double c2 = std::clamp(x2, 0.0, double(v.dims[2] - 1));
        out.at(i, j, k) = sample_trilinear(v, c0, c1, c2);
      }
  return out;
}

Mask resize_nearest(const Mask& m, Dims3 target) {
  Mask out(target);
  const double s0 = double(m.dims[0]) / target[0];
  const double s1 = double(m.dims[1]) / target[1];
  const double s2 = double(m.dims[2]) / target[2];
  for (int i = 0; i < target[0]; ++i)
    for (int j = 0; j < target[1]; ++j)
      for (int k = 0; k < target[2]; ++k) {
        const int si = std::clamp(int(std::lround((i + 0.5) * s0 - 0.5)), 0, m.dims[0] - 1);
        const int sj = std::clamp(int(std::lround((j + 0.5) * s1 - 0.5)), 0, m.dims[1] - 1);
        const int sk = std::clamp(int(std::lround((k + 0.5) * s2 - 0.5)), 0, m.dims[2] - 1);
        out.at(i, j, k) = m.at(si, sj, sk);
      }
  return out;
}

Volume extract_patch(const Volume& v, Dims3 origin, Dims3 shape) {
  for (int a = 0; a < 3; ++a)
    if (origin[size_t(a)] < 0 || origin[size_t(a)] + shape[size_t(a)] > v.dims[size_t(a)])
      throw std::invalid_argument("extract_patch: patch exceeds volume bounds");
  Volume out(shape);
  for (int i = 0; i < shape[0]; ++i)
    for (int j = 0; j < shape[1]; ++j)
      for (int k = 0; k < shape[2]; ++k)
        out.at(i, j, k) = v.at(origin[0] + i, origin[1] + j, origin[2] + k);
  return out;
}

Tensor volume_to_tensor(const Volume& v) {
  return Tensor::from({1, v.dims[0], v.dims[1], v.dims[2]}, v.voxels);
}

Tensor mask_to_tensor(const Mask& m) {
  std::vector<float> data(m.voxels.size());
  for (size_t i = 0; i < data.size(); ++i) data[i] = m.voxels[i] ? 1.0f : 0.0f;
  return Tensor::from({1, m.dims[0], m.dims[1], m.dims[2]}, std::move(data));
}

}  // namespace puuma
