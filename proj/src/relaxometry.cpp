#include "puuma/relaxometry.hpp"

#include <cmath>
#include <stdexcept>

namespace puuma {

namespace {
void validate_echo_times(std::span<const float> te) {
  if (te.size() < 2)
    throw std::invalid_argument("fit_t2star: at least 2 echoes required, got " +
                                std::to_string(te.size()));
  for (size_t i = 1; i < te.size(); ++i)
    if (!(te[i] > te[i - 1]))
      throw std::invalid_argument("fit_t2star: echo times must be strictly increasing");
}
}  // namespace

T2StarFit fit_t2star(std::span<const float> signals, std::span<const float> echo_times) {
  validate_echo_times(echo_times);
  if (signals.size() != echo_times.size())
    throw std::invalid_argument("fit_t2star: signal/echo count mismatch");

  for (float s : signals)
    if (!(s > 0.0f)) return {0.0f, true};

  // least squares slope of ln S against TE
  const size_t n = signals.size();
  double te_mean = 0.0, ls_mean = 0.0;
  for (size_t i = 0; i < n; ++i) {
    te_mean += echo_times[i];
    ls_mean += std::log(double(signals[i]));
  }
  te_mean /= double(n);
  ls_mean /= double(n);
  double num = 0.0, den = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const double dt = echo_times[i] - te_mean;
    num += dt * (std::log(double(signals[i])) - ls_mean);
    den += dt * dt;
  }
  const double slope = num / den;  // = -1/T2*
  if (slope >= 0.0) return {kT2StarMaxMs, false};  // flat or growing: clip
  const double t2 = -1.0 / slope;
  return {float(std::min(t2, double(kT2StarMaxMs))), false};
}

std::pair<Volume, std::vector<uint8_t>> fit_t2star_volume(
    const std::vector<Volume>& echoes, std::span<const float> echo_times) {
  validate_echo_times(echo_times);
  if (echoes.size() != echo_times.size())
    throw std::invalid_argument("fit_t2star_volume: echo volume count mismatch");
  for (const Volume& e : echoes)
    if (e.dims != echoes[0].dims)
      throw std::invalid_argument("fit_t2star_volume: echo volumes differ in shape");

  Volume out(echoes[0].dims);
  std::vector<uint8_t> flags(size_t(out.size()), 0);
  std::vector<float> sig(echoes.size());
  for (int64_t v = 0; v < out.size(); ++v) {
    for (size_t e = 0; e < echoes.size(); ++e) sig[e] = echoes[e].voxels[size_t(v)];
    T2StarFit fit = fit_t2star(sig, echo_times);
    out.voxels[size_t(v)] = fit.t2star_ms;
    flags[size_t(v)] = fit.flagged ? 1 : 0;
  }
  return {std::move(out), std::move(flags)};
}

}  // namespace puuma
