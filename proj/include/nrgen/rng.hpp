#pragma once

#include "nrgen/statespace.hpp"

#include <cstdint>
#include <random>

namespace nrgen {

inline constexpr std::uint64_t kDefaultSeed = 20240611ULL;

// Independent reproducible stream for a (seed, channel, index) triple.
inline std::mt19937_64 make_stream(std::uint64_t seed, std::uint64_t channel,
                                   std::uint64_t index = 0) {
  auto lo = [](std::uint64_t v) { return static_cast<std::uint32_t>(v & 0xffffffffULL); };
  auto hi = [](std::uint64_t v) { return static_cast<std::uint32_t>(v >> 32); };
  std::seed_seq sq{lo(seed), hi(seed), lo(channel), hi(channel), lo(index), hi(index)};
  return std::mt19937_64(sq);
}

inline Vec normal_vector(std::mt19937_64& rng, int n, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, 1.0);
  Vec v(n);
  for (int i = 0; i < n; ++i) v[i] = scale * nd(rng);
  return v;
}

// rho proportional to base * exp(amplitude * N(0,1)) per state, normalized.
inline Density random_density(std::mt19937_64& rng, const Density& base, double amplitude) {
  Vec v = base.values;
  std::normal_distribution<double> nd(0.0, 1.0);
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] *= std::exp(amplitude * nd(rng));
  return normalize(Density(base.space, v));
}

// rho = base * exp(amplitude * sum_m c_m sin(k_m . z + phase_m)), normalized.
// Low-frequency modes on grids; falls back to random_density on finite spaces.
inline Density smooth_random_density(std::mt19937_64& rng, const Density& base, double amplitude,
                                     int modes = 3) {
  const auto& s = *base.space;
  if (s.kind() != StateSpace::Kind::grid) return random_density(rng, base, amplitude);
  const int d = s.dim();
  std::normal_distribution<double> nd(0.0, 1.0);
  std::uniform_real_distribution<double> ph(0.0, 2.0 * M_PI);
  std::vector<std::vector<double>> k(modes, std::vector<double>(d));
  std::vector<double> c(modes), phase(modes);
  for (int m = 0; m < modes; ++m) {
    for (int j = 0; j < d; ++j) k[m][j] = 0.6 * nd(rng);
    c[m] = nd(rng) / std::sqrt(static_cast<double>(modes));
    phase[m] = ph(rng);
  }
  Vec v = base.values;
  for (int i = 0; i < s.size(); ++i) {
    double e = 0.0;
    for (int m = 0; m < modes; ++m) {
      double a = phase[m];
      for (int j = 0; j < d; ++j) a += k[m][j] * s.coord(i, j);
      e += c[m] * std::sin(a);
    }
    v[i] *= std::exp(amplitude * e);
  }
  return normalize(Density(base.space, v));
}

}  // namespace nrgen
