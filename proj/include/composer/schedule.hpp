#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "composer/errors.hpp"

namespace composer {

enum class ScheduleKind { kCosine, kLinear };

inline const char* schedule_kind_name(ScheduleKind k) {
  return k == ScheduleKind::kCosine ? "cosine" : "linear";
}

inline ScheduleKind parse_schedule_kind(const std::string& s) {
  if (s == "cosine") return ScheduleKind::kCosine;
  if (s == "linear") return ScheduleKind::kLinear;
  throw ContractError("unknown schedule kind: " + s);
}

// Variance-preserving noise schedule: tables a_t, sigma_t for t = 0..T with
// a_t^2 + sigma_t^2 = 1.
struct NoiseSchedule {
  int64_t steps = 0;  // T
  std::vector<double> a;
  std::vector<double> sigma;
  ScheduleKind kind = ScheduleKind::kCosine;

  double a_at(int64_t t) const { return a[static_cast<size_t>(t)]; }
  double sigma_at(int64_t t) const { return sigma[static_cast<size_t>(t)]; }

  // Checks the full type invariant set. The linear beta ramp is pinned to
  // fixed endpoints, so sigma_T >= 0.999 only holds for T >= ~620; callers
  // constructing short linear schedules (tests) skip the endpoint check.
  void validate(bool check_endpoints = true) const {
    if (static_cast<int64_t>(a.size()) != steps + 1 || sigma.size() != a.size())
      throw ContractError("schedule: table length != T+1");
    for (int64_t t = 0; t <= steps; ++t) {
      double vp = a[t] * a[t] + sigma[t] * sigma[t];
      if (std::abs(vp - 1.0) > 1e-6)
        throw ContractError("schedule: not variance preserving at t=" +
                            std::to_string(t));
      if (t > 0 && (a[t] > a[t - 1] || sigma[t] < sigma[t - 1]))
        throw ContractError("schedule: monotonicity violated at t=" +
                            std::to_string(t));
    }
    if (check_endpoints) {
      if (a[0] < 0.999) throw ContractError("schedule: a_0 < 0.999");
      if (sigma[static_cast<size_t>(steps)] < 0.999)
        throw ContractError("schedule: sigma_T < 0.999");
    }
  }
};

namespace detail {

// Exact cosine alpha-bar before flooring, s = 0.008.
inline double cosine_alpha_bar(double u) {
  constexpr double s = 0.008;
  double f = std::cos(((u + s) / (1.0 + s)) * (M_PI / 2.0));
  double f0 = std::cos((s / (1.0 + s)) * (M_PI / 2.0));
  return (f * f) / (f0 * f0);
}

}  // namespace detail

// Cosine: alpha_bar(u) = cos^2(((u+s)/(1+s))*pi/2) / cos^2((s/(1+s))*pi/2),
// s = 0.008, u = t/T. The raw formula reaches alpha_bar = 0 at u = 1, which
// makes the deterministic sampler's x0 estimate singular at t = T, so
// alpha_bar is floored at 1e-3 (sigma_T = sqrt(1 - 1e-3) ~ 0.9995 still
// clears the near-pure-noise invariant).
// Linear: beta ramps 1e-4 -> 2e-2 over T steps, alpha_bar_t = prod(1 - beta_i).
inline NoiseSchedule make_schedule(ScheduleKind kind, int64_t steps) {
  if (steps < 2) throw ContractError("make_schedule: T must be >= 2");
  NoiseSchedule s;
  s.steps = steps;
  s.kind = kind;
  s.a.resize(static_cast<size_t>(steps + 1));
  s.sigma.resize(static_cast<size_t>(steps + 1));
  if (kind == ScheduleKind::kCosine) {
    constexpr double kFloor = 1e-3;
    for (int64_t t = 0; t <= steps; ++t) {
      double ab = detail::cosine_alpha_bar(static_cast<double>(t) /
                                           static_cast<double>(steps));
      ab = std::max(ab, kFloor);
      if (t == 0) ab = 1.0;  // u = 0 normalizes to 1 exactly
      s.a[t] = std::sqrt(ab);
      s.sigma[t] = std::sqrt(1.0 - ab);
    }
  } else {
    double ab = 1.0;
    s.a[0] = 1.0;
    s.sigma[0] = 0.0;
    for (int64_t t = 1; t <= steps; ++t) {
      double beta = 1e-4 + (2e-2 - 1e-4) * static_cast<double>(t - 1) /
                               static_cast<double>(steps - 1);
      ab *= (1.0 - beta);
      s.a[t] = std::sqrt(ab);
      s.sigma[t] = std::sqrt(1.0 - ab);
    }
  }
  return s;
}

// Evenly subsampled step grid tau_0 = 0 < ... < tau_steps = T,
// tau_i = round(i*T/steps). steps = T yields the full trajectory.
inline std::vector<int64_t> step_grid(const NoiseSchedule& s, int64_t steps) {
  if (steps < 1 || steps > s.steps)
    throw ContractError("step_grid: need 1 <= steps <= T");
  std::vector<int64_t> tau(static_cast<size_t>(steps + 1));
  for (int64_t i = 0; i <= steps; ++i)
    tau[static_cast<size_t>(i)] = static_cast<int64_t>(std::llround(
        static_cast<double>(i) * static_cast<double>(s.steps) /
        static_cast<double>(steps)));
  for (int64_t i = 1; i <= steps; ++i)
    if (tau[i] <= tau[i - 1])
      throw ContractError("step_grid: grid not strictly increasing");
  return tau;
}

}  // namespace composer
