#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "maniflow/rng.hpp"

// Timestep sampling strategies for the flow-matching branch and the
// discrete-time / step-size sampling used by the consistency branch.

namespace maniflow {

struct SpecError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class TimeSamplerKind { kUniform, kBeta, kLogitNormal, kMode, kCosmap };

inline const char* time_sampler_name(TimeSamplerKind k) {
  switch (k) {
    case TimeSamplerKind::kUniform: return "uniform";
    case TimeSamplerKind::kBeta: return "beta";
    case TimeSamplerKind::kLogitNormal: return "lognorm";
    case TimeSamplerKind::kMode: return "mode";
    case TimeSamplerKind::kCosmap: return "cosmap";
  }
  return "?";
}

struct TimeSamplerSpec {
  TimeSamplerKind kind = TimeSamplerKind::kUniform;
  double alpha = 1.0;      // Beta
  double beta = 1.5;       // Beta
  double cutoff = 0.999;   // Beta cutoff s
  double location = 0.0;   // logit-normal m
  double scale = 1.0;      // logit-normal s
  double mode_scale = 1.29;

  static TimeSamplerSpec uniform() { return {}; }
  static TimeSamplerSpec beta_sampler(double alpha = 1.0, double beta = 1.5, double cutoff = 0.999) {
    TimeSamplerSpec s;
    s.kind = TimeSamplerKind::kBeta;
    s.alpha = alpha;
    s.beta = beta;
    s.cutoff = cutoff;
    s.validate();
    return s;
  }
  static TimeSamplerSpec logit_normal(double m = 0.0, double scale = 1.0) {
    TimeSamplerSpec s;
    s.kind = TimeSamplerKind::kLogitNormal;
    s.location = m;
    s.scale = scale;
    s.validate();
    return s;
  }
  static TimeSamplerSpec mode(double scale = 1.29) {
    TimeSamplerSpec s;
    s.kind = TimeSamplerKind::kMode;
    s.mode_scale = scale;
    s.validate();
    return s;
  }
  static TimeSamplerSpec cosmap() {
    TimeSamplerSpec s;
    s.kind = TimeSamplerKind::kCosmap;
    return s;
  }

  void validate() const {
    if (kind == TimeSamplerKind::kBeta) {
      if (!(alpha > 0.0)) throw SpecError("time sampler: beta alpha must be > 0");
      if (!(beta > 0.0)) throw SpecError("time sampler: beta beta must be > 0");
      if (!(cutoff > 0.0 && cutoff <= 1.0)) throw SpecError("time sampler: beta cutoff must be in (0,1]");
    }
    if (kind == TimeSamplerKind::kLogitNormal && !(scale > 0.0))
      throw SpecError("time sampler: logit-normal scale must be > 0");
    if (kind == TimeSamplerKind::kMode && !std::isfinite(mode_scale))
      throw SpecError("time sampler: mode scale must be finite");
  }
};

// t = 1 - u - s*(cos^2(pi*u/2) - 1 + u), clamped to [0,1]
inline double mode_transform(double u, double s) {
  const double c = std::cos(1.5707963267948966 * u);
  const double t = 1.0 - u - s * (c * c - 1.0 + u);
  return std::clamp(t, 0.0, 1.0);
}

// t = 1 - 1/(tan(pi*u/2) + 1), clamped to [0,1]
inline double cosmap_transform(double u) {
  const double t = 1.0 - 1.0 / (std::tan(1.5707963267948966 * u) + 1.0);
  return std::clamp(t, 0.0, 1.0);
}

inline double sample_t_one(const TimeSamplerSpec& spec, RngStream& rng) {
  switch (spec.kind) {
    case TimeSamplerKind::kUniform:
      return rng.next_double();
    case TimeSamplerKind::kBeta:
      return spec.cutoff * rng.next_beta(spec.alpha, spec.beta);
    case TimeSamplerKind::kLogitNormal: {
      const double z = spec.location + spec.scale * rng.next_gaussian();
      return 1.0 / (1.0 + std::exp(-z));
    }
    case TimeSamplerKind::kMode:
      return mode_transform(rng.next_double(), spec.mode_scale);
    case TimeSamplerKind::kCosmap:
      return cosmap_transform(rng.next_double());
  }
  return 0.0;
}

inline std::vector<double> sample_t(const TimeSamplerSpec& spec, RngStream& rng, int n) {
  if (n < 1) throw SpecError("sample_t: n must be >= 1");
  spec.validate();
  std::vector<double> out(static_cast<size_t>(n));
  for (auto& t : out) t = sample_t_one(spec, rng);
  return out;
}

enum class DtMode { kContinuous, kDiscrete };

struct ConsistencyTimeSpec {
  int grid_size = 100;  // T
  DtMode dt_mode = DtMode::kContinuous;

  void validate() const {
    if (grid_size < 2) throw SpecError("consistency time: grid size T must be >= 2");
  }
};

// t uniform over {0, 1/T, ..., (T-1)/T}; never returns 1
inline std::vector<double> sample_t_discrete(const ConsistencyTimeSpec& spec, RngStream& rng, int n) {
  spec.validate();
  std::vector<double> out(static_cast<size_t>(n));
  const double T = static_cast<double>(spec.grid_size);
  for (auto& t : out) t = static_cast<double>(rng.next_below(spec.grid_size)) / T;
  return out;
}

// continuous: U[0,1]; discrete: uniform over {1/T, ..., 1}
inline std::vector<double> sample_dt(const ConsistencyTimeSpec& spec, RngStream& rng, int n) {
  spec.validate();
  std::vector<double> out(static_cast<size_t>(n));
  const double T = static_cast<double>(spec.grid_size);
  for (auto& dt : out) {
    if (spec.dt_mode == DtMode::kContinuous)
      dt = rng.next_double();
    else
      dt = static_cast<double>(rng.next_below(spec.grid_size) + 1) / T;
  }
  return out;
}

}  // namespace maniflow
