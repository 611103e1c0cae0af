// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "nerfus/core/common.hpp"

namespace nerfus {

/// Forward-process variance schedule. Note the convention
/// abar_t = prod_{s<=t} (1 - beta_s), with abar_0 = 1 (no noise at step 0).
struct NoiseSchedule {
  int T = 0;
  std::vector<double> beta;  // beta[t] for t = 1..T; beta[0] unused
  std::vector<double> abar;  // abar[t] for t = 0..T

  static NoiseSchedule linear(int T, double beta_min = 1e-4, double beta_max = 0.02) {
    require(T >= 1, "schedule: T must be >= 1");
    require(beta_min > 0 && beta_max < 1 && beta_min <= beta_max,
            "schedule: betas must satisfy 0 < min <= max < 1");
    NoiseSchedule s;
    s.T = T;
    s.beta.resize(T + 1, 0.0);
    s.abar.resize(T + 1, 1.0);
    for (int t = 1; t <= T; ++t) {
      s.beta[t] = T == 1 ? beta_min : beta_min + (beta_max - beta_min) * (t - 1) / double(T - 1);
      s.abar[t] = s.abar[t - 1] * (1.0 - s.beta[t]);
    }
    s.validate();
    return s;
  }

  /// Short desk schedule: betas scaled up so T=100 still noises to
  /// near-complete (abar_T << 1), matching what the 1000-step default does.
  static NoiseSchedule desk() { return linear(100, 1e-3, 0.2); }

  void validate() const {
    require(T >= 1 && int(beta.size()) == T + 1 && int(abar.size()) == T + 1,
            "schedule: inconsistent sizes");
    require(abar[0] > 0.999, "schedule: abar_0 must be near 1");
    for (int t = 1; t <= T; ++t) {
      require(beta[t] > 0 && beta[t] < 1, "schedule: beta out of (0,1)");
      if (t > 1) require(beta[t] >= beta[t - 1], "schedule: beta must be non-decreasing");
      require(abar[t] < abar[t - 1], "schedule: abar must be strictly decreasing");
    }
  }

  void check_step(int t) const {
    require(t >= 0 && t <= T, "schedule: step out of range [0, T]");
  }
};

}  // namespace nerfus
