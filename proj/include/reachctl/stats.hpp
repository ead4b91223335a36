#pragma once

// Exact binomial confidence bounds.

#include <cstdint>

#include <boost/math/distributions/beta.hpp>

#include "reachctl/core.hpp"

namespace reachctl {

/// One-sided Clopper-Pearson upper bound on a success probability after
/// `successes` out of `trials`, at the given confidence.
inline double clopper_pearson_upper(std::int64_t successes, std::int64_t trials,
                                    double confidence = 0.99) {
  require(trials > 0 && successes >= 0 && successes <= trials,
          "clopper_pearson: need 0 <= successes <= trials, trials > 0");
  require(confidence > 0.0 && confidence < 1.0, "clopper_pearson: confidence must be in (0, 1)");
  if (successes == trials) return 1.0;
  const boost::math::beta_distribution<double> b(static_cast<double>(successes + 1),
                                                 static_cast<double>(trials - successes));
  return boost::math::quantile(b, confidence);
}

/// One-sided Clopper-Pearson lower bound.
inline double clopper_pearson_lower(std::int64_t successes, std::int64_t trials,
                                    double confidence = 0.99) {
  require(trials > 0 && successes >= 0 && successes <= trials,
          "clopper_pearson: need 0 <= successes <= trials, trials > 0");
  require(confidence > 0.0 && confidence < 1.0, "clopper_pearson: confidence must be in (0, 1)");
  if (successes == 0) return 0.0;
  const boost::math::beta_distribution<double> b(static_cast<double>(successes),
                                                 static_cast<double>(trials - successes + 1));
  return boost::math::quantile(b, 1.0 - confidence);
}

}  // namespace reachctl
