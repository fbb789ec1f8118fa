#pragma once

// Named property checks over the core algebra: chunked/recurrent agreement,
// Cayley orthogonality and norm preservation, transfer-matrix equivalence
// with the rotation-trail table, the equivariance pair, the decay-derivative
// analysis, and carried-conv continuity.

#include "smamba/common.hpp"

#include <string>
#include <vector>

namespace smamba {

struct CheckResult {
  std::string name;
  bool pass = false;
  double worst = 0;      // worst observed statistic
  double threshold = 0;  // its pass bound
  std::string detail;
};

CheckResult check_chunked_equivalence(int seeds, bool single_precision);
CheckResult check_cayley_orthogonality(int draws, bool single_precision);
CheckResult check_transfer_matrix(int seeds);
CheckResult check_rotation_trails();
CheckResult check_equivariance_pair(int seeds);
CheckResult check_decay_derivative();
CheckResult check_conv_continuity(int seeds);

/// The full suite in a fixed order.
std::vector<CheckResult> run_verification(int seeds, bool single_precision);

}  // namespace smamba
