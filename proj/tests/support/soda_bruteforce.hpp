#pragma once

#include <algorithm>
#include <vector>

#include "seqdvc/numerics.hpp"

namespace seqdvc::testsupport {

// Exhaustive maximum over order-preserving one-to-one partial matchings of a
// pair-score grid: every equal-size (row subset, column subset) pair, aligned
// in index order. Exponential in the grid size; intended for grids up to
// about 4x4 as an oracle for the dynamic program.
inline double soda_matching_oracle(const Mat& s) {
  const int n = static_cast<int>(s.rows());
  const int m = static_cast<int>(s.cols());
  double best = 0.0;
  for (unsigned rs = 0; rs < (1u << n); ++rs) {
    std::vector<int> ri;
    for (int i = 0; i < n; ++i) {
      if (rs & (1u << i)) ri.push_back(i);
    }
    for (unsigned cs = 0; cs < (1u << m); ++cs) {
      std::vector<int> ci;
      for (int j = 0; j < m; ++j) {
        if (cs & (1u << j)) ci.push_back(j);
      }
      if (ci.size() != ri.size()) continue;
      double sum = 0.0;
      for (std::size_t k = 0; k < ri.size(); ++k) sum += s(ri[k], ci[k]);
      best = std::max(best, sum);
    }
  }
  return best;
}

}  // namespace seqdvc::testsupport
