#pragma once

#include <cstddef>
#include <random>
#include <utility>
#include <vector>

namespace lightclip {

/// Dense row-major matrix of matching costs. Rows are image tokens, columns
/// are text tokens.
class CostMatrix {
 public:
  CostMatrix() = default;
  CostMatrix(std::size_t rows, std::size_t cols, std::vector<double> values);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  double operator()(std::size_t r, std::size_t c) const { return values_[r * cols_ + c]; }
  const std::vector<double>& values() const { return values_; }
  CostMatrix transposed() const;

 private:
  std::size_t rows_ = 0, cols_ = 0;
  std::vector<double> values_;
};

/// Injective row -> column matching of size min(rows, cols), sorted by row.
struct Assignment {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  double total_cost = 0.0;

  /// Column matched to `row`, or -1 when the row is unmatched.
  long column_of(std::size_t row) const;
};

/// Minimum-cost assignment via shortest augmenting paths with potentials,
/// O(k^2 * m) for k = min(rows, cols). Scans prefer the lowest index on ties,
/// so the result is deterministic. Throws InputError on empty or non-finite
/// input.
Assignment hungarian(const CostMatrix& costs);

/// Exhaustive minimum over all injective matchings, enumerated in
/// lexicographic order; the first minimum found wins. Throws
/// OracleSizeError when min(rows, cols) > 8 or the enumeration would exceed
/// ten million matchings.
Assignment brute_force_match(const CostMatrix& costs);

/// Uniformly random injective matching of size min(rows, cols).
Assignment random_assignment(std::size_t rows, std::size_t cols, std::mt19937_64& rng);

/// Sum of the matched entries.
double assignment_cost(const CostMatrix& costs, const Assignment& assignment);

}  // namespace lightclip
