#include "lightclip/hungarian.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "lightclip/errors.hpp"
#include "lightclip/instrumentation.hpp"

namespace lightclip {

CostMatrix::CostMatrix(std::size_t rows, std::size_t cols, std::vector<double> values)
    : rows_(rows), cols_(cols), values_(std::move(values)) {
  if (values_.size() != rows * cols) {
    throw InputError("cost matrix data length " + std::to_string(values_.size()) +
                     " does not match " + std::to_string(rows) + "x" + std::to_string(cols));
  }
}

CostMatrix CostMatrix::transposed() const {
  std::vector<double> t(values_.size());
  for (std::size_t r = 0; r < rows_; ++r) {
    for (std::size_t c = 0; c < cols_; ++c) t[c * rows_ + r] = values_[r * cols_ + c];
  }
  return {cols_, rows_, std::move(t)};
}

long Assignment::column_of(std::size_t row) const {
  for (const auto& [r, c] : pairs) {
    if (r == row) return static_cast<long>(c);
  }
  return -1;
}

double assignment_cost(const CostMatrix& costs, const Assignment& assignment) {
  double total = 0.0;
  for (const auto& [r, c] : assignment.pairs) total += costs(r, c);
  return total;
}

namespace {

void check_input(const CostMatrix& costs) {
  if (costs.rows() == 0 || costs.cols() == 0) throw InputError("cost matrix is empty");
  for (double v : costs.values()) {
    if (!std::isfinite(v)) throw InputError("cost matrix contains a non-finite entry");
  }
}

// Rows <= cols. Returns the column matched to each row.
std::vector<std::size_t> solve_wide(const CostMatrix& a) {
  const std::size_t n = a.rows(), m = a.cols();
  constexpr double kInf = std::numeric_limits<double>::infinity();
  // 1-based potentials; index 0 is the virtual source column.
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0), minv(m + 1);
  std::vector<std::size_t> owner(m + 1, 0), way(m + 1, 0);
  std::vector<char> used(m + 1);
  for (std::size_t i = 1; i <= n; ++i) {
    owner[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), kInf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = owner[j0];
      double delta = kInf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = a(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[owner[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (owner[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      owner[j0] = owner[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> col_of_row(n);
  for (std::size_t j = 1; j <= m; ++j) {
    if (owner[j] != 0) col_of_row[owner[j] - 1] = j - 1;
  }
  return col_of_row;
}

Assignment finish(const CostMatrix& costs, std::vector<std::pair<std::size_t, std::size_t>> pairs) {
  std::sort(pairs.begin(), pairs.end());
  Assignment out;
  out.pairs = std::move(pairs);
  out.total_cost = assignment_cost(costs, out);
  return out;
}

}  // namespace

Assignment hungarian(const CostMatrix& costs) {
  check_input(costs);
  instrumentation::count_hungarian();
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  if (costs.rows() <= costs.cols()) {
    auto cols = solve_wide(costs);
    for (std::size_t r = 0; r < cols.size(); ++r) pairs.emplace_back(r, cols[r]);
  } else {
    auto rows = solve_wide(costs.transposed());
    for (std::size_t c = 0; c < rows.size(); ++c) pairs.emplace_back(rows[c], c);
  }
  return finish(costs, std::move(pairs));
}

Assignment brute_force_match(const CostMatrix& costs) {
  check_input(costs);
  const bool wide = costs.rows() <= costs.cols();
  const std::size_t k = std::min(costs.rows(), costs.cols());
  const std::size_t m = std::max(costs.rows(), costs.cols());
  if (k > 8) throw OracleSizeError("brute-force matching limited to min(rows, cols) <= 8");
  double count = 1.0;
  for (std::size_t i = 0; i < k; ++i) count *= static_cast<double>(m - i);
  if (count > 1e7) throw OracleSizeError("brute-force matching would enumerate too many matchings");

  // Enumerate injective maps from the short side (index s) into the long side.
  auto cost = [&](std::size_t s, std::size_t l) { return wide ? costs(s, l) : costs(l, s); };
  std::vector<std::size_t> current(k), best(k);
  std::vector<char> used(m, 0);
  double best_cost = std::numeric_limits<double>::infinity();
  auto recurse = [&](auto&& self, std::size_t s, double partial) -> void {
    if (s == k) {
      if (partial < best_cost) {
        best_cost = partial;
        best = current;
      }
      return;
    }
    for (std::size_t l = 0; l < m; ++l) {
      if (used[l]) continue;
      used[l] = 1;
      current[s] = l;
      self(self, s + 1, partial + cost(s, l));
      used[l] = 0;
    }
  };
  recurse(recurse, 0, 0.0);

  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t s = 0; s < k; ++s) {
    pairs.emplace_back(wide ? s : best[s], wide ? best[s] : s);
  }
  return finish(costs, std::move(pairs));
}

Assignment random_assignment(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  if (rows == 0 || cols == 0) throw InputError("random assignment needs a non-empty matrix");
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  if (rows <= cols) {
    std::vector<std::size_t> perm(cols);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    for (std::size_t r = 0; r < rows; ++r) pairs.emplace_back(r, perm[r]);
  } else {
    std::vector<std::size_t> perm(rows);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    for (std::size_t c = 0; c < cols; ++c) pairs.emplace_back(perm[c], c);
  }
  std::sort(pairs.begin(), pairs.end());
  Assignment out;
  out.pairs = std::move(pairs);
  return out;
}

}  // namespace lightclip
