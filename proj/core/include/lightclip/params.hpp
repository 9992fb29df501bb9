#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "lightclip/tensor.hpp"

namespace lightclip {

using Rng = std::mt19937_64;

/// Named, ordered collection of trainable leaf tensors.
class ParameterStore {
 public:
  struct Entry {
    std::string name;
    Tensor value;
    bool decay = true;  // participates in decoupled weight decay
  };

  Tensor add(std::string name, Tensor value, bool decay);
  /// Truncated normal (cut at two standard deviations).
  Tensor add_normal(std::string name, Shape shape, double stddev, Rng& rng);
  Tensor add_constant(std::string name, Shape shape, double value);

  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const;

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t total_numel() const;
  void zero_grad();

 private:
  std::vector<Entry> entries_;
};

/// Truncated normal sample used for parameter initialization.
std::vector<double> truncated_normal(std::size_t count, double stddev, Rng& rng);

}  // namespace lightclip
