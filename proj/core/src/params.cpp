#include "lightclip/params.hpp"

#include <algorithm>
#include <cmath>

#include "lightclip/errors.hpp"

namespace lightclip {

std::vector<double> truncated_normal(std::size_t count, double stddev, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> out(count);
  for (auto& v : out) {
    double z;
    do {
      z = normal(rng);
    } while (std::abs(z) > 2.0);
    v = z * stddev;
  }
  return out;
}

Tensor ParameterStore::add(std::string name, Tensor value, bool decay) {
  if (contains(name)) throw ConfigError("duplicate parameter name: " + name);
  value.set_requires_grad(true);
  entries_.push_back({std::move(name), value, decay});
  return value;
}

Tensor ParameterStore::add_normal(std::string name, Shape shape, double stddev, Rng& rng) {
  auto count = numel_of(shape);
  return add(std::move(name), Tensor::from(std::move(shape), truncated_normal(count, stddev, rng)),
             true);
}

Tensor ParameterStore::add_constant(std::string name, Shape shape, double value) {
  return add(std::move(name), Tensor::full(std::move(shape), value), false);
}

const Tensor& ParameterStore::get(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return e.value;
  }
  throw ConfigError("unknown parameter: " + name);
}

bool ParameterStore::contains(const std::string& name) const {
  return std::any_of(entries_.begin(), entries_.end(),
                     [&](const Entry& e) { return e.name == name; });
}

std::size_t ParameterStore::total_numel() const {
  std::size_t total = 0;
  for (const auto& e : entries_) total += e.value.numel();
  return total;
}

void ParameterStore::zero_grad() {
  for (auto& e : entries_) e.value.zero_grad();
}

}  // namespace lightclip
