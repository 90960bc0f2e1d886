#include "stn/params.hpp"

#include <cmath>
#include <stdexcept>

namespace stn {

TensorPtr ParamRegistry::insert(const std::string& name, TensorPtr t) {
  if (!params_.emplace(name, t).second) {
    throw std::runtime_error("parameter '" + name + "' registered twice");
  }
  return t;
}

TensorPtr ParamRegistry::he(const std::string& name, Shape shape, int fan_in,
                            std::mt19937_64& rng) {
  auto t = make_tensor(std::move(shape), true);
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  for (auto& v : t->data) v = dist(rng);
  return insert(name, t);
}

TensorPtr ParamRegistry::zeros(const std::string& name, Shape shape) {
  return insert(name, make_tensor(std::move(shape), true));
}

TensorPtr ParamRegistry::constant(const std::string& name, Shape shape, double value) {
  auto t = make_tensor(std::move(shape), true);
  std::fill(t->data.begin(), t->data.end(), value);
  return insert(name, t);
}

TensorPtr ParamRegistry::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::runtime_error("unknown parameter '" + name + "'");
  return it->second;
}

}  // namespace stn
