#pragma once

#include <map>
#include <random>
#include <string>

#include "stn/tensor.hpp"

namespace stn {

// Named learnable tensors. Name order (lexicographic via std::map) defines
// the deterministic iteration order used by the optimizer and checkpoints.
class ParamRegistry {
 public:
  // He fan-in normal init
  TensorPtr he(const std::string& name, Shape shape, int fan_in, std::mt19937_64& rng);
  TensorPtr zeros(const std::string& name, Shape shape);
  // bias fixed at a constant (e.g. classification prior logit)
  TensorPtr constant(const std::string& name, Shape shape, double value);

  const std::map<std::string, TensorPtr>& all() const { return params_; }
  std::map<std::string, TensorPtr>& all() { return params_; }
  TensorPtr at(const std::string& name) const;

 private:
  TensorPtr insert(const std::string& name, TensorPtr t);
  std::map<std::string, TensorPtr> params_;
};

}  // namespace stn
