#pragma once

// Finite-difference verification of every training loss against the
// autograd gradients, on small random inputs.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "ciec/autograd.hpp"

namespace ciec::gradcheck {

struct CheckResult {
  std::string name;
  int coordinates = 0;
  double max_rel_error = 0.0;
  double loss = 0.0;
  bool passed = false;
};

/// Compares d loss / d leaf from backward() with central differences for
/// every element of every leaf. `loss` must rebuild its graph from the
/// current leaf values on each call.
CheckResult check(const std::string& name, std::vector<ag::Tensor> leaves,
                  const std::function<ag::Tensor()>& loss, double h = 1e-5, double tol = 1e-4);

/// One check per loss term of the training objective.
std::vector<CheckResult> run_all(std::uint64_t seed = 7, double h = 1e-5, double tol = 1e-4);

void write_table(std::ostream& out, const std::vector<CheckResult>& results);

}  // namespace ciec::gradcheck
