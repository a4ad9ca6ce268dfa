#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "idproxy/kernels.hpp"

// Central-difference verification of analytic gradients. Non-scalar kernels
// are reduced through a fixed random cotangent so every check compares the
// gradient of one scalar function.

namespace idproxy::nn {

struct GradReport {
  std::string op_name;
  double max_rel_err = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

struct KernelCase {
  // Inputs for one check point.
  std::vector<TensorD> inputs;
  // Scalar forward at the given inputs.
  std::function<double(const std::vector<TensorD>&)> forward;
  // Analytic gradients of the scalar forward w.r.t. every input entry.
  std::function<std::vector<TensorD>(const std::vector<TensorD>&)> backward;
};

using KernelCaseFactory = std::function<KernelCase(Rng&)>;

class KernelRegistry {
 public:
  void add(const std::string& name, KernelCaseFactory factory) {
    factories_[name] = std::move(factory);
  }
  bool has(const std::string& name) const { return factories_.count(name) > 0; }
  const KernelCaseFactory& get(const std::string& name) const {
    auto it = factories_.find(name);
    if (it == factories_.end()) fail(ErrClass::not_found, "unregistered kernel: " + name);
    return it->second;
  }
  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& kv : factories_) out.push_back(kv.first);
    return out;
  }

  // Registry of all diffcore kernels, built once.
  static const KernelRegistry& builtin();

 private:
  std::map<std::string, KernelCaseFactory> factories_;
};

// Relative error with the guarded denominator max(|analytic|, |numeric|, 1e-8).
inline double rel_err(double analytic, double numeric) {
  const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-8});
  return std::fabs(analytic - numeric) / denom;
}

// Check the analytic gradient of `kc` at its inputs against central
// differences. `max_coords_per_input` bounds work on large tensors; sampled
// coordinate choice is deterministic in `rng`.
GradReport grad_check_case(const std::string& name, const KernelCase& kc, Rng& rng,
                           double eps = 1e-5, double tolerance = 1e-4,
                           int max_coords_per_input = 0);

// Spec entry point: named kernel at a sampled point.
GradReport grad_check(const std::string& kernel, Rng& rng, double eps = 1e-5,
                      double tolerance = 1e-4);

}  // namespace idproxy::nn
