#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "dsta/tensor.hpp"

namespace dsta {

// A scalar-valued function of tensors, evaluated on the given tape.
using ScalarFn = std::function<Tensor(Tape&)>;

// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
double relative_error(double analytic, double numeric);

// Max relative error between the tape gradient of f at x and central
// differences with the given step. Throws NumericError if f(x) is not finite.
double gradcheck(const std::function<Tensor(Tape&, const Tensor&)>& f, const Tensor& x, double step);

struct ParameterError {
  std::string name;
  std::size_t count = 0;
  double max_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

struct GradcheckReport {
  std::vector<ParameterError> parameters;
  double max_error() const;
};

// Checks every named tensor against central differences of f. The tensors are
// perturbed in place and restored.
GradcheckReport gradcheck_parameters(const ScalarFn& f, const std::vector<std::pair<std::string, Tensor>>& params,
                                     double step);

}  // namespace dsta
