#include "dsta/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "dsta/errors.hpp"

namespace dsta {
namespace {

double evaluate(const ScalarFn& f) {
  Tape tape(false);
  const double v = f(tape).item();
  if (!std::isfinite(v)) throw NumericError("gradcheck: function value is not finite");
  return v;
}

}  // namespace

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

double gradcheck(const std::function<Tensor(Tape&, const Tensor&)>& f, const Tensor& x, double step) {
  Tensor input = x;
  const bool had_grad = input.requires_grad();
  input.set_requires_grad(true);
  input.drop_grad();
  auto report = gradcheck_parameters([&](Tape& tape) { return f(tape, input); }, {{"x", input}}, step);
  input.drop_grad();
  input.set_requires_grad(had_grad);
  return report.max_error();
}

double GradcheckReport::max_error() const {
  double worst = 0.0;
  for (const auto& p : parameters) worst = std::max(worst, p.max_error);
  return worst;
}

GradcheckReport gradcheck_parameters(const ScalarFn& f, const std::vector<std::pair<std::string, Tensor>>& params,
                                     double step) {
  if (!(step > 0.0)) throw ContractError("gradcheck: step must be positive");
  for (auto [name, t] : params) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  {
    Tape tape;
    auto loss = f(tape);
    if (!std::isfinite(loss.item())) throw NumericError("gradcheck: function value is not finite");
    tape.backward(loss);
  }

  GradcheckReport report;
  for (auto [name, t] : params) {
    ParameterError entry{name, t.numel()};
    std::vector<double> analytic(t.grad().begin(), t.grad().end());
    auto values = t.data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + step;
      const double up = evaluate(f);
      values[i] = saved - step;
      const double down = evaluate(f);
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double err = relative_error(analytic[i], numeric);
      if (err > entry.max_error || i == 0) {
        entry.max_error = std::max(entry.max_error, err);
        entry.worst_index = i;
        entry.analytic = analytic[i];
        entry.numeric = numeric;
      }
    }
    report.parameters.push_back(entry);
  }
  return report;
}

}  // namespace dsta
