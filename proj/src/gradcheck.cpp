#include "sarnet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <random>

namespace sarnet {

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6e", v);
  return buf;
}

}  // namespace

GradCheckReport grad_check(const ScalarClosure& fn, std::vector<Tensor<double>> inputs, const GradCheckOptions& opt) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    Tensor<double> out = fn(inputs);
    if (out.shape() != Shape(1, 1, 1, 1)) throw ContractError("grad_check: closure must reduce to a scalar");
    backward(out, tape);
  }
  std::vector<std::vector<double>> analytic;
  for (auto& t : inputs) analytic.push_back(t.grad());
  tape.clear();

  auto evaluate = [&]() {
    NoGradScope<double> off;
    return fn(inputs)[0];
  };
  const double f_scale = std::max(1.0, std::abs(evaluate()));
  constexpr double eps = std::numeric_limits<double>::epsilon();

  GradCheckReport report;
  std::mt19937_64 rng(opt.seed);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto data = inputs[i].mutable_data();
    std::vector<Index> coords(data.size());
    std::iota(coords.begin(), coords.end(), Index(0));
    if (opt.max_coords_per_input >= 0 && static_cast<Index>(coords.size()) > opt.max_coords_per_input) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(static_cast<std::size_t>(opt.max_coords_per_input));
      std::sort(coords.begin(), coords.end());
    }
    for (Index c : coords) {
      const double saved = data[c];
      const double a = analytic[i][static_cast<std::size_t>(c)] * opt.analytic_scale;
      const std::string where = "input " + std::to_string(i) + ", coordinate " + std::to_string(c);
      double err = 0, numeric = 0, h = opt.step;
      for (int k = 0; k <= opt.refinements; ++k, h /= 10) {
        data[c] = saved + h;
        const double plus = evaluate();
        data[c] = saved - h;
        const double minus = evaluate();
        data[c] = saved;
        numeric = (plus - minus) / (2.0 * h);
        if (!std::isfinite(a) || !std::isfinite(numeric))
          throw NumericError("grad_check: non-finite gradient at " + where);
        const double floor = 10 * eps * f_scale / (h * opt.rel_tol);
        err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
        if (err <= opt.rel_tol) {
          report.coords_refined += k > 0;
          break;
        }
      }
      if (err >= report.max_rel_err) {
        report.max_rel_err = err;
        report.worst = where + " (analytic " + fmt(a) + ", numeric " + fmt(numeric) + ")";
      }
      ++report.coords_checked;
    }
  }
  report.pass = report.max_rel_err <= opt.rel_tol;
  return report;
}

}  // namespace sarnet
