#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "widecaps/tape.hpp"
#include "widecaps/tensor.hpp"

namespace widecaps {

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  // Denominator floor for the relative error, so coordinates whose true gradient is
  // ~0 are judged on absolute error instead of amplified round-off.
  double abs_floor = 1e-7;
  // 0 checks every coordinate; otherwise a seeded sample of this many per tensor.
  std::size_t max_coords_per_param = 0;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  // Coordinates whose central difference straddled a piecewise boundary (relu kink,
  // norm guard); the one-sided pieces disagree there so no comparison is made.
  std::size_t skipped = 0;
  std::string worst;
  std::vector<std::string> failures;

  bool passed() const { return failures.empty(); }
  std::string summary() const {
    std::ostringstream os;
    os << (passed() ? "PASS" : "FAIL") << " max_rel_err=" << max_rel_error << " checked=" << checked
       << " skipped=" << skipped;
    if (!worst.empty()) os << " worst=" << worst;
    return os.str();
  }
};

/// Compares tape gradients against central differences (f(θ+h) - f(θ-h)) / 2h.
/// `f(tape, vars)` must build a scalar from the leaves bound to `params`, in order.
template <typename Fn>
GradCheckReport finite_diff_check(Fn&& f, std::vector<Tensor<double>> params,
                                  const std::vector<std::string>& names = {},
                                  GradCheckOptions opts = {}) {
  GradCheckReport report;
  auto name_of = [&](std::size_t p) {
    return p < names.size() ? names[p] : "param" + std::to_string(p);
  };

  auto evaluate = [&](bool with_grad, std::vector<Tensor<double>>* grads, std::uint64_t* sig) {
    Tape<double> tape;
    tape.set_branch_tracking(true);
    std::vector<Var<double>> vars;
    vars.reserve(params.size());
    for (const auto& p : params) vars.push_back(tape.leaf(p, true));
    Var<double> out = f(tape, vars);
    if (out.value().size() != 1) {
      throw DimensionError("finite_diff_check: function must return a scalar, got " +
                           shape_string(out.shape()));
    }
    if (sig) *sig = tape.branch_signature();
    if (with_grad) {
      tape.backward(out);
      grads->clear();
      for (const auto& v : vars) grads->push_back(tape.grad(v));
    }
    return out.value()[0];
  };

  std::vector<Tensor<double>> analytic;
  std::uint64_t base_sig = 0;
  evaluate(true, &analytic, &base_sig);

  std::mt19937_64 rng(opts.seed);
  std::size_t total = 0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    std::vector<std::size_t> coords(params[p].size());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (opts.max_coords_per_param && coords.size() > opts.max_coords_per_param) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opts.max_coords_per_param);
      std::sort(coords.begin(), coords.end());
    }
    total += coords.size();
    for (auto c : coords) {
      const double orig = params[p][c];
      std::uint64_t sig_plus = 0, sig_minus = 0;
      params[p][c] = orig + opts.step;
      const double f_plus = evaluate(false, nullptr, &sig_plus);
      params[p][c] = orig - opts.step;
      const double f_minus = evaluate(false, nullptr, &sig_minus);
      params[p][c] = orig;

      const double numeric = (f_plus - f_minus) / (2.0 * opts.step);
      const double exact = analytic[p][c];
      const std::string where = name_of(p) + "[" + std::to_string(c) + "]";
      if (std::isnan(numeric) || std::isnan(exact)) {
        report.failures.push_back("NaN gradient at " + where);
        continue;
      }
      if (sig_plus != base_sig || sig_minus != base_sig) {
        ++report.skipped;
        continue;
      }
      ++report.checked;
      const double denom = std::max({std::abs(numeric), std::abs(exact), opts.abs_floor});
      const double rel = std::abs(numeric - exact) / denom;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        std::ostringstream os;
        os << where << " analytic=" << exact << " numeric=" << numeric;
        report.worst = os.str();
      }
      if (!(rel < opts.tolerance)) {
        std::ostringstream os;
        os << where << " rel_err=" << rel << " analytic=" << exact << " numeric=" << numeric;
        report.failures.push_back(os.str());
      }
    }
  }
  if (total > 0 && report.checked == 0) {
    report.failures.push_back("every coordinate straddled a branch boundary; nothing compared");
  }
  return report;
}

}  // namespace widecaps
