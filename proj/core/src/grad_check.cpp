#include "tdt/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "tdt/errors.hpp"

namespace tdt::ad {

namespace {

double finite_or_throw(const CheckedLoss& l, const std::string& where) {
  double v = l.loss.item();
  if (!std::isfinite(v)) throw NumericError("grad_check: non-finite loss " + where);
  return v;
}

bool near_kink(const std::vector<double>& args, double guard) {
  return std::any_of(args.begin(), args.end(), [guard](double a) { return std::abs(a) < guard; });
}

bool kink_crossed(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return true;
  for (std::size_t i = 0; i < a.size(); ++i)
    if ((a[i] > 0.0) != (b[i] > 0.0)) return true;
  return false;
}

}  // namespace

double relative_error(double analytic, double numeric, double denom_floor) {
  double denom = std::max({std::abs(analytic), std::abs(numeric), denom_floor});
  return std::abs(analytic - numeric) / denom;
}

GradCheckReport grad_check(const LossFn& loss_fn, std::vector<NamedTensor> params, const GradCheckOptions& opts) {
  if (!(opts.h > 0.0)) throw ConfigError("grad_check: step h must be positive");

  for (auto& p : params) p.tensor.zero_grad();
  std::vector<double> base_kinks;
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    TapeScope scope(tape);
    CheckedLoss l = loss_fn();
    finite_or_throw(l, "at the base point");
    base_kinks = l.kink_args;
    tape.backward(l.loss);
    tape.clear();
  }
  for (auto& p : params) {
    analytic.push_back(p.tensor.grad_vector());
    p.tensor.zero_grad();
  }

  std::mt19937_64 rng(opts.seed);
  GradCheckReport report;
  const bool base_near = near_kink(base_kinks, opts.kink_guard);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    ParamCheck pc;
    pc.name = p.name;
    std::vector<std::size_t> coords(p.tensor.numel());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (opts.max_coords_per_param > 0 && coords.size() > opts.max_coords_per_param) {
      std::vector<std::size_t> picked;
      std::sample(coords.begin(), coords.end(), std::back_inserter(picked), opts.max_coords_per_param, rng);
      coords = std::move(picked);
    }
    auto values = p.tensor.mutable_data();
    for (std::size_t c : coords) {
      const std::string where = "probing " + p.name + "[" + std::to_string(c) + "]";
      if (base_near) {
        ++pc.skipped;
        continue;
      }
      const double saved = values[c];
      values[c] = saved + opts.h;
      CheckedLoss plus = loss_fn();
      double fp = finite_or_throw(plus, where);
      values[c] = saved - opts.h;
      CheckedLoss minus = loss_fn();
      double fm = finite_or_throw(minus, where);
      values[c] = saved;
      if (near_kink(plus.kink_args, opts.kink_guard) || near_kink(minus.kink_args, opts.kink_guard) ||
          kink_crossed(plus.kink_args, base_kinks) || kink_crossed(minus.kink_args, base_kinks)) {
        ++pc.skipped;
        continue;
      }
      double numeric = (fp - fm) / (2.0 * opts.h);
      double a = analytic[pi][c];
      pc.max_rel_error = std::max(pc.max_rel_error, relative_error(a, numeric, opts.denom_floor));
      pc.max_abs_error = std::max(pc.max_abs_error, std::abs(a - numeric));
      ++pc.checked;
    }
    report.max_rel_error = std::max(report.max_rel_error, pc.max_rel_error);
    report.checked += pc.checked;
    report.params.push_back(std::move(pc));
  }
  report.passed = report.max_rel_error < opts.tol;
  return report;
}

}  // namespace tdt::ad
