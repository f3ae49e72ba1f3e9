#include "phyformer/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace phyformer {

namespace {

double eval_loss(const LossClosure& loss, const std::vector<Tensor>& params) {
  ad::Tape tape;
  std::vector<ad::Var> leaves;
  leaves.reserve(params.size());
  for (const auto& p : params) leaves.push_back(tape.param(p));
  return loss(tape, leaves).value().item();
}

}  // namespace

GradCheckReport grad_check(const LossClosure& loss, std::vector<Tensor>& params,
                           const GradCheckOptions& options) {
  std::vector<Tensor> analytic;
  {
    ad::Tape tape;
    std::vector<ad::Var> leaves;
    for (const auto& p : params) leaves.push_back(tape.param(p));
    auto grads = ad::backward(tape, loss(tape, leaves));
    for (const auto& leaf : leaves) analytic.push_back(grads[leaf]);
  }

  // (param index, coordinate) pairs over the whole parameter set.
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (std::size_t j = 0; j < params[i].size(); ++j) coords.emplace_back(i, j);
  }
  std::mt19937_64 rng(options.seed);
  if (coords.size() > options.n_coords) {
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(options.n_coords);
  }

  GradCheckReport report;
  for (auto [i, j] : coords) {
    const double saved = params[i][j];
    params[i][j] = saved + options.delta;
    const double up = eval_loss(loss, params);
    params[i][j] = saved - options.delta;
    const double down = eval_loss(loss, params);
    params[i][j] = saved;

    const double numeric = (up - down) / (2.0 * options.delta);
    const double auto_g = analytic[i][j];
    const double abs_err = std::abs(numeric - auto_g);
    const double denom = std::max({std::abs(numeric), std::abs(auto_g), options.abs_floor});
    report.max_abs_err = std::max(report.max_abs_err, abs_err);
    report.max_rel_err = std::max(report.max_rel_err, abs_err / denom);
    ++report.n_checked;
  }
  report.pass = report.max_rel_err < options.tolerance;
  return report;
}

}  // namespace phyformer
