#include "phyformer/classical.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <limits>
#include <map>
#include <string>

#include "phyformer/errors.hpp"

namespace phyformer {

namespace {

ChannelEstimate empty_like(const ChannelEstimate& est) {
  ChannelEstimate out;
  for (const auto& g : est.per_user) out.per_user.emplace_back(g.n_sc(), g.n_sym(), g.n_ant());
  out.observed = est.observed;
  return out;
}

// Piecewise-linear through (xs, vs) with constant extrapolation; xs ascending.
cd interp_1d(const std::vector<double>& xs, const std::vector<cd>& vs, double x) {
  if (x <= xs.front()) return vs.front();
  if (x >= xs.back()) return vs.back();
  auto it = std::upper_bound(xs.begin(), xs.end(), x);
  const auto hi = static_cast<std::size_t>(it - xs.begin());
  const std::size_t lo = hi - 1;
  const double w = (x - xs[lo]) / (xs[hi] - xs[lo]);
  return (1.0 - w) * vs[lo] + w * vs[hi];
}

}  // namespace

ChannelEstimate ls_estimate(const ResourceGrid& y, const PilotPattern& pilots) {
  if (y.n_sc() != pilots.n_sc || y.n_sym() != pilots.n_sym) {
    throw ShapeError("ls_estimate: grid and pilot pattern dimensions differ");
  }
  ChannelEstimate est;
  for (std::size_t u = 0; u < pilots.n_users(); ++u) {
    ResourceGrid h(y.n_sc(), y.n_sym(), y.n_ant());
    std::vector<char> mask(y.n_sc() * y.n_sym(), 0);
    for (const auto& p : pilots.per_user[u]) {
      if (p.value == cd{}) throw NumericError("ls_estimate: degenerate (zero) pilot value");
      for (std::size_t a = 0; a < y.n_ant(); ++a) h(p.sc, p.sym, a) = y(p.sc, p.sym, a) / p.value;
      mask[p.sc * y.n_sym() + p.sym] = 1;
    }
    est.per_user.push_back(std::move(h));
    est.observed.push_back(std::move(mask));
  }
  return est;
}

ChannelEstimate interp_linear(const ChannelEstimate& est) {
  ChannelEstimate out = empty_like(est);
  for (std::size_t u = 0; u < est.n_users(); ++u) {
    const auto& src = est.per_user[u];
    auto& dst = out.per_user[u];
    // observed subcarriers per pilot-bearing symbol
    std::map<std::size_t, std::vector<std::size_t>> by_symbol;
    for (std::size_t sc = 0; sc < src.n_sc(); ++sc)
      for (std::size_t sym = 0; sym < src.n_sym(); ++sym)
        if (est.is_observed(u, sc, sym)) by_symbol[sym].push_back(sc);
    if (by_symbol.empty()) throw ContractError("interp_linear: no pilot symbols");
    for (const auto& [sym, scs] : by_symbol) {
      if (scs.size() < 2) throw ContractError("interp_linear: fewer than 2 pilot subcarriers on a pilot symbol");
    }
    std::vector<double> sym_pos;
    for (const auto& kv : by_symbol) sym_pos.push_back(static_cast<double>(kv.first));

    for (std::size_t a = 0; a < src.n_ant(); ++a) {
      // frequency pass on each pilot symbol
      std::vector<std::vector<cd>> freq(by_symbol.size(), std::vector<cd>(src.n_sc()));
      std::size_t k = 0;
      for (const auto& [sym, scs] : by_symbol) {
        std::vector<double> xs;
        std::vector<cd> vs;
        for (auto sc : scs) {
          xs.push_back(static_cast<double>(sc));
          vs.push_back(src(sc, sym, a));
        }
        for (std::size_t sc = 0; sc < src.n_sc(); ++sc) freq[k][sc] = interp_1d(xs, vs, static_cast<double>(sc));
        ++k;
      }
      // time pass on every subcarrier
      std::vector<cd> column(by_symbol.size());
      for (std::size_t sc = 0; sc < src.n_sc(); ++sc) {
        for (std::size_t i = 0; i < column.size(); ++i) column[i] = freq[i][sc];
        for (std::size_t sym = 0; sym < src.n_sym(); ++sym) {
          dst(sc, sym, a) = interp_1d(sym_pos, column, static_cast<double>(sym));
        }
      }
    }
  }
  return out;
}

ChannelEstimate interp_nearest(const ChannelEstimate& est) {
  ChannelEstimate out = empty_like(est);
  for (std::size_t u = 0; u < est.n_users(); ++u) {
    const auto& src = est.per_user[u];
    auto& dst = out.per_user[u];
    // (sc, sym) ascending, so the first minimum found honours the tie rule
    std::vector<std::pair<std::size_t, std::size_t>> obs;
    for (std::size_t sc = 0; sc < src.n_sc(); ++sc)
      for (std::size_t sym = 0; sym < src.n_sym(); ++sym)
        if (est.is_observed(u, sc, sym)) obs.emplace_back(sc, sym);
    if (obs.empty()) throw ContractError("interp_nearest: no pilots");
    for (std::size_t sc = 0; sc < src.n_sc(); ++sc) {
      for (std::size_t sym = 0; sym < src.n_sym(); ++sym) {
        std::size_t best = 0;
        long best_d = std::numeric_limits<long>::max();
        for (std::size_t i = 0; i < obs.size(); ++i) {
          const long dsc = static_cast<long>(obs[i].first) - static_cast<long>(sc);
          const long dsym = static_cast<long>(obs[i].second) - static_cast<long>(sym);
          const long d = dsc * dsc + dsym * dsym;
          if (d < best_d) {
            best_d = d;
            best = i;
          }
        }
        for (std::size_t a = 0; a < src.n_ant(); ++a) dst(sc, sym, a) = src(obs[best].first, obs[best].second, a);
      }
    }
  }
  return out;
}

MmseOutput mmse_combine(std::span<const cd> y, std::span<const cd> h, std::size_t n_users, double noise_var) {
  const std::size_t n_rx = y.size();
  if (n_users == 0 || h.size() != n_rx * n_users) {
    throw ShapeError("mmse_combine: channel matrix must be n_rx x n_users");
  }
  if (noise_var < 0.0) throw ContractError("mmse_combine: negative noise variance");
  using CMat = Eigen::Matrix<cd, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using CVec = Eigen::Matrix<cd, Eigen::Dynamic, 1>;
  const auto rows = static_cast<Eigen::Index>(n_rx);
  const auto cols = static_cast<Eigen::Index>(n_users);
  const Eigen::Map<const CMat> H(h.data(), rows, cols);
  const Eigen::Map<const CVec> Y(y.data(), rows);

  if (noise_var == 0.0) {
    Eigen::JacobiSVD<CMat> svd(H);
    const auto& sv = svd.singularValues();
    if (n_rx < n_users || sv(0) == 0.0 || sv(sv.size() - 1) / sv(0) < 1e-10) {
      throw ConditioningError("mmse_combine: rank-deficient channel at zero noise");
    }
  }
  CMat gram = H.adjoint() * H;
  gram.diagonal().array() += noise_var;
  const Eigen::PartialPivLU<CMat> lu(gram);
  const CVec raw = lu.solve(H.adjoint() * Y);
  const CMat ginv = lu.inverse();

  MmseOutput out;
  for (Eigen::Index u = 0; u < cols; ++u) {
    const double err = noise_var * ginv(u, u).real();  // MMSE error variance
    const double gain = 1.0 - err;
    if (!(gain > 0.0)) throw ConditioningError("mmse_combine: non-positive effective gain");
    out.raw.push_back(raw(u));
    out.symbols.push_back(raw(u) / gain);
    out.noise_var.push_back(err / gain);
  }
  return out;
}

std::vector<double> maxlog_llr(cd s, const Constellation& constellation, double noise_var) {
  if (!(noise_var > 0.0)) throw ContractError("maxlog_llr: noise variance must be positive");
  const int m = constellation.bits_per_symbol();
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> d0(static_cast<std::size_t>(m), inf), d1(static_cast<std::size_t>(m), inf);
  const auto pts = constellation.points();
  for (int label = 0; label < constellation.order(); ++label) {
    const double d = std::norm(s - pts[static_cast<std::size_t>(label)]);
    for (int i = 0; i < m; ++i) {
      auto& slot = constellation.label_bit(label, i) ? d1[static_cast<std::size_t>(i)] : d0[static_cast<std::size_t>(i)];
      slot = std::min(slot, d);
    }
  }
  std::vector<double> llr(static_cast<std::size_t>(m));
  for (std::size_t i = 0; i < llr.size(); ++i) llr[i] = (d1[i] - d0[i]) / noise_var;
  return llr;
}

std::vector<std::vector<double>> detect_slot(const ResourceGrid& y, std::span<const ResourceGrid> h_per_user,
                                             double noise_var, const PilotPattern& pilots,
                                             const Constellation& constellation) {
  const std::size_t n_users = h_per_user.size();
  if (n_users != pilots.n_users()) throw ShapeError("detect_slot: channel/pilot user count mismatch");
  for (const auto& h : h_per_user) {
    if (!h.same_dims(y)) throw ShapeError("detect_slot: channel grid does not match received grid");
  }
  const std::size_t n_rx = y.n_ant();
  const auto data = pilots.data_res();
  std::vector<std::vector<double>> llrs(n_users);
  std::vector<cd> ys(n_rx), hs(n_rx * n_users);
  for (const auto& [sc, sym] : data) {
    for (std::size_t a = 0; a < n_rx; ++a) {
      ys[a] = y(sc, sym, a);
      for (std::size_t u = 0; u < n_users; ++u) hs[a * n_users + u] = h_per_user[u](sc, sym, a);
    }
    const auto eq = mmse_combine(ys, hs, n_users, noise_var);
    for (std::size_t u = 0; u < n_users; ++u) {
      const double nv = std::max(eq.noise_var[u], 1e-12);
      const auto l = maxlog_llr(eq.symbols[u], constellation, nv);
      llrs[u].insert(llrs[u].end(), l.begin(), l.end());
    }
  }
  return llrs;
}

MetricSummary compute_bit_metrics(std::span<const std::uint8_t> decided, std::span<const std::uint8_t> truth,
                                  std::size_t block_size) {
  if (decided.size() != truth.size()) {
    throw ShapeError("compute_bit_metrics: " + std::to_string(decided.size()) + " decisions vs " +
                     std::to_string(truth.size()) + " reference bits");
  }
  if (block_size == 0 || truth.empty() || truth.size() % block_size != 0) {
    throw ShapeError("compute_bit_metrics: length must be a positive multiple of the block size");
  }
  MetricSummary m;
  m.n_bits = truth.size();
  m.n_blocks = truth.size() / block_size;
  for (std::size_t b = 0; b < m.n_blocks; ++b) {
    std::size_t errs = 0;
    for (std::size_t i = b * block_size; i < (b + 1) * block_size; ++i) errs += (decided[i] & 1) != (truth[i] & 1);
    m.bit_errors += errs;
    m.block_errors += errs > 0;
  }
  m.ber = static_cast<double>(m.bit_errors) / static_cast<double>(m.n_bits);
  m.bler = static_cast<double>(m.block_errors) / static_cast<double>(m.n_blocks);
  return m;
}

MetricSummary compute_channel_mse(const ResourceGrid& estimate, const ResourceGrid& truth) {
  if (!estimate.same_dims(truth)) throw ShapeError("compute_channel_mse: grid dimensions differ");
  MetricSummary m;
  double acc = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) acc += std::norm(estimate.cells()[i] - truth.cells()[i]);
  m.n_re = truth.size();
  m.mse = acc / static_cast<double>(m.n_re);
  return m;
}

}  // namespace phyformer
