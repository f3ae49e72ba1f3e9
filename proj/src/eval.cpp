#include "phyformer/eval.hpp"

#include <algorithm>
#include <boost/math/distributions/normal.hpp>
#include <charconv>
#include <chrono>
#include <cmath>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>

#include "phyformer/channel.hpp"
#include "phyformer/classical.hpp"
#include "phyformer/errors.hpp"
#include "phyformer/link.hpp"
#include "phyformer/parallel.hpp"

namespace phyformer {

namespace {

constexpr std::size_t kChunk = 16;

std::string fmt(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

// Per-trial sufficient statistics; reduced in trial order so the result does
// not depend on how trials were scheduled.
struct Stats {
  std::size_t bits = 0, bit_errors = 0, blocks = 0, block_errors = 0;
  std::size_t units = 0;
  double sum = 0.0, sum_sq = 0.0;

  void add_mse(double mse) {
    ++units;
    sum += mse;
    sum_sq += mse * mse;
  }
  void add(const Stats& o) {
    bits += o.bits;
    bit_errors += o.bit_errors;
    blocks += o.blocks;
    block_errors += o.block_errors;
    units += o.units;
    sum += o.sum;
    sum_sq += o.sum_sq;
  }
};

void count_bits(Stats& s, std::span<const std::uint8_t> decided, std::span<const std::uint8_t> truth) {
  const auto m = compute_bit_metrics(decided, truth, truth.size());
  s.bits += m.n_bits;
  s.bit_errors += m.bit_errors;
  s.blocks += m.n_blocks;
  s.block_errors += m.block_errors;
}

std::vector<std::uint8_t> hard(std::span<const double> llr) {
  std::vector<std::uint8_t> out(llr.size());
  for (std::size_t i = 0; i < llr.size(); ++i) out[i] = hard_bit(llr[i]);
  return out;
}

Tensor model_pe(const TransformerModel& model, Task task) {
  return positional_encoding(task_coords(task), model.config().d_model);
}

void check_model(const TransformerModel& model, const SweepSpec& spec) {
  const auto& c = model.config();
  const auto& link = spec.link;
  if (spec.task == Task::E2E) {
    const int mask = link.pilot_mode == PilotMode::RandomComb ? link.n_users : 0;
    if (c.head != HeadKind::Llr || c.n_users != link.n_users || c.input_dim != 2 * link.n_rx + mask ||
        c.bits_per_symbol < Constellation(link.order).bits_per_symbol()) {
      throw ConfigError("transformer checkpoint does not fit the E2E link configuration");
    }
  } else {
    const ModelConfig t = task_config(spec.task);
    if (c.head != HeadKind::Regression || c.out_per_token != t.out_per_token || c.input_dim != t.input_dim) {
      throw ConfigError("transformer checkpoint does not fit the " + to_string(spec.task) + " task");
    }
  }
}

// E2E: stats[method][trial] for one grid point.
void sweep_e2e_point(const SweepSpec& spec, double ebn0, const TransformerModel* model,
                     std::vector<std::vector<Stats>>& stats) {
  LinkConfig link = spec.link;
  link.seed = spec.seed;
  link.ebn0_db = ebn0;
  const Constellation constellation(link.order);
  const auto bps = static_cast<std::size_t>(constellation.bits_per_symbol());
  const bool mask = link.pilot_mode == PilotMode::RandomComb;
  const std::size_t n_chunks = (spec.trials + kChunk - 1) / kChunk;
  const Tensor pe = model ? model_pe(*model, Task::E2E) : Tensor();

  parallel_for(n_chunks, spec.n_threads, [&](std::size_t chunk) {
    const std::size_t t0 = chunk * kChunk, t1 = std::min(spec.trials, t0 + kChunk);
    std::vector<Slot> slots;
    for (std::size_t t = t0; t < t1; ++t) slots.push_back(simulate_slot(link, t));
    Tensor logits;
    for (std::size_t mi = 0; mi < spec.methods.size(); ++mi) {
      const Method m = spec.methods[mi];
      if (m == Method::Transformer) {
        std::vector<TokenSequence> seqs;
        for (const auto& s : slots) seqs.push_back(tokenize_e2e(s.y, mask ? &s.pilots : nullptr));
        logits = model->infer(stack_tokens(seqs), pe, seqs.size());
        const int trained = 1 << model->config().bits_per_symbol;
        if (trained != link.order) {
          logits = select_bits(logits, link.n_users, trained, link.order);
        }
      }
      for (std::size_t k = 0; k < slots.size(); ++k) {
        const Slot& s = slots[k];
        Stats& st = stats[mi][t0 + k];
        if (m == Method::Transformer) {
          const auto data = s.pilots.data_res();
          const std::size_t n_tok = link.n_sc() * link.n_sym();
          for (std::size_t u = 0; u < s.payload.size(); ++u) {
            std::vector<std::uint8_t> decided;
            decided.reserve(s.payload[u].size());
            for (const auto& [sc, sym] : data) {
              const std::size_t row = k * n_tok + sc * link.n_sym() + sym;
              for (std::size_t b = 0; b < bps; ++b) decided.push_back(hard_bit(logit_to_llr(logits.at(row, u * bps + b))));
            }
            count_bits(st, decided, s.payload[u]);
          }
          continue;
        }
        std::vector<ResourceGrid> h;
        if (m == Method::PerfectCsi) {
          for (std::size_t u = 0; u < s.payload.size(); ++u) h.push_back(s.channel.user_grid(u));
        } else {
          const auto ls = ls_estimate(s.y, s.pilots);
          h = (m == Method::LsLinear ? interp_linear(ls) : interp_nearest(ls)).per_user;
        }
        const auto llrs = detect_slot(s.y, h, s.noise_var, s.pilots, constellation);
        for (std::size_t u = 0; u < llrs.size(); ++u) count_bits(st, hard(llrs[u]), s.payload[u]);
      }
    }
  });
}

// Channel tasks: stats[method][sample] for one grid point.
void sweep_channel_point(const SweepSpec& spec, double ebn0, const TransformerModel* model,
                         std::vector<std::vector<Stats>>& stats) {
  DatasetSpec ds_spec;
  ds_spec.task = spec.task;
  ds_spec.link = spec.link;
  ds_spec.n_samples = spec.trials * static_cast<std::size_t>(spec.link.n_rx);
  ds_spec.seed = spec.seed;
  ds_spec.ebn0_lo = ds_spec.ebn0_hi = ebn0;
  const Dataset ds = gen_dataset(ds_spec, spec.n_threads);
  const bool interp = spec.task == Task::Interpolation;
  const auto pilots = fixed_pilots(kSubcarriersPerRb);
  const std::size_t n_chunks = (ds.count() + kChunk - 1) / kChunk;
  const Tensor pe = model ? model_pe(*model, spec.task) : Tensor();

  parallel_for(n_chunks, spec.n_threads, [&](std::size_t chunk) {
    const std::size_t i0 = chunk * kChunk, i1 = std::min(ds.count(), i0 + kChunk);
    for (std::size_t mi = 0; mi < spec.methods.size(); ++mi) {
      const Method m = spec.methods[mi];
      if (m == Method::PerfectCsi) {
        for (std::size_t i = i0; i < i1; ++i) stats[mi][i].add_mse(0.0);
        continue;
      }
      if (m == Method::Transformer) {
        std::vector<std::size_t> idx(i1 - i0);
        std::iota(idx.begin(), idx.end(), i0);
        const Batch b = make_batch(ds, idx);
        const Tensor out = model->infer(b.tokens, pe, b.n_seq);
        const std::size_t per = out.size() / idx.size();
        for (std::size_t k = 0; k < idx.size(); ++k) {
          const auto tgt = ds.target(idx[k]);
          double acc = 0.0;
          if (interp) {
            const Tensor head({12, 4}, std::vector<double>(out.data().begin() + static_cast<std::ptrdiff_t>(k * per),
                                                           out.data().begin() + static_cast<std::ptrdiff_t>((k + 1) * per)));
            const Tensor grid = interpolation_grid(head);
            for (std::size_t j = 0; j < grid.size(); ++j) acc += (grid[j] - tgt[j]) * (grid[j] - tgt[j]);
          } else {
            for (std::size_t j = 0; j < per; ++j) {
              const double d = out[k * per + j] - tgt[j];
              acc += d * d;
            }
          }
          stats[mi][idx[k]].add_mse(acc / static_cast<double>(tgt.size() / 2));
        }
        continue;
      }
      for (std::size_t i = i0; i < i1; ++i) {
        const auto in = ds.input(i);
        const auto tgt = ds.target(i);
        ChannelEstimate est;
        est.per_user.emplace_back(kSubcarriersPerRb, kSymbolsPerSlot, 1);
        est.observed.emplace_back(kSubcarriersPerRb * kSymbolsPerSlot, 0);
        if (interp) {
          for (std::size_t p = 0; p < 6; ++p)
            for (std::size_t j = 0; j < 2; ++j) {
              const std::size_t sc = 2 * p, sym = kDmrsSymbols[j];
              const std::size_t t = (p * 2 + j) * 2;
              est.per_user[0](sc, sym) = {in[t], in[t + 1]};
              est.observed[0][sc * kSymbolsPerSlot + sym] = 1;
            }
        } else {
          ResourceGrid y(kSubcarriersPerRb, kSymbolsPerSlot, 1);
          for (std::size_t r = 0; r < y.size(); ++r) y.cells()[r] = {in[2 * r], in[2 * r + 1]};
          est = ls_estimate(y, pilots);
        }
        const auto full = m == Method::LsLinear ? interp_linear(est) : interp_nearest(est);
        double acc = 0.0;
        if (interp) {
          for (std::size_t k = 0; k < 12; ++k)
            for (std::size_t j = 0; j < 2; ++j) {
              const std::size_t t = (k * 2 + j) * 2;
              acc += std::norm(full.per_user[0](k, kDmrsSymbols[j]) - cd(tgt[t], tgt[t + 1]));
            }
        } else {
          for (std::size_t r = 0; r < full.per_user[0].size(); ++r)
            acc += std::norm(full.per_user[0].cells()[r] - cd(tgt[2 * r], tgt[2 * r + 1]));
        }
        stats[mi][i].add_mse(acc / static_cast<double>(tgt.size() / 2));
      }
    }
  });
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

template <class T>
T parse_field(const std::string& s, std::size_t line_no) {
  T v{};
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size() || s.empty()) {
    throw FormatError("sweep csv line " + std::to_string(line_no) + ": bad number '" + s + "'");
  }
  return v;
}

}  // namespace

std::string to_string(Method m) {
  switch (m) {
    case Method::Transformer: return "transformer";
    case Method::LsLinear: return "ls-linear";
    case Method::LsNearest: return "ls-nearest";
    case Method::PerfectCsi: return "perfect-csi";
  }
  return "?";
}

Method method_from_string(const std::string& s) {
  if (s == "transformer") return Method::Transformer;
  if (s == "ls-linear") return Method::LsLinear;
  if (s == "ls-nearest") return Method::LsNearest;
  if (s == "perfect-csi") return Method::PerfectCsi;
  throw ConfigError("unknown method '" + s + "'");
}

std::string SweepSpec::resolved_metric() const {
  if (!metric.empty()) return metric;
  return task == Task::E2E ? "bler" : "mse";
}

void SweepSpec::validate() const {
  link.validate();
  if (methods.empty()) throw ConfigError("sweep needs at least one method");
  if (ebn0_grid.empty()) throw ConfigError("sweep needs a non-empty Eb/N0 grid");
  if (trials < 100) throw ConfigError("sweep needs at least 100 trials per point");
  if (!(confidence > 0.0 && confidence < 1.0)) throw ConfigError("confidence must lie in (0, 1)");
  if (link.n_rb != 1) throw ConfigError("sweeps run on single-RB tiles");
  const std::string m = resolved_metric();
  if (task == Task::E2E ? (m != "ber" && m != "bler") : m != "mse") {
    throw ConfigError("metric '" + m + "' does not apply to the " + to_string(task) + " task");
  }
  if (task != Task::E2E && link.n_users != 1) throw ConfigError("channel tasks are single-user");
  if (task == Task::Estimation && link.pilot_mode != PilotMode::Fixed) throw ConfigError("estimation sweeps need fixed pilots");
}

double normal_quantile(double p) { return boost::math::quantile(boost::math::normal(), p); }

Interval wilson_interval(std::size_t successes, std::size_t n, double confidence) {
  if (n == 0) throw ContractError("wilson_interval: no trials");
  const double z = normal_quantile(0.5 + confidence / 2.0);
  const double nn = static_cast<double>(n);
  const double p = static_cast<double>(successes) / nn;
  const double denom = 1.0 + z * z / nn;
  const double centre = (p + z * z / (2.0 * nn)) / denom;
  const double half = z * std::sqrt(p * (1.0 - p) / nn + z * z / (4.0 * nn * nn)) / denom;
  return {successes == 0 ? 0.0 : std::max(0.0, centre - half), successes == n ? 1.0 : std::min(1.0, centre + half)};
}

Interval mean_interval(double mean, double sample_var, std::size_t n, double confidence) {
  if (n == 0) throw ContractError("mean_interval: no samples");
  const double z = normal_quantile(0.5 + confidence / 2.0);
  const double half = z * std::sqrt(std::max(sample_var, 0.0) / static_cast<double>(n));
  return {mean - half, mean + half};
}

std::vector<SweepRow> run_sweep(const SweepSpec& spec, const TransformerModel* model) {
  spec.validate();
  const bool wants_model = std::find(spec.methods.begin(), spec.methods.end(), Method::Transformer) != spec.methods.end();
  if (wants_model && !model) throw ConfigError("the transformer method needs a checkpoint");
  if (wants_model) check_model(*model, spec);
  const std::string metric = spec.resolved_metric();

  std::vector<std::vector<SweepRow>> per_method(spec.methods.size());
  for (double ebn0 : spec.ebn0_grid) {
    const std::size_t units = spec.task == Task::E2E ? spec.trials : spec.trials * static_cast<std::size_t>(spec.link.n_rx);
    std::vector<std::vector<Stats>> stats(spec.methods.size(), std::vector<Stats>(units));
    if (spec.task == Task::E2E) {
      sweep_e2e_point(spec, ebn0, wants_model ? model : nullptr, stats);
    } else {
      sweep_channel_point(spec, ebn0, wants_model ? model : nullptr, stats);
    }
    for (std::size_t mi = 0; mi < spec.methods.size(); ++mi) {
      Stats total;
      for (const auto& s : stats[mi]) total.add(s);
      SweepRow row;
      row.method = spec.methods[mi] == Method::Transformer && !spec.transformer_tag.empty() ? spec.transformer_tag
                                                                                            : to_string(spec.methods[mi]);
      row.ebn0_db = ebn0;
      row.metric = metric;
      if (metric == "mse") {
        const double n = static_cast<double>(total.units);
        row.value = total.sum / n;
        const double var = total.units > 1 ? (total.sum_sq - n * row.value * row.value) / (n - 1.0) : 0.0;
        const auto ci = mean_interval(row.value, var, total.units, spec.confidence);
        row.ci_low = ci.low;
        row.ci_high = ci.high;
        row.n = total.units;
      } else {
        const std::size_t k = metric == "ber" ? total.bit_errors : total.block_errors;
        row.n = metric == "ber" ? total.bits : total.blocks;
        row.value = static_cast<double>(k) / static_cast<double>(row.n);
        const auto ci = wilson_interval(k, row.n, spec.confidence);
        row.ci_low = ci.low;
        row.ci_high = ci.high;
      }
      per_method[mi].push_back(row);
    }
  }
  std::vector<SweepRow> rows;
  for (auto& m : per_method) rows.insert(rows.end(), m.begin(), m.end());
  return rows;
}

void write_sweep_csv(std::ostream& out, std::span<const SweepRow> rows) {
  out << "method,ebn0_db,metric,value,ci_low,ci_high,n\n";
  for (const auto& r : rows) {
    out << r.method << ',' << fmt(r.ebn0_db) << ',' << r.metric << ',' << fmt(r.value) << ',' << fmt(r.ci_low) << ','
        << fmt(r.ci_high) << ',' << r.n << '\n';
  }
}

std::vector<SweepRow> read_sweep_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError("sweep csv: empty input");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "method,ebn0_db,metric,value,ci_low,ci_high,n") throw FormatError("sweep csv: unexpected header '" + line + "'");
  std::vector<SweepRow> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto f = split_csv(line);
    if (f.size() != 7) throw FormatError("sweep csv line " + std::to_string(line_no) + ": expected 7 fields");
    SweepRow r;
    r.method = f[0];
    r.ebn0_db = parse_field<double>(f[1], line_no);
    r.metric = f[2];
    r.value = parse_field<double>(f[3], line_no);
    r.ci_low = parse_field<double>(f[4], line_no);
    r.ci_high = parse_field<double>(f[5], line_no);
    r.n = parse_field<std::size_t>(f[6], line_no);
    if (r.method.empty() || r.metric.empty()) throw FormatError("sweep csv line " + std::to_string(line_no) + ": empty name");
    rows.push_back(std::move(r));
  }
  if (rows.empty()) throw FormatError("sweep csv: empty input (no data rows)");
  return rows;
}

void write_plotdata(std::ostream& out, std::span<const SweepRow> rows) {
  if (rows.empty()) throw FormatError("plotdata: empty input");
  std::vector<std::string> order;
  for (const auto& r : rows)
    if (std::find(order.begin(), order.end(), r.method) == order.end()) order.push_back(r.method);
  for (std::size_t b = 0; b < order.size(); ++b) {
    if (b > 0) out << "\n\n";
    out << "# " << order[b] << '\n';
    out << "# ebn0_db " << rows.front().metric << " ci_low ci_high n\n";
    for (const auto& r : rows) {
      if (r.method != order[b]) continue;
      out << fmt(r.ebn0_db) << ' ' << fmt(r.value) << ' ' << fmt(r.ci_low) << ' ' << fmt(r.ci_high) << ' ' << r.n << '\n';
    }
  }
}

std::vector<ArchVariant> arch_variants(const ModelConfig& base, const std::string& axis) {
  std::vector<ArchVariant> out;
  auto add = [&](int layers, int heads) {
    ModelConfig c = base;
    c.n_layers = layers;
    c.n_heads = heads;
    c.validate();
    out.push_back({"transformer-L" + std::to_string(layers) + "-H" + std::to_string(heads), c});
  };
  if (axis == "depth") {
    for (int l = 1; l <= 4; ++l) add(l, base.n_heads);
  } else if (axis == "heads") {
    for (int h : {1, 2, 4, 8}) add(base.n_layers, h);
  } else {
    throw ConfigError("arch-sweep axis must be 'depth' or 'heads'");
  }
  return out;
}

std::vector<SweepRow> run_arch_sweep(const Dataset& dataset, const ModelConfig& base, const std::string& axis,
                                     const TrainConfig& train_config, SweepSpec sweep,
                                     const std::function<void(const ArchVariant&, const TrainResult&)>& on_trained) {
  sweep.methods = {Method::Transformer};
  sweep.task = dataset.spec.task;
  std::vector<SweepRow> rows;
  for (const auto& v : arch_variants(base, axis)) {
    const TransformerModel init(model_config_for(dataset, v.arch));
    const TrainResult res = train(init, dataset, train_config);
    if (on_trained) on_trained(v, res);
    sweep.transformer_tag = v.tag;
    const auto r = run_sweep(sweep, &res.model);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  return rows;
}

BenchReport bench_model(const TransformerModel& model, Task task, std::size_t batch, std::size_t iterations,
                        std::size_t warmup, const std::string& tag) {
  if (iterations == 0) throw ConfigError("bench: zero iterations");
  if (iterations < 1000) throw ConfigError("bench: at least 1000 measured iterations are required");
  if (warmup < 100) throw ConfigError("bench: at least 100 warmup iterations are required");
  if (batch == 0) throw ConfigError("bench: zero batch size");
  const auto coords = task_coords(task);
  const Tensor pe = model_pe(model, task);
  Tensor tokens({coords.size() * batch, static_cast<std::size_t>(model.config().input_dim)});
  Rng rng(0xBE9C);
  for (auto& v : tokens.storage()) v = rng.normal();

  BenchReport rep;
  rep.tag = tag;
  rep.warmup = warmup;
  rep.batch = batch;
  rep.parameters = model.parameter_count();
  double sink = 0.0;
  for (std::size_t i = 0; i < warmup; ++i) sink += model.infer(tokens, pe, batch)[0];
  rep.samples_us.reserve(iterations);
  for (std::size_t i = 0; i < iterations; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    sink += model.infer(tokens, pe, batch)[0];
    const auto t1 = std::chrono::steady_clock::now();
    rep.samples_us.push_back(std::chrono::duration<double, std::micro>(t1 - t0).count() / static_cast<double>(batch));
  }
  if (!std::isfinite(sink)) throw NumericError("bench: non-finite model output");
  std::vector<double> sorted = rep.samples_us;
  std::sort(sorted.begin(), sorted.end());
  rep.mean_us = std::accumulate(sorted.begin(), sorted.end(), 0.0) / static_cast<double>(sorted.size());
  auto pct = [&](double q) {
    const auto idx = static_cast<std::size_t>(std::ceil(q * static_cast<double>(sorted.size()))) - 1;
    return sorted[std::min(idx, sorted.size() - 1)];
  };
  rep.p50_us = pct(0.50);
  rep.p99_us = pct(0.99);
  return rep;
}

void write_bench_table(std::ostream& out, std::span<const BenchReport> reports) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%-24s %10s %6s %8s %12s %12s %12s\n", "model", "params", "batch", "iters", "mean_us",
                "p50_us", "p99_us");
  out << buf;
  for (const auto& r : reports) {
    std::snprintf(buf, sizeof(buf), "%-24s %10zu %6zu %8zu %12.2f %12.2f %12.2f\n", r.tag.c_str(), r.parameters, r.batch,
                  r.samples_us.size(), r.mean_us, r.p50_us, r.p99_us);
    out << buf;
  }
}

void write_bench_csv(std::ostream& out, std::span<const BenchReport> reports) {
  out << "model,parameters,batch,warmup,iterations,mean_us,p50_us,p99_us\n";
  for (const auto& r : reports) {
    out << r.tag << ',' << r.parameters << ',' << r.batch << ',' << r.warmup << ',' << r.samples_us.size() << ','
        << fmt(r.mean_us) << ',' << fmt(r.p50_us) << ',' << fmt(r.p99_us) << '\n';
  }
}

}  // namespace phyformer
