#include "phyformer/pipeline.hpp"

#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <numeric>
#include <ostream>
#include <sstream>

#include "phyformer/adam.hpp"
#include "phyformer/channel.hpp"
#include "phyformer/errors.hpp"
#include "phyformer/link.hpp"
#include "phyformer/parallel.hpp"

static_assert(std::endian::native == std::endian::little, "file formats assume a little-endian host");

namespace phyformer {

namespace {

constexpr char kDatasetMagic[4] = {'P', 'H', 'Y', 'A'};
constexpr char kCheckpointMagic[4] = {'P', 'H', 'Y', 'C'};
constexpr std::size_t kEvalChunk = 64;

// ---- binary io ------------------------------------------------------------

class Writer {
 public:
  explicit Writer(const std::filesystem::path& path) : out_(path, std::ios::binary | std::ios::trunc), path_(path) {
    if (!out_) throw FormatError("cannot open " + path.string() + " for writing");
  }
  template <class T>
  void pod(const T& v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void bytes(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
  void str(const std::string& s) {
    pod(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void shape(const Shape& s) {
    pod(static_cast<std::uint32_t>(s.size()));
    for (auto d : s) pod(static_cast<std::uint64_t>(d));
  }
  void close() {
    out_.close();
    if (!out_) throw FormatError("write to " + path_.string() + " failed");
  }

 private:
  std::ofstream out_;
  std::filesystem::path path_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path) : in_(path, std::ios::binary), path_(path) {
    if (!in_) throw FormatError("cannot open " + path.string());
  }
  template <class T>
  T pod() {
    T v{};
    bytes(&v, sizeof(T));
    return v;
  }
  void bytes(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) throw FormatError(path_.string() + ": truncated file");
  }
  std::string str() {
    const auto n = pod<std::uint32_t>();
    if (n > (1u << 20)) throw FormatError(path_.string() + ": implausible string length");
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }
  Shape shape() {
    const auto rank = pod<std::uint32_t>();
    if (rank == 0 || rank > 8) throw FormatError(path_.string() + ": bad tensor rank");
    Shape s(rank);
    for (auto& d : s) {
      d = static_cast<std::size_t>(pod<std::uint64_t>());
      if (d == 0 || d > (1u << 24)) throw FormatError(path_.string() + ": bad tensor dimension");
    }
    return s;
  }
  void magic(const char (&expected)[4], std::uint32_t max_version, std::uint32_t& version) {
    char m[4];
    bytes(m, 4);
    if (std::memcmp(m, expected, 4) != 0) throw FormatError(path_.string() + ": bad magic");
    version = pod<std::uint32_t>();
    if (version == 0 || version > max_version) {
      throw FormatError(path_.string() + ": format version " + std::to_string(version) +
                        " is not supported by this reader (max " + std::to_string(max_version) + ")");
    }
  }
  void expect_end() {
    if (in_.peek() != std::char_traits<char>::eof()) throw FormatError(path_.string() + ": trailing bytes");
  }

 private:
  std::ifstream in_;
  std::filesystem::path path_;
};

// ---- key=value ------------------------------------------------------------

template <class T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const char* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc{} || ptr != end) throw ConfigError("bad value '" + value + "' for " + key);
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "1" || value == "true") return true;
  if (value == "0" || value == "false") return false;
  throw ConfigError("bad boolean '" + value + "' for " + key);
}

std::string fmt(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

// ---- dataset generation -----------------------------------------------------

double draw_ebn0(const DatasetSpec& spec, std::uint64_t trial) {
  if (spec.ebn0_lo == spec.ebn0_hi) return spec.ebn0_lo;
  Rng rng(lane_seed(spec.seed, trial, Lane::Ebn0));
  return rng.uniform(spec.ebn0_lo, spec.ebn0_hi);
}

void put_complex(std::span<double> dst, std::size_t idx, cd v) {
  dst[2 * idx] = v.real();
  dst[2 * idx + 1] = v.imag();
}

void gen_e2e(const DatasetSpec& spec, std::uint64_t trial, std::span<double> in, std::span<double> tgt) {
  LinkConfig link = spec.link;
  link.seed = spec.seed;
  link.ebn0_db = draw_ebn0(spec, trial);
  const Slot slot = simulate_slot(link, trial);
  const bool mask = link.pilot_mode == PilotMode::RandomComb;
  const auto tok = tokenize_e2e(slot.y, mask ? &slot.pilots : nullptr);
  std::copy(tok.tokens.data().begin(), tok.tokens.data().end(), in.begin());
  const auto bps = static_cast<std::size_t>(Constellation(link.order).bits_per_symbol());
  const std::size_t cols = slot.payload.size() * bps;
  std::fill(tgt.begin(), tgt.end(), -1.0);
  const auto data = slot.pilots.data_res();
  for (std::size_t k = 0; k < data.size(); ++k) {
    const std::size_t row = data[k].first * link.n_sym() + data[k].second;
    for (std::size_t u = 0; u < slot.payload.size(); ++u)
      for (std::size_t b = 0; b < bps; ++b) tgt[row * cols + u * bps + b] = slot.payload[u][k * bps + b];
  }
}

void gen_estimation(const DatasetSpec& spec, std::uint64_t trial, std::size_t first, Dataset& ds) {
  LinkConfig link = spec.link;
  link.seed = spec.seed;
  link.ebn0_db = draw_ebn0(spec, trial);
  const Slot slot = simulate_slot(link, trial);
  const ResourceGrid h = slot.channel.user_grid(0);
  const auto n_in = shape_numel(ds.input_shape);
  for (std::size_t a = 0; a < slot.y.n_ant(); ++a) {
    const std::size_t i = first + a;
    if (i >= ds.count()) break;
    std::span<double> in(ds.inputs.data() + i * n_in, n_in);
    std::span<double> tgt(ds.targets.data() + i * n_in, n_in);
    for (std::size_t sc = 0; sc < slot.y.n_sc(); ++sc)
      for (std::size_t sym = 0; sym < slot.y.n_sym(); ++sym) {
        put_complex(in, sc * slot.y.n_sym() + sym, slot.y(sc, sym, a));
        put_complex(tgt, sc * slot.y.n_sym() + sym, h(sc, sym, a));
      }
  }
}

void gen_interpolation(const DatasetSpec& spec, std::uint64_t trial, std::size_t first, Dataset& ds) {
  LinkConfig link = spec.link;
  link.seed = spec.seed;
  const double ebn0 = draw_ebn0(spec, trial);
  const int bps = Constellation(link.order).bits_per_symbol();
  const double nv = ebn0_to_noisevar(ebn0, bps);
  const double capture_nv = ebn0_to_noisevar(link.ebn0_db, bps);
  const auto channel = draw_channel(link, lane_seed(spec.seed, trial, Lane::Channel));
  // Both combs together give known pilots on every subcarrier of the DMRS symbols.
  const std::size_t offsets[] = {0, 1};
  const auto full = comb_pilots(kSubcarriersPerRb, offsets);
  auto x_at = [&](std::size_t sc, std::size_t j) {
    for (const auto& user : full.per_user)
      for (const auto& p : user)
        if (p.sc == sc && p.sym == kDmrsSymbols[j]) return p.value;
    throw ContractError("missing full-band pilot");
  };
  for (std::size_t a = 0; a < channel.n_rx(); ++a) {
    const std::size_t i = first + a;
    if (i >= ds.count()) break;
    std::span<double> in(ds.inputs.data() + i * 24, 24);
    std::span<double> tgt(ds.targets.data() + i * 48, 48);
    Rng capture_rng(stream_seed(lane_seed(spec.seed, trial, Lane::Noise), a));
    Rng aug_rng(stream_seed(lane_seed(spec.seed, trial, Lane::Augment), a));
    PilotCapture cap;
    for (std::size_t k = 0; k < kSubcarriersPerRb; ++k) {
      for (std::size_t j = 0; j < 2; ++j) {
        const cd h = channel.h(k, kDmrsSymbols[j], 0, a);
        const cd x = x_at(k, j);
        const cd y = h * x + (spec.ota_targets ? capture_rng.complex_normal(capture_nv) : cd{});
        put_complex(tgt, k * 2 + j, spec.ota_targets ? y / x : h);
        if (k % 2 == 0) {
          cap.y.push_back(y);
          cap.x.push_back(x);
        }
      }
    }
    const auto noisy = augment_noise(cap, nv, aug_rng);
    for (std::size_t t = 0; t < noisy.size(); ++t) put_complex(in, t, noisy[t]);
  }
}

}  // namespace

std::span<const double> Dataset::input(std::size_t i) const {
  const auto n = shape_numel(input_shape);
  return {inputs.data() + i * n, n};
}

std::span<const double> Dataset::target(std::size_t i) const {
  const auto n = shape_numel(target_shape);
  return {targets.data() + i * n, n};
}

Dataset gen_dataset(const DatasetSpec& spec, std::size_t n_threads) {
  spec.link.validate();
  if (spec.n_samples < 1) throw ConfigError("n_samples must be at least 1");
  if (spec.link.n_rb != 1) throw ConfigError("datasets are generated per single-RB tile");
  if (!(spec.ebn0_lo <= spec.ebn0_hi)) throw ConfigError("ebn0 range is empty");
  if (spec.task != Task::E2E && spec.link.n_users != 1) throw ConfigError("channel tasks are single-user");
  if (spec.ota_targets && spec.task != Task::Interpolation) throw ConfigError("ota targets apply to interpolation only");

  Dataset ds;
  ds.spec = spec;
  const auto n_sc = spec.link.n_sc(), n_sym = spec.link.n_sym();
  const auto n_rx = static_cast<std::size_t>(spec.link.n_rx);
  switch (spec.task) {
    case Task::E2E: {
      const auto bps = static_cast<std::size_t>(Constellation(spec.link.order).bits_per_symbol());
      const std::size_t extra = spec.link.pilot_mode == PilotMode::RandomComb ? static_cast<std::size_t>(spec.link.n_users) : 0;
      ds.input_shape = {n_sc * n_sym, 2 * n_rx + extra};
      ds.target_shape = {n_sc * n_sym, static_cast<std::size_t>(spec.link.n_users) * bps};
      break;
    }
    case Task::Interpolation:
      ds.input_shape = {6, 2, 2};
      ds.target_shape = {12, 2, 2};
      break;
    case Task::Estimation:
      ds.input_shape = {n_sc, n_sym, 2};
      ds.target_shape = {n_sc, n_sym, 2};
      break;
  }
  const auto n_in = shape_numel(ds.input_shape), n_tgt = shape_numel(ds.target_shape);
  ds.inputs.assign(spec.n_samples * n_in, 0.0);
  ds.targets.assign(spec.n_samples * n_tgt, 0.0);

  if (spec.task == Task::E2E) {
    parallel_for(spec.n_samples, n_threads, [&](std::size_t i) {
      gen_e2e(spec, i, {ds.inputs.data() + i * n_in, n_in}, {ds.targets.data() + i * n_tgt, n_tgt});
    });
  } else {
    const std::size_t n_trials = (spec.n_samples + n_rx - 1) / n_rx;
    parallel_for(n_trials, n_threads, [&](std::size_t t) {
      if (spec.task == Task::Estimation) {
        gen_estimation(spec, t, t * n_rx, ds);
      } else {
        gen_interpolation(spec, t, t * n_rx, ds);
      }
    });
  }
  return ds;
}

void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  Writer w(path);
  w.bytes(kDatasetMagic, 4);
  w.pod(kDatasetVersion);
  w.pod(static_cast<std::uint32_t>(ds.spec.task));
  w.pod(static_cast<std::uint64_t>(ds.count()));
  w.shape(ds.input_shape);
  w.shape(ds.target_shape);
  w.str(to_key_values(ds.spec.link));
  w.pod(ds.spec.seed);
  w.pod(ds.spec.ebn0_lo);
  w.pod(ds.spec.ebn0_hi);
  w.pod(static_cast<std::uint8_t>(ds.spec.ota_targets));
  const auto n_in = shape_numel(ds.input_shape), n_tgt = shape_numel(ds.target_shape);
  std::vector<float> buf;
  for (std::size_t i = 0; i < ds.count(); ++i) {
    buf.assign(ds.inputs.begin() + static_cast<std::ptrdiff_t>(i * n_in),
               ds.inputs.begin() + static_cast<std::ptrdiff_t>((i + 1) * n_in));
    buf.insert(buf.end(), ds.targets.begin() + static_cast<std::ptrdiff_t>(i * n_tgt),
               ds.targets.begin() + static_cast<std::ptrdiff_t>((i + 1) * n_tgt));
    w.bytes(buf.data(), buf.size() * sizeof(float));
  }
  w.close();
}

Dataset load_dataset(const std::filesystem::path& path) {
  Reader r(path);
  std::uint32_t version = 0;
  r.magic(kDatasetMagic, kDatasetVersion, version);
  Dataset ds;
  const auto task = r.pod<std::uint32_t>();
  if (task > static_cast<std::uint32_t>(Task::Estimation)) throw FormatError(path.string() + ": unknown task id");
  ds.spec.task = static_cast<Task>(task);
  const auto count = r.pod<std::uint64_t>();
  if (count == 0) throw FormatError(path.string() + ": empty dataset");
  ds.spec.n_samples = static_cast<std::size_t>(count);
  ds.input_shape = r.shape();
  ds.target_shape = r.shape();
  try {
    ds.spec.link = link_config_from_key_values(r.str());
  } catch (const ConfigError& e) {
    throw FormatError(path.string() + ": bad link config snapshot: " + e.what());
  }
  ds.spec.seed = r.pod<std::uint64_t>();
  ds.spec.ebn0_lo = r.pod<double>();
  ds.spec.ebn0_hi = r.pod<double>();
  ds.spec.ota_targets = r.pod<std::uint8_t>() != 0;
  const auto n_in = shape_numel(ds.input_shape), n_tgt = shape_numel(ds.target_shape);
  ds.inputs.reserve(count * n_in);
  ds.targets.reserve(count * n_tgt);
  std::vector<float> buf(n_in + n_tgt);
  for (std::size_t i = 0; i < count; ++i) {
    r.bytes(buf.data(), buf.size() * sizeof(float));
    ds.inputs.insert(ds.inputs.end(), buf.begin(), buf.begin() + static_cast<std::ptrdiff_t>(n_in));
    ds.targets.insert(ds.targets.end(), buf.begin() + static_cast<std::ptrdiff_t>(n_in), buf.end());
  }
  r.expect_end();
  return ds;
}

std::vector<cd> augment_noise(const PilotCapture& capture, double noise_var, Rng& rng) {
  if (capture.y.size() != capture.x.size()) throw ShapeError("augment_noise: y and x lengths differ");
  if (noise_var < 0.0) throw ContractError("augment_noise: negative noise variance");
  std::vector<cd> out(capture.y.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (capture.x[i] == cd{}) throw NumericError("augment_noise: zero pilot symbol");
    const cd n = noise_var > 0.0 ? rng.complex_normal(noise_var) : cd{};
    out[i] = (capture.y[i] + n) / capture.x[i];
  }
  return out;
}

std::vector<Coord> task_coords(Task task) {
  if (task == Task::Interpolation) return tokenize_interpolation(Tensor({6, 2, 2})).coords;
  std::vector<Coord> c;
  for (std::size_t sc = 0; sc < kSubcarriersPerRb; ++sc)
    for (std::size_t sym = 0; sym < kSymbolsPerSlot; ++sym) c.emplace_back(sc, sym);
  return c;
}

Batch make_batch(const Dataset& ds, std::span<const std::size_t> indices, Rng* permute_rng) {
  if (indices.empty()) throw ShapeError("make_batch: no samples");
  const Task task = ds.spec.task;
  const std::size_t n_tok = task == Task::Interpolation ? 12 : ds.input_shape[0] * (task == Task::E2E ? 1 : ds.input_shape[1]);
  const std::size_t f_in = shape_numel(ds.input_shape) / n_tok;
  const std::size_t f_out = task == Task::Interpolation ? 4 : shape_numel(ds.target_shape) / n_tok;
  Batch b;
  b.n_seq = indices.size();
  b.tokens = Tensor({b.n_seq * n_tok, f_in});
  b.targets = Tensor({b.n_seq * n_tok, f_out});
  if (task == Task::E2E) b.mask = Tensor(b.targets.shape());
  const std::size_t n_rx = static_cast<std::size_t>(ds.spec.link.n_rx);
  std::vector<std::size_t> perm(n_rx);
  for (std::size_t s = 0; s < indices.size(); ++s) {
    if (indices[s] >= ds.count()) throw ShapeError("make_batch: sample index out of range");
    const auto in = ds.input(indices[s]);
    const auto tgt = ds.target(indices[s]);
    double* tok = b.tokens.ptr() + s * n_tok * f_in;
    double* out = b.targets.ptr() + s * n_tok * f_out;
    std::copy(in.begin(), in.end(), tok);
    if (task == Task::E2E && permute_rng) {
      std::iota(perm.begin(), perm.end(), 0);
      std::shuffle(perm.begin(), perm.end(), permute_rng->engine());
      for (std::size_t t = 0; t < n_tok; ++t)
        for (std::size_t a = 0; a < n_rx; ++a) {
          tok[t * f_in + 2 * a] = in[t * f_in + 2 * perm[a]];
          tok[t * f_in + 2 * a + 1] = in[t * f_in + 2 * perm[a] + 1];
        }
    }
    if (task == Task::Interpolation) {
      for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 2; ++j)
          for (std::size_t m = 0; m < 2; ++m)
            for (std::size_t c = 0; c < 2; ++c) out[(i * 2 + j) * 4 + 2 * m + c] = tgt[((2 * i + m) * 2 + j) * 2 + c];
    } else {
      std::copy(tgt.begin(), tgt.end(), out);
    }
    if (task == Task::E2E) {
      double* mask = b.mask.ptr() + s * n_tok * f_out;
      for (std::size_t k = 0; k < n_tok * f_out; ++k) {
        mask[k] = out[k] >= 0.0 ? 1.0 : 0.0;
        if (out[k] < 0.0) out[k] = 0.0;
      }
    }
  }
  return b;
}

ad::Var task_loss(Task task, ad::Var output, const Batch& batch) {
  return task == Task::E2E ? llr_loss(output, batch.targets, batch.mask) : regression_loss(output, batch.targets);
}

ModelConfig model_config_for(const Dataset& ds, ModelConfig arch) {
  const auto& link = ds.spec.link;
  const ModelConfig t = task_config(ds.spec.task, link.n_users, Constellation(link.order).bits_per_symbol(),
                                    link.pilot_mode == PilotMode::RandomComb, link.n_rx);
  arch.head = t.head;
  arch.n_users = t.n_users;
  arch.bits_per_symbol = t.bits_per_symbol;
  arch.out_per_token = t.out_per_token;
  arch.input_dim = t.input_dim;
  return arch;
}

void TrainConfig::validate() const {
  if (steps < 1) throw ConfigError("steps must be at least 1");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be positive");
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must lie in [0, 1)");
}

double evaluate_loss(const TransformerModel& model, const Dataset& ds, std::span<const std::size_t> indices) {
  if (indices.empty()) throw ShapeError("evaluate_loss: no samples");
  const Tensor pe = positional_encoding(task_coords(ds.spec.task), model.config().d_model);
  double total = 0.0, weight = 0.0;
  for (std::size_t off = 0; off < indices.size(); off += kEvalChunk) {
    const auto chunk = indices.subspan(off, std::min(kEvalChunk, indices.size() - off));
    const Batch b = make_batch(ds, chunk);
    ad::Tape tape;
    std::vector<ad::Var> vars;
    for (const auto& p : model.params()) vars.push_back(tape.constant(p));
    const auto out = model.forward(tape, vars, b.tokens, pe, b.n_seq);
    const double w = ds.spec.task == Task::E2E ? std::accumulate(b.mask.data().begin(), b.mask.data().end(), 0.0)
                                                : static_cast<double>(b.targets.size());
    total += task_loss(ds.spec.task, out, b).value().item() * w;
    weight += w;
  }
  return total / weight;
}

TrainResult train(const TransformerModel& init, const Dataset& ds, const TrainConfig& config,
                  const std::function<void(const LossRecord&)>& on_record) {
  config.validate();
  const ModelConfig expected = model_config_for(ds, init.config());
  if (!(expected == init.config())) throw ConfigError("model head or input width does not fit the dataset task");

  std::vector<std::size_t> order(ds.count());
  std::iota(order.begin(), order.end(), 0);
  {
    Rng split(stream_seed(config.seed, 0, 0x5B11));
    std::shuffle(order.begin(), order.end(), split.engine());
  }
  auto n_val = static_cast<std::size_t>(config.val_fraction * static_cast<double>(ds.count()));
  if (n_val >= ds.count()) n_val = ds.count() - 1;
  const std::vector<std::size_t> val(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> train_idx(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  const std::size_t batch = std::min(config.batch_size, train_idx.size());
  const std::size_t per_epoch = std::max<std::size_t>(1, train_idx.size() / batch);
  const std::size_t eval_every = config.eval_every ? config.eval_every : per_epoch;

  TransformerModel model = init;
  TrainResult result{init, {}, 0, std::numeric_limits<double>::quiet_NaN(), 0.0};
  AdamState adam(AdamConfig{.lr = config.lr});
  const Tensor pe = positional_encoding(task_coords(ds.spec.task), model.config().d_model);
  Rng permute(stream_seed(config.seed, 0, 0x9E7));

  std::size_t cursor = train_idx.size();
  std::uint64_t epoch = 0;
  double interval_loss = 0.0;
  std::size_t interval_steps = 0;
  std::vector<Tensor> grads(model.params().size());

  for (std::size_t step = 1; step <= config.steps; ++step) {
    if (cursor + batch > train_idx.size()) {
      Rng shuffle(stream_seed(config.seed, epoch++, 0x54F));
      std::shuffle(train_idx.begin(), train_idx.end(), shuffle.engine());
      cursor = 0;
    }
    const std::span<const std::size_t> idx(train_idx.data() + cursor, batch);
    cursor += batch;
    const Batch b = make_batch(ds, idx, config.antenna_permutation ? &permute : nullptr);

    double loss_value = 0.0;
    try {
      ad::Tape tape;
      const auto vars = model.bind(tape);
      const auto loss = task_loss(ds.spec.task, model.forward(tape, vars, b.tokens, pe, b.n_seq), b);
      loss_value = loss.value().item();
      const auto g = ad::backward(tape, loss);
      for (std::size_t i = 0; i < vars.size(); ++i) grads[i] = g[vars[i]];
    } catch (const NumericError& e) {
      throw NumericError("training diverged at step " + std::to_string(step) + " (epoch " +
                         std::to_string(epoch) + ", seed " + std::to_string(config.seed) + "): " + e.what());
    }
    double lr = config.lr;
    if (config.schedule == Schedule::Cosine) {
      lr *= 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step - 1) / static_cast<double>(config.steps)));
    }
    adam_step(model.params(), grads, adam, lr);
    interval_loss += loss_value;
    ++interval_steps;
    result.final_train_loss = loss_value;

    if (step % eval_every == 0 || step == config.steps) {
      LossRecord rec{step, interval_loss / static_cast<double>(interval_steps), std::numeric_limits<double>::quiet_NaN()};
      if (!val.empty()) {
        rec.val_loss = evaluate_loss(model, ds, val);
        if (!(rec.val_loss >= result.best_val_loss)) {
          result.best_val_loss = rec.val_loss;
          result.best_step = step;
          result.model = model;
        }
      }
      result.trace.push_back(rec);
      if (on_record) on_record(rec);
      interval_loss = 0.0;
      interval_steps = 0;
    }
  }
  if (val.empty()) {
    result.model = model;
    result.best_step = config.steps;
  }
  return result;
}

void write_loss_csv(std::ostream& out, std::span<const LossRecord> trace) {
  out << "step,train_loss,val_loss\n";
  for (const auto& r : trace) {
    out << r.step << ',' << fmt(r.train_loss) << ',';
    if (!std::isnan(r.val_loss)) out << fmt(r.val_loss);
    out << '\n';
  }
}

void save_checkpoint(const std::filesystem::path& path, const TransformerModel& model, const TrainMeta& meta) {
  Writer w(path);
  w.bytes(kCheckpointMagic, 4);
  w.pod(kCheckpointVersion);
  w.str(to_key_values(model.config()));
  w.pod(meta.steps);
  w.pod(meta.final_loss);
  w.pod(meta.seed);
  w.pod(static_cast<std::uint32_t>(model.params().size()));
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    const Tensor& t = model.params()[i];
    w.str(model.param_names()[i]);
    w.shape(t.shape());
    w.bytes(t.ptr(), t.size() * sizeof(double));
  }
  w.close();
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected) {
  Reader r(path);
  std::uint32_t version = 0;
  r.magic(kCheckpointMagic, kCheckpointVersion, version);
  ModelConfig config;
  {
    std::istringstream text(r.str());
    std::string line;
    while (std::getline(text, line)) {
      const auto eq = line.find('=');
      if (eq == std::string::npos || !set_field(config, line.substr(0, eq), line.substr(eq + 1))) {
        throw FormatError(path.string() + ": bad model config line '" + line + "'");
      }
    }
  }
  if (expected && !(*expected == config)) {
    throw ConfigError(path.string() + ": checkpoint model config differs from the requested one");
  }
  Checkpoint ck{TransformerModel(config), {}};
  ck.meta.steps = r.pod<std::uint64_t>();
  ck.meta.final_loss = r.pod<double>();
  ck.meta.seed = r.pod<std::uint64_t>();
  const auto n = r.pod<std::uint32_t>();
  if (n != ck.model.params().size()) throw FormatError(path.string() + ": parameter count mismatch");
  for (std::size_t i = 0; i < n; ++i) {
    const std::string name = r.str();
    const Shape shape = r.shape();
    Tensor& t = ck.model.params()[i];
    if (name != ck.model.param_names()[i] || shape != t.shape()) {
      throw FormatError(path.string() + ": unexpected tensor " + name + " " + shape_str(shape));
    }
    r.bytes(t.ptr(), t.size() * sizeof(double));
  }
  r.expect_end();
  return ck;
}

std::string to_key_values(const LinkConfig& c) {
  std::ostringstream o;
  o << "n_users=" << c.n_users << "\nn_rx=" << c.n_rx << "\norder=" << c.order << "\nebn0_db=" << fmt(c.ebn0_db)
    << "\npilot_mode=" << to_string(c.pilot_mode) << "\nrms_delay_spread=" << fmt(c.rms_delay_spread)
    << "\nn_taps=" << c.n_taps << "\nfading=" << (c.fading ? "true" : "false") << "\nn_rb=" << c.n_rb << "\nscs_hz=" << fmt(c.scs_hz) << "\nseed=" << c.seed << '\n';
  return o.str();
}

std::string to_key_values(const ModelConfig& c) {
  std::ostringstream o;
  o << "n_layers=" << c.n_layers << "\nn_heads=" << c.n_heads << "\nd_model=" << c.d_model << "\nd_ff=" << c.d_ff
    << "\nhead=" << (c.head == HeadKind::Llr ? "llr" : "regression") << "\nn_users=" << c.n_users
    << "\nbits_per_symbol=" << c.bits_per_symbol << "\nout_per_token=" << c.out_per_token
    << "\ninput_dim=" << c.input_dim << "\nmodel_seed=" << c.seed << '\n';
  return o.str();
}

std::string to_key_values(const TrainConfig& c) {
  std::ostringstream o;
  o << "lr=" << fmt(c.lr) << "\nbatch_size=" << c.batch_size << "\nsteps=" << c.steps
    << "\nschedule=" << (c.schedule == Schedule::Cosine ? "cosine" : "constant") << "\ntrain_seed=" << c.seed
    << "\nval_fraction=" << fmt(c.val_fraction) << "\neval_every=" << c.eval_every
    << "\nantenna_permutation=" << (c.antenna_permutation ? "true" : "false") << '\n';
  return o.str();
}

bool set_field(LinkConfig& c, const std::string& k, const std::string& v) {
  if (k == "n_users") c.n_users = parse_number<int>(k, v);
  else if (k == "n_rx") c.n_rx = parse_number<int>(k, v);
  else if (k == "order") c.order = parse_number<int>(k, v);
  else if (k == "ebn0_db") c.ebn0_db = parse_number<double>(k, v);
  else if (k == "pilot_mode") c.pilot_mode = pilot_mode_from_string(v);
  else if (k == "rms_delay_spread") c.rms_delay_spread = parse_number<double>(k, v);
  else if (k == "n_taps") c.n_taps = parse_number<int>(k, v);
  else if (k == "fading") c.fading = parse_bool(k, v);
  else if (k == "n_rb") c.n_rb = parse_number<std::size_t>(k, v);
  else if (k == "scs_hz") c.scs_hz = parse_number<double>(k, v);
  else if (k == "seed") c.seed = parse_number<std::uint64_t>(k, v);
  else return false;
  return true;
}

bool set_field(ModelConfig& c, const std::string& k, const std::string& v) {
  if (k == "n_layers") c.n_layers = parse_number<int>(k, v);
  else if (k == "n_heads") c.n_heads = parse_number<int>(k, v);
  else if (k == "d_model") c.d_model = parse_number<int>(k, v);
  else if (k == "d_ff") c.d_ff = parse_number<int>(k, v);
  else if (k == "head") {
    if (v == "llr") c.head = HeadKind::Llr;
    else if (v == "regression") c.head = HeadKind::Regression;
    else throw ConfigError("bad head '" + v + "'");
  } else if (k == "n_users") c.n_users = parse_number<int>(k, v);
  else if (k == "bits_per_symbol") c.bits_per_symbol = parse_number<int>(k, v);
  else if (k == "out_per_token") c.out_per_token = parse_number<int>(k, v);
  else if (k == "input_dim") c.input_dim = parse_number<int>(k, v);
  else if (k == "model_seed") c.seed = parse_number<std::uint64_t>(k, v);
  else return false;
  return true;
}

bool set_field(TrainConfig& c, const std::string& k, const std::string& v) {
  if (k == "lr") c.lr = parse_number<double>(k, v);
  else if (k == "batch_size") c.batch_size = parse_number<std::size_t>(k, v);
  else if (k == "steps") c.steps = parse_number<std::size_t>(k, v);
  else if (k == "schedule") {
    if (v == "constant") c.schedule = Schedule::Constant;
    else if (v == "cosine") c.schedule = Schedule::Cosine;
    else throw ConfigError("bad schedule '" + v + "'");
  } else if (k == "train_seed") c.seed = parse_number<std::uint64_t>(k, v);
  else if (k == "val_fraction") c.val_fraction = parse_number<double>(k, v);
  else if (k == "eval_every") c.eval_every = parse_number<std::size_t>(k, v);
  else if (k == "antenna_permutation") c.antenna_permutation = parse_bool(k, v);
  else return false;
  return true;
}

LinkConfig link_config_from_key_values(const std::string& text) {
  LinkConfig c;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos || !set_field(c, line.substr(0, eq), line.substr(eq + 1))) {
      throw ConfigError("bad link config line '" + line + "'");
    }
  }
  return c;
}

}  // namespace phyformer
