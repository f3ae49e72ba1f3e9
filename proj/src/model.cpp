#include "phyformer/model.hpp"

#include <cmath>

#include "phyformer/constellation.hpp"
#include "phyformer/errors.hpp"
#include "phyformer/rng.hpp"

namespace phyformer {

namespace {

constexpr double kLnEps = 1e-6;

ad::Var linear(ad::Var x, ad::Var w, ad::Var b) { return ad::add_bias(ad::matmul(x, w), b); }

int log2_order(int order) {
  if (!is_supported_order(order)) throw ConfigError("unsupported modulation order " + std::to_string(order));
  int b = 0;
  while ((1 << b) < order) ++b;
  return b;
}

}  // namespace

std::string to_string(Task task) {
  switch (task) {
    case Task::E2E: return "e2e";
    case Task::Interpolation: return "interpolation";
    case Task::Estimation: return "estimation";
  }
  return "?";
}

Task task_from_string(const std::string& s) {
  if (s == "e2e") return Task::E2E;
  if (s == "interpolation") return Task::Interpolation;
  if (s == "estimation") return Task::Estimation;
  throw ConfigError("unknown task '" + s + "'");
}

int ModelConfig::output_dim() const {
  return head == HeadKind::Llr ? n_users * bits_per_symbol : out_per_token;
}

void ModelConfig::validate() const {
  if (n_layers < 1 || n_heads < 1 || d_model < 4 || d_ff < 1 || input_dim < 1) {
    throw ConfigError("model dimensions must be positive");
  }
  if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
  if (d_model % 4 != 0) throw ConfigError("d_model must be divisible by 4");
  if (head == HeadKind::Llr && (n_users < 1 || bits_per_symbol < 1)) throw ConfigError("bad LLR head");
  if (head == HeadKind::Regression && out_per_token < 1) throw ConfigError("bad regression head");
}

ModelConfig task_config(Task task, int n_users, int bits_per_symbol, bool pilot_mask, int n_rx) {
  ModelConfig c;
  switch (task) {
    case Task::E2E:
      c.head = HeadKind::Llr;
      c.n_users = n_users;
      c.bits_per_symbol = bits_per_symbol;
      c.input_dim = 2 * n_rx + (pilot_mask ? n_users : 0);
      break;
    case Task::Interpolation:
      c.n_layers = 1;
      c.n_heads = 1;
      c.head = HeadKind::Regression;
      c.out_per_token = 4;
      c.input_dim = 2;
      break;
    case Task::Estimation:
      c.head = HeadKind::Regression;
      c.out_per_token = 2;
      c.input_dim = 2;
      break;
  }
  return c;
}

Task task_of_config(const ModelConfig& c) {
  if (c.head == HeadKind::Llr) return Task::E2E;
  return c.out_per_token == 4 ? Task::Interpolation : Task::Estimation;
}

TokenSequence tokenize_e2e(const ResourceGrid& y, const PilotPattern* mask) {
  const std::size_t n_users = mask ? mask->n_users() : 0;
  if (mask && (mask->n_sc != y.n_sc() || mask->n_sym != y.n_sym())) {
    throw ShapeError("tokenize_e2e: pilot mask does not match the grid");
  }
  const std::size_t f = 2 * y.n_ant() + n_users;
  TokenSequence seq{Tensor({y.n_sc() * y.n_sym(), f}), {}};
  std::size_t t = 0;
  for (std::size_t sc = 0; sc < y.n_sc(); ++sc) {
    for (std::size_t sym = 0; sym < y.n_sym(); ++sym, ++t) {
      for (std::size_t a = 0; a < y.n_ant(); ++a) {
        seq.tokens.at(t, 2 * a) = y(sc, sym, a).real();
        seq.tokens.at(t, 2 * a + 1) = y(sc, sym, a).imag();
      }
      if (mask) {
        const int owner = mask->owner(sc, sym);
        if (owner >= 0) seq.tokens.at(t, 2 * y.n_ant() + static_cast<std::size_t>(owner)) = 1.0;
      }
      seq.coords.emplace_back(sc, sym);
    }
  }
  return seq;
}

TokenSequence tokenize_estimation(const ResourceGrid& y, std::size_t ant) {
  if (ant >= y.n_ant()) throw ShapeError("tokenize_estimation: antenna index out of range");
  TokenSequence seq{Tensor({y.n_sc() * y.n_sym(), 2}), {}};
  std::size_t t = 0;
  for (std::size_t sc = 0; sc < y.n_sc(); ++sc) {
    for (std::size_t sym = 0; sym < y.n_sym(); ++sym, ++t) {
      seq.tokens.at(t, 0) = y(sc, sym, ant).real();
      seq.tokens.at(t, 1) = y(sc, sym, ant).imag();
      seq.coords.emplace_back(sc, sym);
    }
  }
  return seq;
}

TokenSequence tokenize_interpolation(const Tensor& pilots, std::size_t comb_offset) {
  if (pilots.shape() != Shape{6, 2, 2}) {
    throw ShapeError("tokenize_interpolation: expected [6, 2, 2], got " + shape_str(pilots.shape()));
  }
  if (comb_offset > 1) throw ShapeError("tokenize_interpolation: comb offset must be 0 or 1");
  TokenSequence seq{pilots.reshaped({12, 2}), {}};
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 2; ++j) seq.coords.emplace_back(2 * i + comb_offset, kDmrsSymbols[j]);
  return seq;
}

Tensor interpolation_grid(const Tensor& head_out) {
  if (head_out.shape() != Shape{12, 4}) {
    throw ShapeError("interpolation_grid: expected [12, 4], got " + shape_str(head_out.shape()));
  }
  Tensor out({12, 2, 2});
  for (std::size_t k = 0; k < 12; ++k)
    for (std::size_t j = 0; j < 2; ++j)
      for (std::size_t c = 0; c < 2; ++c) out[(k * 2 + j) * 2 + c] = head_out.at((k / 2) * 2 + j, 2 * (k % 2) + c);
  return out;
}

Tensor positional_encoding(std::span<const Coord> coords, int d_model) {
  if (d_model < 4 || d_model % 4 != 0) throw ShapeError("positional_encoding: d_model must be divisible by 4");
  const auto d = static_cast<std::size_t>(d_model);
  const std::size_t half = d / 2;
  Tensor pe({coords.size(), d});
  for (std::size_t t = 0; t < coords.size(); ++t) {
    const double pos[2] = {static_cast<double>(coords[t].first), static_cast<double>(coords[t].second)};
    for (std::size_t part = 0; part < 2; ++part) {
      for (std::size_t i = 0; i < half / 2; ++i) {
        const double w = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(half));
        pe.at(t, part * half + 2 * i) = std::sin(pos[part] * w);
        pe.at(t, part * half + 2 * i + 1) = std::cos(pos[part] * w);
      }
    }
  }
  return pe;
}

TransformerModel::TransformerModel(const ModelConfig& config) : config_(config) {
  config_.validate();
  const auto d = static_cast<std::size_t>(config_.d_model);
  const auto ff = static_cast<std::size_t>(config_.d_ff);
  Rng rng(stream_seed(config_.seed, 0, 0x1417));
  auto dense = [&](const std::string& name, std::size_t in, std::size_t out) {
    Tensor w({in, out});
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    for (auto& v : w.storage()) v = rng.uniform(-bound, bound);
    names_.push_back(name + ".w");
    params_.push_back(std::move(w));
    names_.push_back(name + ".b");
    params_.emplace_back(Shape{out}, 0.0);
  };
  auto norm = [&](const std::string& name) {
    names_.push_back(name + ".g");
    params_.emplace_back(Shape{d}, 1.0);
    names_.push_back(name + ".b");
    params_.emplace_back(Shape{d}, 0.0);
  };
  dense("embed", static_cast<std::size_t>(config_.input_dim), d);
  for (int l = 0; l < config_.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    if (l > 0) norm(p + "ln1");
    dense(p + "q", d, d);
    dense(p + "k", d, d);
    dense(p + "v", d, d);
    dense(p + "o", d, d);
    if (l > 0) norm(p + "ln2");
    dense(p + "ff1", d, ff);
    dense(p + "ff2", ff, d);
  }
  norm("post.ln");
  dense("post.mlp", d, d);
  dense("head", d, static_cast<std::size_t>(config_.output_dim()));
}

const Tensor& TransformerModel::param(const std::string& name) const {
  for (std::size_t i = 0; i < names_.size(); ++i)
    if (names_[i] == name) return params_[i];
  throw ContractError("no parameter named " + name);
}

std::size_t TransformerModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.size();
  return n;
}

std::vector<ad::Var> TransformerModel::bind(ad::Tape& tape) const {
  std::vector<ad::Var> vars;
  vars.reserve(params_.size());
  for (const auto& p : params_) vars.push_back(tape.param(p));
  return vars;
}

ad::Var TransformerModel::forward(ad::Tape& tape, std::span<const ad::Var> params, const Tensor& tokens,
                                  const Tensor& pe, std::size_t n_seq) const {
  if (params.size() != params_.size()) throw ShapeError("forward: parameter count mismatch");
  if (tokens.rank() != 2 || tokens.cols() != static_cast<std::size_t>(config_.input_dim)) {
    throw ShapeError("forward: tokens " + shape_str(tokens.shape()) + " do not have " +
                     std::to_string(config_.input_dim) + " features");
  }
  const auto d = static_cast<std::size_t>(config_.d_model);
  if (n_seq == 0 || tokens.rows() != n_seq * pe.rows() || pe.cols() != d) {
    throw ShapeError("forward: positional encoding " + shape_str(pe.shape()) + " does not fit " +
                     std::to_string(n_seq) + " sequences of " + shape_str(tokens.shape()));
  }
  Tensor pe_tiled({tokens.rows(), d});
  for (std::size_t s = 0; s < n_seq; ++s)
    std::copy(pe.data().begin(), pe.data().end(), pe_tiled.data().begin() + static_cast<std::ptrdiff_t>(s * pe.size()));

  std::size_t i = 0;
  auto next = [&] { return params[i++]; };
  const auto heads = static_cast<std::size_t>(config_.n_heads);

  ad::Var x = tape.constant(tokens);
  {
    auto w = next();
    auto b = next();
    x = ad::add(linear(x, w, b), tape.constant(std::move(pe_tiled)));
  }
  for (int l = 0; l < config_.n_layers; ++l) {
    ad::Var h = x;
    if (l > 0) {
      auto g = next();
      auto b = next();
      h = ad::layer_norm(x, g, b, kLnEps);
    }
    auto wq = next(), bq = next(), wk = next(), bk = next();
    auto wv = next(), bv = next(), wo = next(), bo = next();
    auto a = ad::attention(linear(h, wq, bq), linear(h, wk, bk), linear(h, wv, bv), n_seq, heads);
    x = ad::add(x, linear(a, wo, bo));
    h = x;
    if (l > 0) {
      auto g = next();
      auto b = next();
      h = ad::layer_norm(x, g, b, kLnEps);
    }
    auto w1 = next(), b1 = next(), w2 = next(), b2 = next();
    x = ad::add(x, linear(ad::relu(linear(h, w1, b1)), w2, b2));
  }
  auto g = next(), b = next();
  x = ad::layer_norm(x, g, b, kLnEps);
  auto wm = next(), bm = next();
  x = ad::relu(linear(x, wm, bm));
  auto wh = next(), bh = next();
  return linear(x, wh, bh);
}

Tensor TransformerModel::infer(const Tensor& tokens, const Tensor& pe, std::size_t n_seq) const {
  ad::Tape tape;
  std::vector<ad::Var> vars;
  vars.reserve(params_.size());
  for (const auto& p : params_) vars.push_back(tape.constant(p));
  return forward(tape, vars, tokens, pe, n_seq).value();
}

Tensor stack_tokens(std::span<const TokenSequence> seqs) {
  if (seqs.empty()) throw ShapeError("stack_tokens: no sequences");
  const Shape& s0 = seqs.front().tokens.shape();
  Tensor out({s0[0] * seqs.size(), s0[1]});
  std::size_t off = 0;
  for (const auto& s : seqs) {
    if (s.tokens.shape() != s0 || s.coords != seqs.front().coords) {
      throw ShapeError("stack_tokens: sequences differ in shape or layout");
    }
    std::copy(s.tokens.data().begin(), s.tokens.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(off));
    off += s.tokens.size();
  }
  return out;
}

Tensor select_bits(const Tensor& logits, int n_users, int trained_order, int target_order) {
  const int m = log2_order(trained_order);
  const int m_sel = log2_order(target_order);
  if (m_sel > m) throw ConfigError("select_bits: target order exceeds the trained order");
  if (n_users < 1 || logits.rank() != 2 || logits.cols() != static_cast<std::size_t>(n_users * m)) {
    throw ShapeError("select_bits: logits " + shape_str(logits.shape()) + " do not hold " +
                     std::to_string(n_users) + " users x " + std::to_string(m) + " bits");
  }
  const auto nu = static_cast<std::size_t>(n_users);
  const auto ms = static_cast<std::size_t>(m_sel);
  Tensor out({logits.rows(), nu * ms});
  for (std::size_t r = 0; r < logits.rows(); ++r)
    for (std::size_t u = 0; u < nu; ++u)
      for (std::size_t b = 0; b < ms; ++b) out.at(r, u * ms + b) = logits.at(r, u * static_cast<std::size_t>(m) + b);
  return out;
}

ad::Var llr_loss(ad::Var logits, const Tensor& bits, const Tensor& mask) {
  return ad::bce_with_logits(logits, bits, &mask);
}

ad::Var regression_loss(ad::Var pred, const Tensor& target) { return ad::mse_loss(pred, target); }

}  // namespace phyformer
