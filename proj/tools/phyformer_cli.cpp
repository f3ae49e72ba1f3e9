// phyformer: dataset generation, training, sweeps and latency benchmarks.
#include <openssl/evp.h>

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <json.hpp>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "phyformer/errors.hpp"
#include "phyformer/eval.hpp"
#include "phyformer/pipeline.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace phyformer;

namespace {

constexpr int kExitOther = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

struct Settings {
  LinkConfig link;
  ModelConfig arch;
  TrainConfig train;
};

void apply_setting(Settings& s, const std::string& entry, const std::string& where) {
  const auto eq = entry.find('=');
  if (eq == std::string::npos) throw ConfigError(where + ": expected key=value, got '" + entry + "'");
  auto trim = [](std::string t) {
    const auto b = t.find_first_not_of(" \t\r");
    const auto e = t.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : t.substr(b, e - b + 1);
  };
  const std::string key = trim(entry.substr(0, eq)), value = trim(entry.substr(eq + 1));
  const auto dot = key.find('.');
  const std::string group = dot == std::string::npos ? "" : key.substr(0, dot);
  const std::string field = dot == std::string::npos ? key : key.substr(dot + 1);
  bool known = false;
  if (group == "link") known = set_field(s.link, field, value);
  else if (group == "model") known = set_field(s.arch, field, value);
  else if (group == "train") known = set_field(s.train, field, value);
  if (!known) throw ConfigError(where + ": unknown key '" + key + "' (use link.*, model.* or train.*)");
}

Settings load_settings(const std::string& config_path, const std::vector<std::string>& overrides) {
  Settings s;
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in) throw ConfigError("cannot read config file " + config_path);
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
      ++n;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      apply_setting(s, line, config_path + ":" + std::to_string(n));
    }
  }
  for (const auto& o : overrides) apply_setting(s, o, "--set");
  return s;
}

// Git blob hash: sha1("blob <size>\0" + content).
std::string git_blob_hash(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read " + path.string());
  const std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string header = "blob " + std::to_string(content.size()) + '\0';
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr);
  EVP_DigestUpdate(ctx, header.data(), header.size());
  EVP_DigestUpdate(ctx, content.data(), content.size());
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return hex.str();
}

json key_values_json(const std::string& text) {
  json j = json::object();
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) j[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return j;
}

json file_list(const std::vector<std::string>& paths) {
  json arr = json::array();
  for (const auto& p : paths) arr.push_back({{"path", p}, {"git_blob_sha1", git_blob_hash(p)}});
  return arr;
}

void write_sidecar(const std::string& output, const std::string& command, json config, json seeds,
                   const std::vector<std::string>& inputs, const std::vector<std::string>& outputs) {
  json meta;
  meta["command"] = command;
  meta["format"] = {{"dataset_version", kDatasetVersion}, {"checkpoint_version", kCheckpointVersion}};
  meta["seeds"] = std::move(seeds);
  meta["config"] = std::move(config);
  meta["inputs"] = file_list(inputs);
  meta["outputs"] = file_list(outputs);
  std::ofstream out(output + ".meta.json");
  out << meta.dump(2) << '\n';
  if (!out) throw FormatError("cannot write " + output + ".meta.json");
}

std::vector<double> parse_grid(const std::string& text) {
  std::vector<double> grid;
  auto num = [&](const std::string& s) {
    try {
      std::size_t pos = 0;
      const double v = std::stod(s, &pos);
      if (pos != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw ConfigError("bad Eb/N0 value '" + s + "'");
    }
  };
  if (text.find(':') != std::string::npos) {
    std::vector<std::string> parts;
    std::stringstream ss(text);
    for (std::string p; std::getline(ss, p, ':');) parts.push_back(p);
    if (parts.size() != 3) throw ConfigError("Eb/N0 range must read start:stop:step");
    const double a = num(parts[0]), b = num(parts[1]), step = num(parts[2]);
    if (!(step > 0.0) || b < a) throw ConfigError("Eb/N0 range needs step > 0 and stop >= start");
    for (std::size_t i = 0;; ++i) {
      const double v = a + static_cast<double>(i) * step;
      if (v > b + 1e-9) break;
      grid.push_back(v);
    }
  } else {
    std::stringstream ss(text);
    for (std::string p; std::getline(ss, p, ',');)
      if (!p.empty()) grid.push_back(num(p));
  }
  if (grid.empty()) throw ConfigError("empty Eb/N0 grid");
  return grid;
}

std::vector<Method> parse_methods(const std::string& text) {
  std::vector<Method> out;
  std::stringstream ss(text);
  for (std::string p; std::getline(ss, p, ',');)
    if (!p.empty()) out.push_back(method_from_string(p));
  return out;
}

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::size_t threads = 1;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "key=value configuration file (link.*, model.*, train.*)");
  cmd->add_option("--set", c.sets, "configuration override key=value; repeatable");
  cmd->add_option("--seed", c.seed, "master seed");
  cmd->add_option("--threads", c.threads, "worker threads")->check(CLI::PositiveNumber);
}

struct ArchFlags {
  std::optional<int> layers, heads, d_model, d_ff;
  std::optional<std::size_t> steps, batch, eval_every;
  std::optional<double> lr;
  std::optional<std::string> schedule;

  void add(CLI::App* cmd) {
    cmd->add_option("--layers", layers, "encoder layers");
    cmd->add_option("--heads", heads, "attention heads");
    cmd->add_option("--d-model", d_model, "model width");
    cmd->add_option("--d-ff", d_ff, "feed-forward width");
    cmd->add_option("--steps", steps, "optimizer steps");
    cmd->add_option("--batch", batch, "mini-batch size");
    cmd->add_option("--lr", lr, "Adam learning rate");
    cmd->add_option("--schedule", schedule, "constant or cosine");
    cmd->add_option("--eval-every", eval_every, "validation interval in steps (0 = per epoch)");
  }
  void apply(Settings& s) const {
    if (layers) s.arch.n_layers = *layers;
    if (heads) s.arch.n_heads = *heads;
    if (d_model) s.arch.d_model = *d_model;
    if (d_ff) s.arch.d_ff = *d_ff;
    if (steps) s.train.steps = *steps;
    if (batch) s.train.batch_size = *batch;
    if (lr) s.train.lr = *lr;
    if (schedule) set_field(s.train, "schedule", *schedule);
    if (eval_every) s.train.eval_every = *eval_every;
  }
};

struct SweepFlags {
  std::string grid = "0:40:5";
  std::size_t trials = 100;
  double confidence = 0.95;
  std::string metric;

  void add(CLI::App* cmd) {
    cmd->add_option("--ebn0", grid, "Eb/N0 grid in dB: list a,b,c or range start:stop:step")->capture_default_str();
    cmd->add_option("--trials", trials, "slots per grid point (>= 100)")->capture_default_str();
    cmd->add_option("--confidence", confidence, "confidence level of the intervals")->capture_default_str();
    cmd->add_option("--metric", metric, "ber, bler or mse (default bler / mse)");
  }
};

std::ostream& open_out(const std::string& path, std::ofstream& file) {
  if (path.empty() || path == "-") return std::cout;
  file.open(path);
  if (!file) throw FormatError("cannot write " + path);
  return file;
}

void progress(const LossRecord& r) {
  std::fprintf(stderr, "step %zu  train %.6g  val %.6g\n", r.step, r.train_loss, r.val_loss);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Transformer PHY receiver toolkit"};
  app.require_subcommand(1);
  Common common;

  // gen
  auto* gen = app.add_subcommand("gen", "generate a dataset");
  add_common(gen, common);
  std::string task_name, out_path;
  std::size_t samples = 10000;
  double lo = 0.0, hi = 40.0;
  bool ota = false;
  gen->add_option("--task", task_name, "e2e, interpolation or estimation")->required();
  gen->add_option("--samples", samples, "sample count")->capture_default_str();
  gen->add_option("--ebn0-lo", lo, "lowest Eb/N0 in dB")->capture_default_str();
  gen->add_option("--ebn0-hi", hi, "highest Eb/N0 in dB")->capture_default_str();
  gen->add_flag("--ota", ota, "interpolation targets from noisy full-band captures");
  gen->add_option("--out", out_path, "dataset file")->required();

  // train
  auto* trn = app.add_subcommand("train", "train a model on a dataset");
  add_common(trn, common);
  std::string data_path, loss_csv;
  ArchFlags arch_flags;
  trn->add_option("--data", data_path, "dataset file")->required()->check(CLI::ExistingFile);
  trn->add_option("--out", out_path, "checkpoint file")->required();
  trn->add_option("--loss-csv", loss_csv, "write the loss trace as CSV");
  arch_flags.add(trn);

  // sweep
  auto* swp = app.add_subcommand("sweep", "Eb/N0 sweep of transformer and baselines");
  add_common(swp, common);
  SweepFlags sweep_flags;
  std::string methods_text, checkpoint_path, tag;
  swp->add_option("--task", task_name, "e2e, interpolation or estimation")->required();
  swp->add_option("--methods", methods_text, "comma list of transformer, ls-linear, ls-nearest, perfect-csi")
      ->required();
  swp->add_option("--checkpoint", checkpoint_path, "trained model for the transformer method");
  swp->add_option("--tag", tag, "label of the transformer rows");
  swp->add_option("--out", out_path, "CSV output (default stdout)");
  sweep_flags.add(swp);

  // arch-sweep
  auto* arch = app.add_subcommand("arch-sweep", "train and sweep depth or head-count variants");
  add_common(arch, common);
  std::string axis, ckpt_dir;
  arch->add_option("--data", data_path, "training dataset")->required()->check(CLI::ExistingFile);
  arch->add_option("--axis", axis, "depth or heads")->required()->check(CLI::IsMember({"depth", "heads"}));
  arch->add_option("--out", out_path, "CSV output")->required();
  arch->add_option("--checkpoint-dir", ckpt_dir, "keep each variant's checkpoint here");
  arch_flags.add(arch);
  sweep_flags.add(arch);

  // bench
  auto* bench = app.add_subcommand("bench", "forward latency per tile");
  add_common(bench, common);
  std::vector<std::string> checkpoints;
  std::size_t bench_batch = 1, iterations = 1000, warmup = 100;
  std::string bench_csv;
  bench->add_option("--checkpoint", checkpoints, "model checkpoint; repeatable")->required();
  bench->add_option("--batch", bench_batch, "tiles per forward call")->capture_default_str();
  bench->add_option("--iterations", iterations, "measured iterations (>= 1000)")->capture_default_str();
  bench->add_option("--warmup", warmup, "discarded warmup iterations (>= 100)")->capture_default_str();
  bench->add_option("--csv", bench_csv, "also write the report as CSV");

  // plotdata
  auto* plot = app.add_subcommand("plotdata", "turn a sweep CSV into gnuplot blocks");
  std::string in_path;
  plot->add_option("--in", in_path, "sweep CSV")->required();
  plot->add_option("--out", out_path, "output (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    const Settings base = load_settings(common.config, common.sets);
    Settings s = base;
    json seeds;

    if (*gen) {
      DatasetSpec spec;
      spec.task = task_from_string(task_name);
      spec.link = s.link;
      spec.n_samples = samples;
      spec.seed = common.seed.value_or(0);
      spec.link.seed = spec.seed;
      spec.ebn0_lo = lo;
      spec.ebn0_hi = hi;
      spec.ota_targets = ota;
      const Dataset ds = gen_dataset(spec, common.threads);
      save_dataset(ds, out_path);
      seeds["dataset"] = spec.seed;
      json cfg = {{"task", task_name}, {"samples", samples}, {"ebn0_lo", lo}, {"ebn0_hi", hi}, {"ota", ota},
                  {"link", key_values_json(to_key_values(spec.link))}};
      write_sidecar(out_path, "gen", cfg, seeds, {}, {out_path});
      std::fprintf(stderr, "wrote %zu samples to %s\n", ds.count(), out_path.c_str());
    } else if (*trn) {
      arch_flags.apply(s);
      if (common.seed) s.train.seed = s.arch.seed = *common.seed;
      const Dataset ds = load_dataset(data_path);
      const TransformerModel init(model_config_for(ds, s.arch));
      const TrainResult res = train(init, ds, s.train, progress);
      save_checkpoint(out_path, res.model, {s.train.steps, res.final_train_loss, s.train.seed});
      std::vector<std::string> outs{out_path};
      if (!loss_csv.empty()) {
        std::ofstream f(loss_csv);
        write_loss_csv(f, res.trace);
        f.close();
        outs.push_back(loss_csv);
      }
      seeds["model"] = s.arch.seed;
      seeds["train"] = s.train.seed;
      json cfg = {{"model", key_values_json(to_key_values(res.model.config()))},
                  {"train", key_values_json(to_key_values(s.train))},
                  {"best_step", res.best_step},
                  {"best_val_loss", res.best_val_loss},
                  {"final_train_loss", res.final_train_loss}};
      write_sidecar(out_path, "train", cfg, seeds, {data_path}, outs);
    } else if (*swp) {
      SweepSpec spec;
      spec.task = task_from_string(task_name);
      spec.link = s.link;
      spec.methods = parse_methods(methods_text);
      spec.ebn0_grid = parse_grid(sweep_flags.grid);
      spec.trials = sweep_flags.trials;
      spec.confidence = sweep_flags.confidence;
      spec.metric = sweep_flags.metric;
      spec.seed = common.seed.value_or(1);
      spec.link.seed = spec.seed;
      spec.n_threads = common.threads;
      spec.transformer_tag = tag;
      std::optional<Checkpoint> ckpt;
      std::vector<std::string> inputs;
      if (!checkpoint_path.empty()) {
        ckpt = load_checkpoint(checkpoint_path);
        inputs.push_back(checkpoint_path);
      }
      const auto rows = run_sweep(spec, ckpt ? &ckpt->model : nullptr);
      std::ofstream f;
      write_sweep_csv(open_out(out_path, f), rows);
      if (!out_path.empty() && out_path != "-") {
        f.close();
        seeds["sweep"] = spec.seed;
        json m = json::array();
        for (auto method : spec.methods) m.push_back(to_string(method));
        json cfg = {{"task", task_name},         {"methods", m},
                    {"ebn0_grid", spec.ebn0_grid}, {"trials", spec.trials},
                    {"confidence", spec.confidence}, {"metric", spec.resolved_metric()},
                    {"link", key_values_json(to_key_values(spec.link))}};
        write_sidecar(out_path, "sweep", cfg, seeds, inputs, {out_path});
      }
    } else if (*arch) {
      arch_flags.apply(s);
      if (common.seed) s.train.seed = s.arch.seed = *common.seed;
      const Dataset ds = load_dataset(data_path);
      SweepSpec spec;
      spec.task = ds.spec.task;
      spec.link = ds.spec.link;
      spec.ebn0_grid = parse_grid(sweep_flags.grid);
      spec.trials = sweep_flags.trials;
      spec.confidence = sweep_flags.confidence;
      spec.metric = sweep_flags.metric;
      spec.seed = common.seed.value_or(1);
      spec.n_threads = common.threads;
      std::vector<std::string> outs{out_path};
      if (!ckpt_dir.empty()) fs::create_directories(ckpt_dir);
      const auto rows = run_arch_sweep(ds, s.arch, axis, s.train, spec, [&](const ArchVariant& v, const TrainResult& r) {
        std::fprintf(stderr, "%s: best val %.6g at step %zu\n", v.tag.c_str(), r.best_val_loss, r.best_step);
        if (!ckpt_dir.empty()) {
          const std::string p = (fs::path(ckpt_dir) / (v.tag + ".ckpt")).string();
          save_checkpoint(p, r.model, {s.train.steps, r.final_train_loss, s.train.seed});
          outs.push_back(p);
        }
      });
      {
        std::ofstream f(out_path);
        if (!f) throw FormatError("cannot write " + out_path);
        write_sweep_csv(f, rows);
      }
      seeds["model"] = s.arch.seed;
      seeds["train"] = s.train.seed;
      seeds["sweep"] = spec.seed;
      json cfg = {{"axis", axis},
                  {"model", key_values_json(to_key_values(s.arch))},
                  {"train", key_values_json(to_key_values(s.train))},
                  {"ebn0_grid", spec.ebn0_grid},
                  {"trials", spec.trials},
                  {"confidence", spec.confidence}};
      write_sidecar(out_path, "arch-sweep", cfg, seeds, {data_path}, outs);
    } else if (*bench) {
      std::vector<BenchReport> reports;
      for (const auto& p : checkpoints) {
        const Checkpoint c = load_checkpoint(p);
        reports.push_back(bench_model(c.model, task_of_config(c.model.config()), bench_batch, iterations, warmup,
                                      fs::path(p).stem().string()));
      }
      write_bench_table(std::cout, reports);
      if (!bench_csv.empty()) {
        {
          std::ofstream f(bench_csv);
          write_bench_csv(f, reports);
        }
        json cfg = {{"batch", bench_batch}, {"iterations", iterations}, {"warmup", warmup}};
        write_sidecar(bench_csv, "bench", cfg, json::object(), checkpoints, {bench_csv});
      }
    } else if (*plot) {
      std::ifstream in(in_path);
      if (!in) throw FormatError("cannot read " + in_path);
      const auto rows = read_sweep_csv(in);
      std::ofstream f;
      write_plotdata(open_out(out_path, f), rows);
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitOther;
  }
  return 0;
}
