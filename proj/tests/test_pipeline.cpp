#include <doctest.h>
#include <algorithm>
#include <numeric>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include "phyformer/channel.hpp"
#include "phyformer/errors.hpp"
#include "phyformer/link.hpp"
#include "phyformer/pipeline.hpp"

using namespace phyformer;
namespace fs = std::filesystem;

namespace {

fs::path temp_path(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "phyformer_test_pipeline";
  fs::create_directories(dir);
  return dir / name;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void spit(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

ModelConfig tiny_arch() {
  ModelConfig a;
  a.n_layers = 1;
  a.n_heads = 2;
  a.d_model = 16;
  a.d_ff = 32;
  return a;
}

}  // namespace

TEST_CASE("dataset shapes per task") {
  DatasetSpec spec;
  spec.task = Task::E2E;
  spec.n_samples = 3;
  const Dataset e2e = gen_dataset(spec);
  CHECK(e2e.input_shape == Shape{168, 8});
  CHECK(e2e.target_shape == Shape{168, 8});
  std::size_t labelled = 0;
  for (double v : e2e.target(0)) labelled += v >= 0.0;
  CHECK(labelled == 156 * 8);

  spec.link.n_users = 2;
  spec.link.pilot_mode = PilotMode::RandomComb;
  const Dataset two = gen_dataset(spec);
  CHECK(two.input_shape == Shape{168, 10});
  CHECK(two.target_shape == Shape{168, 16});
  labelled = 0;
  for (double v : two.target(1)) labelled += v >= 0.0;
  CHECK(labelled == 144 * 16);

  spec = DatasetSpec{};
  spec.task = Task::Interpolation;
  spec.n_samples = 5;
  const Dataset interp = gen_dataset(spec);
  CHECK(interp.input_shape == Shape{6, 2, 2});
  CHECK(interp.target_shape == Shape{12, 2, 2});
  CHECK(interp.inputs.size() == 5 * 24);

  spec.task = Task::Estimation;
  const Dataset est = gen_dataset(spec);
  CHECK(est.input_shape == Shape{12, 14, 2});
  CHECK(est.target_shape == Shape{12, 14, 2});

  spec.n_samples = 0;
  CHECK_THROWS_AS(gen_dataset(spec), ConfigError);
}

TEST_CASE("E2E samples carry the slot's received grid and payload") {
  DatasetSpec spec;
  spec.task = Task::E2E;
  spec.n_samples = 4;
  spec.seed = 17;
  spec.link.order = 16;
  const Dataset ds = gen_dataset(spec);
  LinkConfig link = spec.link;
  link.seed = spec.seed;
  Rng ebn0_rng(lane_seed(spec.seed, 2, Lane::Ebn0));
  link.ebn0_db = ebn0_rng.uniform(0.0, 40.0);
  const Slot slot = simulate_slot(link, 2);
  const auto in = ds.input(2);
  CHECK(in[(5 * 14 + 7) * 8 + 6] == slot.y(5, 7, 3).real());
  const auto tgt = ds.target(2);
  const auto data = slot.pilots.data_res();
  CHECK(tgt[(data[10].first * 14 + data[10].second) * 4 + 3] == slot.payload[0][10 * 4 + 3]);
  CHECK(tgt[(0 * 14 + 2) * 4] == -1.0);  // pilot RE
}

TEST_CASE("estimation targets are the true channel") {
  DatasetSpec spec;
  spec.task = Task::Estimation;
  spec.n_samples = 8;
  spec.ebn0_lo = spec.ebn0_hi = 300.0;
  const Dataset ds = gen_dataset(spec);
  LinkConfig link = spec.link;
  link.seed = spec.seed;
  link.ebn0_db = 300.0;
  const Slot slot = simulate_slot(link, 1);  // samples 4..7
  const auto tgt = ds.target(6);
  const auto in = ds.input(6);
  const cd h = slot.channel.h(4, 9, 0, 2);
  CHECK(tgt[(4 * 14 + 9) * 2] == h.real());
  CHECK(tgt[(4 * 14 + 9) * 2 + 1] == h.imag());
  // a data RE of the noiseless grid is h * x
  CHECK(std::abs(cd(in[(4 * 14 + 9) * 2], in[(4 * 14 + 9) * 2 + 1]) - h * slot.x[0](4, 9)) < 1e-12);
}

TEST_CASE("interpolation inputs are noisy pilot estimates of the target") {
  DatasetSpec spec;
  spec.task = Task::Interpolation;
  spec.n_samples = 12;
  spec.ebn0_lo = spec.ebn0_hi = 300.0;
  for (bool ota : {false, true}) {
    spec.ota_targets = ota;
    spec.link.ebn0_db = 300.0;
    const Dataset ds = gen_dataset(spec);
    for (std::size_t s = 0; s < ds.count(); ++s) {
      const auto in = ds.input(s);
      const auto tgt = ds.target(s);
      for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 2; ++j)
          for (std::size_t c = 0; c < 2; ++c) {
            CHECK(std::abs(in[(i * 2 + j) * 2 + c] - tgt[((2 * i) * 2 + j) * 2 + c]) < 1e-9);
          }
    }
  }
  // OTA capture noise shows up in the targets
  spec.link.ebn0_db = 0.0;
  spec.ota_targets = true;
  const Dataset noisy = gen_dataset(spec);
  spec.ota_targets = false;
  const Dataset clean = gen_dataset(spec);
  double diff = 0.0;
  for (std::size_t i = 0; i < clean.targets.size(); ++i) diff += std::abs(clean.targets[i] - noisy.targets[i]);
  CHECK(diff > 1.0);
}

TEST_CASE("dataset generation is deterministic and thread-independent") {
  DatasetSpec spec;
  spec.task = Task::Estimation;
  spec.n_samples = 10;
  spec.seed = 3;
  const Dataset a = gen_dataset(spec, 1);
  const Dataset b = gen_dataset(spec, 4);
  CHECK(a.inputs == b.inputs);
  CHECK(a.targets == b.targets);
  save_dataset(a, temp_path("a.phya"));
  save_dataset(b, temp_path("b.phya"));
  CHECK(slurp(temp_path("a.phya")) == slurp(temp_path("b.phya")));
  spec.seed = 4;
  CHECK(gen_dataset(spec).inputs != a.inputs);
}

TEST_CASE("dataset file round trip") {
  DatasetSpec spec;
  spec.task = Task::E2E;
  spec.n_samples = 3;
  spec.link.n_users = 2;
  spec.link.pilot_mode = PilotMode::RandomComb;
  spec.link.order = 64;
  spec.seed = 12;
  spec.ebn0_lo = 5.0;
  spec.ebn0_hi = 7.5;
  const Dataset ds = gen_dataset(spec);
  const auto path = temp_path("rt.phya");
  save_dataset(ds, path);
  CHECK(fs::file_size(path) > 3 * (168 * 10 + 168 * 12) * 4);
  const Dataset back = load_dataset(path);
  CHECK(back.spec.task == Task::E2E);
  CHECK(back.count() == 3);
  CHECK(back.input_shape == ds.input_shape);
  CHECK(back.target_shape == ds.target_shape);
  CHECK(back.spec.link.n_users == 2);
  CHECK(back.spec.link.order == 64);
  CHECK(back.spec.link.pilot_mode == PilotMode::RandomComb);
  CHECK(back.spec.seed == 12);
  CHECK(back.spec.ebn0_hi == 7.5);
  for (std::size_t i = 0; i < ds.inputs.size(); ++i)
    REQUIRE(back.inputs[i] == static_cast<double>(static_cast<float>(ds.inputs[i])));
  for (std::size_t i = 0; i < ds.targets.size(); ++i) REQUIRE(back.targets[i] == ds.targets[i]);
  save_dataset(back, temp_path("rt2.phya"));
  CHECK(slurp(path) == slurp(temp_path("rt2.phya")));
}

TEST_CASE("damaged dataset files are rejected") {
  DatasetSpec spec;
  spec.task = Task::Interpolation;
  spec.n_samples = 2;
  const auto path = temp_path("bad.phya");
  save_dataset(gen_dataset(spec), path);
  const std::string good = slurp(path);

  std::string bytes = good;
  bytes[0] = 'X';
  spit(path, bytes);
  CHECK_THROWS_AS(load_dataset(path), FormatError);

  bytes = good;
  bytes[4] = static_cast<char>(kDatasetVersion + 1);
  spit(path, bytes);
  CHECK_THROWS_WITH_AS(load_dataset(path), doctest::Contains("version"), FormatError);

  spit(path, good.substr(0, good.size() - 3));
  CHECK_THROWS_WITH_AS(load_dataset(path), doctest::Contains("truncated"), FormatError);
  CHECK_THROWS_AS(load_dataset(temp_path("missing.phya")), FormatError);
}

TEST_CASE("augment_noise statistics") {
  Rng rng(1);
  PilotCapture cap{{cd(0.3, -0.8), cd(1.1, 0.2)}, {cd(0.7071, 0.7071), cd(-0.7071, 0.7071)}};
  const auto same = augment_noise(cap, 0.0, rng);
  for (std::size_t i = 0; i < 2; ++i) CHECK(same[i] == cap.y[i] / cap.x[i]);

  const double nv = 0.3;
  const cd ref = cap.y[0] / cap.x[0];
  cd mean{};
  const int n_mean = 10000;
  for (int t = 0; t < n_mean; ++t) mean += augment_noise(cap, nv, rng)[0];
  mean /= static_cast<double>(n_mean);
  // per-component standard error sqrt(nv / 2 / n) with |x| = 1
  const double se = std::sqrt(nv / 2.0 / n_mean);
  CHECK(std::abs(mean.real() - ref.real()) < 3.0 * se);
  CHECK(std::abs(mean.imag() - ref.imag()) < 3.0 * se);

  double var = 0.0;
  const int n_var = 100000;
  for (int t = 0; t < n_var; ++t) var += std::norm(augment_noise(cap, nv, rng)[1] * cap.x[1] - cap.y[1]);
  CHECK(var / n_var == doctest::Approx(nv).epsilon(0.02));

  cap.x[1] = cd{};
  CHECK_THROWS_AS(augment_noise(cap, nv, rng), NumericError);
}

TEST_CASE("batches follow the model token layout") {
  DatasetSpec spec;
  spec.task = Task::Interpolation;
  spec.n_samples = 4;
  const Dataset ds = gen_dataset(spec);
  const std::size_t idx[] = {3, 1};
  const Batch b = make_batch(ds, idx);
  CHECK(b.n_seq == 2);
  CHECK(b.tokens.shape() == Shape{24, 2});
  CHECK(b.targets.shape() == Shape{24, 4});
  // the head target reassembles into the sample's [12, 2, 2] grid
  const Tensor first = interpolation_grid(Tensor({12, 4}, std::vector<double>(b.targets.data().begin(), b.targets.data().begin() + 48)));
  const auto tgt = ds.target(3);
  for (std::size_t i = 0; i < 48; ++i) CHECK(first[i] == tgt[i]);

  spec.task = Task::E2E;
  spec.n_samples = 2;
  const Dataset e2e = gen_dataset(spec);
  const std::size_t one[] = {0};
  Rng perm(5);
  const Batch p = make_batch(e2e, one, &perm);
  const Batch q = make_batch(e2e, one);
  CHECK(q.mask.shape() == q.targets.shape());
  CHECK(q.mask.at(2, 0) == 0.0);  // (0, 2) is a pilot
  CHECK(q.mask.at(0, 0) == 1.0);
  // permutation moves whole (re, im) antenna pairs
  for (std::size_t t = 0; t < 168; ++t) {
    double sp = 0.0, sq = 0.0;
    for (std::size_t f = 0; f < 8; ++f) {
      sp += p.tokens.at(t, f) * p.tokens.at(t, f);
      sq += q.tokens.at(t, f) * q.tokens.at(t, f);
    }
    CHECK(sp == doctest::Approx(sq));
  }
  CHECK(p.tokens != q.tokens);
}

TEST_CASE("training preconditions") {
  DatasetSpec spec;
  spec.task = Task::Estimation;
  spec.n_samples = 8;
  const Dataset ds = gen_dataset(spec);
  TrainConfig tc;
  tc.steps = 0;
  const TransformerModel m(model_config_for(ds, tiny_arch()));
  CHECK_THROWS_AS(train(m, ds, tc), ConfigError);
  tc.steps = 1;
  tc.val_fraction = 1.0;
  CHECK_THROWS_AS(train(m, ds, tc), ConfigError);
  tc.val_fraction = 0.1;
  const TransformerModel wrong(task_config(Task::E2E));
  CHECK_THROWS_AS(train(wrong, ds, tc), ConfigError);
}

TEST_CASE("training is reproducible and keeps the best validation model") {
  DatasetSpec spec;
  spec.task = Task::Interpolation;
  spec.n_samples = 64;
  const Dataset ds = gen_dataset(spec);
  TrainConfig tc;
  tc.steps = 60;
  tc.batch_size = 16;
  tc.val_fraction = 0.25;
  tc.eval_every = 10;
  tc.lr = 3e-3;
  const TransformerModel init(model_config_for(ds, tiny_arch()));
  const auto a = train(init, ds, tc);
  const auto b = train(init, ds, tc);
  CHECK(a.model.params() == b.model.params());
  REQUIRE(a.trace.size() == 6);
  double best = 1e300;
  for (const auto& r : a.trace) {
    CHECK(std::isfinite(r.train_loss));
    CHECK(std::isfinite(r.val_loss));
    best = std::min(best, r.val_loss);
  }
  CHECK(a.best_val_loss == best);
  std::vector<std::size_t> val_idx;
  // the stored model reproduces the best validation loss
  {
    std::vector<std::size_t> order(64);
    std::iota(order.begin(), order.end(), 0);
    Rng split(stream_seed(tc.seed, 0, 0x5B11));
    std::shuffle(order.begin(), order.end(), split.engine());
    val_idx.assign(order.begin(), order.begin() + 16);
  }
  CHECK(evaluate_loss(a.model, ds, val_idx) == doctest::Approx(a.best_val_loss).epsilon(1e-12));
  CHECK(a.trace.back().val_loss < a.trace.front().val_loss);

  const auto ck1 = temp_path("a.phyc"), ck2 = temp_path("b.phyc");
  save_checkpoint(ck1, a.model, {tc.steps, a.final_train_loss, tc.seed});
  save_checkpoint(ck2, b.model, {tc.steps, b.final_train_loss, tc.seed});
  CHECK(slurp(ck1) == slurp(ck2));

  std::ostringstream csv;
  write_loss_csv(csv, a.trace);
  CHECK(csv.str().starts_with("step,train_loss,val_loss\n10,"));
}

TEST_CASE("small models memorize a tiny set") {
  DatasetSpec spec;
  spec.task = Task::Interpolation;
  spec.n_samples = 16;
  const Dataset ds = gen_dataset(spec);
  TrainConfig tc;
  tc.steps = 1500;
  tc.batch_size = 16;
  tc.val_fraction = 0.0;
  tc.lr = 3e-3;
  tc.eval_every = 100;
  ModelConfig arch = tiny_arch();
  arch.d_model = 32;
  arch.d_ff = 64;
  const auto res = train(TransformerModel(model_config_for(ds, arch)), ds, tc);
  std::vector<std::size_t> all(16);
  std::iota(all.begin(), all.end(), 0);
  CHECK(evaluate_loss(res.model, ds, all) < 1e-3);
  // smoothed training curve only goes down
  for (std::size_t i = 1; i < res.trace.size(); ++i) CHECK(std::isfinite(res.trace[i].train_loss));
  CHECK(res.trace.back().train_loss < 0.1 * res.trace.front().train_loss);
}

TEST_CASE("checkpoint round trip and rejection") {
  ModelConfig c = task_config(Task::E2E, 2, 4, true);
  c.n_layers = 2;
  c.d_model = 16;
  c.d_ff = 16;
  c.seed = 9;
  TransformerModel m(c);
  Rng rng(1);
  for (auto& p : m.params())
    for (auto& v : p.storage()) v += 1e-3 * rng.normal();
  const auto path = temp_path("m.phyc");
  save_checkpoint(path, m, {123, 0.25, 7});
  const auto ck = load_checkpoint(path, &c);
  CHECK(ck.model.config() == c);
  CHECK(ck.model.params() == m.params());
  CHECK(ck.meta.steps == 123);
  CHECK(ck.meta.final_loss == 0.25);
  CHECK(ck.meta.seed == 7);

  Rng tok_rng(2);
  Tensor tokens({168, 10});
  for (auto& v : tokens.storage()) v = tok_rng.normal();
  const Tensor pe = positional_encoding(task_coords(Task::E2E), 16);
  CHECK(ck.model.infer(tokens, pe, 1) == m.infer(tokens, pe, 1));

  ModelConfig other = c;
  other.n_heads = 2;
  CHECK_THROWS_AS(load_checkpoint(path, &other), ConfigError);

  const std::string good = slurp(path);
  std::string bytes = good;
  bytes[3] = 'A';
  spit(path, bytes);
  CHECK_THROWS_AS(load_checkpoint(path), FormatError);
  bytes = good;
  bytes[4] = static_cast<char>(kCheckpointVersion + 1);
  spit(path, bytes);
  CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("version"), FormatError);
  spit(path, good.substr(0, good.size() / 2));
  CHECK_THROWS_AS(load_checkpoint(path), FormatError);
}

TEST_CASE("config key=value forms round trip") {
  LinkConfig l;
  l.n_users = 2;
  l.pilot_mode = PilotMode::RandomComb;
  l.rms_delay_spread = 0.0123;
  l.ebn0_db = -1.5;
  const LinkConfig back = link_config_from_key_values(to_key_values(l));
  CHECK(to_key_values(back) == to_key_values(l));
  CHECK_THROWS_AS(link_config_from_key_values("n_users=x\n"), ConfigError);
  CHECK_THROWS_AS(link_config_from_key_values("bogus=1\n"), ConfigError);
  TrainConfig t;
  CHECK(set_field(t, "schedule", "cosine"));
  CHECK(t.schedule == Schedule::Cosine);
  CHECK_FALSE(set_field(t, "n_layers", "2"));
  CHECK_THROWS_AS(set_field(t, "antenna_permutation", "maybe"), ConfigError);
}
