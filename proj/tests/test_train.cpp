#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "blendiff/checkpoint.hpp"
#include "blendiff/errors.hpp"
#include "blendiff/train.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using namespace blendiff;

namespace {

std::string tmp_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("blendiff_train_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir.string();
}

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.image_size = 16;
  cfg.patch_size = 4;
  cfg.d_model = 32;
  cfg.n_heads = 2;
  cfg.n_blocks = 2;
  cfg.n_classes = 6;
  cfg.t_max = 50;
  return cfg;
}

const std::string& tiny_dataset() {
  static std::string dir = [] {
    DatasetSpec spec;
    spec.image_size = 16;
    spec.samples_per_cell = 10;
    spec.seed = 42;
    std::string d = tmp_dir("data");
    build_dataset(spec, d);
    return d;
  }();
  return dir;
}

TrainHyper tiny_hyper(int epochs, float lr) {
  TrainHyper h;
  h.epochs = epochs;
  h.batch_size = 8;
  h.seed = 7;
  h.opt.lr = lr;
  h.val_draws = 64;
  return h;
}

}  // namespace

TEST_CASE("adamw: zero gradients leave parameters unchanged without decay") {
  Rng rng(1, 1);
  Tensor p = Tensor::param({3, 3}, rng, 1.f);
  std::vector<float> before(p.data().begin(), p.data().end());
  AdamWConfig cfg;
  cfg.weight_decay = 0.f;
  AdamW opt({{"p", p}}, cfg);
  opt.zero_grad();
  opt.step();
  std::vector<float> after(p.data().begin(), p.data().end());
  CHECK(before == after);
}

TEST_CASE("adamw: zero gradients with decay scale by (1 - lr wd)") {
  Rng rng(2, 1);
  Tensor p = Tensor::param({4}, rng, 1.f);
  std::vector<float> before(p.data().begin(), p.data().end());
  AdamWConfig cfg;
  cfg.lr = 0.1f;
  cfg.weight_decay = 0.01f;
  AdamW opt({{"p", p}}, cfg);
  opt.zero_grad();
  opt.step();
  for (size_t i = 0; i < before.size(); ++i)
    CHECK(p.data()[i] == doctest::Approx(before[i] * (1.f - 0.001f)).epsilon(1e-7));
}

TEST_CASE("adamw: 3-step scalar quadratic matches the straight-line oracle") {
  // f(w) = w^2 / 2, grad = w
  AdamWConfig cfg;
  cfg.lr = 0.05f;
  cfg.beta1 = 0.9f;
  cfg.beta2 = 0.99f;
  cfg.weight_decay = 0.01f;
  cfg.grad_clip = 0.f;  // oracle models the bare update

  Tensor w = Tensor::from_vec({1}, {0.8f});
  w.set_requires_grad(true);
  AdamW opt({{"w", w}}, cfg);

  oracles::AdamWScalarOracle oracle;
  float expect = 0.8f;
  for (int step = 0; step < 3; ++step) {
    const float w_before = w.data()[0];
    opt.zero_grad();
    Tensor loss = scale(mul(w, w), 0.5f);
    sum_all(loss).backward();
    CHECK(w.grad()[0] == doctest::Approx(w_before).epsilon(1e-6));
    expect = oracle.step(expect, expect, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps,
                         cfg.weight_decay);
    opt.step();
    CHECK(std::abs(w.data()[0] - expect) < 1e-7f);
  }
}

TEST_CASE("adamw: NaN gradient aborts naming the parameter") {
  Rng rng(3, 1);
  Tensor p = Tensor::param({2}, rng, 1.f);
  AdamW opt({{"layer.weight", p}}, AdamWConfig{});
  opt.zero_grad();
  p.grad_mut()[0] = std::nanf("");
  try {
    opt.step();
    FAIL("expected numeric_error");
  } catch (const numeric_error& e) {
    CHECK(std::string(e.what()).find("layer.weight") != std::string::npos);
  }
}

TEST_CASE("checkpoint: save -> load -> save is byte-identical") {
  Rng rng(4, 1);
  Checkpoint ckpt;
  ckpt.phase = "adapter";
  ckpt.meta_json = R"({"config":{"d":32},"rng":{"seed":7},"base_hash":"ab12"})";
  ckpt.tensors.push_back(
      {"w1", {2, 3}, {0.1f, -0.2f, 0.3f, 1.5f, -2.5f, 0.125f}});
  ckpt.tensors.push_back({"w2", {4}, {1.f, 2.f, 3.f, 4.f}});

  const std::string dir = tmp_dir("ckpt");
  save_checkpoint(dir + "/a.ckpt", ckpt);
  Checkpoint loaded = load_checkpoint(dir + "/a.ckpt");
  CHECK(loaded.phase == "adapter");
  CHECK(loaded.tensors.size() == 2);
  CHECK(loaded.tensors[0].data == ckpt.tensors[0].data);
  save_checkpoint(dir + "/b.ckpt", loaded);
  CHECK(hash_file(dir + "/a.ckpt") == hash_file(dir + "/b.ckpt"));

  // corrupt header byte length -> contract error
  Checkpoint bad = ckpt;
  bad.tensors[0].shape = {2, 2};
  CHECK_THROWS_AS(save_checkpoint(dir + "/bad.ckpt", bad), contract_error);
  CHECK_THROWS_AS(load_checkpoint(dir + "/missing.ckpt"), config_error);
}

TEST_CASE("checkpoint magic and tensor lookup") {
  const std::string dir = tmp_dir("magic");
  Checkpoint ckpt;
  ckpt.phase = "base";
  ckpt.tensors.push_back({"t", {1}, {3.f}});
  save_checkpoint(dir + "/m.ckpt", ckpt);
  std::ifstream in(dir + "/m.ckpt", std::ios::binary);
  char magic[4];
  in.read(magic, 4);
  CHECK(std::string(magic, 4) == "ITBL");

  Checkpoint loaded = load_checkpoint(dir + "/m.ckpt");
  CHECK(loaded.find("t") != nullptr);
  CHECK(loaded.find("nope") == nullptr);
}

TEST_CASE("train_base: loss improves, deterministic, divergence guard") {
  Dataset data = Dataset::load(tiny_dataset());
  ModelConfig cfg = tiny_config();
  NoiseSchedule sched = NoiseSchedule::linear(cfg.t_max);
  TrainHyper hyper = tiny_hyper(2, 2e-4f);

  DenoiserModel m1 = DenoiserModel::init(cfg, hyper.seed);
  const float val_init = validation_loss(m1, data, sched, hyper.seed, 64);
  AdamW opt1(m1.named_parameters(), hyper.opt);
  TrainResult r1 = train_base(m1, data, sched, hyper, opt1);
  CHECK(r1.final_val_loss < val_init);

  DenoiserModel m2 = DenoiserModel::init(cfg, hyper.seed);
  AdamW opt2(m2.named_parameters(), hyper.opt);
  train_base(m2, data, sched, hyper, opt2);
  CHECK(m1.content_hash() == m2.content_hash());
}

TEST_CASE("train_base: resuming from a mid-run checkpoint is bit-exact") {
  Dataset data = Dataset::load(tiny_dataset());
  ModelConfig cfg = tiny_config();
  NoiseSchedule sched = NoiseSchedule::linear(cfg.t_max);

  // straight run: 4 epochs
  TrainHyper hyper = tiny_hyper(4, 2e-4f);
  DenoiserModel straight = DenoiserModel::init(cfg, hyper.seed);
  AdamW opt_s(straight.named_parameters(), hyper.opt);
  train_base(straight, data, sched, hyper, opt_s);

  // interrupted run: 2 epochs, checkpoint, restore into fresh objects
  TrainHyper half = hyper;
  half.epochs = 2;
  DenoiserModel part = DenoiserModel::init(cfg, hyper.seed);
  AdamW opt_p(part.named_parameters(), hyper.opt);
  train_base(part, data, sched, half, opt_p);

  Checkpoint mid;
  mid.phase = "base";
  mid.meta_json = R"({"rng":{"next_epoch":2}})";
  mid.tensors = snapshot_tensors(part.named_parameters());
  for (auto& t : opt_p.state_tensors()) mid.tensors.push_back(std::move(t));
  const std::string dir = tmp_dir("resume");
  save_checkpoint(dir + "/mid.ckpt", mid);

  DenoiserModel resumed = DenoiserModel::init(cfg, 999);  // different init
  Checkpoint loaded = load_checkpoint(dir + "/mid.ckpt");
  restore_tensors(loaded, resumed.named_parameters());
  AdamW opt_r(resumed.named_parameters(), hyper.opt);
  opt_r.restore_state(loaded);
  train_base(resumed, data, sched, hyper, opt_r, /*start_epoch=*/2);

  CHECK(resumed.content_hash() == straight.content_hash());
}

TEST_CASE("train_adapter: freeze contract, parameter count, ordering") {
  Dataset data = Dataset::load(tiny_dataset());
  ModelConfig cfg = tiny_config();
  NoiseSchedule sched = NoiseSchedule::linear(cfg.t_max);

  TrainHyper base_h = tiny_hyper(2, 2e-4f);
  DenoiserModel model = DenoiserModel::init(cfg, base_h.seed);
  AdamW base_opt(model.named_parameters(), base_h.opt);
  train_base(model, data, sched, base_h, base_opt);

  // unfrozen base is rejected
  AdapterWeights adapter = AdapterWeights::init(cfg, 11);
  TrainHyper ah = tiny_hyper(1, 1e-3f);
  AdamW aopt(adapter.named_parameters(), ah.opt);
  CHECK_THROWS_AS(train_adapter(model, adapter, data, sched, ah, aopt),
                  contract_error);

  model.freeze();
  const uint64_t hash_before = model.content_hash();
  CHECK(adapter.parameter_count() ==
        int64_t(cfg.n_blocks) * 2 * cfg.d_model * cfg.d_model);
  train_adapter(model, adapter, data, sched, ah, aopt);
  CHECK(model.content_hash() == hash_before);

  // deterministic adapter training
  AdapterWeights a2 = AdapterWeights::init(cfg, 11);
  AdamW aopt2(a2.named_parameters(), ah.opt);
  train_adapter(model, a2, data, sched, ah, aopt2);
  CHECK(a2.content_hash() == adapter.content_hash());
}

TEST_CASE("validation_loss supports the ablation modes") {
  Dataset data = Dataset::load(tiny_dataset());
  ModelConfig cfg = tiny_config();
  NoiseSchedule sched = NoiseSchedule::linear(cfg.t_max);
  DenoiserModel model = DenoiserModel::init(cfg, 3);
  model.freeze();
  AdapterWeights adapter = AdapterWeights::init(cfg, 4);

  const float off = validation_loss(model, data, sched, 5, 32);
  const float ba = validation_loss(model, data, sched, 5, 32, &adapter,
                                   BlendMode::kBa);
  const float naive = validation_loss(model, data, sched, 5, 32, nullptr,
                                      BlendMode::kNaiveImca);
  CHECK(std::isfinite(off));
  CHECK(std::isfinite(ba));
  CHECK(std::isfinite(naive));
}

TEST_CASE("curves csv format") {
  const std::string dir = tmp_dir("curves");
  write_curves_csv(dir + "/c.csv", {{0, "train", 1.25f}, {0, "val", 1.5f}});
  std::ifstream in(dir + "/c.csv");
  std::string l0, l1, l2;
  std::getline(in, l0);
  std::getline(in, l1);
  std::getline(in, l2);
  CHECK(l0 == "epoch,split,loss");
  CHECK(l1 == "0,train,1.25");
  CHECK(l2 == "0,val,1.5");
}
