#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "magic/train.hpp"

using namespace magic;
namespace fs = std::filesystem;

namespace {

bool thrown(const std::function<void()>& f, const char* needle) {
  try {
    f();
  } catch (const std::exception& e) {
    return std::string(e.what()).find(needle) != std::string::npos;
  }
  return false;
}

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("magic_train_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(bool(in));
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Dataset tiny_dataset(const fs::path& dir, std::size_t train = 24, std::size_t val = 12,
                     std::size_t dim = 16) {
  SynthConfig sc;
  sc.attributes = 3;
  sc.dim = dim;
  sc.views = 4;
  sc.count_train = train;
  sc.count_val = val;
  sc.seed = 11;
  generate_synthetic(sc, dir.string());
  return load_dataset(dir.string());
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.epochs = 2;
  c.batch_size = 8;
  c.warmup_steps = 10;
  c.seed = 7;
  c.views_per_object = 4;
  c.hidden = 16;
  c.layers = 1;
  c.heads = 2;
  c.ffn_dim = 32;
  c.max_tokens = 4;
  return c;
}

bool same_metrics(const MetricsBreakdown& a, const MetricsBreakdown& b) {
  return a.visual == b.visual && a.blind == b.blind && a.all == b.all &&
         a.visual_n == b.visual_n && a.blind_n == b.blind_n &&
         a.visual_correct == b.visual_correct && a.blind_correct == b.blind_correct;
}

}  // namespace

TEST_CASE("training runs are seeded and reproducible byte for byte") {
  const auto data_dir = scratch_dir("det_data");
  const Dataset data = tiny_dataset(data_dir);
  const TrainConfig cfg = tiny_config();

  const auto out1 = scratch_dir("det_run1");
  const auto out2 = scratch_dir("det_run2");
  const RunResult r1 = train_run(data, cfg, out1.string());
  const RunResult r2 = train_run(data, cfg, out2.string());

  REQUIRE(r1.train_loss.size() == 2);
  CHECK(r1.train_loss == r2.train_loss);
  CHECK(same_metrics(r1.best, r2.best));
  CHECK(same_metrics(r1.last, r2.last));
  CHECK(slurp(out1 / "run_log.jsonl") == slurp(out2 / "run_log.jsonl"));
  CHECK(slurp(out1 / "config.json") == slurp(out2 / "config.json"));
  CHECK(slurp(out1 / "best.ckpt") == slurp(out2 / "best.ckpt"));
  CHECK(slurp(out1 / "last.ckpt") == slurp(out2 / "last.ckpt"));

  // a different seed actually changes the trajectory
  TrainConfig other = cfg;
  other.seed = 8;
  const auto out3 = scratch_dir("det_run3");
  const RunResult r3 = train_run(data, other, out3.string());
  CHECK(r3.train_loss != r1.train_loss);

  // log lines carry the required fields
  std::istringstream log(slurp(out1 / "run_log.jsonl"));
  std::string line;
  std::size_t lines = 0;
  while (std::getline(log, line)) {
    ++lines;
    for (const char* key :
         {"\"epoch\"", "\"train_loss\"", "\"val_visual\"", "\"val_blind\"", "\"val_all\"",
          "\"lr_last\""})
      CHECK(line.find(key) != std::string::npos);
  }
  CHECK(lines == 2);
}

TEST_CASE("checkpoints restore the exact evaluation and optimizer state") {
  const auto data_dir = scratch_dir("ckpt_data");
  const Dataset data = tiny_dataset(data_dir);
  const TrainConfig cfg = tiny_config();
  const auto out = scratch_dir("ckpt_run");
  const RunResult res = train_run(data, cfg, out.string());

  const LoadedCheckpoint last = load_checkpoint(res.last_path);
  CHECK(last.state.epochs_done == 2);
  CHECK(last.state.step == 2 * 3);  // 24 instances / batch 8
  CHECK(last.opt.step_count == last.state.step);
  CHECK(last.state.feature_dim == 16);
  const MetricsBreakdown again = evaluate_split(last.params, data, Split::val,
                                                cfg.views_per_object, cfg.distractors);
  CHECK(same_metrics(again, res.last));

  const LoadedCheckpoint best = load_checkpoint(res.best_path);
  CHECK(best.state.best_val_all == res.best.all);
  const MetricsBreakdown best_again = evaluate_split(best.params, data, Split::val,
                                                     cfg.views_per_object, cfg.distractors);
  CHECK(same_metrics(best_again, res.best));

  // corrupting the file is caught
  const std::string good = slurp(res.last_path);
  const auto broken = out / "broken.ckpt";
  auto write_bytes = [&broken](const std::string& bytes) {
    std::ofstream f(broken, std::ios::binary);
    f.write(bytes.data(), std::streamsize(bytes.size()));
  };
  write_bytes("XGCK" + good.substr(4));
  CHECK(thrown([&] { load_checkpoint(broken.string()); }, "bad magic"));
  std::string v9 = good;
  v9[4] = 9;
  write_bytes(v9);
  CHECK(thrown([&] { load_checkpoint(broken.string()); }, "unsupported version"));
  write_bytes(good.substr(0, good.size() - 7));
  CHECK(thrown([&] { load_checkpoint(broken.string()); }, "truncated"));
  write_bytes(good + "zz");
  CHECK(thrown([&] { load_checkpoint(broken.string()); }, "trailing bytes"));

  // the optimizer handed to save_checkpoint must be the model's own
  ModelParams<float> fresh = init_model<float>(model_config(cfg, 16), 1);
  AdamW<float> foreign(fresh.trainable());
  CHECK(thrown([&] { save_checkpoint((out / "x.ckpt").string(), last.params, foreign,
                                     last.state); },
               "does not match"));
}

TEST_CASE("resuming continues exactly where the run stopped") {
  const auto data_dir = scratch_dir("resume_data");
  const Dataset data = tiny_dataset(data_dir);
  TrainConfig cfg = tiny_config();
  cfg.epochs = 3;

  const auto full_dir = scratch_dir("resume_full");
  const RunResult full = train_run(data, cfg, full_dir.string());
  REQUIRE(full.train_loss.size() == 3);

  TrainConfig first = cfg;
  first.epochs = 1;
  const auto split_dir = scratch_dir("resume_split");
  const RunResult head = train_run(data, first, split_dir.string());
  REQUIRE(head.train_loss.size() == 1);
  CHECK(head.train_loss[0] == full.train_loss[0]);

  // the resume call deliberately passes garbage for everything but epochs;
  // those fields must come from the checkpoint
  TrainConfig junk;
  junk.epochs = 3;
  junk.base_lr = 9e9;
  junk.seed = 999;
  junk.hidden = 64;
  const RunResult tail = train_run(data, junk, split_dir.string(),
                                   (split_dir / "last.ckpt").string());
  REQUIRE(tail.train_loss.size() == 2);
  CHECK(tail.train_loss[0] == full.train_loss[1]);
  CHECK(tail.train_loss[1] == full.train_loss[2]);
  CHECK(same_metrics(tail.last, full.last));
  CHECK(same_metrics(tail.best, full.best));
  CHECK(slurp(split_dir / "run_log.jsonl") == slurp(full_dir / "run_log.jsonl"));
  CHECK(slurp(split_dir / "config.json") == slurp(full_dir / "config.json"));
  CHECK(slurp(split_dir / "last.ckpt") == slurp(full_dir / "last.ckpt"));

  // resuming a finished run trains nothing and reports current metrics
  const RunResult done = train_run(data, junk, split_dir.string(),
                                   (split_dir / "last.ckpt").string());
  CHECK(done.train_loss.empty());
  CHECK(same_metrics(done.last, full.last));
}

TEST_CASE("evaluation is augmentation free") {
  const auto data_dir = scratch_dir("eval_data");
  const Dataset data = tiny_dataset(data_dir);
  const TrainConfig cfg = tiny_config();
  const ModelParams<float> params = init_model<float>(model_config(cfg, 16), 3);

  const MetricsBreakdown a = evaluate_split(params, data, Split::val, 4, 2, 64);
  const MetricsBreakdown b = evaluate_split(params, data, Split::val, 4, 2, 3);
  const MetricsBreakdown c = evaluate_split(params, data, Split::val, 4, 2, 1);
  const MetricsBreakdown d = evaluate_split(params, data, Split::val, 4, 2, 64);
  CHECK(same_metrics(a, b));
  CHECK(same_metrics(a, c));
  CHECK(same_metrics(a, d));

  // the breakdown is exact bookkeeping over the split
  CHECK(a.visual_n + a.blind_n == 12);
  CHECK(a.visual_n > 0);
  CHECK(a.blind_n > 0);
  CHECK(a.visual == double(a.visual_correct) / double(a.visual_n));
  CHECK(a.blind == double(a.blind_correct) / double(a.blind_n));
  CHECK(a.all == double(a.visual_correct + a.blind_correct) / 12.0);

  CHECK(thrown([&] { evaluate_split(params, data, Split::test, 4, 2); }, "empty split"));
  CHECK(thrown([&] { evaluate_split(params, data, Split::val, 4, 2, 0); }, "batch_size"));
}

TEST_CASE("extra distractors extend instances during training and eval") {
  const auto data_dir = scratch_dir("ext_data");
  const Dataset data = tiny_dataset(data_dir);
  TrainConfig cfg = tiny_config();
  cfg.distractors = 3;
  cfg.epochs = 1;

  const auto out1 = scratch_dir("ext_run1");
  const auto out2 = scratch_dir("ext_run2");
  const RunResult r1 = train_run(data, cfg, out1.string());
  const RunResult r2 = train_run(data, cfg, out2.string());
  CHECK(r1.train_loss == r2.train_loss);
  CHECK(same_metrics(r1.last, r2.last));
  CHECK(r1.last.visual_n + r1.last.blind_n == 12);

  // a three-object eval scores three candidates per instance
  const LoadedCheckpoint lc = load_checkpoint(r1.last_path);
  const MetricsBreakdown m3 = evaluate_split(lc.params, data, Split::val, 4, 3);
  const MetricsBreakdown m2 = evaluate_split(lc.params, data, Split::val, 4, 2);
  CHECK(m3.visual_n == m2.visual_n);
  CHECK(same_metrics(m3, evaluate_split(lc.params, data, Split::val, 4, 3)));
}

TEST_CASE("initial loss sits near ln 2 without smoothing or masking") {
  const auto data_dir = scratch_dir("ln2_data");
  const Dataset data = tiny_dataset(data_dir);
  TrainConfig cfg = tiny_config();
  cfg.epochs = 1;
  cfg.batch_size = 64;  // one step per epoch: the logged loss is the step-0 loss
  cfg.smoothing_eps = 0.0;
  cfg.p_view = 0.0;
  cfg.p_lang = 0.0;

  const auto out = scratch_dir("ln2_run");
  const RunResult res = train_run(data, cfg, out.string());
  CHECK(res.train_loss[0] == doctest::Approx(0.6931471805599453).epsilon(0.02));
}

TEST_CASE("train rejects unusable inputs") {
  const auto data_dir = scratch_dir("bad_data");
  Dataset data = tiny_dataset(data_dir);
  const TrainConfig cfg = tiny_config();

  Dataset no_train = load_dataset(data_dir.string());
  for (auto& r : no_train.annotations) r.split = Split::val;
  const auto out = scratch_dir("bad_run");
  CHECK(thrown([&] { train_run(no_train, cfg, out.string()); }, "empty train split"));

  // resuming against data of a different feature width is refused
  const auto run_dir = scratch_dir("bad_dim_run");
  TrainConfig one = cfg;
  one.epochs = 1;
  const RunResult res = train_run(data, one, run_dir.string());
  const auto other_dir = scratch_dir("bad_dim_data");
  const Dataset narrow = tiny_dataset(other_dir, 8, 4, 8);
  CHECK(thrown([&] { train_run(narrow, cfg, run_dir.string(), res.last_path); },
               "feature dim"));
}

TEST_CASE("run labels name the experiment") {
  TrainConfig cfg;
  CHECK(run_label(cfg) == "magic_j8_m2");
  cfg.variant = Variant::no_obj_ctx;
  cfg.views_per_object = 1;
  CHECK(run_label(cfg) == "magic_no_obj_ctx_j1_m2");
  cfg = TrainConfig{};
  cfg.p_view = 0.4;
  cfg.p_lang = 0.0;
  CHECK(run_label(cfg) == "magic_j8_m2_pv0.4_pl0");
  cfg = TrainConfig{};
  cfg.use_view_positions = true;
  cfg.contrastive_weight = 0.5;
  CHECK(run_label(cfg) == "magic_j8_m2_pos_cw0.5");
  cfg = TrainConfig{};
  cfg.distractors = 3;
  cfg.variant = Variant::match_baseline;
  CHECK(run_label(cfg) == "match_baseline_j8_m3");
}
