#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "magic/data.hpp"
#include "magic/model.hpp"
#include "magic/optim.hpp"

namespace magic {

struct TrainConfig {
  std::size_t epochs = 75;
  std::size_t batch_size = 64;
  double base_lr = 1e-3;
  std::size_t warmup_steps = 10000;
  double smoothing_eps = 0.1;
  double p_view = 0.1;
  double p_lang = 0.2;
  std::uint64_t seed = 0;
  Variant variant = Variant::magic;
  std::size_t views_per_object = 8;
  std::size_t distractors = 2;  // objects per instance, counting the target
  double contrastive_weight = 0.0;
  double contrastive_temperature = 0.07;
  bool use_view_positions = false;
  bool deterministic = true;
  std::size_t hidden = 256;
  std::size_t layers = 3;
  std::size_t heads = 8;
  std::size_t ffn_dim = 1024;
  std::size_t max_tokens = 32;
  double weight_decay = 0.01;
};

ModelConfig model_config(const TrainConfig& cfg, std::size_t feature_dim);

// group label used by run logs and the report tool, e.g. "magic_j8_m2"
std::string run_label(const TrainConfig& cfg);

struct MetricsBreakdown {
  double visual = 0, blind = 0, all = 0;
  std::size_t visual_n = 0, blind_n = 0;
  std::size_t visual_correct = 0, blind_correct = 0;
};

// Augmentation-free accuracy on one split: all stored views subsampled to
// `views`, no masking, fixed per-instance distractor extension. Batch size
// does not affect the result.
MetricsBreakdown evaluate_split(const ModelParams<float>& params, const Dataset& data,
                                Split split, std::size_t views, std::size_t distractors,
                                std::size_t batch_size = 64);

struct CheckpointState {
  TrainConfig train;
  std::size_t feature_dim = 0;
  std::size_t step = 0;
  std::size_t epochs_done = 0;
  double best_val_all = -1;
  MetricsBreakdown best_metrics;
};

void save_checkpoint(const std::string& path, const ModelParams<float>& params,
                     const AdamW<float>& opt, const CheckpointState& state);

struct LoadedCheckpoint {
  ModelParams<float> params;
  AdamW<float> opt;
  CheckpointState state;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

struct RunResult {
  std::uint64_t seed = 0;
  std::vector<double> train_loss;  // one entry per epoch run in this call
  MetricsBreakdown best;           // metrics of the retained best checkpoint
  MetricsBreakdown last;           // metrics after the final epoch
  std::string best_path;
  std::string last_path;
  double wall_seconds = 0;
};

// Trains on the train split and evaluates val after every epoch. Writes
// out_dir/config.json, appends one line per epoch to out_dir/run_log.jsonl,
// and keeps two checkpoints: best.ckpt (highest val accuracy so far) and
// last.ckpt. When resume_from is nonempty the run continues from that
// checkpoint at epoch granularity; everything but cfg.epochs is then taken
// from the checkpoint, and the continuation is bitwise identical to a run
// that was never interrupted.
RunResult train_run(const Dataset& data, const TrainConfig& cfg, const std::string& out_dir,
                    const std::string& resume_from = "");

}  // namespace magic
