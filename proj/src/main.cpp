#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "magic/gradcheck_suite.hpp"
#include "magic/kernels.hpp"
#include "magic/report.hpp"
#include "magic/stats.hpp"
#include "magic/train.hpp"

using namespace magic;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

bool env_forces_deterministic() {
  const char* v = std::getenv("MAGIC_GROUND_DETERMINISTIC");
  return v && std::string(v) == "1";
}

json metrics_json(const MetricsBreakdown& m) {
  return json{{"visual", m.visual},
              {"blind", m.blind},
              {"all", m.all},
              {"visual_n", m.visual_n},
              {"blind_n", m.blind_n},
              {"visual_correct", m.visual_correct},
              {"blind_correct", m.blind_correct}};
}

void write_json_file(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

const std::vector<std::string> kVariantNames = {"magic", "magic_no_obj_ctx", "magic_no_mv_ctx",
                                                "magic_no_ctx", "match_baseline"};

// flags shared by train and the sweep subcommands; the swept fields get
// overwritten per run
void add_train_flags(CLI::App* cmd, TrainConfig& cfg, std::string& variant,
                     std::string& positions, std::string& deterministic) {
  cmd->add_option("--variant", variant, "model variant")
      ->check(CLI::IsMember(kVariantNames));
  cmd->add_option("--epochs", cfg.epochs, "training epochs");
  cmd->add_option("--batch", cfg.batch_size, "batch size");
  cmd->add_option("--lr", cfg.base_lr, "peak learning rate");
  cmd->add_option("--warmup", cfg.warmup_steps, "linear warmup steps");
  cmd->add_option("--eps", cfg.smoothing_eps, "label smoothing epsilon");
  cmd->add_option("--p-view", cfg.p_view, "view masking probability")
      ->check(CLI::Range(0.0, 1.0));
  cmd->add_option("--p-lang", cfg.p_lang, "language token masking probability")
      ->check(CLI::Range(0.0, 1.0));
  cmd->add_option("--views", cfg.views_per_object, "views per object")
      ->check(CLI::Range(std::size_t(1), std::size_t(8)));
  cmd->add_option("--distractors", cfg.distractors, "objects per instance, target included")
      ->check(CLI::Range(std::size_t(2), std::size_t(64)));
  cmd->add_option("--seed", cfg.seed, "run seed");
  cmd->add_option("--positions", positions, "learned view position embeddings")
      ->check(CLI::IsMember({"on", "off"}));
  cmd->add_option("--contrastive-weight", cfg.contrastive_weight,
                  "weight of the auxiliary contrastive loss");
  cmd->add_option("--contrastive-temperature", cfg.contrastive_temperature,
                  "contrastive softmax temperature");
  cmd->add_option("--hidden", cfg.hidden, "transformer width");
  cmd->add_option("--layers", cfg.layers, "encoder layers");
  cmd->add_option("--heads", cfg.heads, "attention heads");
  cmd->add_option("--ffn-dim", cfg.ffn_dim, "feed-forward width");
  cmd->add_option("--max-tokens", cfg.max_tokens, "language token cap");
  cmd->add_option("--weight-decay", cfg.weight_decay, "AdamW weight decay");
  cmd->add_option("--deterministic", deterministic,
                  "order-independent reductions (bitwise reproducible)")
      ->check(CLI::IsMember({"on", "off"}));
}

void finish_train_config(TrainConfig& cfg, const std::string& variant,
                         const std::string& positions, const std::string& deterministic) {
  if (!variant_from_name(variant, cfg.variant))
    throw std::runtime_error("unknown variant '" + variant + "'");
  cfg.use_view_positions = positions == "on";
  cfg.deterministic = deterministic == "on" || env_forces_deterministic();
}

int run_gradcheck(double h, double tol) {
  const auto results = gradcheck_suite(h, tol);
  bool all_pass = true;
  for (const auto& [name, report] : results) {
    all_pass = all_pass && report.pass;
    std::printf("%-18s %s  max_rel_err=%.3e  coords=%zu\n", name.c_str(),
                report.pass ? "ok  " : "FAIL", report.max_rel_err, report.coords_checked);
    if (!report.pass) std::printf("  worst: %s\n", report.worst.c_str());
  }
  std::printf("%zu/%zu checks passed (h=%g, tol=%g)\n",
              std::size_t(std::count_if(results.begin(), results.end(),
                                        [](const auto& r) { return r.second.pass; })),
              results.size(), h, tol);
  return all_pass ? 0 : 1;
}

int run_report_cmd(const std::string& runs_glob, const std::vector<std::string>& compare,
                   const std::string& json_path) {
  const auto paths = glob_paths(runs_glob);
  if (paths.empty()) throw std::runtime_error("no run logs match '" + runs_glob + "'");
  std::vector<RunSummary> runs;
  runs.reserve(paths.size());
  for (const auto& p : paths) runs.push_back(summarize_run(p));

  std::vector<std::pair<std::string, std::string>> compares;
  for (std::size_t i = 0; i + 1 < compare.size(); i += 2)
    compares.emplace_back(compare[i], compare[i + 1]);

  const json rep = build_report(runs, compares);
  std::cout << render_report(rep);
  if (!json_path.empty()) write_json_file(json_path, rep);
  return 0;
}

int run_fewer_views(const std::string& data_dir, const std::string& out_dir,
                    std::size_t seeds, TrainConfig base) {
  const Dataset data = load_dataset(data_dir);
  const std::vector<std::size_t> js = {1, 2, 4, 8};
  {
    json echo = {{"data", data_dir}, {"seeds", seeds}, {"views", js},
                 {"epochs", base.epochs}, {"variant", variant_name(base.variant)},
                 {"hidden", base.hidden}, {"layers", base.layers}};
    fs::create_directories(out_dir);
    write_json_file(fs::path(out_dir) / "sweep_config.json", echo);
  }

  std::vector<RunSummary> sums;
  for (const std::size_t j : js) {
    for (std::size_t s = 0; s < seeds; ++s) {
      TrainConfig cfg = base;
      cfg.views_per_object = j;
      cfg.seed = s;
      const fs::path run_dir =
          fs::path(out_dir) / ("j" + std::to_string(j)) / ("seed" + std::to_string(s));
      std::cerr << "training " << run_label(cfg) << " seed " << s << "\n";
      train_run(data, cfg, run_dir.string());
      sums.push_back(summarize_run((run_dir / "run_log.jsonl").string()));
    }
  }

  std::vector<std::pair<std::string, std::string>> compares;
  if (seeds >= 2) {
    TrainConfig hi = base, lo = base;
    hi.views_per_object = 8;
    lo.views_per_object = 1;
    compares.emplace_back(run_label(hi), run_label(lo));
  }
  json rep;
  try {
    rep = build_report(sums, compares);
  } catch (const std::exception& e) {
    // degenerate seeds (e.g. zero variance on tiny data) only break the
    // t-test, not the table
    std::cerr << "t-test skipped: " << e.what() << "\n";
    rep = build_report(sums, {});
  }
  std::cout << render_report(rep);
  write_json_file(fs::path(out_dir) / "report.json", rep);
  return 0;
}

int run_masking_grid(const std::string& data_dir, const std::string& out_dir,
                     std::size_t seeds, TrainConfig base) {
  const Dataset data = load_dataset(data_dir);
  const std::vector<double> ps = {0.0, 0.1, 0.2, 0.4};
  fs::create_directories(out_dir);
  {
    json echo = {{"data", data_dir}, {"seeds", seeds}, {"p_values", ps},
                 {"epochs", base.epochs}, {"variant", variant_name(base.variant)}};
    write_json_file(fs::path(out_dir) / "sweep_config.json", echo);
  }

  json cells = json::array();
  std::vector<std::vector<MeanStd>> grid(ps.size(), std::vector<MeanStd>(ps.size()));
  for (std::size_t vi = 0; vi < ps.size(); ++vi) {
    for (std::size_t li = 0; li < ps.size(); ++li) {
      std::vector<double> best;
      for (std::size_t s = 0; s < seeds; ++s) {
        TrainConfig cfg = base;
        cfg.p_view = ps[vi];
        cfg.p_lang = ps[li];
        cfg.seed = s;
        std::ostringstream dir_name;
        dir_name << "pv" << ps[vi] << "_pl" << ps[li] << "_seed" << s;
        const fs::path run_dir = fs::path(out_dir) / dir_name.str();
        std::cerr << "training p_view=" << ps[vi] << " p_lang=" << ps[li] << " seed " << s
                  << "\n";
        const RunResult res = train_run(data, cfg, run_dir.string());
        best.push_back(res.best.all);
      }
      grid[vi][li] = aggregate_seeds(best);
      cells.push_back({{"p_view", ps[vi]},
                       {"p_lang", ps[li]},
                       {"mean", grid[vi][li].mean},
                       {"std", grid[vi][li].std},
                       {"n", seeds}});
    }
  }

  std::printf("best val accuracy %%, p_view rows x p_lang columns\n");
  std::printf("%8s", "");
  for (const double pl : ps) std::printf("  %8.2f", pl);
  std::printf("\n");
  for (std::size_t vi = 0; vi < ps.size(); ++vi) {
    std::printf("%8.2f", ps[vi]);
    for (std::size_t li = 0; li < ps.size(); ++li)
      std::printf("  %8.2f", grid[vi][li].mean * 100.0);
    std::printf("\n");
  }
  write_json_file(fs::path(out_dir) / "grid.json", json{{"cells", cells}});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"joint-context multi-view grounding harness"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic relational benchmark");
  SynthConfig synth_cfg;
  std::string synth_out;
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--attrs", synth_cfg.attributes, "attributes per object");
  synth->add_option("--dim", synth_cfg.dim, "feature dimension");
  synth->add_option("--views", synth_cfg.views, "views per object");
  synth->add_option("--count-train", synth_cfg.count_train, "training instances");
  synth->add_option("--count-val", synth_cfg.count_val, "validation instances");
  synth->add_option("--noise-std", synth_cfg.noise_std, "feature noise scale");
  synth->add_option("--seed", synth_cfg.seed, "generator seed");

  // train
  auto* train = app.add_subcommand("train", "train one model variant");
  TrainConfig train_cfg;
  std::string train_data, train_out, train_resume;
  std::string train_variant = "magic", train_positions = "off", train_det = "on";
  train->add_option("--data", train_data, "dataset directory")->required();
  train->add_option("--out", train_out, "run output directory")->required();
  train->add_option("--resume", train_resume, "checkpoint to continue from");
  add_train_flags(train, train_cfg, train_variant, train_positions, train_det);

  // eval
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string eval_ckpt, eval_data, eval_split = "val";
  std::size_t eval_views = 0, eval_distractors = 0, eval_batch = 64;
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint path")->required();
  eval->add_option("--data", eval_data, "dataset directory")->required();
  eval->add_option("--views", eval_views, "views per object (0: checkpoint setting)")
      ->check(CLI::Range(std::size_t(0), std::size_t(8)));
  eval->add_option("--distractors", eval_distractors,
                   "objects per instance (0: checkpoint setting)");
  eval->add_option("--split", eval_split, "data split")
      ->check(CLI::IsMember({"train", "val", "test"}));
  eval->add_option("--batch", eval_batch, "evaluation batch size");

  // gradcheck
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  gradcheck->set_help_flag("--help", "print help");  // frees -h for the step size
  double gc_tol = 1e-4, gc_h = 1e-5;
  gradcheck->add_option("--tol", gc_tol, "max relative error");
  gradcheck->add_option("--h", gc_h, "central difference step");

  // report
  auto* report = app.add_subcommand("report", "aggregate run logs");
  std::string report_glob, report_json;
  std::vector<std::string> report_compare;
  report->add_option("--runs", report_glob, "glob over run_log.jsonl files")->required();
  report->add_option("--compare", report_compare, "pairs of group labels to t-test")
      ->expected(-1);
  report->add_option("--json", report_json, "also write the JSON report here");

  // fewer-views
  auto* fewer = app.add_subcommand("fewer-views", "sweep views per object over {1,2,4,8}");
  TrainConfig fewer_cfg;
  std::string fewer_data, fewer_out;
  std::string fewer_variant = "magic", fewer_positions = "off", fewer_det = "on";
  std::size_t fewer_seeds = 3;
  fewer->add_option("--data", fewer_data, "dataset directory")->required();
  fewer->add_option("--out", fewer_out, "sweep output directory")->required();
  fewer->add_option("--seeds", fewer_seeds, "seeds per cell")->check(CLI::Range(1, 64));
  add_train_flags(fewer, fewer_cfg, fewer_variant, fewer_positions, fewer_det);

  // masking-grid
  auto* grid = app.add_subcommand("masking-grid",
                                  "sweep p-view and p-lang over {0,0.1,0.2,0.4}");
  TrainConfig grid_cfg;
  std::string grid_data, grid_out;
  std::string grid_variant = "magic", grid_positions = "off", grid_det = "on";
  std::size_t grid_seeds = 1;
  grid->add_option("--data", grid_data, "dataset directory")->required();
  grid->add_option("--out", grid_out, "sweep output directory")->required();
  grid->add_option("--seeds", grid_seeds, "seeds per cell")->check(CLI::Range(1, 64));
  add_train_flags(grid, grid_cfg, grid_variant, grid_positions, grid_det);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (synth->parsed()) {
      generate_synthetic(synth_cfg, synth_out);
      std::cout << "wrote " << synth_out << "\n";
      return 0;
    }
    if (train->parsed()) {
      finish_train_config(train_cfg, train_variant, train_positions, train_det);
      const Dataset data = load_dataset(train_data);
      const RunResult res = train_run(data, train_cfg, train_out, train_resume);
      json out{{"label", run_label(train_cfg)},
               {"seed", res.seed},
               {"epochs_run", res.train_loss.size()},
               {"best", metrics_json(res.best)},
               {"last", metrics_json(res.last)},
               {"best_checkpoint", res.best_path},
               {"last_checkpoint", res.last_path}};
      std::cerr << "wall seconds: " << res.wall_seconds << "\n";
      std::cout << out.dump(2) << "\n";
      return 0;
    }
    if (eval->parsed()) {
      const LoadedCheckpoint lc = load_checkpoint(eval_ckpt);
      kern::set_canonical_reductions(lc.state.train.deterministic ||
                                     env_forces_deterministic());
      const Dataset data = load_dataset(eval_data);
      const std::size_t views =
          eval_views ? eval_views : lc.state.train.views_per_object;
      const std::size_t distractors =
          eval_distractors ? eval_distractors : lc.state.train.distractors;
      Split split = Split::val;
      if (eval_split == "train") split = Split::train;
      else if (eval_split == "test") split = Split::test;
      const MetricsBreakdown mb =
          evaluate_split(lc.params, data, split, views, distractors, eval_batch);
      json out{{"checkpoint", eval_ckpt}, {"data", eval_data},
               {"split", eval_split},     {"views", views},
               {"distractors", distractors}, {"metrics", metrics_json(mb)}};
      std::cout << out.dump(2) << "\n";
      return 0;
    }
    if (gradcheck->parsed()) return run_gradcheck(gc_h, gc_tol);
    if (report->parsed()) {
      if (report_compare.size() % 2 != 0) {
        std::cerr << "error: --compare takes pairs of group labels\n";
        return 2;
      }
      return run_report_cmd(report_glob, report_compare, report_json);
    }
    if (fewer->parsed()) {
      finish_train_config(fewer_cfg, fewer_variant, fewer_positions, fewer_det);
      return run_fewer_views(fewer_data, fewer_out, fewer_seeds, fewer_cfg);
    }
    if (grid->parsed()) {
      finish_train_config(grid_cfg, grid_variant, grid_positions, grid_det);
      return run_masking_grid(grid_data, grid_out, grid_seeds, grid_cfg);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
