#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "doctest.h"
#include "magic/report.hpp"
#include "magic/stats.hpp"
#include "magic/train.hpp"

using namespace magic;
using nlohmann::json;
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
  const fs::path dir = fs::temp_directory_path() / ("magic_report_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_file(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  out << text;
}

void write_run(const fs::path& dir, const std::string& label, std::uint64_t seed,
               const std::vector<std::array<double, 3>>& epochs) {
  std::string log;
  for (std::size_t e = 0; e < epochs.size(); ++e) {
    json line{{"epoch", e},          {"train_loss", 0.5},
              {"val_visual", epochs[e][0]}, {"val_blind", epochs[e][1]},
              {"val_all", epochs[e][2]},    {"lr_last", 1e-4}};
    log += line.dump() + "\n";
  }
  write_file(dir / "run_log.jsonl", log);
  write_file(dir / "config.json", json{{"label", label}, {"seed", seed}}.dump());
}

RunSummary summary(const std::string& label, std::uint64_t seed, double visual, double blind,
                   double all) {
  RunSummary r;
  r.label = label;
  r.seed = seed;
  r.visual = visual;
  r.blind = blind;
  r.all = all;
  return r;
}

}  // namespace

TEST_CASE("glob expands star, question mark, and double star") {
  const auto root = scratch_dir("glob");
  for (const char* p : {"a/run1/run_log.jsonl", "a/run2/run_log.jsonl",
                        "b/x/deep/run_log.jsonl", "a/run1/config.json"})
    write_file(root / p, "{}");

  const std::string r = root.string();
  const auto star = glob_paths(r + "/a/*/run_log.jsonl");
  REQUIRE(star.size() == 2);
  CHECK(star[0] == (root / "a/run1/run_log.jsonl").string());
  CHECK(star[1] == (root / "a/run2/run_log.jsonl").string());

  CHECK(glob_paths(r + "/**/run_log.jsonl").size() == 3);
  CHECK(glob_paths(r + "/a/run?/run_log.jsonl").size() == 2);
  CHECK(glob_paths(r + "/a/run1/run_log.jsonl").size() == 1);
  CHECK(glob_paths(r + "/c/*/run_log.jsonl").empty());
  CHECK(glob_paths(r + "/a/*/nothing.json").empty());
  CHECK(thrown([] { glob_paths(""); }, "empty pattern"));
}

TEST_CASE("summarize_run picks the best epoch and validates the log") {
  const auto root = scratch_dir("summarize");
  write_run(root / "run", "magic_j8_m2", 5,
            {{0.50, 0.40, 0.45}, {0.90, 0.70, 0.80}, {0.85, 0.65, 0.75}});
  const RunSummary s = summarize_run((root / "run/run_log.jsonl").string());
  CHECK(s.label == "magic_j8_m2");
  CHECK(s.seed == 5);
  CHECK(s.visual == 0.90);
  CHECK(s.blind == 0.70);
  CHECK(s.all == 0.80);
  CHECK(s.epochs == 3);

  // a run directory is shorthand for its log file
  const RunSummary sdir = summarize_run((root / "run").string());
  CHECK(sdir.label == s.label);
  CHECK(sdir.all == s.all);
  CHECK(sdir.epochs == s.epochs);

  // ties keep the earliest epoch, matching best-checkpoint retention
  write_run(root / "tie", "g", 0, {{0.1, 0.1, 0.7}, {0.9, 0.9, 0.7}});
  CHECK(summarize_run((root / "tie/run_log.jsonl").string()).visual == 0.1);

  write_file(root / "bad1/run_log.jsonl", "{\"epoch\":0}\nnot json\n");
  write_file(root / "bad1/config.json", "{}");
  CHECK(thrown([&] { summarize_run((root / "bad1/run_log.jsonl").string()); },
               "run log line 1: missing field"));

  write_file(root / "bad2/run_log.jsonl",
             "{\"epoch\":0,\"train_loss\":1,\"val_visual\":1,\"val_blind\":1,\"val_all\":1,"
             "\"lr_last\":1}\nnot json\n");
  CHECK(thrown([&] { summarize_run((root / "bad2/run_log.jsonl").string()); },
               "run log line 2: invalid JSON"));

  write_file(root / "empty/run_log.jsonl", "");
  CHECK(thrown([&] { summarize_run((root / "empty/run_log.jsonl").string()); }, "empty"));

  write_run(root / "nocfg", "g", 0, {{1, 1, 1}});
  fs::remove(root / "nocfg/config.json");
  CHECK(thrown([&] { summarize_run((root / "nocfg/run_log.jsonl").string()); }, "cannot open"));
}

TEST_CASE("report aggregation matches the statistics module") {
  const std::vector<RunSummary> runs = {
      summary("magic", 0, 0.90, 0.70, 0.80), summary("magic", 1, 0.92, 0.72, 0.82),
      summary("magic", 2, 0.94, 0.74, 0.84), summary("ablated", 0, 0.80, 0.60, 0.70),
      summary("ablated", 1, 0.81, 0.61, 0.71), summary("ablated", 2, 0.82, 0.62, 0.72)};

  const json rep = build_report(runs, {{"magic", "ablated"}});
  REQUIRE(rep.at("groups").size() == 2);
  CHECK(rep.at("groups")[0].at("name") == "magic");
  CHECK(rep.at("groups")[1].at("name") == "ablated");
  CHECK(rep.at("groups")[0].at("n") == 3);
  CHECK(rep.at("groups")[0].at("seeds") == json({0, 1, 2}));

  const MeanStd all = aggregate_seeds({0.80, 0.82, 0.84});
  CHECK(rep.at("groups")[0].at("all").at("mean").get<double>() == all.mean);
  CHECK(rep.at("groups")[0].at("all").at("std").get<double>() == all.std);

  const WelchResult w = welch_t_test({0.80, 0.82, 0.84}, {0.70, 0.71, 0.72});
  REQUIRE(rep.at("tests").size() == 1);
  CHECK(rep.at("tests")[0].at("t").get<double>() == w.t);
  CHECK(rep.at("tests")[0].at("df").get<double>() == w.df);
  CHECK(rep.at("tests")[0].at("p").get<double>() == w.p);

  // identical groups give the pinned degenerate test result
  std::vector<RunSummary> same;
  for (std::uint64_t s = 0; s < 10; ++s) {
    same.push_back(summary("x", s, 0.9, 0.7, 0.8 + 0.001 * double(s % 3)));
    same.push_back(summary("y", s, 0.9, 0.7, 0.8 + 0.001 * double(s % 3)));
  }
  const json eq = build_report(same, {{"x", "y"}});
  CHECK(eq.at("tests")[0].at("t").get<double>() == 0.0);
  CHECK(eq.at("tests")[0].at("p").get<double>() == 1.0);

  // one seed per group: a table row still works, a t-test does not
  const std::vector<RunSummary> single = {summary("solo", 3, 0.9, 0.7, 0.8)};
  const json srep = build_report(single, {});
  CHECK(srep.at("groups")[0].at("all").at("std").get<double>() == 0.0);
  CHECK(srep.at("tests").empty());
  CHECK(thrown([&] { build_report(single, {{"solo", "solo"}}); }, "at least two seeds"));
  CHECK(thrown([&] { build_report(runs, {{"magic", "nope"}}); }, "unknown group"));
  CHECK(thrown([] { build_report({}, {}); }, "no runs"));

  const auto dup = std::vector<RunSummary>{summary("g", 1, 1, 1, 1), summary("g", 1, 1, 1, 1)};
  CHECK(thrown([&] { build_report(dup, {}); }, "duplicate seed"));
}

TEST_CASE("report text is a pure function of the report JSON") {
  const std::vector<RunSummary> runs = {summary("magic_j8_m2", 0, 0.9123, 0.7011, 0.8152),
                                        summary("magic_j8_m2", 1, 0.9201, 0.7103, 0.8244),
                                        summary("match_baseline_j8_m2", 0, 0.80, 0.66, 0.73),
                                        summary("match_baseline_j8_m2", 1, 0.81, 0.67, 0.74)};
  const json rep = build_report(runs, {{"magic_j8_m2", "match_baseline_j8_m2"}});
  const std::string text = render_report(rep);
  CHECK(text.find("magic_j8_m2") != std::string::npos);
  CHECK(text.find("Welch") != std::string::npos);

  const json reparsed = json::parse(rep.dump());
  CHECK(render_report(reparsed) == text);
}

TEST_CASE("report consumes real training output end to end") {
  const auto data_dir = scratch_dir("e2e_data");
  SynthConfig sc;
  sc.attributes = 3;
  sc.dim = 12;
  sc.views = 4;
  sc.count_train = 12;
  sc.count_val = 8;
  sc.seed = 2;
  generate_synthetic(sc, data_dir.string());
  const Dataset data = load_dataset(data_dir.string());

  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 8;
  cfg.warmup_steps = 4;
  cfg.views_per_object = 4;
  cfg.hidden = 8;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.ffn_dim = 16;
  cfg.max_tokens = 4;

  const auto runs_dir = scratch_dir("e2e_runs");
  for (std::uint64_t seed : {0, 1}) {
    cfg.seed = seed;
    train_run(data, cfg, (runs_dir / ("seed" + std::to_string(seed))).string());
  }

  const auto logs = glob_paths(runs_dir.string() + "/*/run_log.jsonl");
  REQUIRE(logs.size() == 2);
  std::vector<RunSummary> summaries;
  for (const auto& p : logs) summaries.push_back(summarize_run(p));
  CHECK(summaries[0].label == "magic_j4_m2");
  CHECK(summaries[0].seed != summaries[1].seed);

  const json rep = build_report(summaries, {{"magic_j4_m2", "magic_j4_m2"}});
  CHECK(rep.at("groups").size() == 1);
  CHECK(rep.at("groups")[0].at("n") == 2);
  const std::string text = render_report(rep);
  CHECK(text.find("magic_j4_m2") != std::string::npos);
}
