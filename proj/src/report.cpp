#include "magic/report.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <regex>
#include <set>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include "magic/stats.hpp"

namespace magic {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

double number_field(const json& j, const char* name, std::size_t line) {
  const auto it = j.find(name);
  if (it == j.end() || !it->is_number())
    throw std::runtime_error("run log line " + std::to_string(line) + ": missing field '" +
                             name + "'");
  return it->get<double>();
}

std::regex component_regex(const std::string& comp) {
  std::string re;
  for (char ch : comp) {
    if (ch == '*') re += "[^/]*";
    else if (ch == '?') re += "[^/]";
    else if (std::string("\\^$.|+()[]{}").find(ch) != std::string::npos) re += std::string("\\") + ch;
    else re += ch;
  }
  return std::regex(re);
}

void glob_walk(const fs::path& base, const std::vector<std::string>& comps, std::size_t i,
               std::set<std::string>& out) {
  if (i == comps.size()) {
    if (fs::exists(base)) out.insert(base.lexically_normal().string());
    return;
  }
  const std::string& comp = comps[i];
  if (comp == "**") {
    glob_walk(base, comps, i + 1, out);
    if (!fs::is_directory(base)) return;
    for (const auto& e : fs::directory_iterator(base))
      if (e.is_directory()) glob_walk(e.path(), comps, i, out);
    return;
  }
  if (comp.find_first_of("*?") == std::string::npos) {
    glob_walk(base / comp, comps, i + 1, out);
    return;
  }
  if (!fs::is_directory(base)) return;
  const std::regex re = component_regex(comp);
  for (const auto& e : fs::directory_iterator(base))
    if (std::regex_match(e.path().filename().string(), re))
      glob_walk(e.path(), comps, i + 1, out);
}

MeanStd aggregate_of(const std::vector<RunSummary>& runs, double RunSummary::* field) {
  std::vector<double> xs;
  xs.reserve(runs.size());
  for (const auto& r : runs) xs.push_back(r.*field);
  return aggregate_seeds(xs);
}

std::string format_pct(double mean, double std) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%6.2f +- %5.2f", mean * 100.0, std * 100.0);
  return buf;
}

}  // namespace

RunSummary summarize_run(const std::string& log_path) {
  // accept a run directory as shorthand for its log
  fs::path resolved(log_path);
  if (fs::is_directory(resolved)) resolved /= "run_log.jsonl";
  std::ifstream in(resolved);
  if (!in) throw std::runtime_error("cannot open " + resolved.string());

  RunSummary best;
  double best_all = -1;
  std::string line;
  std::size_t lineno = 0, lines = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw std::runtime_error("run log line " + std::to_string(lineno) + ": invalid JSON: " +
                               e.what());
    }
    const double all = number_field(j, "val_all", lineno);
    const double visual = number_field(j, "val_visual", lineno);
    const double blind = number_field(j, "val_blind", lineno);
    number_field(j, "train_loss", lineno);
    number_field(j, "epoch", lineno);
    ++lines;
    if (all > best_all) {
      best_all = all;
      best.visual = visual;
      best.blind = blind;
      best.all = all;
    }
  }
  if (lines == 0) throw std::runtime_error("run log is empty: " + resolved.string());
  best.epochs = lines;

  const fs::path cfg_path = resolved.parent_path() / "config.json";
  std::ifstream cfg_in(cfg_path);
  if (!cfg_in) throw std::runtime_error("cannot open " + cfg_path.string());
  json cfg;
  try {
    cfg = json::parse(cfg_in);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(cfg_path.string() + ": invalid JSON: " + e.what());
  }
  best.label = cfg.at("label").get<std::string>();
  best.seed = cfg.at("seed").get<std::uint64_t>();
  return best;
}

std::vector<std::string> glob_paths(const std::string& pattern) {
  if (pattern.empty()) throw std::invalid_argument("glob: empty pattern");
  std::vector<std::string> comps;
  std::string cur;
  for (char ch : pattern) {
    if (ch == '/') {
      if (!cur.empty()) comps.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  if (!cur.empty()) comps.push_back(cur);

  std::set<std::string> out;
  glob_walk(pattern[0] == '/' ? fs::path("/") : fs::path("."), comps, 0, out);
  return {out.begin(), out.end()};
}

json build_report(const std::vector<RunSummary>& runs,
                  const std::vector<std::pair<std::string, std::string>>& compares) {
  if (runs.empty()) throw std::invalid_argument("report: no runs");

  std::vector<std::string> order;
  std::unordered_map<std::string, std::vector<RunSummary>> groups;
  for (const auto& r : runs) {
    auto& g = groups[r.label];
    if (g.empty()) order.push_back(r.label);
    for (const auto& prev : g)
      if (prev.seed == r.seed)
        throw std::runtime_error("report: duplicate seed " + std::to_string(r.seed) +
                                 " in group '" + r.label + "'");
    g.push_back(r);
  }

  json out;
  out["groups"] = json::array();
  for (const auto& name : order) {
    const auto& g = groups[name];
    std::vector<std::uint64_t> seeds;
    for (const auto& r : g) seeds.push_back(r.seed);
    std::sort(seeds.begin(), seeds.end());
    const MeanStd visual = aggregate_of(g, &RunSummary::visual);
    const MeanStd blind = aggregate_of(g, &RunSummary::blind);
    const MeanStd all = aggregate_of(g, &RunSummary::all);
    out["groups"].push_back(
        {{"name", name},
         {"n", g.size()},
         {"seeds", seeds},
         {"visual", {{"mean", visual.mean}, {"std", visual.std}}},
         {"blind", {{"mean", blind.mean}, {"std", blind.std}}},
         {"all", {{"mean", all.mean}, {"std", all.std}}}});
  }

  out["tests"] = json::array();
  for (const auto& [a, b] : compares) {
    for (const auto& name : {a, b}) {
      const auto it = groups.find(name);
      if (it == groups.end()) throw std::runtime_error("report: unknown group '" + name + "'");
      if (it->second.size() < 2)
        throw std::runtime_error("report: group '" + name +
                                 "' needs at least two seeds for a t-test");
    }
    std::vector<double> xa, xb;
    for (const auto& r : groups[a]) xa.push_back(r.all);
    for (const auto& r : groups[b]) xb.push_back(r.all);
    const WelchResult w = welch_t_test(xa, xb);
    out["tests"].push_back({{"a", a}, {"b", b}, {"t", w.t}, {"df", w.df}, {"p", w.p}});
  }
  return out;
}

std::string render_report(const json& report) {
  std::size_t name_w = 5;
  for (const auto& g : report.at("groups")) {
    const auto name = g.at("name").get<std::string>();
    name_w = std::max(name_w, name.size());
  }

  std::ostringstream out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-*s  %3s  %-16s  %-16s  %-16s\n", int(name_w), "group", "n",
                "visual %", "blind %", "all %");
  out << buf;
  for (const auto& g : report.at("groups")) {
    std::snprintf(buf, sizeof buf, "%-*s  %3zu  %-16s  %-16s  %-16s\n", int(name_w),
                  g.at("name").get<std::string>().c_str(), g.at("n").get<std::size_t>(),
                  format_pct(g.at("visual").at("mean").get<double>(),
                             g.at("visual").at("std").get<double>())
                      .c_str(),
                  format_pct(g.at("blind").at("mean").get<double>(),
                             g.at("blind").at("std").get<double>())
                      .c_str(),
                  format_pct(g.at("all").at("mean").get<double>(),
                             g.at("all").at("std").get<double>())
                      .c_str());
    out << buf;
  }

  const auto& tests = report.at("tests");
  if (!tests.empty()) {
    out << "\nWelch t-tests on overall accuracy:\n";
    for (const auto& t : tests) {
      std::snprintf(buf, sizeof buf, "  %s vs %s: t = %.4f, df = %.3f, p = %.6f\n",
                    t.at("a").get<std::string>().c_str(), t.at("b").get<std::string>().c_str(),
                    t.at("t").get<double>(), t.at("df").get<double>(), t.at("p").get<double>());
      out << buf;
    }
  }
  return out.str();
}

}  // namespace magic
