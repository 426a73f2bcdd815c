#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

namespace magic {

struct RunSummary {
  std::string label;  // group key, from the run's config echo
  std::uint64_t seed = 0;
  double visual = 0, blind = 0, all = 0;  // validation metrics at the best epoch
  std::size_t epochs = 0;
};

// Reads a run_log.jsonl and its sibling config.json, returning the metrics of
// the epoch with the highest val_all (ties go to the earliest epoch, matching
// the checkpoint retention rule).
RunSummary summarize_run(const std::string& log_path);

// *, ? within a path component; ** spans components. Results are sorted.
std::vector<std::string> glob_paths(const std::string& pattern);

// Groups runs by label and aggregates mean/std per metric; compares are pairs
// of group labels tested with Welch's t on the per-seed val_all values.
nlohmann::json build_report(const std::vector<RunSummary>& runs,
                            const std::vector<std::pair<std::string, std::string>>& compares);

// Aligned text table; a pure function of the JSON report.
std::string render_report(const nlohmann::json& report);

}  // namespace magic
