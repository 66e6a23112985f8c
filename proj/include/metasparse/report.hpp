#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "metasparse/sparsity.hpp"

namespace metasparse {

struct ProfileRow {
  /// Consecutive across phases of one run.
  int epoch = 0;
  std::string phase;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double parameter_sparsity = 0.0;
  double group_sparsity = 0.0;
  double lambda = 0.0;
};

struct RunRecord {
  /// Row label in comparison tables, e.g. "mtl" or "baseline_schedule/one_shot/magnitude_groups".
  std::string label;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::vector<ProfileRow> rows;
  SparsityMetrics final_metrics;
  std::map<int, double> test_loss;
  double wall_clock_seconds = 0.0;
  std::string stop_reason;
  double lambda_final = 0.0;
};

inline constexpr const char* kProfileHeader = "# metasparse-profile v1";
inline constexpr const char* kTableHeader = "# metasparse-table v1";

std::string profile_csv(const RunRecord& record);

/// Record as JSON text; `include_wall_clock` false drops the timing field.
std::string record_json(const RunRecord& record, bool include_wall_clock = true);
RunRecord record_from_json(const std::string& text);
void save_record(const RunRecord& record, const std::filesystem::path& path);
RunRecord load_record(const std::filesystem::path& path);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
  std::size_t count = 0;
};

/// Sample standard deviation; 0 for a single value.
MeanStd mean_std(const std::vector<double>& values);

/// Mean +- std over the records of one configuration (all must share a label
/// and a task set). Wall clock is reported separately from the metrics.
std::string summary_json(const std::vector<RunRecord>& records);

struct Report {
  std::string table_csv;
  std::string profile_svg;
  int x_max = 0;
};

/// Per-label mean +- std table and a sparsity-vs-epoch chart with one line per
/// record. Throws std::invalid_argument on an empty input or records whose
/// task sets differ.
Report make_report(const std::vector<RunRecord>& records);

/// record.json files under each directory, searched recursively, sorted by path.
std::vector<RunRecord> collect_records(const std::vector<std::filesystem::path>& dirs);

}  // namespace metasparse
