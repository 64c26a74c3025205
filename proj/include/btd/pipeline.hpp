#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "btd/estimator.hpp"
#include "btd/metrics.hpp"
#include "btd/phantom.hpp"
#include "btd/tracer.hpp"

namespace btd {

/// Parses "inf" / "infinity" or a positive number.
std::optional<double> parse_snr(std::string_view text);
std::string format_snr(double snr);

/// Trace settings of a run file. An unset min_length resolves per phantom:
/// one full inner circumference for circles, 5 mm otherwise.
struct TraceSettings {
  double step_size = 0.2;
  int max_steps = 10000;
  std::optional<double> min_length;
  bool normalize_field = true;
  double max_angle_per_step = 60.0;
  /// Voxels the tracking domain extends past the bundle mask (unclipped).
  int domain_dilation = 1;
};

struct MetricSettings {
  int eval_dilation = 1;
  bool signed_deviation = false;
};

struct Scenario {
  std::string label;
  PhantomSpec phantom;  // snr included
};

enum class TableLayout { orders, snr };

struct RunConfig {
  std::string name = "run";
  std::uint64_t rng_seed = 42;
  std::filesystem::path output_dir = "results";
  int jobs = 1;
  TableLayout layout = TableLayout::orders;
  std::vector<Scenario> scenarios;
  std::vector<int> orders{5};
  bool baseline = true;
  FitConfig fit;
  TraceSettings trace;
  MetricSettings metrics;

  /// Throws InvalidArgument on unknown keys, wrong types or out-of-range values.
  static RunConfig from_json(const std::string& text);
  void validate() const;
};

/// Phantom spec from a JSON object, starting from the kind's defaults.
PhantomSpec phantom_spec_from_json(const std::string& text);
std::string phantom_spec_to_json(const PhantomSpec& spec);

TraceConfig make_trace_config(const TraceSettings& s, const Phantom& ph);

/// Everything one scenario's cells share: the phantom, its simulated DWI and
/// the tensor peaks over the bundle mask and over its one-voxel dilation.
struct ScenarioData {
  Phantom phantom;
  PeakFit peaks;
  PeakFit dilated_peaks;
  Mask domain;  // tracking domain
  std::vector<Vec3> seeds;
};

ScenarioData prepare_scenario(const Scenario& sc, std::uint64_t rng_seed, const TraceSettings& trace);

ScoreReport score_tractogram(const Tractogram& t, const Phantom& ph, const MetricSettings& m,
                             std::span<const Vec3> seeds);

struct CellSpec {
  std::string id;  // "<scenario>_order<n>" or "<scenario>_baseline"
  std::size_t scenario = 0;
  std::optional<int> order;  // unset for the baseline tracker
};

struct CellResult {
  CellSpec cell;
  bool ok = false;
  std::string error;
  ScoreReport score;
  std::optional<FitReport> fit;
  double fit_seconds = 0.0;
  Tractogram tractogram;
  std::optional<PolyField> field;
};

std::vector<CellSpec> plan_cells(const RunConfig& cfg);

CellResult run_cell(const RunConfig& cfg, const CellSpec& cell, const ScenarioData& data);

struct ExperimentOutcome {
  std::vector<CellResult> cells;
  std::size_t failures = 0;
};

/// Runs every cell (up to cfg.jobs at a time) and writes under output_dir:
/// cells/<id>/{score.json, tractogram.tsf, render.svg[, field.json, fit_report.json]},
/// results.csv, table.csv and timings.csv. Everything except timings.csv is
/// byte-identical across runs with the same configuration.
ExperimentOutcome run_experiment(const RunConfig& cfg);

/// Aggregate tables as CSV text.
std::string results_csv(const RunConfig& cfg, const std::vector<CellResult>& cells);
std::string table_csv(const RunConfig& cfg, const std::vector<CellResult>& cells);

/// "3rd-order", "5th-order", ...
std::string order_label(int order);

}  // namespace btd
