#include "btd/pipeline.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <mutex>
#include <numbers>
#include <set>
#include <sstream>
#include <thread>

#include "btd/error.hpp"
#include "btd/formats.hpp"

namespace btd {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

namespace {

void reject_unknown(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw InvalidArgument(where + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    bool known = false;
    for (const char* a : allowed) known = known || key == a;
    if (!known) throw InvalidArgument(where + ": unknown key '" + key + "'");
  }
}

double get_number(const json& j, const char* key, const std::string& where) {
  if (!j.at(key).is_number()) throw InvalidArgument(where + "." + key + " must be a number");
  return j.at(key).get<double>();
}

long long get_integer(const json& j, const char* key, const std::string& where) {
  if (!j.at(key).is_number_integer()) throw InvalidArgument(where + "." + key + " must be an integer");
  return j.at(key).get<long long>();
}

bool get_bool(const json& j, const char* key, const std::string& where) {
  if (!j.at(key).is_boolean()) throw InvalidArgument(where + "." + key + " must be a boolean");
  return j.at(key).get<bool>();
}

std::string get_string(const json& j, const char* key, const std::string& where) {
  if (!j.at(key).is_string()) throw InvalidArgument(where + "." + key + " must be a string");
  return j.at(key).get<std::string>();
}

Vec3 get_vec3(const json& j, const char* key, const std::string& where) {
  const json& a = j.at(key);
  if (!a.is_array() || a.size() != 3 || !std::all_of(a.begin(), a.end(), [](const json& x) { return x.is_number(); }))
    throw InvalidArgument(where + "." + key + " must be an array of 3 numbers");
  return {a[0].get<double>(), a[1].get<double>(), a[2].get<double>()};
}

double snr_from_json(const json& j, const std::string& where) {
  if (j.is_number()) return j.get<double>();
  if (j.is_string())
    if (const auto v = parse_snr(j.get<std::string>())) return *v;
  throw InvalidArgument(where + ": snr must be a positive number or \"inf\"");
}

json parse_or_throw(const std::string& text, const std::string& what) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(what + ": invalid JSON at byte offset " + std::to_string(e.byte));
  } catch (const json::exception& e) {
    throw FormatError(what + ": " + e.what());
  }
}

PhantomSpec phantom_from(const json& j, const std::string& where) {
  reject_unknown(j, {"kind", "alpha", "r1", "r2", "dims", "voxel_size", "snr", "bvalue", "n_gradients", "seed_count"},
                 where);
  if (!j.contains("kind")) throw InvalidArgument(where + ": missing 'kind'");
  const auto kind = parse_phantom_kind(get_string(j, "kind", where));
  if (!kind) throw InvalidArgument(where + ": unknown phantom kind");
  PhantomSpec s = PhantomSpec::defaults(*kind);
  if (j.contains("alpha")) s.alpha = get_number(j, "alpha", where);
  if (j.contains("r1")) s.r1 = get_number(j, "r1", where);
  if (j.contains("r2")) s.r2 = get_number(j, "r2", where);
  if (j.contains("dims")) {
    const json& d = j.at("dims");
    if (!d.is_array() || d.size() != 3 ||
        !std::all_of(d.begin(), d.end(), [](const json& x) { return x.is_number_integer(); }))
      throw InvalidArgument(where + ".dims must be an array of 3 integers");
    for (const json& x : d)
      if (x.get<long long>() < 1 || x.get<long long>() > 4096) throw InvalidArgument(where + ".dims out of range");
    s.dims = {d[0].get<int>(), d[1].get<int>(), d[2].get<int>()};
  }
  if (j.contains("voxel_size")) s.voxel_size = get_vec3(j, "voxel_size", where);
  if (j.contains("snr")) s.snr = snr_from_json(j.at("snr"), where);
  if (j.contains("bvalue")) s.bvalue = get_number(j, "bvalue", where);
  if (j.contains("n_gradients")) {
    const long long n = get_integer(j, "n_gradients", where);
    if (n < 1 || n > 100000) throw InvalidArgument(where + ".n_gradients out of range");
    s.n_gradients = static_cast<int>(n);
  }
  if (j.contains("seed_count")) {
    const long long n = get_integer(j, "seed_count", where);
    if (n < 1 || n > 10000000) throw InvalidArgument(where + ".seed_count out of range");
    s.seed_count = static_cast<int>(n);
  }
  s.validate();
  return s;
}

FitConfig fit_from(const json& j) {
  const std::string where = "fit";
  reject_unknown(j, {"constraint", "regularization", "sign_alignment", "reference_axis", "multi_peak",
                     "multi_peak_iterations"},
                 where);
  FitConfig f;
  if (j.contains("constraint")) {
    const std::string c = get_string(j, "constraint", where);
    if (c == "exact") f.constraint = ConstraintMode::exact_divergence_free;
    else if (c == "sampled") f.constraint = ConstraintMode::sampled;
    else throw InvalidArgument("fit.constraint must be \"exact\" or \"sampled\"");
  }
  if (j.contains("regularization") && !j.at("regularization").is_null())
    f.regularization = get_number(j, "regularization", where);
  if (j.contains("sign_alignment")) {
    const std::string m = get_string(j, "sign_alignment", where);
    if (m == "propagation") f.sign.mode = SignAlignment::Mode::propagation;
    else if (m == "reference_axis") f.sign.mode = SignAlignment::Mode::reference_axis;
    else throw InvalidArgument("fit.sign_alignment must be \"propagation\" or \"reference_axis\"");
  }
  if (j.contains("reference_axis")) f.sign.axis = get_vec3(j, "reference_axis", where);
  if (j.contains("multi_peak")) {
    const std::string m = get_string(j, "multi_peak", where);
    if (m == "primary_only") f.multi_peak.kind = MultiPeakPolicy::Kind::primary_only;
    else if (m == "nearest_to_field") f.multi_peak.kind = MultiPeakPolicy::Kind::nearest_to_field;
    else throw InvalidArgument("fit.multi_peak must be \"primary_only\" or \"nearest_to_field\"");
  }
  if (j.contains("multi_peak_iterations")) {
    const long long n = get_integer(j, "multi_peak_iterations", where);
    if (n < 1 || n > 100) throw InvalidArgument("fit.multi_peak_iterations out of range");
    f.multi_peak.iterations = static_cast<int>(n);
  }
  return f;
}

TraceSettings trace_from(const json& j) {
  const std::string where = "trace";
  reject_unknown(j, {"step_size", "max_steps", "min_length", "normalize_field", "max_angle_per_step",
                     "domain_dilation"},
                 where);
  TraceSettings t;
  if (j.contains("step_size")) t.step_size = get_number(j, "step_size", where);
  if (j.contains("max_steps")) {
    const long long n = get_integer(j, "max_steps", where);
    if (n < 1 || n > 100000000) throw InvalidArgument("trace.max_steps out of range");
    t.max_steps = static_cast<int>(n);
  }
  if (j.contains("min_length") && !j.at("min_length").is_null()) t.min_length = get_number(j, "min_length", where);
  if (j.contains("normalize_field")) t.normalize_field = get_bool(j, "normalize_field", where);
  if (j.contains("max_angle_per_step")) t.max_angle_per_step = get_number(j, "max_angle_per_step", where);
  if (j.contains("domain_dilation")) {
    const long long n = get_integer(j, "domain_dilation", where);
    if (n < 0 || n > 16) throw InvalidArgument("trace.domain_dilation out of range");
    t.domain_dilation = static_cast<int>(n);
  }
  return t;
}

MetricSettings metrics_from(const json& j) {
  const std::string where = "metrics";
  reject_unknown(j, {"eval_dilation", "signed_deviation"}, where);
  MetricSettings m;
  if (j.contains("eval_dilation")) {
    const long long n = get_integer(j, "eval_dilation", where);
    if (n < 0 || n > 16) throw InvalidArgument("metrics.eval_dilation out of range");
    m.eval_dilation = static_cast<int>(n);
  }
  if (j.contains("signed_deviation")) m.signed_deviation = get_bool(j, "signed_deviation", where);
  return m;
}

std::string fixed(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

/// Runs fn(i) for i in [0, n) on up to `jobs` threads.
template <class Fn>
void parallel_for(std::size_t n, int jobs, Fn&& fn) {
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(jobs, 1)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) fn(i);
    });
  for (auto& t : pool) t.join();
}

std::string method_label(const CellSpec& c) { return c.order ? order_label(*c.order) : "baseline"; }

}  // namespace

std::optional<double> parse_snr(std::string_view text) {
  if (text == "inf" || text == "infinity" || text == "Inf") return kInfiniteSnr;
  try {
    std::size_t used = 0;
    const double v = std::stod(std::string(text), &used);
    if (used != text.size() || !(v > 0.0)) return std::nullopt;
    return v;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

std::string format_snr(double snr) {
  if (std::isinf(snr)) return "inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%g", snr);
  return buf;
}

std::string order_label(int order) {
  const char* suffix = "th";
  if (order % 100 < 11 || order % 100 > 13) {
    if (order % 10 == 1) suffix = "st";
    else if (order % 10 == 2) suffix = "nd";
    else if (order % 10 == 3) suffix = "rd";
  }
  return std::to_string(order) + suffix + "-order";
}

PhantomSpec phantom_spec_from_json(const std::string& text) {
  return phantom_from(parse_or_throw(text, "phantom spec"), "phantom");
}

std::string phantom_spec_to_json(const PhantomSpec& s) {
  ojson j;
  j["kind"] = std::string(to_string(s.kind));
  j["alpha"] = s.alpha;
  j["r1"] = s.r1;
  j["r2"] = s.r2;
  j["dims"] = {s.dims.nx, s.dims.ny, s.dims.nz};
  j["voxel_size"] = {s.voxel_size.x(), s.voxel_size.y(), s.voxel_size.z()};
  if (std::isinf(s.snr)) j["snr"] = "inf";
  else j["snr"] = s.snr;
  j["bvalue"] = s.bvalue;
  j["n_gradients"] = s.n_gradients;
  j["seed_count"] = s.seed_count;
  return j.dump(2) + "\n";
}

RunConfig RunConfig::from_json(const std::string& text) {
  const json j = parse_or_throw(text, "run file");
  reject_unknown(j, {"$schema", "name", "rng_seed", "output_dir", "jobs", "layout", "scenarios", "orders", "baseline",
                     "fit", "trace", "metrics"},
                 "run file");
  RunConfig c;
  if (j.contains("name")) c.name = get_string(j, "name", "run");
  if (j.contains("rng_seed")) {
    if (!j.at("rng_seed").is_number_unsigned()) throw InvalidArgument("rng_seed must be a nonnegative integer");
    c.rng_seed = j.at("rng_seed").get<std::uint64_t>();
  }
  if (j.contains("output_dir")) c.output_dir = get_string(j, "output_dir", "run");
  if (j.contains("jobs")) {
    const long long n = get_integer(j, "jobs", "run");
    if (n < 1 || n > 1024) throw InvalidArgument("jobs must be in [1, 1024]");
    c.jobs = static_cast<int>(n);
  }
  if (j.contains("layout")) {
    const std::string l = get_string(j, "layout", "run");
    if (l == "orders") c.layout = TableLayout::orders;
    else if (l == "snr") c.layout = TableLayout::snr;
    else throw InvalidArgument("layout must be \"orders\" or \"snr\"");
  }
  if (!j.contains("scenarios") || !j.at("scenarios").is_array() || j.at("scenarios").empty())
    throw InvalidArgument("run file needs a nonempty 'scenarios' array");
  for (std::size_t i = 0; i < j.at("scenarios").size(); ++i) {
    const json& s = j.at("scenarios")[i];
    const std::string where = "scenarios[" + std::to_string(i) + "]";
    reject_unknown(s, {"label", "phantom"}, where);
    if (!s.contains("label") || !s.contains("phantom")) throw InvalidArgument(where + " needs 'label' and 'phantom'");
    c.scenarios.push_back({get_string(s, "label", where), phantom_from(s.at("phantom"), where + ".phantom")});
  }
  if (j.contains("orders")) {
    const json& o = j.at("orders");
    if (!o.is_array()) throw InvalidArgument("orders must be an array of integers");
    c.orders.clear();
    for (const json& x : o) {
      if (!x.is_number_integer()) throw InvalidArgument("orders must be an array of integers");
      c.orders.push_back(x.get<int>());
    }
  }
  if (j.contains("baseline")) c.baseline = get_bool(j, "baseline", "run");
  if (j.contains("fit")) c.fit = fit_from(j.at("fit"));
  if (j.contains("trace")) c.trace = trace_from(j.at("trace"));
  if (j.contains("metrics")) c.metrics = metrics_from(j.at("metrics"));
  c.validate();
  return c;
}

void RunConfig::validate() const {
  if (scenarios.empty()) throw InvalidArgument("at least one scenario is required");
  std::set<std::string> labels;
  for (const Scenario& s : scenarios) {
    if (s.label.empty() || s.label.find_first_of("/\\ ,") != std::string::npos)
      throw InvalidArgument("scenario labels must be nonempty without spaces, commas or slashes");
    if (!labels.insert(s.label).second) throw InvalidArgument("duplicate scenario label '" + s.label + "'");
    s.phantom.validate();
  }
  if (orders.empty() && !baseline) throw InvalidArgument("nothing to run: no orders and no baseline");
  std::set<int> seen;
  for (int n : orders) {
    if (n < kMinOrder || n > kMaxOrder) throw InvalidArgument("orders must lie in [1, 8]");
    if (!seen.insert(n).second) throw InvalidArgument("duplicate order " + std::to_string(n));
  }
  if (jobs < 1) throw InvalidArgument("jobs must be >= 1");
  FitConfig f = fit;
  f.validate();
  TraceConfig t;
  t.step_size = trace.step_size;
  t.max_steps = trace.max_steps;
  t.min_length = trace.min_length.value_or(0.0);
  t.max_angle_per_step = trace.max_angle_per_step;
  t.validate();
  if (trace.domain_dilation < 0) throw InvalidArgument("trace.domain_dilation must be nonnegative");
  if (metrics.eval_dilation < 0) throw InvalidArgument("metrics.eval_dilation must be nonnegative");
}

TraceConfig make_trace_config(const TraceSettings& s, const Phantom& ph) {
  TraceConfig t;
  t.step_size = s.step_size;
  t.max_steps = s.max_steps;
  t.normalize_field = s.normalize_field;
  t.max_angle_per_step = s.max_angle_per_step;
  t.target_region = ph.target_region;
  t.min_length = s.min_length.value_or(ph.spec.kind == PhantomKind::circle ? 2.0 * std::numbers::pi * ph.spec.r1
                                                                            : 5.0);
  return t;
}

ScenarioData prepare_scenario(const Scenario& sc, std::uint64_t rng_seed, const TraceSettings& trace) {
  ScenarioData d;
  d.phantom = make_phantom(sc.phantom);
  const DwiVolume dwi = simulate_dwi(d.phantom, sc.phantom, rng_seed);
  d.peaks = fit_peaks(dwi, d.phantom.mask);
  d.dilated_peaks = fit_peaks(dwi, dilate(d.phantom.mask, 1));
  d.domain = dilate_unclipped(d.phantom.mask, trace.domain_dilation);
  d.seeds = seed_points(d.phantom.seed_region, sc.phantom.seed_count);
  return d;
}

ScoreReport score_tractogram(const Tractogram& t, const Phantom& ph, const MetricSettings& m,
                             std::span<const Vec3> seeds) {
  ScoreReport r;
  const VcScore vc = score_vc(t, ph.seed_region, ph.target_region, ph.mask);
  r.vc = vc.vc;
  r.n_valid = vc.n_valid;
  r.n_streamlines = vc.n_streamlines;
  const OverlapScore ov = score_ol_or(t, ph.mask, m.eval_dilation);
  r.ol = ov.ol;
  r.or_ = ov.or_;
  if (ph.spec.kind == PhantomKind::circle) {
    DeviationOptions opts;
    opts.signed_error = m.signed_deviation;
    opts.seeds = seeds;
    r.deviation = score_deviation(t, ph.center, ph.spec.voxel_size, opts);
  }
  return r;
}

std::vector<CellSpec> plan_cells(const RunConfig& cfg) {
  std::vector<CellSpec> cells;
  for (std::size_t s = 0; s < cfg.scenarios.size(); ++s) {
    for (int n : cfg.orders)
      cells.push_back({cfg.scenarios[s].label + "_order" + std::to_string(n), s, n});
    if (cfg.baseline) cells.push_back({cfg.scenarios[s].label + "_baseline", s, std::nullopt});
  }
  return cells;
}

CellResult run_cell(const RunConfig& cfg, const CellSpec& cell, const ScenarioData& data) {
  CellResult r;
  r.cell = cell;
  try {
    const Phantom& ph = data.phantom;
    const TraceConfig tc = make_trace_config(cfg.trace, ph);
    if (cell.order) {
      FitConfig fc = cfg.fit;
      fc.order = *cell.order;
      const auto t0 = std::chrono::steady_clock::now();
      FitResult fit = fit_btd(data.peaks.peaks, ph.seed_region, fc);
      r.fit_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      r.fit = fit.report;
      r.tractogram = trace(fit.field, data.seeds, data.domain, tc);
      r.field = std::move(fit.field);
    } else {
      const SignField signs = align_signs(data.dilated_peaks.peaks, cfg.fit, ph.seed_region);
      const PeakVolume aligned = apply_signs(data.dilated_peaks.peaks, signs);
      r.tractogram = trace_baseline(aligned, data.seeds, data.domain, tc);
    }
    r.tractogram.provenance = cell.id + ": " + ph.provenance;
    r.score = score_tractogram(r.tractogram, ph, cfg.metrics, data.seeds);
    r.ok = true;
  } catch (const std::exception& e) {
    r.ok = false;
    r.error = e.what();
  }
  return r;
}

std::string results_csv(const RunConfig& cfg, const std::vector<CellResult>& cells) {
  std::ostringstream os;
  os << "cell,scenario,kind,snr,method,status," << ScoreReport::csv_header() << ",residual,max_divergence\n";
  for (const CellResult& c : cells) {
    const Scenario& sc = cfg.scenarios[c.cell.scenario];
    os << c.cell.id << ',' << sc.label << ',' << to_string(sc.phantom.kind) << ',' << format_snr(sc.phantom.snr) << ','
       << method_label(c.cell) << ',' << (c.ok ? "ok" : "failed") << ',';
    if (c.ok) os << c.score.csv_row();
    else os << ",,,,,";
    os << ',';
    if (c.fit) os << fixed(c.fit->residual) << ',' << c.fit->max_divergence;
    else os << ',';
    os << '\n';
  }
  return os.str();
}

std::string table_csv(const RunConfig& cfg, const std::vector<CellResult>& cells) {
  auto find = [&](std::size_t scenario, const std::string& method) -> const CellResult* {
    for (const CellResult& c : cells)
      if (c.cell.scenario == scenario && method_label(c.cell) == method) return &c;
    return nullptr;
  };
  std::vector<std::string> methods;
  for (int n : cfg.orders) methods.push_back(order_label(n));
  if (cfg.baseline) methods.push_back("baseline");
  auto value = [](const CellResult* c, const std::string& metric) -> std::string {
    if (!c || !c->ok) return "";
    if (metric == "OL") return fixed(c->score.ol, 4);
    if (metric == "VC") return fixed(c->score.vc, 4);
    if (metric == "OR") return fixed(c->score.or_, 4);
    return c->score.deviation ? fixed(*c->score.deviation, 4) : "";
  };

  std::ostringstream os;
  if (cfg.layout == TableLayout::orders) {
    os << "method";
    for (const Scenario& s : cfg.scenarios) os << ',' << s.label << " OL," << s.label << " VC";
    os << '\n';
    for (const std::string& m : methods) {
      os << m;
      for (std::size_t s = 0; s < cfg.scenarios.size(); ++s) {
        const CellResult* c = find(s, m);
        os << ',' << value(c, "OL") << ',' << value(c, "VC");
      }
      os << '\n';
    }
  } else {
    os << "metric,snr";
    for (const std::string& m : methods) os << ',' << m;
    os << '\n';
    std::vector<std::string> metrics{"VC", "OL"};
    const bool any_circle = std::any_of(cfg.scenarios.begin(), cfg.scenarios.end(),
                                        [](const Scenario& s) { return s.phantom.kind == PhantomKind::circle; });
    if (any_circle) metrics.push_back("Deviation");
    for (const std::string& metric : metrics)
      for (std::size_t s = 0; s < cfg.scenarios.size(); ++s) {
        os << metric << ',' << format_snr(cfg.scenarios[s].phantom.snr);
        for (const std::string& m : methods) os << ',' << value(find(s, m), metric);
        os << '\n';
      }
  }
  return os.str();
}

ExperimentOutcome run_experiment(const RunConfig& cfg) {
  cfg.validate();
  const std::vector<CellSpec> plan = plan_cells(cfg);
  fs::create_directories(cfg.output_dir / "cells");

  std::vector<std::optional<ScenarioData>> data(cfg.scenarios.size());
  std::vector<std::string> prep_error(cfg.scenarios.size());
  parallel_for(cfg.scenarios.size(), cfg.jobs, [&](std::size_t s) {
    try {
      data[s] = prepare_scenario(cfg.scenarios[s], cfg.rng_seed, cfg.trace);
    } catch (const std::exception& e) {
      prep_error[s] = e.what();
    }
  });

  std::mutex log_mutex;
  ExperimentOutcome out;
  out.cells.resize(plan.size());
  parallel_for(plan.size(), cfg.jobs, [&](std::size_t i) {
    const CellSpec& cell = plan[i];
    CellResult r;
    if (!data[cell.scenario]) {
      r.cell = cell;
      r.error = "scenario preparation failed: " + prep_error[cell.scenario];
    } else {
      r = run_cell(cfg, cell, *data[cell.scenario]);
    }
    const fs::path dir = cfg.output_dir / "cells" / cell.id;
    try {
      fs::create_directories(dir);
      if (r.ok) {
        write_text(dir / "score.json", r.score.to_json());
        write_tractogram(dir / "tractogram.tsf", r.tractogram);
        write_svg(dir / "render.svg", r.tractogram, data[cell.scenario]->phantom.mask);
        if (r.field) write_polyfield(dir / "field.json", *r.field);
        if (r.fit) write_text(dir / "fit_report.json", fit_report_json(*r.fit));
      } else {
        write_text(dir / "error.txt", r.error + "\n");
      }
    } catch (const std::exception& e) {
      r.ok = false;
      r.error = std::string("writing outputs: ") + e.what();
    }
    {
      std::lock_guard lock(log_mutex);
      if (r.ok)
        log_info(cell.id + ": VC " + fixed(r.score.vc, 4) + ", OL " + fixed(r.score.ol, 4) + ", OR " +
                 fixed(r.score.or_, 4) + (r.score.deviation ? ", Deviation " + fixed(*r.score.deviation, 4) : ""));
      else
        log_warning(cell.id + " failed: " + r.error);
    }
    r.tractogram = Tractogram{};
    r.field.reset();
    out.cells[i] = std::move(r);
  });

  for (const CellResult& c : out.cells) out.failures += c.ok ? 0 : 1;
  write_text(cfg.output_dir / "results.csv", results_csv(cfg, out.cells));
  write_text(cfg.output_dir / "table.csv", table_csv(cfg, out.cells));
  std::ostringstream timings;
  timings << "cell,fit_seconds\n";
  for (const CellResult& c : out.cells)
    if (c.fit) timings << c.cell.id << ',' << fixed(c.fit_seconds, 4) << '\n';
  write_text(cfg.output_dir / "timings.csv", timings.str());
  return out;
}

}  // namespace btd
