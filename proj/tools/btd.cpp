// Command-line front end: phantom generation, fitting, tracking, scoring and
// whole experiment grids. Logs go to stderr; results go to files.

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <iostream>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "btd/error.hpp"
#include "btd/formats.hpp"
#include "btd/metrics.hpp"
#include "btd/phantom.hpp"
#include "btd/pipeline.hpp"
#include "btd/tracer.hpp"

namespace fs = std::filesystem;
using namespace btd;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitFormat = 3;
constexpr int kExitNumerical = 4;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// File names inside a phantom directory.
const char* const kMaskFile = "mask.json";
const char* const kSeedFile = "seed_region.json";
const char* const kTargetFile = "target_region.json";
const char* const kPeaksFile = "peaks.json";
const char* const kTruthFile = "truth.tsf";
const char* const kPhantomFile = "phantom.json";

struct PhantomOptions {
  std::string kind;
  std::optional<double> alpha, r1, r2, bvalue;
  std::string snr = "inf";
  std::vector<int> dims;
  std::vector<double> voxel_size;
  std::optional<int> seeds, gradients;
  std::uint64_t rng = 42;
  bool analytic = false;
  std::string out;
};

int cmd_phantom(const PhantomOptions& o) {
  const auto kind = parse_phantom_kind(o.kind);
  if (!kind) throw UsageError("--kind must be hough, sine or circle");
  PhantomSpec spec = PhantomSpec::defaults(*kind);
  if (o.alpha && *kind != PhantomKind::sine) throw UsageError("--alpha applies to the sine phantom only");
  if ((o.r1 || o.r2) && *kind != PhantomKind::circle) throw UsageError("--r1/--r2 apply to the circle phantom only");
  const auto snr = parse_snr(o.snr);
  if (!snr) throw UsageError("--snr must be a positive number or inf");
  if (o.analytic && !std::isinf(*snr)) throw UsageError("--analytic conflicts with a finite --snr");
  if (o.alpha) spec.alpha = *o.alpha;
  if (o.r1) spec.r1 = *o.r1;
  if (o.r2) spec.r2 = *o.r2;
  if (!o.dims.empty()) spec.dims = {o.dims[0], o.dims[1], o.dims[2]};
  if (!o.voxel_size.empty()) spec.voxel_size = {o.voxel_size[0], o.voxel_size[1], o.voxel_size[2]};
  if (o.seeds) spec.seed_count = *o.seeds;
  if (o.bvalue) spec.bvalue = *o.bvalue;
  if (o.gradients) spec.n_gradients = *o.gradients;
  spec.snr = *snr;
  spec.validate();

  const Phantom ph = make_phantom(spec);
  const fs::path dir = o.out;
  fs::create_directories(dir);
  write_volume(dir / kMaskFile, ph.mask);
  write_volume(dir / kSeedFile, ph.seed_region);
  write_volume(dir / kTargetFile, ph.target_region);
  write_tractogram(dir / kTruthFile, ph.ground_truth);

  if (o.analytic) {
    write_volume(dir / kPeaksFile, peaks_to_grid(analytic_peaks(ph)));
  } else {
    // Peaks cover the one-voxel rim too, which the baseline tracker may visit.
    const DwiVolume dwi = simulate_dwi(ph, spec, o.rng);
    const PeakFit fit = fit_peaks(dwi, dilate(ph.mask, 1));
    write_volume(dir / kPeaksFile, peaks_to_grid(fit.peaks));
  }

  nlohmann::ordered_json meta;
  meta["spec"] = nlohmann::ordered_json::parse(phantom_spec_to_json(spec));
  meta["rng_seed"] = o.rng;
  meta["analytic_peaks"] = o.analytic;
  meta["center"] = {ph.center.x(), ph.center.y(), ph.center.z()};
  meta["provenance"] = ph.provenance;
  write_text(dir / kPhantomFile, meta.dump(2) + "\n");
  log_info("phantom " + o.kind + ": " + std::to_string(mask_count(ph.mask)) + " mask voxels, " +
           std::to_string(mask_count(ph.seed_region)) + " seed voxels, " +
           std::to_string(mask_count(ph.target_region)) + " target voxels -> " + dir.string());
  return kExitOk;
}

/// Fills unset file options from a phantom directory.
void default_path(std::string& opt, const std::string& phantom_dir, const char* file, const char* flag) {
  if (!opt.empty()) return;
  if (phantom_dir.empty()) throw UsageError(std::string(flag) + " is required (or pass --phantom DIR)");
  opt = (fs::path(phantom_dir) / file).string();
}

struct FitOptions {
  std::string phantom, peaks, mask, seed_region, out, constraint = "exact";
  int order = 5;
  std::optional<double> regularization;
};

int cmd_fit(FitOptions o) {
  default_path(o.peaks, o.phantom, kPeaksFile, "--peaks");
  default_path(o.mask, o.phantom, kMaskFile, "--mask");
  default_path(o.seed_region, o.phantom, kSeedFile, "--seed-region");
  FitConfig cfg;
  cfg.order = o.order;
  if (o.constraint == "exact") cfg.constraint = ConstraintMode::exact_divergence_free;
  else if (o.constraint == "sampled") cfg.constraint = ConstraintMode::sampled;
  else throw UsageError("--constraint must be exact or sampled");
  cfg.regularization = o.regularization;

  const Mask mask = read_mask(o.mask);
  const PeakVolume vol = peaks_from_grid(read_volume_f32(o.peaks), mask);
  const Mask seeds = read_mask(o.seed_region);
  if (!(seeds.dims() == mask.dims())) throw FormatError("seed region and mask dimensions differ");
  const FitResult fit = fit_btd(vol, seeds, cfg);

  const fs::path dir = o.out;
  fs::create_directories(dir);
  write_polyfield(dir / "field.json", fit.field);
  write_text(dir / "fit_report.json", fit_report_json(fit.report));
  std::ostringstream msg;
  msg << "order " << cfg.order << ": residual " << fit.report.residual << ", max divergence "
      << fit.report.max_divergence << ", " << fit.report.voxels << " voxels";
  log_info(msg.str());
  return kExitOk;
}

struct TrackOptions {
  std::string phantom, field, peaks, mask, seed_region, target_region, out;
  bool baseline = false, no_target = false, no_normalize = false;
  int seeds = 2000, max_steps = 10000, domain_dilation = 1;
  double step = 0.2, min_length = 0.0, max_angle = 60.0;
};

int cmd_track(TrackOptions o) {
  if (o.baseline == !o.field.empty()) throw UsageError("pass exactly one of --field or --baseline");
  if (o.baseline) default_path(o.peaks, o.phantom, kPeaksFile, "--peaks");
  default_path(o.mask, o.phantom, kMaskFile, "--mask");
  default_path(o.seed_region, o.phantom, kSeedFile, "--seed-region");
  if (!o.no_target && o.target_region.empty() && !o.phantom.empty())
    o.target_region = (fs::path(o.phantom) / kTargetFile).string();

  const Mask mask = read_mask(o.mask);
  const Mask seed_region = read_mask(o.seed_region);
  TraceConfig cfg;
  cfg.step_size = o.step;
  cfg.max_steps = o.max_steps;
  cfg.min_length = o.min_length;
  cfg.normalize_field = !o.no_normalize;
  cfg.max_angle_per_step = o.max_angle;
  if (!o.target_region.empty()) cfg.target_region = read_mask(o.target_region);
  if (o.seeds < 1) throw UsageError("--seeds must be >= 1");
  if (o.domain_dilation < 0) throw UsageError("--domain-dilation must be >= 0");
  const std::vector<Vec3> seeds = seed_points(seed_region, o.seeds);
  const Mask domain = dilate_unclipped(mask, o.domain_dilation);

  TraceStats stats;
  Tractogram t;
  if (o.baseline) {
    const PeakVolume vol = peaks_from_grid(read_volume_f32(o.peaks), dilate(mask, 1));
    FitConfig fc;
    const PeakVolume aligned = apply_signs(vol, align_signs(vol, fc, seed_region));
    t = trace_baseline(aligned, seeds, domain, cfg, &stats);
  } else {
    t = trace(read_polyfield(o.field), seeds, domain, cfg, &stats);
  }
  write_tractogram(o.out, t);
  for (auto s : {StreamlineStatus::exited_mask, StreamlineStatus::reached_target, StreamlineStatus::max_steps,
                 StreamlineStatus::stalled}) {
    const auto i = static_cast<std::size_t>(s);
    log_info(std::string(to_string(s)) + ": kept " + std::to_string(stats.kept[i]) + ", discarded " +
             std::to_string(stats.discarded[i]));
  }
  return kExitOk;
}

struct ScoreOptions {
  std::string phantom, tractogram, mask, seed_region, target_region, out, csv;
  std::vector<double> center;
  int eval_dilation = 1;
  std::optional<int> seeds;
  bool signed_deviation = false;
};

int cmd_score(ScoreOptions o) {
  default_path(o.mask, o.phantom, kMaskFile, "--mask");
  default_path(o.seed_region, o.phantom, kSeedFile, "--seed-region");
  default_path(o.target_region, o.phantom, kTargetFile, "--target-region");
  std::optional<Vec3> center;
  if (!o.center.empty()) {
    center = Vec3(o.center[0], o.center[1], 0.0);
  } else if (!o.phantom.empty()) {
    const auto meta = nlohmann::json::parse(read_text(fs::path(o.phantom) / kPhantomFile), nullptr, false);
    if (meta.is_discarded()) throw FormatError("phantom.json is not valid JSON");
    if (meta.at("spec").at("kind") == "circle") {
      const auto& c = meta.at("center");
      center = Vec3(c[0].get<double>(), c[1].get<double>(), c[2].get<double>());
    }
  }

  const Tractogram t = read_tractogram(o.tractogram);
  const Mask mask = read_mask(o.mask);
  const Mask seed_region = read_mask(o.seed_region);
  const Mask target_region = read_mask(o.target_region);
  ScoreReport r;
  const VcScore vc = score_vc(t, seed_region, target_region, mask);
  r.vc = vc.vc;
  r.n_valid = vc.n_valid;
  r.n_streamlines = vc.n_streamlines;
  const OverlapScore ov = score_ol_or(t, mask, o.eval_dilation);
  r.ol = ov.ol;
  r.or_ = ov.or_;
  if (center) {
    std::vector<Vec3> seeds;
    if (o.seeds) seeds = seed_points(seed_region, *o.seeds);
    DeviationOptions opts;
    opts.signed_error = o.signed_deviation;
    opts.seeds = seeds;
    r.deviation = score_deviation(t, *center, mask.voxel_size(), opts);
  }
  write_text(o.out, r.to_json());
  if (!o.csv.empty()) write_text(o.csv, ScoreReport::csv_header() + "\n" + r.csv_row() + "\n");
  log_info("VC " + std::to_string(r.vc) + ", OL " + std::to_string(r.ol) + ", OR " + std::to_string(r.or_));
  return kExitOk;
}

struct ExperimentOptions {
  std::string run_file, out;
  std::optional<int> jobs;
  bool dry_run = false;
};

int cmd_experiment(const ExperimentOptions& o) {
  RunConfig cfg = RunConfig::from_json(read_text(o.run_file));
  if (!o.out.empty()) cfg.output_dir = o.out;
  if (o.jobs) cfg.jobs = *o.jobs;
  cfg.validate();
  const auto cells = plan_cells(cfg);
  if (o.dry_run) {
    for (const CellSpec& c : cells) {
      const Scenario& s = cfg.scenarios[c.scenario];
      std::cout << c.id << '\t' << to_string(s.phantom.kind) << "\tsnr=" << format_snr(s.phantom.snr) << '\t'
                << (c.order ? order_label(*c.order) : std::string("baseline")) << '\n';
    }
    log_info(std::to_string(cells.size()) + " cells planned; output would go to " + cfg.output_dir.string());
    return kExitOk;
  }
  const ExperimentOutcome out = run_experiment(cfg);
  log_info("results written to " + cfg.output_dir.string());
  if (out.failures > 0) {
    log_warning(std::to_string(out.failures) + " cell(s) failed");
    return kExitNumerical;
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bundle-specific tractography via divergence-free polynomial fields"};
  app.require_subcommand(1);

  PhantomOptions po;
  auto* ph = app.add_subcommand("phantom", "Generate a phantom, its DWI-derived peaks and ground truth");
  ph->add_option("--kind", po.kind, "hough, sine or circle")->required();
  ph->add_option("--alpha", po.alpha, "Sine amplitude parameter in (0, 1]");
  ph->add_option("--r1", po.r1, "Circle inner radius (mm)");
  ph->add_option("--r2", po.r2, "Circle outer radius (mm)");
  ph->add_option("--snr", po.snr, "Signal-to-noise ratio, or inf");
  ph->add_option("--dims", po.dims, "Volume size in voxels")->expected(3);
  ph->add_option("--voxel-size", po.voxel_size, "Voxel size (mm)")->expected(3);
  ph->add_option("--seeds", po.seeds, "Seed count recorded in the spec");
  ph->add_option("--bvalue", po.bvalue, "b-value (s/mm^2)");
  ph->add_option("--gradients", po.gradients, "Number of gradient directions");
  ph->add_option("--rng", po.rng, "Noise seed");
  ph->add_flag("--analytic", po.analytic, "Store the analytic directions instead of fitted peaks");
  ph->add_option("--out", po.out, "Output directory")->required();

  FitOptions fo;
  auto* fit = app.add_subcommand("fit", "Fit a divergence-free polynomial field to a peak volume");
  fit->add_option("--phantom", fo.phantom, "Phantom directory supplying default inputs");
  fit->add_option("--peaks", fo.peaks, "Peak volume sidecar (3-channel f32)");
  fit->add_option("--mask", fo.mask, "Bundle mask sidecar");
  fit->add_option("--seed-region", fo.seed_region, "Seed region sidecar (sign alignment start)");
  fit->add_option("--order", fo.order, "Polynomial order (1-8)")->check(CLI::Range(kMinOrder, kMaxOrder));
  fit->add_option("--constraint", fo.constraint, "exact or sampled");
  fit->add_option("--regularization", fo.regularization, "Ridge weight (default 1e-8 x voxels)");
  fit->add_option("--out", fo.out, "Output directory")->required();

  TrackOptions to;
  auto* track = app.add_subcommand("track", "Trace streamlines through a fitted field or the peak volume");
  track->add_option("--phantom", to.phantom, "Phantom directory supplying default inputs");
  track->add_option("--field", to.field, "Polynomial field JSON");
  track->add_flag("--baseline", to.baseline, "Follow the peak volume instead of a field");
  track->add_option("--peaks", to.peaks, "Peak volume sidecar (baseline only)");
  track->add_option("--mask", to.mask, "Bundle mask sidecar");
  track->add_option("--seed-region", to.seed_region, "Seed region sidecar");
  track->add_option("--target-region", to.target_region, "Target region sidecar");
  track->add_flag("--no-target", to.no_target, "Ignore the phantom's target region");
  track->add_option("--seeds", to.seeds, "Number of seeds");
  track->add_option("--step", to.step, "Step size (mm)");
  track->add_option("--max-steps", to.max_steps, "Maximum steps per streamline");
  track->add_option("--min-length", to.min_length, "Minimum kept length (mm)");
  track->add_option("--max-angle", to.max_angle, "Baseline turn limit per step (degrees)");
  track->add_option("--domain-dilation", to.domain_dilation, "Voxels the tracking domain extends past the mask");
  track->add_flag("--no-normalize", to.no_normalize, "Integrate the raw field instead of its direction");
  track->add_option("--out", to.out, "Output TSF file")->required();

  ScoreOptions so;
  auto* score = app.add_subcommand("score", "Score a tractogram against a phantom");
  score->add_option("--phantom", so.phantom, "Phantom directory supplying default inputs");
  score->add_option("--tractogram", so.tractogram, "TSF tractogram")->required();
  score->add_option("--mask", so.mask, "Bundle mask sidecar");
  score->add_option("--seed-region", so.seed_region, "Seed region sidecar");
  score->add_option("--target-region", so.target_region, "Target region sidecar");
  score->add_option("--center", so.center, "Circle center x y (enables Deviation)")->expected(2);
  score->add_option("--seeds", so.seeds, "Seed count used for tracking (checks streamline seeds)");
  score->add_option("--eval-dilation", so.eval_dilation, "Truth dilation for overreach");
  score->add_flag("--signed-deviation", so.signed_deviation, "Sum signed radial errors");
  score->add_option("--out", so.out, "Score report JSON")->required();
  score->add_option("--csv", so.csv, "Also write a one-row CSV");

  ExperimentOptions eo;
  auto* exp = app.add_subcommand("experiment", "Run an experiment grid from a run file");
  exp->add_option("run_file", eo.run_file, "Run file (JSON)")->required();
  exp->add_option("--out", eo.out, "Output directory (overrides the run file)");
  exp->add_option("--jobs", eo.jobs, "Concurrent cells")->check(CLI::PositiveNumber);
  exp->add_flag("--dry-run", eo.dry_run, "List the planned cells and exit");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*ph) return cmd_phantom(po);
    if (*fit) return cmd_fit(fo);
    if (*track) return cmd_track(to);
    if (*score) return cmd_score(so);
    if (*exp) return cmd_experiment(eo);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const InvalidArgument& e) {
    std::cerr << "invalid argument: " << e.what() << '\n';
    return kExitUsage;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << '\n';
    return kExitFormat;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "format error: " << e.what() << '\n';
    return kExitFormat;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "format error: " << e.what() << '\n';
    return kExitFormat;
  } catch (const std::exception& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  }
  return kExitUsage;
}
