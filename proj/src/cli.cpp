#include "convt/cli.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>

#include <algorithm>
#include <chrono>
#include <ctime>
#include <fstream>
#include <iostream>
#include <limits>

#include "convt/augment.hpp"
#include "convt/data.hpp"
#include "convt/error.hpp"
#include "convt/gradcheck_suite.hpp"

namespace convt::cli {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kEpisodeTag = 0x657069736f6465ULL;

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Flags shared by the experiment commands. Values are only applied when the
// flag was given, so config-file values survive unless overridden.
struct CommonFlags {
  std::string config, data, out = "run", lr_schedule;
  std::uint64_t seed = 0;
  int n_way = 0, k_shot = 0, queries = 0, repeats = 0, epochs = 0, batch = 0, aug_k = 0;
  double lr = 0, lm_margin = 0, triplet_margin = 0, aug_d = 0;
  bool no_aug = false;
  std::map<std::string, CLI::Option*> opts;

  bool given(const std::string& name) const {
    const auto it = opts.find(name);
    return it != opts.end() && it->second->count() > 0;
  }
};

void add_common(CLI::App& app, CommonFlags& f, bool training) {
  const RunSettings d;
  f.opts["config"] = app.add_option("--config", f.config, "key = value config file (manifests work too)");
  f.opts["data"] = app.add_option("--data", f.data, "chip directory root/<class>/<chip>.png")
                       ->default_str("synthetic");
  f.opts["out"] = app.add_option("--out", f.out, "output directory")->capture_default_str();
  f.opts["seed"] = app.add_option("--seed", f.seed, "seed for model, training, augmentation and sampling")
                       ->default_str("0");
  f.opts["n-way"] = app.add_option("--n-way", f.n_way, "classes per episode")->default_str(std::to_string(d.n_way));
  f.opts["k-shot"] = app.add_option("--k-shot", f.k_shot, "support chips per class")
                         ->default_str(training ? std::to_string(d.k_shot) : "0");
  f.opts["queries"] = app.add_option("--queries", f.queries, "query chips per class (capped by availability)")
                          ->default_str(std::to_string(d.queries));
  f.opts["repeats"] = app.add_option("--repeats", f.repeats, "evaluation repeats")
                          ->default_str(std::to_string(d.repeats));
  if (!training) return;
  f.opts["epochs"] = app.add_option("--epochs", f.epochs, "training epochs")
                         ->default_str(std::to_string(d.train.epochs));
  f.opts["lr"] = app.add_option("--lr", f.lr, "learning rate")->default_str(fmt::format("{:g}", d.train.learning_rate));
  f.opts["lr-schedule"] = app.add_option("--lr-schedule", f.lr_schedule, "cosine or constant")
                              ->check(CLI::IsMember({"cosine", "constant"}))
                              ->default_str("cosine");
  f.opts["batch"] = app.add_option("--batch", f.batch, "batch size (0: whole set in one batch)")
                        ->default_str(std::to_string(d.train.batch_size));
  f.opts["lm-margin"] = app.add_option("--lm-margin", f.lm_margin, "additive margin on the true-class logit")
                            ->default_str(fmt::format("{:g}", d.train.margins.lm_margin));
  f.opts["triplet-margin"] = app.add_option("--triplet-margin", f.triplet_margin, "triplet hinge margin")
                                 ->default_str(fmt::format("{:g}", d.train.margins.triplet_margin));
  f.opts["aug-k"] = app.add_option("--aug-k", f.aug_k, "transforms drawn per epoch")
                        ->default_str("5 if k-shot <= 2, else 3");
  f.opts["aug-d"] = app.add_option("--aug-d", f.aug_d, "shared augmentation magnitude, 0..10")
                        ->default_str(fmt::format("{:g}", d.train.aug.d));
  f.opts["no-aug"] = app.add_flag("--no-aug", f.no_aug, "disable auto augmentation");
}

RunSettings resolve(const CommonFlags& f, bool training) {
  RunSettings s;
  if (!training) s.k_shot = 0;
  if (!f.config.empty()) apply_settings(s, read_key_values(f.config));
  if (f.given("data")) s.data = f.data;
  if (f.given("seed")) {
    s.model.seed = s.train.seed = s.train.aug.seed = s.synth.seed = f.seed;
  }
  if (f.given("n-way")) s.n_way = f.n_way;
  if (f.given("k-shot")) s.k_shot = f.k_shot;
  if (f.given("queries")) s.queries = f.queries;
  if (f.given("repeats")) s.repeats = f.repeats;
  if (f.given("epochs")) s.train.epochs = f.epochs;
  if (f.given("lr")) s.train.learning_rate = f.lr;
  if (f.given("lr-schedule")) {
    s.train.lr_schedule = f.lr_schedule == "constant" ? LrSchedule::Constant : LrSchedule::Cosine;
  }
  if (f.given("batch")) s.train.batch_size = f.batch;
  if (f.given("lm-margin")) s.train.margins.lm_margin = f.lm_margin;
  if (f.given("triplet-margin")) s.train.margins.triplet_margin = f.triplet_margin;
  if (f.given("aug-d")) s.train.aug.d = f.aug_d;
  if (f.given("aug-k")) {
    s.train.aug.k = f.aug_k;
    s.aug_k_explicit = true;
  }
  if (f.no_aug) s.train.aug.enabled = false;
  if (!s.aug_k_explicit) s.train.aug.k = default_aug_k(s.k_shot);
  if (s.n_way < 1) throw ConfigError("n-way must be at least 1");
  if (s.k_shot < 0 || s.queries < 0) throw ConfigError("k-shot and queries must be nonnegative");
  if (s.repeats < 1) throw ConfigError("repeats must be at least 1");
  validate(s.train);
  return s;
}

Dataset load_dataset(const RunSettings& s, std::ostream& out) {
  if (s.data.empty()) {
    const SynthConfig& sc = s.synth;
    out << fmt::format("synthetic dataset: {} classes x {} chips, {}x{}\n", sc.num_classes, sc.chips_per_class,
                       sc.chip_size, sc.chip_size);
    return synth_generate(sc);
  }
  Dataset ds = load_chip_dataset(s.data);
  for (const auto& w : ds.warnings) out << "warning: " << w << '\n';
  out << fmt::format("loaded {} chips in {} classes from {}\n", ds.size(), ds.num_classes(), s.data);
  return ds;
}

void fit_model_to(ConvTConfig& model, const Dataset& ds) {
  model.num_classes = ds.num_classes();
  model.input_height = ds.height();
  model.input_width = ds.width();
  model.in_channels = 1;
  validate(model);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
}

// ---------------------------------------------------------------------------

int cmd_train(const CommonFlags& f, const std::string& resume, int stop_after, std::ostream& out) {
  RunSettings s = resolve(f, true);
  const fs::path dir = f.out;
  fs::create_directories(dir);
  const Dataset ds = load_dataset(s, out);
  fit_model_to(s.model, ds);
  const std::string start = utc_now();
  write_text(dir / "manifest.txt", format_manifest("train", s, dir, start));

  const Split split = split_by_pose(ds);
  Rng rng(derive_seed({s.train.seed, kEpisodeTag}));
  const Episode support = sample_episode(split.train, s.n_way, s.k_shot, 0, rng);
  const TrainingSet data = training_set(split.train, support);
  {
    std::ofstream f(dir / "support.txt");
    for (const auto& item : support.support) f << split.train.chips[item.index].name << '\n';
  }

  ConvTModel model(s.model);
  Trainer trainer(model, s.train);
  std::vector<EpochMetrics> history;
  if (!resume.empty()) {
    const Checkpoint ckpt = load_checkpoint(resume);
    trainer.restore(ckpt);
    if (fs::exists(dir / "metrics.csv")) {
      for (const auto& m : read_metrics_csv(dir / "metrics.csv")) {
        if (m.epoch <= trainer.epoch()) history.push_back(m);
      }
    }
    out << fmt::format("resumed from {} at epoch {}\n", resume, trainer.epoch());
  }
  out << fmt::format("training {}-way {}-shot on {} chips, {} epochs, {} parameters\n", s.n_way, s.k_shot,
                     data.size(), s.train.epochs, model.parameter_count());
  const int last = stop_after > 0 ? std::min(stop_after, s.train.epochs) : s.train.epochs;
  while (trainer.epoch() < last) {
    const EpochMetrics m = trainer.run_epoch(data);
    history.push_back(m);
    if (m.epoch == 1 || m.epoch % 10 == 0 || m.epoch == s.train.epochs) {
      out << fmt::format("epoch {:4d}  L_e {:.4f}  L_t {:.4f}  L_b {:.4f}  acc {:.3f}  aug {}  {:.0f} ms\n", m.epoch,
                         m.loss_e, m.loss_t, m.loss_b, m.train_accuracy, m.aug_gate ? "on " : "off", m.wall_ms);
      out.flush();
    }
  }
  write_metrics_csv(dir / "metrics.csv", history);
  write_timing_csv(dir / "timing.csv", history);
  trainer.save_checkpoint(dir / "checkpoint.bin");
  const double acc = accuracy(model, data);
  out << fmt::format("train accuracy (clean support set): {:.4f}\n", acc);
  write_text(dir / "manifest.txt", format_manifest("train", s, dir, start, utc_now()));
  return kOk;
}

int cmd_eval(const CommonFlags& f, const std::string& checkpoint, bool trials, std::ostream& out) {
  RunSettings s = resolve(f, false);
  const fs::path dir = f.out;
  fs::create_directories(dir);
  const Dataset ds = load_dataset(s, out);
  const Split split = split_by_pose(ds);

  std::size_t available = std::numeric_limits<std::size_t>::max();
  for (const auto& idx : split.test.indices_by_class()) available = std::min(available, idx.size());
  const auto reserve = static_cast<std::size_t>(s.k_shot);
  const int queries = static_cast<int>(std::min<std::size_t>(
      static_cast<std::size_t>(s.queries), available > reserve ? available - reserve : 0));
  if (queries < s.queries) out << fmt::format("queries per class capped at {} by availability\n", queries);
  s.queries = queries;

  EvalProtocol protocol{s.n_way, s.k_shot, s.queries, s.repeats, s.train.seed};
  const std::string start = utc_now();
  write_text(dir / "manifest.txt", format_manifest(trials ? "eval-trials" : "eval", s, dir, start));

  EvalResult result;
  if (trials) {
    fit_model_to(s.model, ds);
    protocol.k_shot = s.k_shot > 0 ? s.k_shot : RunSettings{}.k_shot;
    if (!s.aug_k_explicit) s.train.aug.k = default_aug_k(protocol.k_shot);
    out << fmt::format("{} trials, each training from scratch on {}-way {}-shot support\n", s.repeats, s.n_way,
                       protocol.k_shot);
    result = run_trials(split.train, split.test, s.model, s.train, protocol);
  } else {
    if (checkpoint.empty()) throw ConfigError("eval needs --checkpoint (or --trials)");
    const Checkpoint ckpt = load_checkpoint(checkpoint);
    ConvTModel model(ckpt.model_config);
    load_parameters(model, ckpt);
    if (model.config().num_classes != ds.num_classes()) {
      throw ContractError(fmt::format("checkpoint predicts {} classes, dataset has {}", model.config().num_classes,
                                      ds.num_classes()));
    }
    result = evaluate(model, split.test, protocol);
  }
  std::string report = fmt::format("accuracy {:.4f} ± {:.4f} (standard error over {} repeats{})\n", result.mean,
                                   result.standard_error, result.repeats,
                                   result.single_repeat ? "; single repeat, dispersion not estimated" : "");
  out << report;
  {
    std::ofstream csv(dir / "eval.csv");
    csv << "repeat,accuracy\n";
    for (std::size_t i = 0; i < result.accuracies.size(); ++i) {
      csv << i << ',' << format_real(result.accuracies[i]) << '\n';
    }
  }
  write_text(dir / "eval.txt", report);
  write_text(dir / "manifest.txt", format_manifest(trials ? "eval-trials" : "eval", s, dir, start, utc_now()));
  return kOk;
}

int cmd_gradcheck(const std::string& ops, const FiniteDiffOptions& opts, std::ostream& out) {
  bool ok = true;
  for (const auto& c : run_gradcheck_suite(ops, opts)) {
    ok = ok && c.report.passed;
    out << fmt::format("{:<22} max_rel_err {:.3e}  coords {:4d}  {}\n", c.name, c.report.max_relative_error,
                       c.report.coordinates_checked, c.report.passed ? "PASS" : "FAIL");
  }
  out << (ok ? "all gradients agree" : "gradient mismatch") << fmt::format(" (tolerance {:g})\n", opts.tolerance);
  return ok ? kOk : kFailure;
}

int cmd_augment_preview(const CommonFlags& f, std::uint64_t epoch, int count, bool force, std::ostream& out) {
  RunSettings s = resolve(f, true);
  const fs::path dir = f.out;
  fs::create_directories(dir);
  const Dataset ds = load_dataset(s, out);
  EpochPolicy policy = sample_epoch_policy(s.train.aug, epoch);
  if (force) {
    policy.epoch_gate = true;
    std::fill(policy.per_transform_gate.begin(), policy.per_transform_gate.end(), true);
  }
  std::string text = fmt::format("epoch {}\nm {:.6f}\nepoch_gate {}\n", epoch, policy.m, policy.epoch_gate ? 1 : 0);
  for (std::size_t i = 0; i < policy.chosen.size(); ++i) {
    text += fmt::format("transform {} gate {} draw {:.6f} magnitude {}\n", policy.chosen[i],
                        policy.per_transform_gate[i] ? 1 : 0, policy.gate_draws[i], format_real(policy.magnitudes[i]));
  }
  write_text(dir / "policy.txt", text);
  out << text;
  const auto n = std::min<std::size_t>(static_cast<std::size_t>(std::max(count, 0)), ds.size());
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t idx = i * ds.size() / n;
    write_png(dir / fmt::format("chip{:03d}_before.png", i), ds.chips[idx].image);
    write_png(dir / fmt::format("chip{:03d}_after.png", i), apply_policy(policy, ds.chips[idx].image, idx));
  }
  out << fmt::format("wrote {} before/after pairs to {}\n", n, dir.string());
  return kOk;
}

int cmd_synth_gen(const SynthConfig& sc, const fs::path& dir, std::ostream& out) {
  const Dataset ds = synth_generate(sc);
  save_chip_dataset(ds, dir);
  out << fmt::format("wrote {} chips ({} classes) to {}\n", ds.size(), ds.num_classes(), dir.string());
  return kOk;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"ConvT few-shot recognition: training, evaluation and diagnostics", "convt"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "help for every subcommand");

  CommonFlags train_f, eval_f, aug_f;
  std::string resume, checkpoint, ops = "all", metrics, run_dir;
  bool trials = false, force = false;
  std::uint64_t preview_epoch = 0;
  int preview_count = 8, stop_after = 0;
  FiniteDiffOptions fd;
  SynthConfig sc;
  std::string synth_out = "chips";

  auto* train = app.add_subcommand("train", "train on a k-shot support set drawn from the training pose split");
  add_common(*train, train_f, true);
  train->add_option("--resume", resume, "continue from a checkpoint");
  train->add_option("--stop-after", stop_after, "checkpoint and stop once this epoch completes (0: run all)")
      ->capture_default_str();

  auto* eval = app.add_subcommand("eval", "episodic evaluation on the test pose split (accuracy mean ± SE)");
  add_common(*eval, eval_f, false);
  eval->add_option("--checkpoint", checkpoint, "trained checkpoint");
  eval->add_flag("--trials", trials, "train a fresh model per repeat instead of loading a checkpoint");
  // Training flags are accepted here too so --trials can be configured.
  {
    const RunSettings d;
    eval_f.opts["epochs"] = eval->add_option("--epochs", eval_f.epochs, "training epochs per trial (--trials)")
                                ->default_str(std::to_string(d.train.epochs));
    eval_f.opts["lr"] = eval->add_option("--lr", eval_f.lr, "learning rate (--trials)")
                            ->default_str(fmt::format("{:g}", d.train.learning_rate));
    eval_f.opts["lr-schedule"] = eval->add_option("--lr-schedule", eval_f.lr_schedule, "cosine or constant (--trials)")
                                     ->check(CLI::IsMember({"cosine", "constant"}))
                                     ->default_str("cosine");
    eval_f.opts["batch"] = eval->add_option("--batch", eval_f.batch, "batch size (--trials)")
                                 ->default_str(std::to_string(TrainConfig{}.batch_size));
    eval_f.opts["lm-margin"] = eval->add_option("--lm-margin", eval_f.lm_margin, "LM-softmax margin (--trials)")
                                   ->default_str(fmt::format("{:g}", d.train.margins.lm_margin));
    eval_f.opts["triplet-margin"] = eval->add_option("--triplet-margin", eval_f.triplet_margin,
                                                     "triplet margin (--trials)")
                                        ->default_str(fmt::format("{:g}", d.train.margins.triplet_margin));
    eval_f.opts["aug-k"] = eval->add_option("--aug-k", eval_f.aug_k, "transforms per epoch (--trials)")
                               ->default_str("5 if k-shot <= 2, else 3");
    eval_f.opts["aug-d"] = eval->add_option("--aug-d", eval_f.aug_d, "augmentation magnitude (--trials)")
                               ->default_str(fmt::format("{:g}", d.train.aug.d));
    eval_f.opts["no-aug"] = eval->add_flag("--no-aug", eval_f.no_aug, "disable augmentation (--trials)");
  }

  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every differentiable op");
  grad->add_option("--ops", ops, "comma-separated ops or 'all'")->capture_default_str();
  grad->add_option("--step", fd.step, "central-difference step")->capture_default_str();
  grad->add_option("--tol", fd.tolerance, "relative error tolerance")->capture_default_str();
  grad->add_option("--coords", fd.max_coordinates, "sampled coordinates per check")->capture_default_str();
  grad->add_option("--seed", fd.seed, "sampling seed")->capture_default_str();

  auto* aug = app.add_subcommand("augment-preview", "write before/after PNGs for one epoch's policy");
  add_common(*aug, aug_f, true);
  aug->add_option("--epoch", preview_epoch, "epoch whose policy is sampled")->capture_default_str();
  aug->add_option("--count", preview_count, "chips to render")->capture_default_str();
  aug->add_flag("--force", force, "open every gate so the drawn transforms are visible");

  auto* synth = app.add_subcommand("synth-gen", "export a synthetic speckle chip directory");
  synth->add_option("--classes", sc.num_classes, "target classes")->capture_default_str();
  synth->add_option("--per-class", sc.chips_per_class, "chips per class")->capture_default_str();
  synth->add_option("--size", sc.chip_size, "chip side in pixels")->capture_default_str();
  synth->add_option("--speckle", sc.speckle_shape, "Gamma speckle shape (looks)")->capture_default_str();
  synth->add_option("--pose-range", sc.pose_range, "poses drawn from [0, range) degrees")->capture_default_str();
  synth->add_option("--seed", sc.seed, "generator seed")->capture_default_str();
  synth->add_option("--out", synth_out, "output directory")->capture_default_str();

  auto* report = app.add_subcommand("report", "render loss/accuracy curves from a metrics CSV as SVG");
  report->add_option("--metrics", metrics, "metrics.csv (default: <run>/metrics.csv)");
  report->add_option("--run", run_dir, "run directory written by train");
  std::string report_out;
  report->add_option("--out", report_out, "output directory (default: the run directory)");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (train->parsed()) return cmd_train(train_f, resume, stop_after, out);
    if (eval->parsed()) return cmd_eval(eval_f, checkpoint, trials, out);
    if (grad->parsed()) return cmd_gradcheck(ops, fd, out);
    if (aug->parsed()) return cmd_augment_preview(aug_f, preview_epoch, preview_count, force, out);
    if (synth->parsed()) return cmd_synth_gen(sc, synth_out, out);
    if (report->parsed()) {
      if (metrics.empty() && run_dir.empty()) throw ConfigError("report needs --metrics or --run");
      const fs::path csv = metrics.empty() ? fs::path(run_dir) / "metrics.csv" : fs::path(metrics);
      const fs::path dst = !report_out.empty() ? fs::path(report_out)
                           : !run_dir.empty()  ? fs::path(run_dir)
                                               : csv.parent_path();
      render_report(csv, dst);
      out << "wrote " << (dst / "loss.svg").string() << " and " << (dst / "accuracy.svg").string() << '\n';
      return kOk;
    }
  } catch (const ConfigError& e) {
    err << "convt: configuration error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    err << "convt: " << e.what() << '\n';
    return kFailure;
  }
  return kUsage;
}

// ---------------------------------------------------------------------------
// SVG report

struct Series {
  std::string label;
  std::string colour;
  std::vector<double> values;
};

std::string svg_chart(const std::string& title, const std::vector<int>& epochs, const std::vector<Series>& series,
                      bool unit_range) {
  constexpr double W = 720, H = 420, L = 60, R = 150, T = 40, B = 50;
  double lo = 0.0, hi = unit_range ? 1.0 : 0.0;
  for (const auto& s : series) {
    for (double v : s.values) hi = std::max(hi, v);
  }
  if (hi <= lo) hi = lo + 1.0;
  const double x0 = epochs.empty() ? 0 : epochs.front(), x1 = epochs.empty() ? 1 : std::max(epochs.back(), epochs.front() + 1);
  auto px = [&](double e) { return L + (e - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double v) { return H - B - (v - lo) / (hi - lo) * (H - T - B); };

  std::string svg = fmt::format(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" font-family=\"sans-serif\" "
      "font-size=\"12\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      "<text x=\"{}\" y=\"24\" font-size=\"15\">{}</text>\n",
      W, H, L, title);
  svg += fmt::format("<line x1=\"{0}\" y1=\"{1}\" x2=\"{2}\" y2=\"{1}\" stroke=\"black\"/>\n", L, H - B, W - R);
  svg += fmt::format("<line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\" stroke=\"black\"/>\n", L, T, H - B);
  for (int i = 0; i <= 4; ++i) {
    const double v = lo + (hi - lo) * i / 4.0;
    svg += fmt::format("<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{:.3g}</text>\n", L - 6, py(v) + 4, v);
    svg += fmt::format("<line x1=\"{}\" y1=\"{:.1f}\" x2=\"{}\" y2=\"{:.1f}\" stroke=\"#ddd\"/>\n", L, py(v), W - R,
                       py(v));
    const double e = x0 + (x1 - x0) * i / 4.0;
    svg += fmt::format("<text x=\"{:.1f}\" y=\"{}\" text-anchor=\"middle\">{:.0f}</text>\n", px(e), H - B + 18, e);
  }
  svg += fmt::format("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">epoch</text>\n", (L + W - R) / 2, H - 12);
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    std::string pts;
    for (std::size_t i = 0; i < s.values.size() && i < epochs.size(); ++i) {
      pts += fmt::format("{:.1f},{:.1f} ", px(epochs[i]), py(s.values[i]));
    }
    svg += fmt::format("<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"/>\n", s.colour, pts);
    const double ly = T + 16 + 18.0 * static_cast<double>(k);
    svg += fmt::format("<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{}\" stroke-width=\"2\"/>\n", W - R + 12,
                       ly, W - R + 32, ly, s.colour);
    svg += fmt::format("<text x=\"{}\" y=\"{}\">{}</text>\n", W - R + 38, ly + 4, s.label);
  }
  svg += "</svg>\n";
  return svg;
}

}  // namespace

void apply_settings(RunSettings& s, const KeyValues& values) {
  for (const auto& [key, value] : values) {
    auto integer = [&](int& dst) {
      try {
        std::size_t used = 0;
        dst = std::stoi(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
      } catch (const std::logic_error&) {
        throw ConfigError(key + ": cannot parse '" + value + "'");
      }
    };
    auto real = [&](double& dst) {
      try {
        std::size_t used = 0;
        dst = std::stod(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
      } catch (const std::logic_error&) {
        throw ConfigError(key + ": cannot parse '" + value + "'");
      }
    };
    if (key == "aug_k") s.aug_k_explicit = true;
    if (apply_key(s.model, s.train, key, value)) continue;
    if (key == "data") s.data = value;
    else if (key == "n_way") integer(s.n_way);
    else if (key == "k_shot") integer(s.k_shot);
    else if (key == "queries") integer(s.queries);
    else if (key == "repeats") integer(s.repeats);
    else if (key == "synth_classes") integer(s.synth.num_classes);
    else if (key == "synth_per_class") integer(s.synth.chips_per_class);
    else if (key == "synth_size") integer(s.synth.chip_size);
    else if (key == "synth_speckle") real(s.synth.speckle_shape);
    else if (key == "synth_pose_range") real(s.synth.pose_range);
    else if (key == "synth_seed") {
      try {
        s.synth.seed = std::stoull(value);
      } catch (const std::logic_error&) {
        throw ConfigError(key + ": cannot parse '" + value + "'");
      }
    }
    else if (key == "command" || key == "out" || key == "start_time" || key == "end_time") continue;
    else throw ConfigError("unknown config key '" + key + "'");
  }
}

std::string format_manifest(const std::string& command, const RunSettings& s, const fs::path& out_dir,
                            const std::string& start_time, const std::string& end_time) {
  const SynthConfig& sc = s.synth;
  std::string text = fmt::format("# convt run manifest; usable as --config\ncommand = {}\nout = {}\n", command,
                                 out_dir.string());
  text += fmt::format("start_time = {}\n", start_time);
  if (!end_time.empty()) text += fmt::format("end_time = {}\n", end_time);
  text += fmt::format("data = {}\nn_way = {}\nk_shot = {}\nqueries = {}\nrepeats = {}\n", s.data, s.n_way, s.k_shot,
                      s.queries, s.repeats);
  text += fmt::format("synth_classes = {}\nsynth_per_class = {}\nsynth_size = {}\nsynth_speckle = {}\n"
                      "synth_pose_range = {}\nsynth_seed = {}\n",
                      sc.num_classes, sc.chips_per_class, sc.chip_size, format_real(sc.speckle_shape),
                      format_real(sc.pose_range), sc.seed);
  text += format_config(s.model, s.train);
  return text;
}

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  return run(args, out, err);
}

int dispatch(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

void render_report(const fs::path& metrics_csv, const fs::path& out_dir) {
  const auto rows = read_metrics_csv(metrics_csv);
  if (rows.empty()) throw FormatError(metrics_csv.string() + " has no epochs");
  fs::create_directories(out_dir);
  std::vector<int> epochs;
  Series le{"L_e", "#1f77b4", {}}, lt{"L_t", "#ff7f0e", {}}, lb{"L_b", "#2ca02c", {}};
  Series acc{"train accuracy", "#d62728", {}}, gate{"aug gate", "#999999", {}};
  for (const auto& m : rows) {
    epochs.push_back(m.epoch);
    le.values.push_back(m.loss_e);
    lt.values.push_back(m.loss_t);
    lb.values.push_back(m.loss_b);
    acc.values.push_back(m.train_accuracy);
    gate.values.push_back(m.aug_gate ? 1.0 : 0.0);
  }
  write_text(out_dir / "loss.svg", svg_chart("Hybrid loss per epoch", epochs, {le, lt, lb}, false));
  write_text(out_dir / "accuracy.svg", svg_chart("Training accuracy per epoch", epochs, {acc, gate}, true));
}

}  // namespace convt::cli
