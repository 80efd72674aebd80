// Acceptance harness: one PASS/FAIL line per criterion, artifacts under --out.
//
//   acceptance [--out DIR] [--only 1,4,8]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/core.h>

#include "convt/augment.hpp"
#include "convt/data.hpp"
#include "convt/gradcheck_suite.hpp"
#include "convt/losses.hpp"
#include "convt/model.hpp"
#include "convt/rng.hpp"
#include "convt/trainer.hpp"

namespace fs = std::filesystem;
using namespace convt;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

fs::path g_out;

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream f(path);
  f << text;
}

std::string slurp(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

Tensor uniform_tensor(Shape shape, Rng& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

// ---------------------------------------------------------------------------
// 1. finite differences over every op and the model + hybrid loss composite

Outcome gradient_oracle() {
  const auto t0 = Clock::now();
  FiniteDiffOptions opts;
  opts.step = 1e-5;
  opts.tolerance = 1e-4;
  opts.max_coordinates = 200;
  const auto checks = run_gradcheck_suite("all", opts);
  const double secs = seconds_since(t0);
  double worst = 0.0;
  std::string worst_name;
  bool all = true;
  bool has_model = false;
  std::string log;
  for (const auto& c : checks) {
    all = all && c.report.passed && c.report.max_relative_error < 1e-4;
    has_model = has_model || c.name == gradcheck_op_names().back();
    if (c.report.max_relative_error >= worst) {
      worst = c.report.max_relative_error;
      worst_name = c.name;
    }
    log += fmt::format("{},{:.6e},{}\n", c.name, c.report.max_relative_error, c.report.coordinates_checked);
  }
  write_file(g_out / "gradcheck.csv", "op,max_relative_error,coordinates\n" + log);
  return {all && has_model && secs < 120.0,
          fmt::format("{} checks incl. model composite, worst {:.2e} ({}), {:.1f}s", checks.size(), worst, worst_name,
                      secs)};
}

// ---------------------------------------------------------------------------
// 2. attention rows are probability vectors

Outcome attention_normalization() {
  ConvTModel model{ConvTConfig{}};
  const ConvTConfig& c = model.config();
  Rng rng(derive_seed({2024, 2}));
  double worst_sum = 0.0, most_negative = 0.0;
  std::size_t rows = 0, tensors = 0;
  std::set<std::pair<std::size_t, std::size_t>> seen;  // (stage grid tokens, heads)
  for (int batch = 0; batch < 10; ++batch) {
    const Tensor images = uniform_tensor({10, c.in_channels, c.input_height, c.input_width}, rng, 0.0, 1.0);
    Graph g(false);
    AttentionProbe probe;
    model.forward(g, images, &probe);
    for (const Tensor& w : probe.weights) {
      ++tensors;
      const std::size_t n = w.shape()[3];
      seen.insert({n, w.shape()[1]});
      const std::size_t count = w.size() / n;
      for (std::size_t r = 0; r < count; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          const double v = w[r * n + j];
          most_negative = std::min(most_negative, v);
          s += v;
        }
        worst_sum = std::max(worst_sum, std::abs(s - 1.0));
        ++rows;
      }
    }
  }
  std::size_t expected_blocks = 0;
  for (const auto& s : c.stages) expected_blocks += s.num_encoder_blocks;
  const bool covered = tensors == 10 * expected_blocks && seen.size() == c.stages.size();
  return {covered && worst_sum < 1e-6 && most_negative >= 0.0,
          fmt::format("100 inputs, {} rows over {} stages, max |sum-1| {:.1e}, min weight {:.1e}", rows, seen.size(),
                      worst_sum, most_negative)};
}

// ---------------------------------------------------------------------------
// 3. zeroed output projections make every encoder block the identity

Outcome residual_identity() {
  ConvTModel model{ConvTConfig{}};
  Rng rng(derive_seed({2024, 3}));
  std::size_t blocks = 0, mismatched = 0;
  for (auto& stage : model.stages()) {
    for (auto& block : stage.blocks) {
      block.attention.output.weight.value.fill(0.0);
      block.attention.output.bias.value.fill(0.0);
      block.fc2.weight.value.fill(0.0);
      block.fc2.bias.value.fill(0.0);
      const Tensor x = uniform_tensor({3, stage.grid.tokens(), stage.params.out_channels}, rng, -2.0, 2.0);
      Graph g(false);
      const StageActivation in{g.constant(x), stage.grid, false};
      const StageActivation out = encoder_block(g, in, block, model.config().layer_norm_eps);
      const Tensor& y = g.value(out.tokens);
      ++blocks;
      if (!(y.shape() == x.shape()) || !std::equal(x.values().begin(), x.values().end(), y.values().begin())) {
        ++mismatched;
      }
    }
  }
  return {blocks > 0 && mismatched == 0, fmt::format("{} blocks, {} not bit-identical", blocks, mismatched)};
}

// ---------------------------------------------------------------------------
// 4. loss algebra

double reference_ce(const Tensor& logits, const std::vector<int>& labels) {
  const std::size_t b = logits.shape()[0], k = logits.shape()[1];
  long double total = 0.0L;
  for (std::size_t i = 0; i < b; ++i) {
    long double mx = -std::numeric_limits<long double>::infinity();
    for (std::size_t j = 0; j < k; ++j) mx = std::max<long double>(mx, logits[i * k + j]);
    long double z = 0.0L;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(static_cast<long double>(logits[i * k + j]) - mx);
    total += std::log(z) + mx - logits[i * k + static_cast<std::size_t>(labels[i])];
  }
  return static_cast<double>(total / static_cast<long double>(b));
}

Outcome loss_algebra() {
  Rng rng(derive_seed({2024, 4}));
  bool sum_exact = true;
  double ce_err = 0.0, uniform_err = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t b = 3 + rng.below(10), k = 2 + rng.below(9), e = 1 + rng.below(8);
    std::vector<int> labels(b);
    for (auto& y : labels) y = static_cast<int>(rng.below(std::min<std::uint64_t>(k, 3)));
    const Tensor logits = uniform_tensor({b, k}, rng, -4.0, 4.0);
    const Tensor emb = uniform_tensor({b, e}, rng, -1.0, 1.0);

    Graph g;
    MarginConfig m;
    m.lm_margin = rng.uniform(0.0, 1.0);
    const HybridLoss h = hybrid_loss(g, g.input(logits), g.input(emb), labels, m);
    const double le = g.value(h.cross_entropy).item(), lt = g.value(h.triplet).item();
    const double lb = g.value(h.total).item();
    sum_exact = sum_exact && lb == le + lt && h.report.loss_b == h.report.loss_e + h.report.loss_t &&
                h.report.loss_e == le && h.report.loss_t == lt;

    Graph g0;
    const double ce0 = g0.value(lm_softmax_ce(g0, g0.input(logits), labels, 0.0)).item();
    ce_err = std::max(ce_err, std::abs(ce0 - reference_ce(logits, labels)));

    Graph gu;
    const Tensor flat(Shape{b, k}, rng.uniform(-3.0, 3.0));
    const double cu = gu.value(lm_softmax_ce(gu, gu.input(flat), labels, 0.0)).item();
    uniform_err = std::max(uniform_err, std::abs(cu - std::log(static_cast<double>(k))));
  }

  // d(a,p) = 1, d(a,n) = 0.5, margin 0.2.
  Graph gt;
  const Tensor pts(Shape{3, 2}, {0.0, 0.0, 1.0, 0.0, 0.5, 0.5});
  const Triplet t{0, 1, 2};
  const double hinge = gt.value(triplet_loss(gt, gt.input(pts), std::span(&t, 1), 0.2).loss).item();
  const bool hinge_exact = hinge == 1.0 - 0.5 + 0.2;

  return {sum_exact && ce_err < 1e-12 && uniform_err < 1e-12 && hinge_exact,
          fmt::format("L_b==L_e+L_t {} over 200 batches, |CE-ref| {:.1e}, |uniform-lnC| {:.1e}, hinge {:.17g}",
                      sum_exact ? "exact" : "VIOLATED", ce_err, uniform_err, hinge)};
}

// ---------------------------------------------------------------------------
// 5. batch_all mining against a brute-force triple loop

Outcome mining_oracle() {
  Rng rng(derive_seed({2024, 5}));
  int mismatches = 0;
  std::size_t triplets = 0;
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t b = 1 + rng.below(12);
    const std::size_t classes = 1 + rng.below(5);
    std::vector<int> labels(b);
    for (auto& y : labels) y = static_cast<int>(rng.below(classes));
    const Tensor emb = uniform_tensor({b, 4}, rng, -1.0, 1.0);
    std::vector<Triplet> brute;
    for (std::size_t a = 0; a < b; ++a) {
      for (std::size_t p = 0; p < b; ++p) {
        for (std::size_t n = 0; n < b; ++n) {
          if (a != p && labels[a] == labels[p] && labels[a] != labels[n]) brute.push_back({a, p, n});
        }
      }
    }
    const TripletMining mined = mine_triplets(emb, labels, Mining::BatchAll);
    triplets += brute.size();
    if (mined.triplets != brute || mined.warning != brute.empty()) ++mismatches;
  }
  return {mismatches == 0, fmt::format("500 batches (B<=12), {} triplets, {} mismatches", triplets, mismatches)};
}

// ---------------------------------------------------------------------------
// 6. augmentation gate statistics and policy counts

Outcome augmentation_statistics() {
  AutoAugConfig c;
  c.m_a = 0.0;
  c.m_each = 0.0;
  c.seed = 2024;
  constexpr int kEpochs = 10000;
  int epoch_on = 0;
  std::vector<int> slot_on(static_cast<std::size_t>(c.k), 0);
  for (int e = 0; e < kEpochs; ++e) {
    const EpochPolicy p = sample_epoch_policy(c, static_cast<std::uint64_t>(e));
    epoch_on += p.epoch_gate;
    for (std::size_t i = 0; i < p.per_transform_gate.size(); ++i) slot_on[i] += p.per_transform_gate[i];
  }
  auto in_band = [](double f) { return f >= 0.48 && f <= 0.52; };
  const double fe = epoch_on / double(kEpochs);
  bool ok = in_band(fe);
  std::string slots;
  for (int n : slot_on) {
    const double f = n / double(kEpochs);
    ok = ok && in_band(f);
    slots += fmt::format(" {:.4f}", f);
  }
  AutoAugConfig k3, k5;
  k3.k = default_aug_k(10);
  k5.k = default_aug_k(1);
  const auto s3 = policy_space_size(k3), s5 = policy_space_size(k5);
  const bool counts = s3 == 1728 && s5 == 248832 && default_aug_k(2) == 5 && default_aug_k(5) == 3;
  return {ok && counts, fmt::format("epoch gate {:.4f}, transform gates{}; N^K = {} (K={}), {} (K={})", fe, slots,
                                    s3.str(), k3.k, s5.str(), k5.k)};
}

// ---------------------------------------------------------------------------
// 7. convolution cost linear in each factor

Outcome complexity_model() {
  bool ok = true;
  std::string notes;
  // Per-layer formula: doubling any one factor doubles the count exactly.
  const std::size_t base[6] = {16, 12, 3, 5, 64, 32};
  const auto macs = [](const std::size_t* f) { return conv_layer_macs(f[0], f[1], f[2], f[3], f[4], f[5]); };
  const std::uint64_t m0 = macs(base);
  for (int i = 0; i < 6; ++i) {
    std::size_t f[6];
    std::copy(base, base + 6, f);
    f[i] *= 2;
    ok = ok && macs(f) == 2 * m0;
  }
  // Config level: every conv layer of the estimate follows the formula, and
  // scaling the input grid scales the subtotal.
  const ConvTConfig c;
  const FlopsEstimate est = flops_estimate(c);
  std::uint64_t recount = 0;
  for (const auto& l : est.conv_layers) {
    recount += static_cast<std::uint64_t>(l.out_h) * l.out_w * l.kernel_h * l.kernel_w * l.filters * l.input_maps;
    for (int i = 0; i < 6; ++i) {
      std::size_t f[6] = {l.out_h, l.out_w, l.kernel_h, l.kernel_w, l.filters, l.input_maps};
      f[i] *= 2;
      ok = ok && macs(f) == 2 * l.macs;
    }
  }
  ok = ok && recount == est.conv_macs && est.conv_layers.size() == c.stages.size() + 1;
  for (const bool height : {true, false}) {
    ConvTConfig d = c;
    (height ? d.input_height : d.input_width) *= 2;
    const double ratio = double(flops_estimate(d).conv_macs) / double(est.conv_macs);
    ok = ok && std::abs(ratio - 2.0) < 0.05;
    notes += fmt::format(", 2x {} -> x{:.4f}", height ? "V1" : "V2", ratio);
  }
  for (std::size_t s = 0; s < c.stages.size(); ++s) {
    // A stage's width is the filter count of its own conv and the input maps
    // of the next, and also sets the patch conv width when s == 0. Each layer
    // must scale by exactly the product of its own F and I ratios.
    ConvTConfig d = c;
    d.stages[s].out_channels *= 2;
    const FlopsEstimate de = flops_estimate(d);
    ok = ok && de.conv_layers[s + 1].filters == 2 * est.conv_layers[s + 1].filters;
    for (std::size_t l = 0; l < de.conv_layers.size(); ++l) {
      const auto& a = est.conv_layers[l];
      const auto& b = de.conv_layers[l];
      const std::uint64_t factor = (b.filters / a.filters) * (b.input_maps / a.input_maps);
      ok = ok && b.macs == factor * a.macs && b.filters % a.filters == 0 && b.input_maps % a.input_maps == 0;
    }
  }
  return {ok, fmt::format("conv subtotal {} MACs over {} layers{}", est.conv_macs, est.conv_layers.size(), notes)};
}

// ---------------------------------------------------------------------------
// 8 and 9. synthetic 10-way 10-shot protocol

struct ProtocolRun {
  std::string label;
  double clean_train_accuracy = 0.0;
  double last_epoch_accuracy = 0.0;
  EvalResult eval;
  double train_seconds = 0.0;
  double total_seconds = 0.0;
  std::vector<EpochMetrics> metrics;
};

struct SyntheticTask {
  Dataset data;
  Split split;
  TrainingSet support;
  Episode episode;
};

SyntheticTask make_task() {
  SyntheticTask t;
  t.data = synth_generate(SynthConfig{});
  t.split = split_by_pose(t.data);
  Rng rng(derive_seed({0, 77}));
  t.episode = sample_episode(t.split.train, 10, 10, 0, rng);
  t.support = training_set(t.split.train, t.episode);
  return t;
}

ProtocolRun run_protocol(const SyntheticTask& task, const std::string& label, bool triplet, bool aug) {
  const auto t0 = Clock::now();
  ConvTConfig mc;
  mc.num_classes = task.data.num_classes();
  ConvTModel model(mc);
  TrainConfig tc;
  tc.margins.triplet_enabled = triplet;
  tc.aug.enabled = aug;
  tc.aug.k = default_aug_k(10);
  Trainer trainer(model, tc);
  ProtocolRun r;
  r.label = label;
  r.metrics = trainer.train(task.support);
  r.train_seconds = seconds_since(t0);
  r.last_epoch_accuracy = r.metrics.back().train_accuracy;
  r.clean_train_accuracy = accuracy(model, task.support);
  EvalProtocol p;
  p.n_way = 10;
  p.repeats = 20;
  r.eval = evaluate(model, task.split.test, p);
  r.total_seconds = seconds_since(t0);
  write_metrics_csv(g_out / fmt::format("metrics_{}.csv", label), r.metrics);
  write_timing_csv(g_out / fmt::format("timing_{}.csv", label), r.metrics);
  return r;
}

std::vector<ProtocolRun> g_runs;
const SyntheticTask* g_task = nullptr;

const SyntheticTask& task() {
  static const SyntheticTask t = make_task();
  g_task = &t;
  return t;
}

Outcome end_to_end() {
  const ProtocolRun r = run_protocol(task(), "hybrid_aug", true, true);
  g_runs.push_back(r);
  const bool ok = r.clean_train_accuracy >= 0.99 && r.eval.mean >= 0.70 && r.total_seconds < 600.0;
  return {ok, fmt::format("train acc {:.4f} (last epoch, augmented: {:.4f}), eval {:.4f} +- {:.4f} over {} repeats, "
                          "{:.0f}s",
                          r.clean_train_accuracy, r.last_epoch_accuracy, r.eval.mean, r.eval.standard_error,
                          r.eval.repeats, r.total_seconds)};
}

Outcome ablation_report() {
  std::vector<ProtocolRun> runs;
  runs.push_back(run_protocol(task(), "ce_only", false, false));
  runs.push_back(run_protocol(task(), "hybrid", true, false));
  auto found = std::find_if(g_runs.begin(), g_runs.end(), [](const ProtocolRun& r) { return r.label == "hybrid_aug"; });
  runs.push_back(found != g_runs.end() ? *found : run_protocol(task(), "hybrid_aug", true, true));

  std::string csv = "variant,triplet,augmentation,train_accuracy,eval_mean,eval_se,repeats,train_seconds\n";
  std::string md = "| variant | triplet | augmentation | train acc | eval mean | eval SE | train s |\n"
                   "|---|---|---|---|---|---|---|\n";
  for (const auto& r : runs) {
    const bool trip = r.label != "ce_only", aug = r.label == "hybrid_aug";
    csv += fmt::format("{},{},{},{:.6f},{:.6f},{:.6f},{},{:.1f}\n", r.label, trip, aug, r.clean_train_accuracy,
                       r.eval.mean, r.eval.standard_error, r.eval.repeats, r.train_seconds);
    md += fmt::format("| {} | {} | {} | {:.4f} | {:.4f} | {:.4f} | {:.0f} |\n", r.label, trip ? "on" : "off",
                      aug ? "on" : "off", r.clean_train_accuracy, r.eval.mean, r.eval.standard_error, r.train_seconds);
  }
  md = "Synthetic 10-way 10-shot, default model, 200 epochs, 20 evaluation repeats.\n\n" + md;
  write_file(g_out / "ablation.csv", csv);
  write_file(g_out / "ablation.md", md);
  const bool archived = fs::file_size(g_out / "ablation.csv") > 0 && fs::file_size(g_out / "ablation.md") > 0;
  std::string detail;
  for (const auto& r : runs) detail += fmt::format("{} {:.4f}; ", r.label, r.eval.mean);
  return {archived && runs.size() == 3, detail + "written to " + (g_out / "ablation.md").string()};
}

// ---------------------------------------------------------------------------
// 10. determinism and resume

Outcome determinism_and_resume() {
  SynthConfig sc;
  sc.num_classes = 4;
  sc.chips_per_class = 8;
  sc.chip_size = 32;
  sc.seed = 9;
  const Dataset ds = synth_generate(sc);
  const TrainingSet data = training_set(ds);
  ConvTConfig mc;
  mc.input_height = mc.input_width = 32;
  mc.num_classes = 4;
  mc.stages = {{16, 3, 3, 1, 2, 1}, {32, 3, 3, 2, 4, 1}};
  mc.seed = 11;
  TrainConfig tc;
  tc.epochs = 10;
  tc.batch_size = 8;
  tc.seed = 12;
  tc.aug.seed = 13;
  tc.aug.k = 3;

  auto params_of = [](ConvTModel& m) {
    std::vector<Tensor> v;
    for (auto* p : m.parameters()) v.push_back(p->value);
    return v;
  };
  auto train_to_csv = [&](const fs::path& csv) {
    ConvTModel model(mc);
    Trainer t(model, tc);
    write_metrics_csv(csv, t.train(data));
    return params_of(model);
  };
  const auto pa = train_to_csv(g_out / "determinism_a.csv");
  const auto pb = train_to_csv(g_out / "determinism_b.csv");
  const bool same_csv = slurp(g_out / "determinism_a.csv") == slurp(g_out / "determinism_b.csv");
  const bool same_params = pa == pb;

  ConvTModel straight(mc);
  Trainer full(straight, tc);
  auto full_metrics = full.train(data);

  ConvTModel first(mc);
  Trainer part(first, tc);
  std::vector<EpochMetrics> joined;
  for (int e = 0; e < 5; ++e) joined.push_back(part.run_epoch(data));
  part.save_checkpoint(g_out / "resume_epoch5.bin");
  const Checkpoint ck = load_checkpoint(g_out / "resume_epoch5.bin");
  ConvTModel second(ck.model_config);
  Trainer rest(second, ck.train_config);
  rest.restore(ck);
  const auto tail = rest.train(data);
  joined.insert(joined.end(), tail.begin(), tail.end());
  for (auto* v : {&full_metrics, &joined}) {
    for (auto& m : *v) m.wall_ms = 0.0;
  }
  const bool resume_metrics = joined == full_metrics;
  const bool resume_params = params_of(second) == params_of(straight);
  const bool resume_state = rest.optimizer_state() == full.optimizer_state();
  return {same_csv && same_params && resume_metrics && resume_params && resume_state,
          fmt::format("same-seed CSVs {}, params {}; 5+5 vs 10: metrics {}, params {}, optimizer {}",
                      same_csv ? "identical" : "DIFFER", same_params ? "identical" : "DIFFER",
                      resume_metrics ? "identical" : "DIFFER", resume_params ? "identical" : "DIFFER",
                      resume_state ? "identical" : "DIFFER")};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  g_out = "acceptance_out";
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--out" && i + 1 < argc) {
      g_out = argv[++i];
    } else if (a == "--only" && i + 1 < argc) {
      std::stringstream list(argv[++i]);
      for (std::string item; std::getline(list, item, ',');) only.insert(std::stoi(item));
    } else {
      std::fprintf(stderr, "usage: acceptance [--out DIR] [--only 1,2,...]\n");
      return 2;
    }
  }
  fs::create_directories(g_out);
  configure_allocator();

  const std::vector<Criterion> criteria = {
      {1, "gradient oracle", gradient_oracle},
      {2, "attention normalization", attention_normalization},
      {3, "residual identity", residual_identity},
      {4, "loss algebra", loss_algebra},
      {5, "triplet mining oracle", mining_oracle},
      {6, "augmentation statistics", augmentation_statistics},
      {7, "complexity model", complexity_model},
      {8, "end-to-end synthetic protocol", end_to_end},
      {9, "ablation report", ablation_report},
      {10, "determinism and resume", determinism_and_resume},
  };
  int failed = 0;
  std::string summary;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.count(c.id)) continue;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    const std::string line = fmt::format("{} [{}] {}: {}", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail);
    std::printf("%s\n", line.c_str());
    std::fflush(stdout);
    summary += line + '\n';
  }
  write_file(g_out / "acceptance.txt", summary);
  return failed == 0 ? 0 : 1;
}
