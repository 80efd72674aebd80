#include "convt/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fmt/format.h>
#include <fstream>
#include <istream>
#include <mutex>
#include <numbers>
#include <numeric>
#include <ostream>
#include <sstream>
#include <thread>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "convt/config.hpp"
#include "convt/error.hpp"

namespace convt {

namespace {

constexpr std::uint64_t kShuffleTag = 0x7368756666000004ULL;
constexpr std::uint64_t kEvalTag = 0x6576616c00000005ULL;
constexpr std::uint64_t kTrialTag = 0x747269616c000006ULL;

std::size_t argmax_row(const Tensor& scores, std::size_t row) {
  const std::size_t c = scores.dim(1);
  const double* p = scores.data() + row * c;
  return static_cast<std::size_t>(std::max_element(p, p + c) - p);
}

// Highest-scoring class among `allowed` (dataset labels); ties go to the first listed.
int argmax_among(const Tensor& scores, std::size_t row, const std::vector<int>& allowed) {
  const double* p = scores.data() + row * scores.dim(1);
  int best = allowed.front();
  for (int cls : allowed) {
    if (p[cls] > p[best]) best = cls;
  }
  return best;
}

// Mean and standard error (sample deviation / sqrt(R)) of the accuracies.
void summarize(EvalResult& r) {
  const auto n = static_cast<double>(r.accuracies.size());
  r.repeats = static_cast<int>(r.accuracies.size());
  r.mean = std::accumulate(r.accuracies.begin(), r.accuracies.end(), 0.0) / n;
  r.single_repeat = r.repeats == 1;
  r.standard_error = 0.0;
  if (r.single_repeat) return;
  double ss = 0.0;
  for (double a : r.accuracies) ss += (a - r.mean) * (a - r.mean);
  r.standard_error = std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
}

}  // namespace

void validate(const TrainConfig& c) {
  if (c.epochs < 1) throw ConfigError("epochs must be at least 1");
  if (c.batch_size < 0) throw ConfigError("batch size must be nonnegative (0 selects the default)");
  if (!(c.learning_rate >= 0.0) || !std::isfinite(c.learning_rate)) {
    throw ConfigError("learning rate must be finite and nonnegative");
  }
  if (!(c.momentum >= 0.0 && c.momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (!(c.beta1 >= 0.0 && c.beta1 < 1.0) || !(c.beta2 >= 0.0 && c.beta2 < 1.0)) {
    throw ConfigError("adam betas must lie in [0, 1)");
  }
  if (!(c.adam_eps > 0.0)) throw ConfigError("adam epsilon must be positive");
  if (!(c.weight_decay >= 0.0) || !std::isfinite(c.weight_decay)) throw ConfigError("weight decay must be >= 0");
  validate(c.margins);
  validate(c.aug);
}

double scheduled_learning_rate(const TrainConfig& c, int epoch) {
  if (c.lr_schedule == LrSchedule::Constant) return c.learning_rate;
  const double t = static_cast<double>(std::clamp(epoch, 0, c.epochs)) / static_cast<double>(c.epochs);
  return c.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

int resolve_batch_size(const TrainConfig& c, std::size_t n) {
  if (c.batch_size > 0) return static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(c.batch_size), n));
  return static_cast<int>(n);
}

std::vector<std::size_t> batch_sizes(std::size_t n, int batch_size) {
  if (batch_size < 1) throw ConfigError("batch size must be positive");
  const auto b = static_cast<std::size_t>(batch_size);
  const std::size_t count = (n + b - 1) / b;
  std::vector<std::size_t> out(count, n / std::max<std::size_t>(count, 1));
  for (std::size_t i = 0; i < n % std::max<std::size_t>(count, 1); ++i) ++out[i];
  return out;
}

void optimizer_step(std::span<Parameter* const> params, const Gradients& grads, OptimizerState& state,
                    const TrainConfig& c) {
  const bool adam = c.optimizer == OptimizerKind::Adam;
  if (state.first.empty()) {
    for (const auto* p : params) {
      state.first.emplace_back(p->value.shape());
      if (adam) state.second.emplace_back(p->value.shape());
    }
  }
  if (state.first.size() != params.size() || (adam && state.second.size() != params.size())) {
    throw ContractError("optimizer state does not match the parameter list");
  }
  ++state.step;
  const double lr = c.learning_rate, wd = c.weight_decay;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i]->value;
    const Tensor* g = grads.find(*params[i]);
    if (g && g->shape() != p.shape()) {
      throw ContractError("gradient shape " + to_string(g->shape()) + " does not match parameter '" +
                          params[i]->name + "' " + to_string(p.shape()));
    }
    Tensor& m = state.first[i];
    if (m.shape() != p.shape()) throw ContractError("optimizer state shape mismatch for '" + params[i]->name + "'");
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = g ? (*g)[j] : 0.0;
      if (adam) {
        Tensor& v = state.second[i];
        m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
        v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
        p[j] -= lr * ((m[j] / bc1) / (std::sqrt(v[j] / bc2) + c.adam_eps) + wd * p[j]);
      } else {
        m[j] = c.momentum * m[j] + gj;
        p[j] -= lr * (m[j] + wd * p[j]);
      }
    }
  }
}

TrainingSet training_set(const Dataset& ds) {
  TrainingSet out;
  for (const auto& c : ds.chips) {
    out.images.push_back(&c.image);
    out.labels.push_back(c.label);
  }
  return out;
}

TrainingSet training_set(const Dataset& ds, const Episode& episode) {
  TrainingSet out;
  for (const auto& item : episode.support) {
    out.images.push_back(&ds.chips[item.index].image);
    out.labels.push_back(ds.chips[item.index].label);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Metrics

std::string metrics_csv_row(const EpochMetrics& m) {
  return fmt::format("{},{},{},{},{},{},{},{}", m.epoch, format_real(m.loss_e), format_real(m.loss_t),
                     format_real(m.loss_b), format_real(m.train_accuracy), m.aug_gate ? 1 : 0, m.num_triplets,
                     m.num_active_triplets);
}

void write_metrics_csv(const std::filesystem::path& path, const std::vector<EpochMetrics>& metrics) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << kMetricsHeader << '\n';
  for (const auto& m : metrics) out << metrics_csv_row(m) << '\n';
}

void write_timing_csv(const std::filesystem::path& path, const std::vector<EpochMetrics>& metrics) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "epoch,wall_ms\n";
  for (const auto& m : metrics) out << m.epoch << ',' << fmt::format("{:.3f}", m.wall_ms) << '\n';
}

std::vector<EpochMetrics> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) throw FormatError(path.string() + ": unexpected header");
  std::vector<EpochMetrics> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream row(line);
    EpochMetrics m;
    int gate = 0;
    if (!(row >> m.epoch >> m.loss_e >> m.loss_t >> m.loss_b >> m.train_accuracy >> gate >> m.num_triplets >>
          m.num_active_triplets)) {
      throw FormatError(path.string() + ": malformed row '" + line + "'");
    }
    m.aug_gate = gate != 0;
    out.push_back(m);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

void configure_allocator() {
  static std::once_flag once;
  std::call_once(once, [] {
#if defined(__GLIBC__)
    // Large activations are reallocated every step; keeping them off mmap
    // avoids repeated page faults.
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  });
}

Trainer::Trainer(ConvTModel& model, TrainConfig config) : model_(model), config_(std::move(config)) {
  validate(config_);
  configure_allocator();
}

EpochMetrics Trainer::run_epoch(const TrainingSet& data) {
  if (data.size() == 0) throw ContractError("training set is empty");
  const auto classes = model_.config().num_classes;
  for (int label : data.labels) {
    if (label < 0 || static_cast<std::size_t>(label) >= classes) {
      throw ContractError(fmt::format("training label {} outside the model's {} classes", label, classes));
    }
  }
  const auto start = std::chrono::steady_clock::now();
  const auto epoch = static_cast<std::uint64_t>(epoch_);
  EpochMetrics metrics;
  metrics.epoch = epoch_ + 1;

  const EpochPolicy policy = sample_epoch_policy(config_.aug, epoch);
  metrics.aug_gate = policy.epoch_gate;
  std::vector<Image> augmented;
  if (policy.epoch_gate) {
    augmented.reserve(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) augmented.push_back(apply_policy(policy, *data.images[i], i));
  }
  auto image_at = [&](std::size_t i) -> const Image* {
    return policy.epoch_gate ? &augmented[i] : data.images[i];
  };

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  Rng shuffle(derive_seed({config_.seed, epoch, kShuffleTag}));
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

  MarginConfig margins = config_.margins;
  const int batch = resolve_batch_size(config_, data.size());
  if (batch < 3 && margins.triplet_enabled) margins.triplet_enabled = false;

  TrainConfig step_config = config_;
  step_config.learning_rate = scheduled_learning_rate(config_, epoch_);
  const auto params = model_.parameters();
  std::size_t offset = 0, correct = 0;
  for (std::size_t size : batch_sizes(data.size(), batch)) {
    std::vector<const Image*> images;
    std::vector<int> labels;
    for (std::size_t i = offset; i < offset + size; ++i) {
      images.push_back(image_at(order[i]));
      labels.push_back(data.labels[order[i]]);
    }
    offset += size;
    try {
      Graph g;
      const ModelOutput out = model_.forward(g, to_batch(images));
      const HybridLoss loss = hybrid_loss(g, out.logits, out.embedding, labels, margins);
      g.backward(loss.total);
      const Gradients grads = g.parameter_gradients();
      optimizer_step(params, grads, state_, step_config);
      for (const auto* p : params) {
        if (!p->value.all_finite()) throw NumericError("parameter '" + p->name + "' became non-finite");
      }
      const Tensor& logits = g.value(out.logits);
      for (std::size_t b = 0; b < size; ++b) correct += argmax_row(logits, b) == static_cast<std::size_t>(labels[b]);
      const double w = static_cast<double>(size) / static_cast<double>(data.size());
      metrics.loss_e += w * loss.report.loss_e;
      metrics.loss_t += w * loss.report.loss_t;
      metrics.loss_b += w * loss.report.loss_b;
      metrics.num_triplets += loss.report.num_triplets_total;
      metrics.num_active_triplets += loss.report.num_active_triplets;
    } catch (const NumericError& e) {
      throw NumericError(fmt::format("training diverged in epoch {}: {}", metrics.epoch, e.what()));
    }
  }
  metrics.train_accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  metrics.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  ++epoch_;
  return metrics;
}

std::vector<EpochMetrics> Trainer::train(const TrainingSet& data,
                                         const std::function<void(const EpochMetrics&)>& on_epoch) {
  std::vector<EpochMetrics> out;
  while (epoch_ < config_.epochs) {
    out.push_back(run_epoch(data));
    if (on_epoch) on_epoch(out.back());
  }
  return out;
}

void Trainer::save_checkpoint(const std::filesystem::path& path) const {
  convt::save_checkpoint(path, make_checkpoint(model_, config_, state_, static_cast<std::uint64_t>(epoch_)));
}

void Trainer::restore(const Checkpoint& ckpt) {
  if (ckpt.model_config != model_.config()) throw ContractError("checkpoint model configuration differs from the model");
  load_parameters(model_, ckpt);
  state_ = ckpt.optimizer;
  epoch_ = static_cast<int>(ckpt.epoch);
}

// ---------------------------------------------------------------------------
// Checkpoints: "CVT1", u32 version, u32-prefixed config text, u64 epoch,
// u64 optimizer step, u32 block count, then blocks of
// (u32-prefixed name, u32 rank, u64 dims..., f64 values...). Little-endian.

namespace {

void put_u32(std::ostream& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::ostream& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_string(std::ostream& out, std::string_view s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}
void put_tensor(std::ostream& out, std::string_view name, const Tensor& t) {
  put_string(out, name);
  put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) put_u64(out, d);
  for (double v : t.values()) put_u64(out, std::bit_cast<std::uint64_t>(v));
}

std::uint64_t get_bytes(std::istream& in, int n) {
  std::uint64_t v = 0;
  for (int i = 0; i < n; ++i) {
    const int c = in.get();
    if (c == std::char_traits<char>::eof()) throw FormatError("checkpoint is truncated");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return v;
}
std::uint32_t get_u32(std::istream& in) { return static_cast<std::uint32_t>(get_bytes(in, 4)); }
std::uint64_t get_u64(std::istream& in) { return get_bytes(in, 8); }
std::string get_string(std::istream& in, std::uint32_t limit = 1u << 24) {
  const auto n = get_u32(in);
  if (n > limit) throw FormatError("checkpoint string length is implausible");
  std::string s(n, '\0');
  if (!in.read(s.data(), n)) throw FormatError("checkpoint is truncated");
  return s;
}
std::pair<std::string, Tensor> get_tensor(std::istream& in) {
  std::string name = get_string(in, 4096);
  const auto rank = get_u32(in);
  if (rank == 0 || rank > 8) throw FormatError("checkpoint block '" + name + "' has invalid rank");
  Shape shape(rank);
  for (auto& d : shape) {
    d = get_u64(in);
    if (d == 0 || d > (1ull << 32)) throw FormatError("checkpoint block '" + name + "' has invalid extent");
  }
  if (numel(shape) > (1ull << 31)) throw FormatError("checkpoint block '" + name + "' is implausibly large");
  Tensor t(shape);
  for (double& v : t.values()) v = std::bit_cast<double>(get_u64(in));
  return {std::move(name), std::move(t)};
}

}  // namespace

void write_checkpoint(std::ostream& out, const Checkpoint& c) {
  out.write("CVT1", 4);
  put_u32(out, c.version);
  put_string(out, format_config(c.model_config, c.train_config));
  put_u64(out, c.epoch);
  put_u64(out, c.optimizer.step);
  const std::size_t blocks = c.parameters.size() + c.optimizer.first.size() + c.optimizer.second.size();
  put_u32(out, static_cast<std::uint32_t>(blocks));
  for (const auto& [name, t] : c.parameters) put_tensor(out, name, t);
  for (std::size_t i = 0; i < c.optimizer.first.size(); ++i) {
    put_tensor(out, "opt.first/" + c.parameters.at(i).first, c.optimizer.first[i]);
  }
  for (std::size_t i = 0; i < c.optimizer.second.size(); ++i) {
    put_tensor(out, "opt.second/" + c.parameters.at(i).first, c.optimizer.second[i]);
  }
  if (!out) throw IoError("failed writing checkpoint");
}

Checkpoint read_checkpoint(std::istream& in) {
  char magic[4] = {};
  if (!in.read(magic, 4) || std::string_view(magic, 4) != "CVT1") throw FormatError("not a checkpoint (bad magic)");
  Checkpoint c;
  c.version = get_u32(in);
  if (c.version != Checkpoint::kVersion) {
    throw FormatError(fmt::format("checkpoint format version {} is not supported (expected {})", c.version,
                                  Checkpoint::kVersion));
  }
  const auto rest = apply_config(c.model_config, c.train_config, parse_key_values(get_string(in)));
  if (!rest.empty()) throw FormatError("checkpoint config has unknown key '" + rest.begin()->first + "'");
  c.epoch = get_u64(in);
  c.optimizer.step = get_u64(in);
  const auto blocks = get_u32(in);
  for (std::uint32_t i = 0; i < blocks; ++i) {
    auto [name, t] = get_tensor(in);
    if (name.starts_with("opt.first/")) c.optimizer.first.push_back(std::move(t));
    else if (name.starts_with("opt.second/")) c.optimizer.second.push_back(std::move(t));
    else c.parameters.emplace_back(std::move(name), std::move(t));
  }
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError("checkpoint has trailing bytes");
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  write_checkpoint(out, ckpt);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  return read_checkpoint(in);
}

Checkpoint make_checkpoint(const ConvTModel& model, const TrainConfig& config, const OptimizerState& state,
                           std::uint64_t epoch) {
  Checkpoint c;
  c.model_config = model.config();
  c.train_config = config;
  c.epoch = epoch;
  for (const auto* p : model.parameters()) c.parameters.emplace_back(p->name, p->value);
  c.optimizer = state;
  return c;
}

void load_parameters(ConvTModel& model, const Checkpoint& ckpt) {
  auto params = model.parameters();
  if (params.size() != ckpt.parameters.size()) {
    throw FormatError(fmt::format("checkpoint has {} parameters, model has {}", ckpt.parameters.size(),
                                  params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, t] = ckpt.parameters[i];
    if (name != params[i]->name || t.shape() != params[i]->value.shape()) {
      throw FormatError("checkpoint parameter '" + name + "' does not match model parameter '" + params[i]->name +
                        "'");
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = ckpt.parameters[i].second;
}

// ---------------------------------------------------------------------------
// Evaluation

unsigned worker_count() {
  unsigned n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("CONVT_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v >= 1) n = static_cast<unsigned>(v);
  }
  return n;
}

Classifier model_classifier(const ConvTModel& model) {
  return [&model](const std::vector<const Image*>& images) {
    const std::size_t classes = model.config().num_classes;
    Tensor scores(Shape{images.size(), classes});
    constexpr std::size_t kChunk = 32;
    for (std::size_t first = 0; first < images.size(); first += kChunk) {
      const std::vector<const Image*> chunk(images.begin() + static_cast<long>(first),
                                            images.begin() + static_cast<long>(std::min(images.size(), first + kChunk)));
      Graph g(false);
      const Tensor& logits = g.value(model.forward(g, to_batch(chunk)).logits);
      std::copy(logits.data(), logits.data() + logits.size(), scores.data() + first * classes);
    }
    return scores;
  };
}

EvalResult evaluate(const Classifier& classify, const Dataset& test_set, const EvalProtocol& protocol) {
  if (protocol.repeats < 1) throw ContractError("evaluation needs at least one repeat");
  configure_allocator();
  EvalResult result;
  result.repeats = protocol.repeats;
  result.accuracies.assign(static_cast<std::size_t>(protocol.repeats), 0.0);

  auto run = [&](int r) {
    Rng rng(derive_seed({protocol.seed, static_cast<std::uint64_t>(r), kEvalTag}));
    const Episode ep = sample_episode(test_set, protocol.n_way, protocol.k_shot, protocol.q_per_class, rng);
    if (ep.query.empty()) throw ContractError("evaluation episode has no query items");
    std::vector<const Image*> images;
    for (const auto& item : ep.query) images.push_back(&test_set.chips[item.index].image);
    const Tensor scores = classify(images);
    if (scores.rank() != 2 || scores.dim(0) != images.size() || scores.dim(1) < test_set.num_classes()) {
      throw DimensionError("classifier returned scores of shape " + to_string(scores.shape()));
    }
    std::size_t correct = 0;
    for (std::size_t i = 0; i < ep.query.size(); ++i) {
      correct += argmax_among(scores, i, ep.class_map) == ep.class_map[static_cast<std::size_t>(ep.query[i].label)];
    }
    result.accuracies[static_cast<std::size_t>(r)] = static_cast<double>(correct) / static_cast<double>(ep.query.size());
  };

  const unsigned workers = std::min<unsigned>(worker_count(), static_cast<unsigned>(protocol.repeats));
  if (workers <= 1) {
    for (int r = 0; r < protocol.repeats; ++r) run(r);
  } else {
    std::atomic<int> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    {
      std::vector<std::jthread> pool;
      for (unsigned w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
          for (int r = next++; r < protocol.repeats; r = next++) {
            try {
              run(r);
            } catch (...) {
              std::lock_guard lock(failure_mutex);
              if (!failure) failure = std::current_exception();
            }
          }
        });
      }
    }
    if (failure) std::rethrow_exception(failure);
  }

  summarize(result);
  return result;
}

EvalResult evaluate(const ConvTModel& model, const Dataset& test_set, const EvalProtocol& protocol) {
  return evaluate(model_classifier(model), test_set, protocol);
}

double accuracy(const ConvTModel& model, const TrainingSet& data) {
  if (data.size() == 0) throw ContractError("accuracy of an empty set");
  const Tensor scores = model_classifier(model)(data.images);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) correct += argmax_row(scores, i) == static_cast<std::size_t>(data.labels[i]);
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

EvalResult run_trials(const Dataset& train_set, const Dataset& test_set, const ConvTConfig& model_config,
                      const TrainConfig& train_config, const EvalProtocol& protocol) {
  if (protocol.repeats < 1) throw ContractError("run_trials needs at least one repeat");
  if (train_set.num_classes() != test_set.num_classes()) throw ContractError("train and test class lists differ");
  EvalResult result;
  result.repeats = protocol.repeats;
  const auto test_by_class = test_set.indices_by_class();
  for (int r = 0; r < protocol.repeats; ++r) {
    const auto trial = static_cast<std::uint64_t>(r);
    Rng rng(derive_seed({protocol.seed, trial, kTrialTag}));
    const Episode support = sample_episode(train_set, protocol.n_way, protocol.k_shot, 0, rng);

    ConvTConfig mc = model_config;
    mc.seed = derive_seed({model_config.seed, trial});
    TrainConfig tc = train_config;
    tc.seed = derive_seed({train_config.seed, trial});
    tc.aug.seed = derive_seed({train_config.aug.seed, trial});
    ConvTModel model(mc);
    Trainer trainer(model, tc);
    trainer.train(training_set(train_set, support));

    std::vector<const Image*> images;
    std::vector<int> truth;
    for (int cls : support.class_map) {
      auto pool = test_by_class[static_cast<std::size_t>(cls)];
      const auto q = static_cast<std::size_t>(protocol.q_per_class);
      if (pool.size() < q) {
        throw ContractError(fmt::format("class '{}' has {} test chips, trial needs {}",
                                        test_set.class_names[static_cast<std::size_t>(cls)], pool.size(), q));
      }
      for (std::size_t i = 0; i < q; ++i) std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
      for (std::size_t i = 0; i < q; ++i) {
        images.push_back(&test_set.chips[pool[i]].image);
        truth.push_back(cls);
      }
    }
    const Tensor scores = model_classifier(model)(images);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < images.size(); ++i) correct += argmax_among(scores, i, support.class_map) == truth[i];
    result.accuracies.push_back(images.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(images.size()));
  }
  summarize(result);
  return result;
}

}  // namespace convt
