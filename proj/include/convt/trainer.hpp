#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "convt/augment.hpp"
#include "convt/data.hpp"
#include "convt/losses.hpp"
#include "convt/model.hpp"

namespace convt {

enum class OptimizerKind { SgdMomentum, Adam };

/// Cosine: lr * (1 + cos(pi * e / epochs)) / 2 for 0-based epoch e.
enum class LrSchedule { Constant, Cosine };

struct TrainConfig {
  int epochs = 200;
  int batch_size = 20;  // 0: whole set in one batch
  double learning_rate = 3e-4;
  OptimizerKind optimizer = OptimizerKind::Adam;
  LrSchedule lr_schedule = LrSchedule::Cosine;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  MarginConfig margins;
  AutoAugConfig aug;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

void validate(const TrainConfig& config);

/// Learning rate used during 0-based `epoch`.
double scheduled_learning_rate(const TrainConfig& config, int epoch);

/// Batch size actually used for `n` training images.
int resolve_batch_size(const TrainConfig& config, std::size_t n);

/// Sizes of the mini-batches an epoch of `n` images is cut into; they differ by
/// at most one.
std::vector<std::size_t> batch_sizes(std::size_t n, int batch_size);

/// Moments (adam) or velocity (sgd), keyed by parameter position.
struct OptimizerState {
  std::uint64_t step = 0;
  std::vector<Tensor> first;
  std::vector<Tensor> second;
  friend bool operator==(const OptimizerState&, const OptimizerState&) = default;
};

/// sgd:  v <- mu v + g;  p <- p - lr (v + wd p)
/// adam: bias-corrected moments, p <- p - lr (m_hat / (sqrt(v_hat) + eps) + wd p)
void optimizer_step(std::span<Parameter* const> params, const Gradients& grads, OptimizerState& state,
                    const TrainConfig& config);

/// Images used for training together with their labels.
struct TrainingSet {
  std::vector<const Image*> images;
  std::vector<int> labels;
  std::size_t size() const noexcept { return images.size(); }
};

TrainingSet training_set(const Dataset& ds);
/// Episode support with dataset labels (not the episode-local ones), so the
/// model head indexes dataset classes.
TrainingSet training_set(const Dataset& ds, const Episode& episode);

struct EpochMetrics {
  int epoch = 0;  // 1-based
  double loss_e = 0.0;
  double loss_t = 0.0;
  double loss_b = 0.0;
  double train_accuracy = 0.0;
  bool aug_gate = false;
  std::size_t num_triplets = 0;
  std::size_t num_active_triplets = 0;
  double wall_ms = 0.0;
  friend bool operator==(const EpochMetrics&, const EpochMetrics&) = default;
};

/// Columns of the metrics CSV, in order. wall_ms goes to a separate timing file.
inline constexpr const char* kMetricsHeader =
    "epoch,loss_e,loss_t,loss_b,train_accuracy,aug_gate,num_triplets,num_active_triplets";
std::string metrics_csv_row(const EpochMetrics& m);
void write_metrics_csv(const std::filesystem::path& path, const std::vector<EpochMetrics>& metrics);
void write_timing_csv(const std::filesystem::path& path, const std::vector<EpochMetrics>& metrics);
std::vector<EpochMetrics> read_metrics_csv(const std::filesystem::path& path);

struct Checkpoint;

/// Owns the optimizer state and epoch counter for one model.
class Trainer {
 public:
  Trainer(ConvTModel& model, TrainConfig config);

  /// One epoch: policy, augmentation, shuffle, mini-batch updates.
  EpochMetrics run_epoch(const TrainingSet& data);
  /// Runs until `config().epochs` epochs have completed; `on_epoch` sees each record.
  std::vector<EpochMetrics> train(const TrainingSet& data,
                                  const std::function<void(const EpochMetrics&)>& on_epoch = {});

  int epoch() const noexcept { return epoch_; }
  const TrainConfig& config() const noexcept { return config_; }
  ConvTModel& model() noexcept { return model_; }
  const OptimizerState& optimizer_state() const noexcept { return state_; }

  void save_checkpoint(const std::filesystem::path& path) const;
  /// Restores parameters, optimizer state and epoch. The model must have been
  /// built from the checkpoint's model configuration.
  void restore(const Checkpoint& checkpoint);

 private:
  ConvTModel& model_;
  TrainConfig config_;
  OptimizerState state_;
  int epoch_ = 0;
};

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;
  std::uint32_t version = kVersion;
  ConvTConfig model_config;
  TrainConfig train_config;
  std::uint64_t epoch = 0;
  std::vector<std::pair<std::string, Tensor>> parameters;
  OptimizerState optimizer;
};

void write_checkpoint(std::ostream& out, const Checkpoint& ckpt);
Checkpoint read_checkpoint(std::istream& in);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);
Checkpoint make_checkpoint(const ConvTModel& model, const TrainConfig& config, const OptimizerState& state,
                           std::uint64_t epoch);
/// Copies parameter values into `model`; names and shapes must match.
void load_parameters(ConvTModel& model, const Checkpoint& ckpt);

struct EvalProtocol {
  int n_way = 10;
  int k_shot = 0;  // support items reserved (and excluded from the query set) per class
  int q_per_class = 15;
  int repeats = 20;
  std::uint64_t seed = 0;
};

struct EvalResult {
  double mean = 0.0;
  double standard_error = 0.0;
  int repeats = 0;
  bool single_repeat = false;  // standard error is reported as 0
  std::vector<double> accuracies;
};

/// Maps images to dataset class scores [B, num_classes].
using Classifier = std::function<Tensor(const std::vector<const Image*>&)>;

Classifier model_classifier(const ConvTModel& model);

/// Per repeat: sample an episode from `test_set`, predict each query as the
/// highest-scoring class among the episode's classes, record accuracy.
EvalResult evaluate(const Classifier& classify, const Dataset& test_set, const EvalProtocol& protocol);
EvalResult evaluate(const ConvTModel& model, const Dataset& test_set, const EvalProtocol& protocol);

/// Accuracy of argmax over all classes on a labelled set, without augmentation.
double accuracy(const ConvTModel& model, const TrainingSet& data);

/// From-scratch training per repeat: each trial samples a k-shot support set
/// from `train_set`, trains a fresh model, then scores one query episode from
/// `test_set` over the same classes.
EvalResult run_trials(const Dataset& train_set, const Dataset& test_set, const ConvTConfig& model_config,
                      const TrainConfig& train_config, const EvalProtocol& protocol);

/// Worker cap: CONVT_THREADS if set, else the hardware concurrency.
unsigned worker_count();

/// Keeps freed heap pages mapped between training steps. Idempotent.
void configure_allocator();

}  // namespace convt
