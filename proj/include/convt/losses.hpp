#pragma once

#include <compare>
#include <cstddef>
#include <span>
#include <vector>

#include "convt/graph.hpp"
#include "convt/tensor.hpp"

namespace convt {

enum class Mining { BatchAll, BatchHard };

struct MarginConfig {
  /// Subtracted from the true-class logit before the softmax.
  double lm_margin = 0.35;
  /// Hinge margin between anchor-positive and anchor-negative distances.
  double triplet_margin = 0.3;
  Mining mining = Mining::BatchAll;
  /// When false the triplet term is skipped and L_t is reported as 0.
  bool triplet_enabled = true;
  friend bool operator==(const MarginConfig&, const MarginConfig&) = default;
};

void validate(const MarginConfig& config);

struct Triplet {
  std::size_t anchor;
  std::size_t positive;
  std::size_t negative;
  friend auto operator<=>(const Triplet&, const Triplet&) = default;
};

struct TripletMining {
  std::vector<Triplet> triplets;
  /// Set when the batch admits no valid triplet.
  bool warning = false;
};

struct LossReport {
  double loss_e = 0.0;
  double loss_t = 0.0;
  double loss_b = 0.0;
  std::size_t num_triplets_total = 0;
  std::size_t num_active_triplets = 0;
  bool mining_warning = false;
};

/// Mean over the batch of -log softmax(z - m * onehot(y))_y.
Var lm_softmax_ce(Graph& g, Var logits, std::span<const int> labels, double lm_margin);

/// Squared Euclidean distance between rows i and j of [B, E] embeddings.
double squared_distance(const Tensor& embeddings, std::size_t i, std::size_t j);

/// Triplets in lexicographic (anchor, positive, negative) order.
///
/// BatchAll returns every valid triplet; BatchHard returns, per anchor, the
/// farthest positive and the nearest negative (ties go to the lower index).
TripletMining mine_triplets(const Tensor& embeddings, std::span<const int> labels, Mining mining);

struct TripletLossResult {
  Var loss;
  std::size_t active = 0;
};

/// Mean hinge max(d(a,p) - d(a,n) + margin, 0); zero for an empty list.
TripletLossResult triplet_loss(Graph& g, Var embeddings, std::span<const Triplet> triplets, double margin);

struct HybridLoss {
  Var total;
  Var cross_entropy;
  Var triplet;
  LossReport report;
};

/// L_b = L_e + L_t over one batch.
HybridLoss hybrid_loss(Graph& g, Var logits, Var embeddings, std::span<const int> labels, const MarginConfig& margins);

}  // namespace convt
