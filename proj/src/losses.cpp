#include "convt/losses.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "convt/error.hpp"
#include "convt/ops.hpp"

namespace convt {

void validate(const MarginConfig& c) {
  if (!std::isfinite(c.lm_margin) || c.lm_margin < 0.0) throw ConfigError("lm_margin must be finite and >= 0");
  if (!std::isfinite(c.triplet_margin) || !(c.triplet_margin > 0.0)) {
    throw ConfigError("triplet_margin must be finite and > 0");
  }
}

Var lm_softmax_ce(Graph& g, Var logits, std::span<const int> labels, double lm_margin) {
  const Tensor& z = g.value(logits);
  if (z.rank() != 2) throw DimensionError("lm_softmax_ce expects logits [B,C], got " + to_string(z.shape()));
  const std::size_t batch = z.dim(0), classes = z.dim(1);
  if (labels.size() != batch) {
    throw DimensionError("lm_softmax_ce: " + std::to_string(labels.size()) + " labels for batch of " +
                         std::to_string(batch));
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw ContractError("label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
    }
  }
  // Probabilities of the margin-adjusted logits, kept for the backward rule.
  std::vector<double> probs(batch * classes);
  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const double* row = z.data() + b * classes;
    double* p = probs.data() + b * classes;
    const auto y = static_cast<std::size_t>(labels[b]);
    double mx = -INFINITY;
    for (std::size_t c = 0; c < classes; ++c) {
      p[c] = row[c] - (c == y ? lm_margin : 0.0);
      mx = std::max(mx, p[c]);
    }
    double denom = 0.0;
    for (std::size_t c = 0; c < classes; ++c) denom += std::exp(p[c] - mx);
    const double log_denom = std::log(denom) + mx;
    total += log_denom - p[y];
    for (std::size_t c = 0; c < classes; ++c) p[c] = std::exp(p[c] - log_denom);
  }
  std::vector<int> owned(labels.begin(), labels.end());
  return g.record("lm_softmax_ce", {logits}, Tensor::scalar(total / static_cast<double>(batch)),
                  [probs = std::move(probs), owned = std::move(owned), batch, classes](BackwardContext& ctx) {
                    const double coef = ctx.grad_output().item() / static_cast<double>(batch);
                    Tensor& gz = ctx.grad_input(0);
                    for (std::size_t b = 0; b < batch; ++b) {
                      for (std::size_t c = 0; c < classes; ++c) {
                        const double onehot = c == static_cast<std::size_t>(owned[b]) ? 1.0 : 0.0;
                        gz[b * classes + c] += coef * (probs[b * classes + c] - onehot);
                      }
                    }
                  });
}

double squared_distance(const Tensor& e, std::size_t i, std::size_t j) {
  const std::size_t dim = e.dim(1);
  const double* a = e.data() + i * dim;
  const double* b = e.data() + j * dim;
  double d = 0.0;
  for (std::size_t k = 0; k < dim; ++k) d += (a[k] - b[k]) * (a[k] - b[k]);
  return d;
}

TripletMining mine_triplets(const Tensor& embeddings, std::span<const int> labels, Mining mining) {
  if (embeddings.rank() != 2) {
    throw DimensionError("mine_triplets expects embeddings [B,E], got " + to_string(embeddings.shape()));
  }
  const std::size_t batch = embeddings.dim(0);
  if (labels.size() != batch) {
    throw DimensionError("mine_triplets: " + std::to_string(labels.size()) + " labels for batch of " +
                         std::to_string(batch));
  }
  TripletMining out;
  for (std::size_t a = 0; a < batch; ++a) {
    if (mining == Mining::BatchAll) {
      for (std::size_t p = 0; p < batch; ++p) {
        if (p == a || labels[p] != labels[a]) continue;
        for (std::size_t n = 0; n < batch; ++n) {
          if (labels[n] != labels[a]) out.triplets.push_back({a, p, n});
        }
      }
      continue;
    }
    std::size_t hardest_p = batch, hardest_n = batch;
    double far = -1.0, near = INFINITY;
    for (std::size_t j = 0; j < batch; ++j) {
      if (j == a) continue;
      const double d = squared_distance(embeddings, a, j);
      if (labels[j] == labels[a]) {
        if (d > far) {
          far = d;
          hardest_p = j;
        }
      } else if (d < near) {
        near = d;
        hardest_n = j;
      }
    }
    if (hardest_p < batch && hardest_n < batch) out.triplets.push_back({a, hardest_p, hardest_n});
  }
  out.warning = out.triplets.empty();
  return out;
}

TripletLossResult triplet_loss(Graph& g, Var embeddings, std::span<const Triplet> triplets, double margin) {
  const Tensor& e = g.value(embeddings);
  if (e.rank() != 2) throw DimensionError("triplet_loss expects embeddings [B,E], got " + to_string(e.shape()));
  if (triplets.empty()) return {g.constant(Tensor::scalar(0.0)), 0};
  const std::size_t batch = e.dim(0);
  std::vector<Triplet> active;
  double total = 0.0;
  for (const auto& t : triplets) {
    if (t.anchor >= batch || t.positive >= batch || t.negative >= batch) {
      throw ContractError("triplet index outside batch of " + std::to_string(batch));
    }
    const double hinge = squared_distance(e, t.anchor, t.positive) - squared_distance(e, t.anchor, t.negative) + margin;
    if (hinge > 0.0) {
      total += hinge;
      active.push_back(t);
    }
  }
  const double count = static_cast<double>(triplets.size());
  const std::size_t num_active = active.size();
  const Var loss = g.record("triplet_loss", {embeddings}, Tensor::scalar(total / count),
                            [active = std::move(active), count](BackwardContext& ctx) {
                              const Tensor& ev = ctx.input(0);
                              Tensor& ge = ctx.grad_input(0);
                              const std::size_t dim = ev.dim(1);
                              const double coef = 2.0 * ctx.grad_output().item() / count;
                              for (const auto& t : active) {
                                const double* a = ev.data() + t.anchor * dim;
                                const double* p = ev.data() + t.positive * dim;
                                const double* n = ev.data() + t.negative * dim;
                                double* ga = ge.data() + t.anchor * dim;
                                double* gp = ge.data() + t.positive * dim;
                                double* gn = ge.data() + t.negative * dim;
                                for (std::size_t k = 0; k < dim; ++k) {
                                  ga[k] += coef * (n[k] - p[k]);
                                  gp[k] -= coef * (a[k] - p[k]);
                                  gn[k] += coef * (a[k] - n[k]);
                                }
                              }
                            });
  return {loss, num_active};
}

HybridLoss hybrid_loss(Graph& g, Var logits, Var embeddings, std::span<const int> labels, const MarginConfig& margins) {
  validate(margins);
  if (g.value(logits).rank() != 2 || g.value(embeddings).rank() != 2 ||
      g.value(logits).dim(0) != g.value(embeddings).dim(0)) {
    throw DimensionError("hybrid_loss: logits " + to_string(g.value(logits).shape()) + " and embeddings " +
                         to_string(g.value(embeddings).shape()) + " disagree on batch size");
  }
  HybridLoss out;
  out.cross_entropy = lm_softmax_ce(g, logits, labels, margins.lm_margin);
  if (margins.triplet_enabled) {
    const TripletMining mined = mine_triplets(g.value(embeddings), labels, margins.mining);
    const TripletLossResult tl = triplet_loss(g, embeddings, mined.triplets, margins.triplet_margin);
    out.triplet = tl.loss;
    out.report.num_triplets_total = mined.triplets.size();
    out.report.num_active_triplets = tl.active;
    out.report.mining_warning = mined.warning;
  } else {
    out.triplet = g.constant(Tensor::scalar(0.0));
  }
  out.total = add(g, out.cross_entropy, out.triplet);
  out.report.loss_e = g.value(out.cross_entropy).item();
  out.report.loss_t = g.value(out.triplet).item();
  out.report.loss_b = g.value(out.total).item();
  return out;
}

}  // namespace convt
