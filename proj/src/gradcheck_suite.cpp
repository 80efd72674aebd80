#include "convt/gradcheck_suite.hpp"

#include <algorithm>
#include <functional>
#include <map>
#include <sstream>

#include "convt/error.hpp"
#include "convt/losses.hpp"
#include "convt/model.hpp"
#include "convt/ops.hpp"
#include "convt/rng.hpp"

namespace convt {

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

// Contracts a non-scalar output with fixed random weights so every output
// coordinate contributes to the checked scalar.
Var project(Graph& g, Var out, std::uint64_t seed) {
  Rng rng(derive_seed({seed, 0x70726f6aULL}));
  const Var w = g.constant(random_tensor(g.value(out).shape(), rng));
  return sum(g, mul(g, out, w));
}

struct Case {
  std::vector<Shape> shapes;
  std::function<Var(Graph&, std::span<const Var>)> fn;
};

const std::map<std::string, Case>& cases() {
  static const std::map<std::string, Case> table = [] {
    std::map<std::string, Case> t;
    t["add"] = {{{3, 4}, {3, 4}}, [](Graph& g, std::span<const Var> x) { return project(g, add(g, x[0], x[1]), 1); }};
    t["add_broadcast"] = {{{2, 3, 4}, {4}},
                          [](Graph& g, std::span<const Var> x) { return project(g, add(g, x[0], x[1]), 2); }};
    t["mul"] = {{{3, 4}, {3, 4}}, [](Graph& g, std::span<const Var> x) { return project(g, mul(g, x[0], x[1]), 3); }};
    t["scale"] = {{{5}}, [](Graph& g, std::span<const Var> x) { return project(g, scale(g, x[0], -2.5), 4); }};
    t["sum"] = {{{2, 3}}, [](Graph& g, std::span<const Var> x) { return sum(g, x[0]); }};
    t["mean"] = {{{2, 3, 4}}, [](Graph& g, std::span<const Var> x) { return project(g, mean(g, x[0], 1), 5); }};
    t["matmul"] = {{{3, 4}, {4, 2}},
                   [](Graph& g, std::span<const Var> x) { return project(g, matmul(g, x[0], x[1]), 6); }};
    t["matmul_batched"] = {{{2, 3, 4}, {2, 4, 5}},
                           [](Graph& g, std::span<const Var> x) { return project(g, matmul(g, x[0], x[1]), 7); }};
    t["linear"] = {{{2, 3, 4}, {4, 5}, {5}},
                   [](Graph& g, std::span<const Var> x) { return project(g, linear(g, x[0], x[1], x[2]), 8); }};
    t["permute"] = {{{2, 3, 4}},
                    [](Graph& g, std::span<const Var> x) { return project(g, permute(g, x[0], {2, 0, 1}), 9); }};
    t["reshape"] = {{{2, 6}}, [](Graph& g, std::span<const Var> x) { return project(g, reshape(g, x[0], {3, 4}), 10); }};
    t["conv2d"] = {{{2, 2, 5, 5}, {3, 2, 3, 3}, {3}}, [](Graph& g, std::span<const Var> x) {
                     return project(g, conv2d(g, x[0], x[1], x[2], {2, 1, 1}), 11);
                   }};
    t["conv2d_channels_last"] = {{{2, 5, 5, 2}, {3, 2, 3, 3}, {3}}, [](Graph& g, std::span<const Var> x) {
                                   return project(g, conv2d_channels_last(g, x[0], x[1], x[2], {2, 1, 1}), 12);
                                 }};
    t["layer_norm"] = {{{3, 6}, {6}, {6}}, [](Graph& g, std::span<const Var> x) {
                         return project(g, layer_norm(g, x[0], x[1], x[2]), 13);
                       }};
    t["softmax"] = {{{3, 5}}, [](Graph& g, std::span<const Var> x) { return project(g, softmax(g, x[0], 1), 14); }};
    t["softmax_axis0"] = {{{4, 3}},
                          [](Graph& g, std::span<const Var> x) { return project(g, softmax(g, x[0], 0), 15); }};
    t["gelu"] = {{{4, 5}}, [](Graph& g, std::span<const Var> x) { return project(g, gelu(g, x[0]), 16); }};
    t["attention"] = {{{2, 5, 6}, {2, 5, 6}, {2, 5, 6}}, [](Graph& g, std::span<const Var> x) {
                        return project(g, scaled_dot_product_attention(g, x[0], x[1], x[2], 2), 17);
                      }};
    t["lm_softmax_ce"] = {{{4, 3}}, [](Graph& g, std::span<const Var> x) {
                            const std::vector<int> labels{0, 2, 1, 2};
                            return lm_softmax_ce(g, x[0], labels, 0.35);
                          }};
    t["triplet_loss"] = {{{6, 4}}, [](Graph& g, std::span<const Var> x) {
                           const std::vector<int> labels{0, 0, 1, 1, 2, 2};
                           const auto mined = mine_triplets(g.value(x[0]), labels, Mining::BatchAll);
                           return triplet_loss(g, x[0], mined.triplets, 0.3).loss;
                         }};
    t["hybrid_loss"] = {{{6, 3}, {6, 4}}, [](Graph& g, std::span<const Var> x) {
                          const std::vector<int> labels{0, 0, 1, 1, 2, 2};
                          return hybrid_loss(g, x[0], x[1], labels, MarginConfig{}).total;
                        }};
    return t;
  }();
  return table;
}

}  // namespace

const std::vector<std::string>& gradcheck_op_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n;
    for (const auto& [k, _] : cases()) n.push_back(k);
    n.push_back("model");
    return n;
  }();
  return names;
}

FiniteDiffReport gradcheck_model(const FiniteDiffOptions& options) {
  ConvTConfig cfg;
  cfg.input_height = 16;
  cfg.input_width = 16;
  cfg.num_classes = 4;
  cfg.patch_size = 2;
  cfg.stages = {{8, 3, 3, 1, 2, 1}, {16, 3, 3, 2, 2, 1}};
  cfg.seed = options.seed;
  ConvTModel model(cfg);
  // Position tables start near zero; spread them so their gradients are not
  // dominated by round-off.
  Rng rng(derive_seed({options.seed, 0x6d6f64656cULL}));
  for (auto* p : model.parameters()) {
    if (p->name.ends_with("position") || p->name.find("norm") != std::string::npos) {
      for (double& v : p->value.values()) v += rng.uniform(-0.5, 0.5);
    }
  }
  const Tensor images = random_tensor({6, 1, 16, 16}, rng, 0.0, 1.0);
  const std::vector<int> labels{0, 0, 1, 1, 2, 3};
  const MarginConfig margins;

  std::vector<Tensor*> params;
  std::vector<Tensor> analytic;
  {
    Graph g;
    const auto out = model.forward(g, images);
    g.backward(hybrid_loss(g, out.logits, out.embedding, labels, margins).total);
    const Gradients grads = g.parameter_gradients();
    for (auto* p : model.parameters()) {
      params.push_back(&p->value);
      analytic.push_back(grads.at(*p));
    }
  }
  const auto f = [&]() {
    Graph g(false);
    const auto out = model.forward(g, images);
    return g.value(hybrid_loss(g, out.logits, out.embedding, labels, margins).total).item();
  };
  return finite_diff_check(f, params, analytic, options);
}

std::vector<OpCheck> run_gradcheck_suite(const std::string& ops, const FiniteDiffOptions& options) {
  std::vector<std::string> selected;
  if (ops == "all") {
    selected = gradcheck_op_names();
  } else {
    std::stringstream in(ops);
    for (std::string name; std::getline(in, name, ',');) {
      if (name.empty()) continue;
      if (name != "model" && !cases().contains(name)) throw ConfigError("unknown gradcheck op '" + name + "'");
      selected.push_back(name);
    }
  }
  std::vector<OpCheck> out;
  for (const auto& name : selected) {
    if (name == "model") {
      out.push_back({name, gradcheck_model(options)});
      continue;
    }
    const Case& c = cases().at(name);
    const auto& names = gradcheck_op_names();
    const auto position = static_cast<std::uint64_t>(std::find(names.begin(), names.end(), name) - names.begin());
    Rng rng(derive_seed({options.seed, position}));
    std::vector<Tensor> inputs;
    for (const auto& s : c.shapes) inputs.push_back(random_tensor(s, rng));
    out.push_back({name, gradcheck(c.fn, std::move(inputs), options)});
  }
  return out;
}

}  // namespace convt
