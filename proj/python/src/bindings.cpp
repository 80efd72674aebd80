#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "convt/augment.hpp"
#include "convt/cli.hpp"
#include "convt/data.hpp"
#include "convt/error.hpp"
#include "convt/gradcheck_suite.hpp"
#include "convt/losses.hpp"
#include "convt/model.hpp"
#include "convt/trainer.hpp"

namespace py = pybind11;
using namespace convt;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  Tensor t(shape);
  std::copy(a.data(), a.data() + a.size(), t.data());
  return t;
}

Array to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array a(shape);
  std::copy(t.data(), t.data() + t.size(), a.mutable_data());
  return a;
}

Image to_image(const Array& a) {
  if (a.ndim() != 2) throw py::value_error("image must be a 2-D array");
  Image img(static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)));
  std::copy(a.data(), a.data() + a.size(), img.pixels.begin());
  return img;
}

Array image_array(const Image& img) {
  Array a({static_cast<py::ssize_t>(img.height), static_cast<py::ssize_t>(img.width)});
  std::copy(img.pixels.begin(), img.pixels.end(), a.mutable_data());
  return a;
}

// images [N, H, W] plus labels -> owned chips and a TrainingSet over them.
struct OwnedSet {
  std::vector<Image> images;
  TrainingSet set;
};

OwnedSet owned_set(const Array& images, const std::vector<int>& labels) {
  if (images.ndim() != 3) throw py::value_error("images must be [N, H, W]");
  const auto n = static_cast<std::size_t>(images.shape(0));
  if (labels.size() != n) throw py::value_error("one label per image required");
  const auto h = static_cast<std::size_t>(images.shape(1)), w = static_cast<std::size_t>(images.shape(2));
  OwnedSet o;
  o.images.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Image img(h, w);
    std::copy(images.data() + i * h * w, images.data() + (i + 1) * h * w, img.pixels.begin());
    o.images.push_back(std::move(img));
  }
  for (std::size_t i = 0; i < n; ++i) o.set.images.push_back(&o.images[i]);
  o.set.labels = labels;
  return o;
}

Dataset make_dataset(const Array& images, const std::vector<int>& labels, const std::vector<double>& poses) {
  OwnedSet o = owned_set(images, labels);
  Dataset ds;
  ds.source = Dataset::Source::Synthetic;
  int classes = 0;
  for (int y : labels) classes = std::max(classes, y + 1);
  for (int c = 0; c < classes; ++c) ds.class_names.push_back("class" + std::to_string(c));
  for (std::size_t i = 0; i < o.images.size(); ++i) {
    ds.chips.push_back({std::move(o.images[i]), labels[i], poses.empty() ? std::nan("") : poses.at(i),
                        "chip" + std::to_string(i)});
  }
  validate(ds);
  return ds;
}

py::dict dataset_dict(const Dataset& ds) {
  const std::size_t n = ds.size(), h = ds.height(), w = ds.width();
  Array images({static_cast<py::ssize_t>(n), static_cast<py::ssize_t>(h), static_cast<py::ssize_t>(w)});
  std::vector<int> labels;
  std::vector<double> poses;
  for (std::size_t i = 0; i < n; ++i) {
    std::copy(ds.chips[i].image.pixels.begin(), ds.chips[i].image.pixels.end(), images.mutable_data() + i * h * w);
    labels.push_back(ds.chips[i].label);
    poses.push_back(ds.chips[i].pose);
  }
  py::dict d;
  d["images"] = images;
  d["labels"] = labels;
  d["poses"] = poses;
  d["class_names"] = ds.class_names;
  return d;
}

py::dict loss_dict(const LossReport& r) {
  py::dict d;
  d["loss_e"] = r.loss_e;
  d["loss_t"] = r.loss_t;
  d["loss_b"] = r.loss_b;
  d["num_triplets"] = r.num_triplets_total;
  d["num_active_triplets"] = r.num_active_triplets;
  d["mining_warning"] = r.mining_warning;
  return d;
}

}  // namespace

PYBIND11_MODULE(_convt, m) {
  m.doc() = "ConvT few-shot recognition core (double precision)";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
  py::register_exception<ContractError>(m, "ContractError", PyExc_RuntimeError);

  py::class_<StageParams>(m, "StageParams")
      .def(py::init<>())
      .def(py::init([](std::size_t c, std::size_t kh, std::size_t kw, std::size_t s, std::size_t h, std::size_t b) {
             return StageParams{c, kh, kw, s, h, b};
           }),
           py::arg("out_channels"), py::arg("kernel_h") = 3, py::arg("kernel_w") = 3, py::arg("stride") = 1,
           py::arg("num_heads") = 1, py::arg("num_encoder_blocks") = 1)
      .def_readwrite("out_channels", &StageParams::out_channels)
      .def_readwrite("kernel_h", &StageParams::kernel_h)
      .def_readwrite("kernel_w", &StageParams::kernel_w)
      .def_readwrite("stride", &StageParams::stride)
      .def_readwrite("num_heads", &StageParams::num_heads)
      .def_readwrite("num_encoder_blocks", &StageParams::num_encoder_blocks);

  py::class_<ConvTConfig>(m, "ConvTConfig")
      .def(py::init<>())
      .def_readwrite("input_height", &ConvTConfig::input_height)
      .def_readwrite("input_width", &ConvTConfig::input_width)
      .def_readwrite("in_channels", &ConvTConfig::in_channels)
      .def_readwrite("num_classes", &ConvTConfig::num_classes)
      .def_readwrite("patch_size", &ConvTConfig::patch_size)
      .def_readwrite("stages", &ConvTConfig::stages)
      .def_readwrite("mlp_ratio", &ConvTConfig::mlp_ratio)
      .def_readwrite("layer_norm_eps", &ConvTConfig::layer_norm_eps)
      .def_readwrite("seed", &ConvTConfig::seed)
      .def("validate", [](const ConvTConfig& c) { validate(c); });

  py::class_<ConvTModel>(m, "ConvTModel")
      .def(py::init<ConvTConfig>(), py::arg("config") = ConvTConfig{})
      .def_property_readonly("config", &ConvTModel::config)
      .def("parameter_count", &ConvTModel::parameter_count)
      .def(
          "forward",
          [](const ConvTModel& model, const Array& images, bool attention) {
            Graph g(false);
            AttentionProbe probe;
            const ModelOutput out = model.forward(g, to_tensor(images), attention ? &probe : nullptr);
            py::dict d;
            d["logits"] = to_array(g.value(out.logits));
            d["embedding"] = to_array(g.value(out.embedding));
            if (attention) {
              py::list weights;
              for (const auto& w : probe.weights) weights.append(to_array(w));
              d["attention"] = weights;
            }
            return d;
          },
          py::arg("images"), py::arg("attention") = false, "images [B, C, H, W] -> dict of logits and embedding")
      .def("parameters",
           [](ConvTModel& model) {
             py::dict d;
             for (auto* p : model.parameters()) d[py::str(p->name)] = to_array(p->value);
             return d;
           })
      .def("set_parameter", [](ConvTModel& model, const std::string& name, const Array& value) {
        Parameter* p = model.find_parameter(name);
        if (!p) throw py::key_error(name);
        Tensor t = to_tensor(value);
        if (t.shape() != p->value.shape()) throw py::value_error("shape mismatch for " + name);
        p->value = std::move(t);
      });

  m.def(
      "flops_estimate",
      [](const ConvTConfig& c) {
        const FlopsEstimate e = flops_estimate(c);
        py::dict d;
        d["conv_macs"] = e.conv_macs;
        d["attention_macs"] = e.attention_macs;
        d["mlp_macs"] = e.mlp_macs;
        d["head_macs"] = e.head_macs;
        d["total_macs"] = e.total_macs;
        py::list layers;
        for (const auto& l : e.conv_layers) {
          layers.append(py::dict(py::arg("name") = l.name, py::arg("out_h") = l.out_h, py::arg("out_w") = l.out_w,
                                 py::arg("kernel_h") = l.kernel_h, py::arg("kernel_w") = l.kernel_w,
                                 py::arg("filters") = l.filters, py::arg("input_maps") = l.input_maps,
                                 py::arg("macs") = l.macs));
        }
        d["conv_layers"] = layers;
        return d;
      },
      py::arg("config") = ConvTConfig{});

  m.def(
      "lm_softmax_ce",
      [](const Array& logits, const std::vector<int>& labels, double margin) {
        Graph g(false);
        return g.value(lm_softmax_ce(g, g.constant(to_tensor(logits)), labels, margin)).item();
      },
      py::arg("logits"), py::arg("labels"), py::arg("lm_margin") = 0.35);

  m.def(
      "mine_triplets",
      [](const Array& embeddings, const std::vector<int>& labels, const std::string& mining) {
        if (mining != "batch_all" && mining != "batch_hard") throw py::value_error("mining: batch_all or batch_hard");
        const auto r = mine_triplets(to_tensor(embeddings), labels,
                                     mining == "batch_all" ? Mining::BatchAll : Mining::BatchHard);
        std::vector<std::tuple<std::size_t, std::size_t, std::size_t>> out;
        for (const auto& t : r.triplets) out.emplace_back(t.anchor, t.positive, t.negative);
        return out;
      },
      py::arg("embeddings"), py::arg("labels"), py::arg("mining") = "batch_all");

  m.def(
      "hybrid_loss",
      [](const Array& logits, const Array& embeddings, const std::vector<int>& labels, double lm_margin,
         double triplet_margin, bool triplet) {
        MarginConfig mc;
        mc.lm_margin = lm_margin;
        mc.triplet_margin = triplet_margin;
        mc.triplet_enabled = triplet;
        Graph g(false);
        return loss_dict(
            hybrid_loss(g, g.constant(to_tensor(logits)), g.constant(to_tensor(embeddings)), labels, mc).report);
      },
      py::arg("logits"), py::arg("embeddings"), py::arg("labels"), py::arg("lm_margin") = 0.35,
      py::arg("triplet_margin") = 0.3, py::arg("triplet") = true);

  py::class_<AutoAugConfig>(m, "AutoAugConfig")
      .def(py::init<>())
      .def_readwrite("n", &AutoAugConfig::n)
      .def_readwrite("k", &AutoAugConfig::k)
      .def_readwrite("d", &AutoAugConfig::d)
      .def_readwrite("m_a", &AutoAugConfig::m_a)
      .def_readwrite("m_each", &AutoAugConfig::m_each)
      .def_readwrite("seed", &AutoAugConfig::seed)
      .def_readwrite("enabled", &AutoAugConfig::enabled);

  py::class_<EpochPolicy>(m, "EpochPolicy")
      .def_readonly("epoch", &EpochPolicy::epoch)
      .def_readonly("m", &EpochPolicy::m)
      .def_readonly("epoch_gate", &EpochPolicy::epoch_gate)
      .def_readonly("chosen", &EpochPolicy::chosen)
      .def_readonly("gate_draws", &EpochPolicy::gate_draws)
      .def_readonly("per_transform_gate", &EpochPolicy::per_transform_gate)
      .def_readonly("magnitudes", &EpochPolicy::magnitudes);

  m.def("transform_names", [] {
    std::vector<std::string> names;
    for (auto n : transform_names()) names.emplace_back(n);
    return names;
  });
  m.def("default_aug_k", &default_aug_k, py::arg("k_shot"));
  m.def("sample_epoch_policy", &sample_epoch_policy, py::arg("config"), py::arg("epoch"));
  m.def(
      "apply_policy",
      [](const EpochPolicy& p, const Array& image, std::uint64_t salt) {
        return image_array(apply_policy(p, to_image(image), salt));
      },
      py::arg("policy"), py::arg("image"), py::arg("salt") = 0);
  m.def(
      "transform",
      [](const std::string& name, double magnitude, const Array& image, int direction) {
        return image_array(transform(name, magnitude, to_image(image), direction));
      },
      py::arg("name"), py::arg("magnitude"), py::arg("image"), py::arg("direction") = 1);
  m.def(
      "policy_space_size", [](const AutoAugConfig& c) { return py::int_(py::str(policy_space_size(c).str())); },
      py::arg("config"));

  py::class_<SynthConfig>(m, "SynthConfig")
      .def(py::init<>())
      .def_readwrite("num_classes", &SynthConfig::num_classes)
      .def_readwrite("chips_per_class", &SynthConfig::chips_per_class)
      .def_readwrite("chip_size", &SynthConfig::chip_size)
      .def_readwrite("speckle_shape", &SynthConfig::speckle_shape)
      .def_readwrite("pose_range", &SynthConfig::pose_range)
      .def_readwrite("seed", &SynthConfig::seed);

  m.def(
      "synth_generate", [](const SynthConfig& c) { return dataset_dict(synth_generate(c)); },
      py::arg("config") = SynthConfig{}, "dict with images [N, H, W], labels, poses, class_names");
  m.def(
      "load_chip_dataset", [](const std::string& root) { return dataset_dict(load_chip_dataset(root)); },
      py::arg("root"));
  m.def(
      "split_by_pose",
      [](const Array& images, const std::vector<int>& labels, const std::vector<double>& poses, double bin) {
        const Split s = split_by_pose(make_dataset(images, labels, poses), bin);
        return py::make_tuple(dataset_dict(s.train), dataset_dict(s.test));
      },
      py::arg("images"), py::arg("labels"), py::arg("poses"), py::arg("bin_width") = 20.0);

  py::class_<TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def_readwrite("epochs", &TrainConfig::epochs)
      .def_readwrite("batch_size", &TrainConfig::batch_size)
      .def_readwrite("learning_rate", &TrainConfig::learning_rate)
      .def_property(
          "optimizer", [](const TrainConfig& c) { return c.optimizer == OptimizerKind::Adam ? "adam" : "sgd_momentum"; },
          [](TrainConfig& c, const std::string& v) {
            if (v != "adam" && v != "sgd_momentum") throw py::value_error("optimizer: adam or sgd_momentum");
            c.optimizer = v == "adam" ? OptimizerKind::Adam : OptimizerKind::SgdMomentum;
          })
      .def_property(
          "lr_schedule", [](const TrainConfig& c) { return c.lr_schedule == LrSchedule::Cosine ? "cosine" : "constant"; },
          [](TrainConfig& c, const std::string& v) {
            if (v != "cosine" && v != "constant") throw py::value_error("lr_schedule: cosine or constant");
            c.lr_schedule = v == "cosine" ? LrSchedule::Cosine : LrSchedule::Constant;
          })
      .def_readwrite("momentum", &TrainConfig::momentum)
      .def_readwrite("weight_decay", &TrainConfig::weight_decay)
      .def_readwrite("seed", &TrainConfig::seed)
      .def_property(
          "lm_margin", [](const TrainConfig& c) { return c.margins.lm_margin; },
          [](TrainConfig& c, double v) { c.margins.lm_margin = v; })
      .def_property(
          "triplet_margin", [](const TrainConfig& c) { return c.margins.triplet_margin; },
          [](TrainConfig& c, double v) { c.margins.triplet_margin = v; })
      .def_property(
          "triplet", [](const TrainConfig& c) { return c.margins.triplet_enabled; },
          [](TrainConfig& c, bool v) { c.margins.triplet_enabled = v; })
      .def_readwrite("aug", &TrainConfig::aug);

  m.def(
      "train",
      [](ConvTModel& model, const Array& images, const std::vector<int>& labels, const TrainConfig& config) {
        const OwnedSet data = owned_set(images, labels);
        std::vector<EpochMetrics> metrics;
        {
          py::gil_scoped_release release;
          Trainer trainer(model, config);
          metrics = trainer.train(data.set);
        }
        std::vector<py::dict> rows;
        for (const auto& e : metrics) {
          py::dict d;
          d["epoch"] = e.epoch;
          d["loss_e"] = e.loss_e;
          d["loss_t"] = e.loss_t;
          d["loss_b"] = e.loss_b;
          d["train_accuracy"] = e.train_accuracy;
          d["aug_gate"] = e.aug_gate;
          d["num_active_triplets"] = e.num_active_triplets;
          rows.push_back(d);
        }
        return rows;
      },
      py::arg("model"), py::arg("images"), py::arg("labels"), py::arg("config") = TrainConfig{},
      "Trains in place; returns per-epoch metrics");

  m.def(
      "accuracy",
      [](const ConvTModel& model, const Array& images, const std::vector<int>& labels) {
        const OwnedSet data = owned_set(images, labels);
        return accuracy(model, data.set);
      },
      py::arg("model"), py::arg("images"), py::arg("labels"));

  m.def(
      "evaluate",
      [](const ConvTModel& model, const Array& images, const std::vector<int>& labels, const std::vector<double>& poses,
         int n_way, int k_shot, int queries, int repeats, std::uint64_t seed) {
        const Dataset ds = make_dataset(images, labels, poses);
        const EvalResult r = evaluate(model, ds, EvalProtocol{n_way, k_shot, queries, repeats, seed});
        py::dict d;
        d["mean"] = r.mean;
        d["standard_error"] = r.standard_error;
        d["repeats"] = r.repeats;
        d["accuracies"] = r.accuracies;
        return d;
      },
      py::arg("model"), py::arg("images"), py::arg("labels"), py::arg("poses") = std::vector<double>{},
      py::arg("n_way") = 10, py::arg("k_shot") = 0, py::arg("queries") = 15, py::arg("repeats") = 20,
      py::arg("seed") = 0);

  m.def(
      "gradcheck",
      [](const std::string& ops) {
        std::vector<std::tuple<std::string, double, bool>> out;
        for (const auto& c : run_gradcheck_suite(ops)) {
          out.emplace_back(c.name, c.report.max_relative_error, c.report.passed);
        }
        return out;
      },
      py::arg("ops") = "all", "per-op (name, max relative error, passed)");

  m.def(
      "cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        const int code = cli::dispatch(args, out, err);
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "runs one convt command line; returns (exit code, stdout, stderr)");
}
