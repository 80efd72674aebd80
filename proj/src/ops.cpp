#include "convt/ops.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "convt/error.hpp"

namespace convt {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

ConstMatMap cmap(const double* p, std::size_t rows, std::size_t cols) {
  return ConstMatMap(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
MatMap mmap(double* p, std::size_t rows, std::size_t cols) {
  return MatMap(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

ConstStridedMap strided(const double* p, std::size_t rows, std::size_t cols, std::size_t stride) {
  return ConstStridedMap(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols),
                         Eigen::OuterStride<>(static_cast<Eigen::Index>(stride)));
}
StridedMap strided(double* p, std::size_t rows, std::size_t cols, std::size_t stride) {
  return StridedMap(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols),
                    Eigen::OuterStride<>(static_cast<Eigen::Index>(stride)));
}

// Row-wise max-subtracted softmax of a contiguous rows x cols block, in place.
void softmax_rows(double* p, std::size_t rows, std::size_t cols) {
  auto m = mmap(p, rows, cols);
  m.colwise() -= m.rowwise().maxCoeff();
  m = m.array().exp().matrix();
  m.array().colwise() /= m.rowwise().sum().array();
}

bool is_suffix(const Shape& whole, const Shape& tail) {
  if (tail.size() > whole.size()) return false;
  return std::equal(tail.begin(), tail.end(), whole.end() - static_cast<std::ptrdiff_t>(tail.size()));
}

std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> s(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
  return s;
}

// Broadcast layout of the batch dimensions of a matmul.
struct BatchPlan {
  Shape out_batch;
  std::vector<std::size_t> a_offsets;
  std::vector<std::size_t> b_offsets;
};

BatchPlan plan_batches(const Shape& a, const Shape& b) {
  const Shape ab(a.begin(), a.end() - 2);
  const Shape bb(b.begin(), b.end() - 2);
  const std::size_t rank = std::max(ab.size(), bb.size());
  Shape out(rank), pa(rank, 1), pb(rank, 1);
  std::copy(ab.begin(), ab.end(), pa.begin() + static_cast<std::ptrdiff_t>(rank - ab.size()));
  std::copy(bb.begin(), bb.end(), pb.begin() + static_cast<std::ptrdiff_t>(rank - bb.size()));
  for (std::size_t i = 0; i < rank; ++i) {
    if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1) {
      throw DimensionError("matmul: batch dimensions of " + to_string(a) + " and " + to_string(b) +
                           " do not broadcast");
    }
    out[i] = std::max(pa[i], pb[i]);
  }
  const auto sa = strides_of(pa);
  const auto sb = strides_of(pb);
  const std::size_t a_mat = a[a.size() - 2] * a.back();
  const std::size_t b_mat = b[b.size() - 2] * b.back();
  BatchPlan plan{out, {}, {}};
  const std::size_t count = numel(out);
  plan.a_offsets.resize(count);
  plan.b_offsets.resize(count);
  std::vector<std::size_t> idx(rank, 0);
  for (std::size_t n = 0; n < count; ++n) {
    std::size_t oa = 0, ob = 0;
    for (std::size_t d = 0; d < rank; ++d) {
      if (pa[d] != 1) oa += idx[d] * sa[d];
      if (pb[d] != 1) ob += idx[d] * sb[d];
    }
    plan.a_offsets[n] = oa * a_mat;
    plan.b_offsets[n] = ob * b_mat;
    for (std::size_t d = rank; d-- > 0;) {
      if (++idx[d] < out[d]) break;
      idx[d] = 0;
    }
  }
  return plan;
}

void check_matmul_shapes(const Shape& a, const Shape& b) {
  if (a.size() < 2 || b.size() < 2 || a.back() != b[b.size() - 2]) {
    throw DimensionError("matmul: shape mismatch " + to_string(a) + " x " + to_string(b));
  }
}

// Unfolds one image [C,H,W] into columns [C*kh*kw, Ho*Wo].
void im2col(const double* img, std::size_t channels, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
            const Conv2dOptions& o, std::size_t ho, std::size_t wo, double* cols) {
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj) {
        double* row = cols + ((c * kh + ki) * kw + kj) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * o.stride + ki) - static_cast<std::ptrdiff_t>(o.pad_h);
          double* dst = row + oy * wo;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) {
            std::fill(dst, dst + wo, 0.0);
            continue;
          }
          const double* src = img + (c * h + static_cast<std::size_t>(iy)) * w;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * o.stride + kj) - static_cast<std::ptrdiff_t>(o.pad_w);
            dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) ? 0.0 : src[ix];
          }
        }
      }
    }
  }
}

void col2im(const double* cols, std::size_t channels, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
            const Conv2dOptions& o, std::size_t ho, std::size_t wo, double* img) {
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj) {
        const double* row = cols + ((c * kh + ki) * kw + kj) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * o.stride + ki) - static_cast<std::ptrdiff_t>(o.pad_h);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          double* dst = img + (c * h + static_cast<std::size_t>(iy)) * w;
          const double* src = row + oy * wo;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * o.stride + kj) - static_cast<std::ptrdiff_t>(o.pad_w);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(w)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

Var add(Graph& g, Var a, Var b) {
  const Tensor& av = g.value(a);
  const Tensor& bv = g.value(b);
  if (!is_suffix(av.shape(), bv.shape())) {
    throw DimensionError("add: shape " + to_string(bv.shape()) + " does not broadcast onto " + to_string(av.shape()));
  }
  Tensor out = av;
  const std::size_t bn = bv.size();
  for (std::size_t r = 0; r < out.size(); r += bn) {
    double* dst = out.data() + r;
    for (std::size_t i = 0; i < bn; ++i) dst[i] += bv[i];
  }
  return g.record("add", {a, b}, std::move(out), [](BackwardContext& ctx) {
    const Tensor& go = ctx.grad_output();
    if (ctx.needs_grad(0)) {
      Tensor& ga = ctx.grad_input(0);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    }
    if (ctx.needs_grad(1)) {
      Tensor& gb = ctx.grad_input(1);
      const std::size_t bn = gb.size();
      for (std::size_t r = 0; r < go.size(); r += bn) {
        const double* src = go.data() + r;
        for (std::size_t i = 0; i < bn; ++i) gb[i] += src[i];
      }
    }
  });
}

Var mul(Graph& g, Var a, Var b) {
  const Tensor& av = g.value(a);
  const Tensor& bv = g.value(b);
  if (av.shape() != bv.shape()) {
    throw DimensionError("mul: shape mismatch " + to_string(av.shape()) + " vs " + to_string(bv.shape()));
  }
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return g.record("mul", {a, b}, std::move(out), [](BackwardContext& ctx) {
    const Tensor& go = ctx.grad_output();
    if (ctx.needs_grad(0)) {
      Tensor& ga = ctx.grad_input(0);
      const Tensor& bv = ctx.input(1);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * bv[i];
    }
    if (ctx.needs_grad(1)) {
      Tensor& gb = ctx.grad_input(1);
      const Tensor& av = ctx.input(0);
      for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * av[i];
    }
  });
}

Var scale(Graph& g, Var a, double factor) {
  Tensor out = g.value(a);
  for (auto& v : out.values()) v *= factor;
  return g.record("scale", {a}, std::move(out), [factor](BackwardContext& ctx) {
    const Tensor& go = ctx.grad_output();
    Tensor& ga = ctx.grad_input(0);
    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += factor * go[i];
  });
}

Var sum(Graph& g, Var a) {
  double total = 0.0;
  for (double v : g.value(a).values()) total += v;
  return g.record("sum", {a}, Tensor::scalar(total), [](BackwardContext& ctx) {
    const double go = ctx.grad_output().item();
    for (auto& v : ctx.grad_input(0).values()) v += go;
  });
}

Var mean(Graph& g, Var a, int axis) {
  const Tensor& av = g.value(a);
  const std::size_t ax = normalize_axis(axis, av.rank());
  const Shape& s = av.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= s[i];
  for (std::size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[ax];
  Shape out_shape = s;
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
  Tensor out(out_shape, 0.0);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t k = 0; k < n; ++k) {
      const double* src = av.data() + (o * n + k) * inner;
      double* dst = out.data() + o * inner;
      for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  }
  const double inv = 1.0 / static_cast<double>(n);
  for (auto& v : out.values()) v *= inv;
  return g.record("mean", {a}, std::move(out), [outer, inner, n, inv](BackwardContext& ctx) {
    const Tensor& go = ctx.grad_output();
    Tensor& ga = ctx.grad_input(0);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t k = 0; k < n; ++k) {
        double* dst = ga.data() + (o * n + k) * inner;
        const double* src = go.data() + o * inner;
        for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i] * inv;
      }
    }
  });
}

Tensor matmul_values(const Tensor& a, const Tensor& b) {
  check_matmul_shapes(a.shape(), b.shape());
  const std::size_t m = a.dim(-2), k = a.dim(-1), n = b.dim(-1);
  if (b.rank() == 2) {
    Shape out_shape = a.shape();
    out_shape.back() = n;
    Tensor out(out_shape);
    const std::size_t rows = a.size() / k;
    mmap(out.data(), rows, n).noalias() = cmap(a.data(), rows, k) * cmap(b.data(), k, n);
    return out;
  }
  const BatchPlan plan = plan_batches(a.shape(), b.shape());
  Shape out_shape = plan.out_batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor out(out_shape);
  for (std::size_t i = 0; i < plan.a_offsets.size(); ++i) {
    mmap(out.data() + i * m * n, m, n).noalias() =
        cmap(a.data() + plan.a_offsets[i], m, k) * cmap(b.data() + plan.b_offsets[i], k, n);
  }
  return out;
}

Var matmul(Graph& g, Var a, Var b) {
  Tensor out = matmul_values(g.value(a), g.value(b));
  return g.record("matmul", {a, b}, std::move(out), [](BackwardContext& ctx) {
    const Tensor& av = ctx.input(0);
    const Tensor& bv = ctx.input(1);
    const Tensor& go = ctx.grad_output();
    const std::size_t m = av.dim(-2), k = av.dim(-1), n = bv.dim(-1);
    if (bv.rank() == 2) {
      const std::size_t rows = av.size() / k;
      if (ctx.needs_grad(0)) {
        mmap(ctx.grad_input(0).data(), rows, k).noalias() += cmap(go.data(), rows, n) * cmap(bv.data(), k, n).transpose();
      }
      if (ctx.needs_grad(1)) {
        mmap(ctx.grad_input(1).data(), k, n).noalias() += cmap(av.data(), rows, k).transpose() * cmap(go.data(), rows, n);
      }
      return;
    }
    const BatchPlan plan = plan_batches(av.shape(), bv.shape());
    for (std::size_t i = 0; i < plan.a_offsets.size(); ++i) {
      const auto gslice = cmap(go.data() + i * m * n, m, n);
      if (ctx.needs_grad(0)) {
        mmap(ctx.grad_input(0).data() + plan.a_offsets[i], m, k).noalias() +=
            gslice * cmap(bv.data() + plan.b_offsets[i], k, n).transpose();
      }
      if (ctx.needs_grad(1)) {
        mmap(ctx.grad_input(1).data() + plan.b_offsets[i], k, n).noalias() +=
            cmap(av.data() + plan.a_offsets[i], m, k).transpose() * gslice;
      }
    }
  });
}

Var linear(Graph& g, Var x, Var weight, std::optional<Var> bias) {
  const Tensor& xv = g.value(x);
  const Tensor& wv = g.value(weight);
  if (xv.rank() < 1 || wv.rank() != 2 || xv.dim(-1) != wv.dim(0)) {
    throw DimensionError("linear: shape mismatch " + to_string(xv.shape()) + " x " + to_string(wv.shape()));
  }
  const std::size_t in = wv.dim(0), outn = wv.dim(1), rows = xv.size() / in;
  if (bias && g.value(*bias).shape() != Shape{outn}) {
    throw DimensionError("linear: bias shape " + to_string(g.value(*bias).shape()) + " for " + std::to_string(outn) +
                         " outputs");
  }
  Shape out_shape = xv.shape();
  out_shape.back() = outn;
  Tensor out(out_shape);
  auto om = mmap(out.data(), rows, outn);
  om.noalias() = cmap(xv.data(), rows, in) * cmap(wv.data(), in, outn);
  if (bias) {
    const Tensor& bv = g.value(*bias);
    om.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bv.data(), static_cast<Eigen::Index>(outn));
  }
  std::vector<Var> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  const bool has_bias = bias.has_value();
  return g.record("linear", std::move(inputs), std::move(out), [rows, in, outn, has_bias](BackwardContext& ctx) {
    const auto go = cmap(ctx.grad_output().data(), rows, outn);
    if (ctx.needs_grad(0)) {
      mmap(ctx.grad_input(0).data(), rows, in).noalias() += go * cmap(ctx.input(1).data(), in, outn).transpose();
    }
    if (ctx.needs_grad(1)) {
      mmap(ctx.grad_input(1).data(), in, outn).noalias() += cmap(ctx.input(0).data(), rows, in).transpose() * go;
    }
    if (has_bias && ctx.needs_grad(2)) {
      Eigen::Map<Eigen::RowVectorXd>(ctx.grad_input(2).data(), static_cast<Eigen::Index>(outn)) += go.colwise().sum();
    }
  });
}

Tensor permute_values(const Tensor& a, const std::vector<std::size_t>& perm) {
  const Shape& s = a.shape();
  if (perm.size() != s.size()) {
    throw DimensionError("permute: " + std::to_string(perm.size()) + " axes given for shape " + to_string(s));
  }
  std::vector<bool> seen(s.size(), false);
  for (auto p : perm) {
    if (p >= s.size() || seen[p]) throw DimensionError("permute: invalid axis order for shape " + to_string(s));
    seen[p] = true;
  }
  const auto in_strides = strides_of(s);
  Shape out_shape(s.size());
  std::vector<std::size_t> step(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    out_shape[i] = s[perm[i]];
    step[i] = in_strides[perm[i]];
  }
  Tensor out(out_shape);
  if (s.empty()) {
    out[0] = a[0];
    return out;
  }
  const std::size_t last = s.size() - 1;
  const std::size_t inner = out_shape[last];
  const std::size_t inner_step = step[last];
  std::vector<std::size_t> idx(s.size(), 0);
  std::size_t src = 0;
  for (std::size_t o = 0; o < out.size(); o += inner) {
    const double* from = a.data() + src;
    double* to = out.data() + o;
    for (std::size_t i = 0; i < inner; ++i) to[i] = from[i * inner_step];
    for (std::size_t d = last; d-- > 0;) {
      src += step[d];
      if (++idx[d] < out_shape[d]) break;
      src -= step[d] * out_shape[d];
      idx[d] = 0;
    }
  }
  return out;
}

Var permute(Graph& g, Var a, std::vector<std::size_t> perm) {
  Tensor out = permute_values(g.value(a), perm);
  std::vector<std::size_t> inverse(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inverse[perm[i]] = i;
  return g.record("permute", {a}, std::move(out), [inverse = std::move(inverse)](BackwardContext& ctx) {
    const Tensor back = permute_values(ctx.grad_output(), inverse);
    Tensor& ga = ctx.grad_input(0);
    for (std::size_t i = 0; i < back.size(); ++i) ga[i] += back[i];
  });
}

Var reshape(Graph& g, Var a, Shape shape) {
  Tensor out = g.value(a).reshaped(std::move(shape));
  return g.record("reshape", {a}, std::move(out), [](BackwardContext& ctx) {
    const Tensor& go = ctx.grad_output();
    Tensor& ga = ctx.grad_input(0);
    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
  });
}

std::size_t conv_output_size(std::size_t input, std::size_t kernel, std::size_t stride, std::size_t padding) {
  if (stride == 0) throw ConfigError("conv2d: stride must be >= 1");
  if (input + 2 * padding < kernel) {
    throw DimensionError("conv2d: kernel extent " + std::to_string(kernel) + " exceeds padded input " +
                         std::to_string(input + 2 * padding));
  }
  return (input + 2 * padding - kernel) / stride + 1;
}

Var conv2d(Graph& g, Var input, Var kernel, std::optional<Var> bias, Conv2dOptions options) {
  const Tensor& x = g.value(input);
  const Tensor& w = g.value(kernel);
  if (x.rank() != 4 || w.rank() != 4 || x.dim(1) != w.dim(1)) {
    throw DimensionError("conv2d: input " + to_string(x.shape()) + " incompatible with kernel " + to_string(w.shape()));
  }
  const std::size_t batch = x.dim(0), channels = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t filters = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const std::size_t ho = conv_output_size(h, kh, options.stride, options.pad_h);
  const std::size_t wo = conv_output_size(wd, kw, options.stride, options.pad_w);
  if (bias && g.value(*bias).shape() != Shape{filters}) {
    throw DimensionError("conv2d: bias shape " + to_string(g.value(*bias).shape()) + " for " +
                         std::to_string(filters) + " filters");
  }
  const std::size_t patch = channels * kh * kw;
  const std::size_t pixels = ho * wo;
  Tensor out(Shape{batch, filters, ho, wo});
  AlignedBuffer cols(patch * pixels);
  const auto wmat = cmap(w.data(), filters, patch);
  for (std::size_t b = 0; b < batch; ++b) {
    im2col(x.data() + b * channels * h * wd, channels, h, wd, kh, kw, options, ho, wo, cols.data());
    auto ob = mmap(out.data() + b * filters * pixels, filters, pixels);
    ob.noalias() = wmat * cmap(cols.data(), patch, pixels);
    if (bias) {
      const Tensor& bv = g.value(*bias);
      for (std::size_t f = 0; f < filters; ++f) ob.row(static_cast<Eigen::Index>(f)).array() += bv[f];
    }
  }
  std::vector<Var> inputs{input, kernel};
  if (bias) inputs.push_back(*bias);
  const bool has_bias = bias.has_value();
  return g.record("conv2d", std::move(inputs), std::move(out), [=](BackwardContext& ctx) {
    const Tensor& xv = ctx.input(0);
    const Tensor& wv = ctx.input(1);
    const Tensor& go = ctx.grad_output();
    AlignedBuffer cols_buf(patch * pixels);
    AlignedBuffer dcols(patch * pixels);
    const auto wm = cmap(wv.data(), filters, patch);
    for (std::size_t b = 0; b < batch; ++b) {
      const auto gb = cmap(go.data() + b * filters * pixels, filters, pixels);
      if (ctx.needs_grad(1)) {
        im2col(xv.data() + b * channels * h * wd, channels, h, wd, kh, kw, options, ho, wo, cols_buf.data());
        mmap(ctx.grad_input(1).data(), filters, patch).noalias() +=
            gb * cmap(cols_buf.data(), patch, pixels).transpose();
      }
      if (ctx.needs_grad(0)) {
        mmap(dcols.data(), patch, pixels).noalias() = wm.transpose() * gb;
        col2im(dcols.data(), channels, h, wd, kh, kw, options, ho, wo,
               ctx.grad_input(0).data() + b * channels * h * wd);
      }
      if (has_bias && ctx.needs_grad(2)) {
        Tensor& gbias = ctx.grad_input(2);
        for (std::size_t f = 0; f < filters; ++f) gbias[f] += gb.row(static_cast<Eigen::Index>(f)).sum();
      }
    }
  });
}

namespace {

// Gathers receptive fields of channels-last images [first, last) into rows
// [(b * Ho + oy) * Wo + ox, (ki * kw + kj) * C + c].
struct ChannelsLastGeometry {
  std::size_t h, w, c, kh, kw, ho, wo;
  Conv2dOptions o;
  std::size_t row_len() const { return kh * kw * c; }
};

void im2row(const double* x, const ChannelsLastGeometry& gm, std::size_t first, std::size_t last, double* rows) {
  const std::size_t len = gm.row_len();
  for (std::size_t b = first; b < last; ++b) {
    const double* img = x + b * gm.h * gm.w * gm.c;
    for (std::size_t oy = 0; oy < gm.ho; ++oy) {
      for (std::size_t ox = 0; ox < gm.wo; ++ox) {
        double* dst = rows + (((b - first) * gm.ho + oy) * gm.wo + ox) * len;
        for (std::size_t ki = 0; ki < gm.kh; ++ki) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * gm.o.stride + ki) - static_cast<std::ptrdiff_t>(gm.o.pad_h);
          for (std::size_t kj = 0; kj < gm.kw; ++kj) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * gm.o.stride + kj) - static_cast<std::ptrdiff_t>(gm.o.pad_w);
            double* seg = dst + (ki * gm.kw + kj) * gm.c;
            if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(gm.h) || ix >= static_cast<std::ptrdiff_t>(gm.w)) {
              std::fill(seg, seg + gm.c, 0.0);
            } else {
              const double* src = img + (static_cast<std::size_t>(iy) * gm.w + static_cast<std::size_t>(ix)) * gm.c;
              std::copy(src, src + gm.c, seg);
            }
          }
        }
      }
    }
  }
}

void row2im(const double* rows, const ChannelsLastGeometry& gm, std::size_t first, std::size_t last, double* x) {
  const std::size_t len = gm.row_len();
  for (std::size_t b = first; b < last; ++b) {
    double* img = x + b * gm.h * gm.w * gm.c;
    for (std::size_t oy = 0; oy < gm.ho; ++oy) {
      for (std::size_t ox = 0; ox < gm.wo; ++ox) {
        const double* src = rows + (((b - first) * gm.ho + oy) * gm.wo + ox) * len;
        for (std::size_t ki = 0; ki < gm.kh; ++ki) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * gm.o.stride + ki) - static_cast<std::ptrdiff_t>(gm.o.pad_h);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(gm.h)) continue;
          for (std::size_t kj = 0; kj < gm.kw; ++kj) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * gm.o.stride + kj) - static_cast<std::ptrdiff_t>(gm.o.pad_w);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(gm.w)) continue;
            const double* seg = src + (ki * gm.kw + kj) * gm.c;
            double* dst = img + (static_cast<std::size_t>(iy) * gm.w + static_cast<std::size_t>(ix)) * gm.c;
            for (std::size_t c = 0; c < gm.c; ++c) dst[c] += seg[c];
          }
        }
      }
    }
  }
}

// [F,C,kh,kw] <-> [(ki * kw + kj) * C + c, F]
RowMat pack_kernel(const Tensor& k) {
  const std::size_t f = k.dim(0), c = k.dim(1), kh = k.dim(2), kw = k.dim(3);
  RowMat packed(static_cast<Eigen::Index>(kh * kw * c), static_cast<Eigen::Index>(f));
  for (std::size_t fi = 0; fi < f; ++fi)
    for (std::size_t ci = 0; ci < c; ++ci)
      for (std::size_t ki = 0; ki < kh; ++ki)
        for (std::size_t kj = 0; kj < kw; ++kj)
          packed(static_cast<Eigen::Index>((ki * kw + kj) * c + ci), static_cast<Eigen::Index>(fi)) =
              k[((fi * c + ci) * kh + ki) * kw + kj];
  return packed;
}

void unpack_kernel_add(const RowMat& packed, Tensor& k) {
  const std::size_t f = k.dim(0), c = k.dim(1), kh = k.dim(2), kw = k.dim(3);
  for (std::size_t fi = 0; fi < f; ++fi)
    for (std::size_t ci = 0; ci < c; ++ci)
      for (std::size_t ki = 0; ki < kh; ++ki)
        for (std::size_t kj = 0; kj < kw; ++kj)
          k[((fi * c + ci) * kh + ki) * kw + kj] +=
              packed(static_cast<Eigen::Index>((ki * kw + kj) * c + ci), static_cast<Eigen::Index>(fi));
}

// Images per GEMM chunk: keeps the unfolded rows buffer around 2k rows.
std::size_t chunk_images(std::size_t pixels) { return std::max<std::size_t>(1, 2048 / std::max<std::size_t>(1, pixels)); }

}  // namespace

Var conv2d_channels_last(Graph& g, Var input, Var kernel, std::optional<Var> bias, Conv2dOptions options) {
  const Tensor& x = g.value(input);
  const Tensor& k = g.value(kernel);
  if (x.rank() != 4 || k.rank() != 4 || x.dim(3) != k.dim(1)) {
    throw DimensionError("conv2d_channels_last: input " + to_string(x.shape()) + " incompatible with kernel " +
                         to_string(k.shape()));
  }
  const std::size_t batch = x.dim(0), filters = k.dim(0);
  ChannelsLastGeometry gm{x.dim(1), x.dim(2), x.dim(3), k.dim(2), k.dim(3), 0, 0, options};
  gm.ho = conv_output_size(gm.h, gm.kh, options.stride, options.pad_h);
  gm.wo = conv_output_size(gm.w, gm.kw, options.stride, options.pad_w);
  if (bias && g.value(*bias).shape() != Shape{filters}) {
    throw DimensionError("conv2d_channels_last: bias shape " + to_string(g.value(*bias).shape()) + " for " +
                         std::to_string(filters) + " filters");
  }
  const std::size_t pixels = gm.ho * gm.wo, len = gm.row_len(), chunk = chunk_images(pixels);
  const RowMat packed = pack_kernel(k);
  Tensor out(Shape{batch, gm.ho, gm.wo, filters});
  AlignedBuffer rows(chunk * pixels * len);
  for (std::size_t first = 0; first < batch; first += chunk) {
    const std::size_t last = std::min(batch, first + chunk);
    const std::size_t nrows = (last - first) * pixels;
    im2row(x.data(), gm, first, last, rows.data());
    auto om = mmap(out.data() + first * pixels * filters, nrows, filters);
    om.noalias() = cmap(rows.data(), nrows, len) * packed;
    if (bias) {
      om.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(g.value(*bias).data(), static_cast<Eigen::Index>(filters));
    }
  }
  std::vector<Var> inputs{input, kernel};
  if (bias) inputs.push_back(*bias);
  const bool has_bias = bias.has_value();
  return g.record("conv2d_channels_last", std::move(inputs), std::move(out), [=](BackwardContext& ctx) {
    const Tensor& go = ctx.grad_output();
    const RowMat wp = pack_kernel(ctx.input(1));
    RowMat dpacked = RowMat::Zero(wp.rows(), wp.cols());
    AlignedBuffer buf(chunk * pixels * len);
    for (std::size_t first = 0; first < batch; first += chunk) {
      const std::size_t last = std::min(batch, first + chunk);
      const std::size_t nrows = (last - first) * pixels;
      const auto gm_out = cmap(go.data() + first * pixels * filters, nrows, filters);
      if (ctx.needs_grad(1)) {
        im2row(ctx.input(0).data(), gm, first, last, buf.data());
        dpacked.noalias() += cmap(buf.data(), nrows, len).transpose() * gm_out;
      }
      if (ctx.needs_grad(0)) {
        mmap(buf.data(), nrows, len).noalias() = gm_out * wp.transpose();
        row2im(buf.data(), gm, first, last, ctx.grad_input(0).data());
      }
      if (has_bias && ctx.needs_grad(2)) {
        Eigen::Map<Eigen::RowVectorXd>(ctx.grad_input(2).data(), static_cast<Eigen::Index>(filters)) +=
            gm_out.colwise().sum();
      }
    }
    if (ctx.needs_grad(1)) unpack_kernel_add(dpacked, ctx.grad_input(1));
  });
}

Var layer_norm(Graph& g, Var x, Var gamma, Var beta, double eps) {
  if (!(eps > 0.0)) throw ConfigError("layer_norm: eps must be positive");
  const Tensor& xv = g.value(x);
  if (xv.rank() == 0) throw DimensionError("layer_norm: input must have a feature axis");
  const std::size_t d = xv.dim(-1);
  if (g.value(gamma).shape() != Shape{d} || g.value(beta).shape() != Shape{d}) {
    throw DimensionError("layer_norm: gamma/beta must have shape [" + std::to_string(d) + "]");
  }
  const Tensor& gm = g.value(gamma);
  const Tensor& bt = g.value(beta);
  const std::size_t rows = xv.size() / d;
  Tensor out(xv.shape());
  std::vector<double> mu(rows), rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = xv.data() + r * d;
    double m = 0.0;
    for (std::size_t i = 0; i < d; ++i) m += src[i];
    m /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) var += (src[i] - m) * (src[i] - m);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + eps);
    mu[r] = m;
    rstd[r] = rs;
    double* dst = out.data() + r * d;
    for (std::size_t i = 0; i < d; ++i) dst[i] = gm[i] * (src[i] - m) * rs + bt[i];
  }
  return g.record("layer_norm", {x, gamma, beta}, std::move(out),
                  [d, rows, mu = std::move(mu), rstd = std::move(rstd)](BackwardContext& ctx) {
                    const Tensor& xv = ctx.input(0);
                    const Tensor& gm = ctx.input(1);
                    const Tensor& go = ctx.grad_output();
                    std::vector<double> xhat(d), dxhat(d);
                    for (std::size_t r = 0; r < rows; ++r) {
                      const double* src = xv.data() + r * d;
                      const double* gr = go.data() + r * d;
                      double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                      for (std::size_t i = 0; i < d; ++i) {
                        xhat[i] = (src[i] - mu[r]) * rstd[r];
                        dxhat[i] = gr[i] * gm[i];
                        sum_dxhat += dxhat[i];
                        sum_dxhat_xhat += dxhat[i] * xhat[i];
                      }
                      if (ctx.needs_grad(0)) {
                        double* gx = ctx.grad_input(0).data() + r * d;
                        const double inv_d = 1.0 / static_cast<double>(d);
                        for (std::size_t i = 0; i < d; ++i) {
                          gx[i] += rstd[r] * (dxhat[i] - inv_d * sum_dxhat - xhat[i] * inv_d * sum_dxhat_xhat);
                        }
                      }
                      if (ctx.needs_grad(1)) {
                        Tensor& gg = ctx.grad_input(1);
                        for (std::size_t i = 0; i < d; ++i) gg[i] += gr[i] * xhat[i];
                      }
                      if (ctx.needs_grad(2)) {
                        Tensor& gbeta = ctx.grad_input(2);
                        for (std::size_t i = 0; i < d; ++i) gbeta[i] += gr[i];
                      }
                    }
                  });
}

Var softmax(Graph& g, Var x, int axis) {
  const Tensor& xv = g.value(x);
  const std::size_t ax = normalize_axis(axis, xv.rank());
  const Shape& s = xv.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= s[i];
  for (std::size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[ax];
  Tensor out(s);
  if (inner == 1) {
    out = xv;
    softmax_rows(out.data(), outer, n);
  }
  for (std::size_t o = 0; o < outer && inner > 1; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const double* src = xv.data() + o * n * inner + i;
      double* dst = out.data() + o * n * inner + i;
      double mx = src[0];
      for (std::size_t k = 1; k < n; ++k) mx = std::max(mx, src[k * inner]);
      double total = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        dst[k * inner] = std::exp(src[k * inner] - mx);
        total += dst[k * inner];
      }
      const double inv = 1.0 / total;
      for (std::size_t k = 0; k < n; ++k) dst[k * inner] *= inv;
    }
  }
  return g.record("softmax", {x}, std::move(out), [outer, inner, n](BackwardContext& ctx) {
    const Tensor& y = ctx.output();
    const Tensor& go = ctx.grad_output();
    Tensor& gx = ctx.grad_input(0);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * n * inner + i;
        double dot = 0.0;
        for (std::size_t k = 0; k < n; ++k) dot += go[base + k * inner] * y[base + k * inner];
        for (std::size_t k = 0; k < n; ++k) {
          gx[base + k * inner] += y[base + k * inner] * (go[base + k * inner] - dot);
        }
      }
    }
  });
}

Var gelu(Graph& g, Var x) {
  Tensor out = g.value(x);
  for (auto& v : out.values()) v = 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
  return g.record("gelu", {x}, std::move(out), [](BackwardContext& ctx) {
    const Tensor& xv = ctx.input(0);
    const Tensor& go = ctx.grad_output();
    Tensor& gx = ctx.grad_input(0);
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const double v = xv[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      gx[i] += go[i] * (cdf + v * pdf);
    }
  });
}

Var scaled_dot_product_attention(Graph& g, Var q, Var k, Var v, std::size_t num_heads, Tensor* weights) {
  const Tensor& qv = g.value(q);
  const Tensor& kv = g.value(k);
  const Tensor& vv = g.value(v);
  if (qv.rank() != 3 || kv.shape() != qv.shape() || vv.shape() != qv.shape()) {
    throw DimensionError("attention: q/k/v shapes " + to_string(qv.shape()) + ", " + to_string(kv.shape()) + ", " +
                         to_string(vv.shape()) + " must all be [B,N,C]");
  }
  const std::size_t batch = qv.dim(0), n = qv.dim(1), c = qv.dim(2);
  if (num_heads == 0 || c % num_heads != 0) {
    throw ConfigError("attention: " + std::to_string(c) + " channels not divisible by " + std::to_string(num_heads) +
                      " heads");
  }
  const std::size_t dk = c / num_heads;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dk));
  Tensor probs(Shape{batch, num_heads, n, n});
  Tensor out(qv.shape());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < num_heads; ++h) {
      const std::size_t off = b * n * c + h * dk;
      double* p = probs.data() + (b * num_heads + h) * n * n;
      auto pm = mmap(p, n, n);
      pm.noalias() = strided(qv.data() + off, n, dk, c) * strided(kv.data() + off, n, dk, c).transpose();
      pm *= inv_scale;
      softmax_rows(p, n, n);
      strided(out.data() + off, n, dk, c).noalias() = pm * strided(vv.data() + off, n, dk, c);
    }
  }
  if (weights) *weights = probs;
  return g.record("attention", {q, k, v}, std::move(out),
                  [probs = std::move(probs), batch, num_heads, n, c, dk, inv_scale](BackwardContext& ctx) {
                    const Tensor& qv = ctx.input(0);
                    const Tensor& kv = ctx.input(1);
                    const Tensor& vv = ctx.input(2);
                    const Tensor& go = ctx.grad_output();
                    RowMat dp(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
                    for (std::size_t b = 0; b < batch; ++b) {
                      for (std::size_t h = 0; h < num_heads; ++h) {
                        const std::size_t off = b * n * c + h * dk;
                        const auto pm = cmap(probs.data() + (b * num_heads + h) * n * n, n, n);
                        const auto dout = strided(go.data() + off, n, dk, c);
                        if (ctx.needs_grad(2)) {
                          strided(ctx.grad_input(2).data() + off, n, dk, c).noalias() += pm.transpose() * dout;
                        }
                        if (!ctx.needs_grad(0) && !ctx.needs_grad(1)) continue;
                        dp.noalias() = dout * strided(vv.data() + off, n, dk, c).transpose();
                        // Softmax Jacobian: dS = P o (dP - rowsum(dP o P)).
                        const Eigen::VectorXd row_dot = (dp.array() * pm.array()).rowwise().sum();
                        dp = (pm.array() * (dp.array().colwise() - row_dot.array())).matrix() * inv_scale;
                        if (ctx.needs_grad(0)) {
                          strided(ctx.grad_input(0).data() + off, n, dk, c).noalias() +=
                              dp * strided(kv.data() + off, n, dk, c);
                        }
                        if (ctx.needs_grad(1)) {
                          strided(ctx.grad_input(1).data() + off, n, dk, c).noalias() +=
                              dp.transpose() * strided(qv.data() + off, n, dk, c);
                        }
                      }
                    }
                  });
}

}  // namespace convt
