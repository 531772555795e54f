#include "neuroens/nn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <random>

#include "neuroens/error.hpp"
#include "neuroens/random.hpp"

namespace neuroens {

namespace {

std::size_t product(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

struct ConvGeometry {
  std::size_t out_h, out_w, pad_top, pad_left;
};

ConvGeometry conv_geometry(std::size_t h, std::size_t w, std::size_t kh, std::size_t kw, std::size_t stride,
                           Padding padding) {
  if (padding == Padding::same) {
    std::size_t oh = (h + stride - 1) / stride, ow = (w + stride - 1) / stride;
    std::size_t th = (oh - 1) * stride + kh, tw = (ow - 1) * stride + kw;
    std::size_t ph = th > h ? th - h : 0, pw = tw > w ? tw - w : 0;
    return {oh, ow, ph / 2, pw / 2};
  }
  if (h < kh || w < kw) fail(ErrorCode::ShapeMismatch, "valid convolution kernel larger than input");
  return {(h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0};
}

void require_rank(const Shape& s, std::size_t rank, const char* what) {
  if (s.size() != rank)
    fail(ErrorCode::ShapeMismatch, std::string(what) + " expects rank " + std::to_string(rank) + ", got " +
                                       shape_string(s));
}

std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

std::string shape_string(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? ", " : "") + std::to_string(s[i]);
  return out + ")";
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(std::move(shape)), data_(product(shape_), fill) {}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != product(shape_))
    fail(ErrorCode::ShapeMismatch, "tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                                       shape_string(shape_));
}

template <typename T>
void Tensor<T>::reshape(Shape shape) {
  if (product(shape) != data_.size())
    fail(ErrorCode::ShapeMismatch, "cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  shape_ = std::move(shape);
}

template <typename T>
void Tensor<T>::check_finite() const {
  for (T v : data_)
    if (!std::isfinite(v)) fail(ErrorCode::InvalidArgument, "tensor holds a non-finite value");
}

const char* layer_kind_name(LayerKind k) noexcept {
  switch (k) {
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::maxpool2d: return "maxpool2d";
    case LayerKind::relu: return "relu";
    case LayerKind::sigmoid: return "sigmoid";
    case LayerKind::softmax: return "softmax";
    case LayerKind::dropout: return "dropout";
    case LayerKind::flatten: return "flatten";
    case LayerKind::dense: return "dense";
  }
  return "?";
}

LayerSpec LayerSpec::conv(std::size_t out_channels, std::size_t kernel, std::size_t stride, Padding padding) {
  LayerSpec l;
  l.kind = LayerKind::conv2d;
  l.out_channels = out_channels;
  l.kernel_h = l.kernel_w = kernel;
  l.stride = stride;
  l.padding = padding;
  return l;
}

LayerSpec LayerSpec::maxpool(std::size_t pool, std::size_t stride) {
  LayerSpec l;
  l.kind = LayerKind::maxpool2d;
  l.pool = pool;
  l.stride = stride;
  return l;
}

LayerSpec LayerSpec::activation(LayerKind kind) {
  LayerSpec l;
  l.kind = kind;
  return l;
}

LayerSpec LayerSpec::dropout(double rate) {
  LayerSpec l;
  l.kind = LayerKind::dropout;
  l.rate = rate;
  return l;
}

LayerSpec LayerSpec::flatten() {
  LayerSpec l;
  l.kind = LayerKind::flatten;
  return l;
}

LayerSpec LayerSpec::dense(std::size_t units) {
  LayerSpec l;
  l.kind = LayerKind::dense;
  l.units = units;
  return l;
}

Shape layer_output_shape(const LayerSpec& layer, const Shape& in, std::size_t index) {
  auto broken = [&](const std::string& why) -> Shape {
    fail(ErrorCode::ShapeFlowBroken, "layer " + std::to_string(index) + " (" + layer_kind_name(layer.kind) +
                                         "): " + why + ", input " + shape_string(in));
  };
  switch (layer.kind) {
    case LayerKind::conv2d: {
      if (in.size() != 3) return broken("needs an (H, W, C) input");
      if (layer.out_channels == 0 || layer.kernel_h == 0 || layer.kernel_w == 0 || layer.stride == 0)
        return broken("zero-sized kernel, stride or channel count");
      if (layer.padding == Padding::valid && (in[0] < layer.kernel_h || in[1] < layer.kernel_w))
        return broken("kernel larger than input");
      auto g = conv_geometry(in[0], in[1], layer.kernel_h, layer.kernel_w, layer.stride, layer.padding);
      if (g.out_h == 0 || g.out_w == 0) return broken("spatial dims collapse");
      return {g.out_h, g.out_w, layer.out_channels};
    }
    case LayerKind::maxpool2d:
      if (in.size() != 3) return broken("needs an (H, W, C) input");
      if (layer.pool == 0 || layer.stride == 0) return broken("zero pool or stride");
      if (in[0] < layer.pool || in[1] < layer.pool) return broken("input smaller than the pool window");
      return {(in[0] - layer.pool) / layer.stride + 1, (in[1] - layer.pool) / layer.stride + 1, in[2]};
    case LayerKind::dense:
      if (in.size() != 1) return broken("needs a flat input");
      if (layer.units == 0) return broken("zero units");
      return {layer.units};
    case LayerKind::flatten: return {product(in)};
    case LayerKind::dropout:
      if (!(layer.rate >= 0.0 && layer.rate < 1.0)) return broken("dropout rate outside [0, 1)");
      return in;
    case LayerKind::relu:
    case LayerKind::sigmoid: return in;
    case LayerKind::softmax:
      if (in.size() != 1) return broken("needs a flat input");
      return in;
  }
  return in;
}

Shape weight_shape(const LayerSpec& layer, const Shape& in) {
  if (layer.kind == LayerKind::conv2d) return {layer.kernel_h, layer.kernel_w, in[2], layer.out_channels};
  if (layer.kind == LayerKind::dense) return {in[0], layer.units};
  return {};
}

Shape bias_shape(const LayerSpec& layer) {
  if (layer.kind == LayerKind::conv2d) return {layer.out_channels};
  if (layer.kind == LayerKind::dense) return {layer.units};
  return {};
}

// ---- primitives ----------------------------------------------------------------------------

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, std::size_t stride,
                         Padding padding) {
  require_rank(x.shape(), 4, "conv2d input");
  require_rank(w.shape(), 4, "conv2d weight");
  const std::size_t n = x.dim(0), h = x.dim(1), wd = x.dim(2), cin = x.dim(3);
  const std::size_t kh = w.dim(0), kw = w.dim(1), cout = w.dim(3);
  if (w.dim(2) != cin) fail(ErrorCode::ShapeMismatch, "conv2d channel mismatch: input " + shape_string(x.shape()) +
                                                          ", weight " + shape_string(w.shape()));
  if (b.size() != cout) fail(ErrorCode::ShapeMismatch, "conv2d bias length differs from output channels");
  if (stride == 0) fail(ErrorCode::ShapeMismatch, "conv2d stride must be positive");
  auto g = conv_geometry(h, wd, kh, kw, stride, padding);

  Tensor<T> y({n, g.out_h, g.out_w, cout});
  std::vector<double> acc(cout);
  const T* xd = x.ptr();
  const T* wdp = w.ptr();
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t oy = 0; oy < g.out_h; ++oy)
      for (std::size_t ox = 0; ox < g.out_w; ++ox) {
        for (std::size_t co = 0; co < cout; ++co) acc[co] = static_cast<double>(b[co]);
        for (std::size_t ky = 0; ky < kh; ++ky) {
          auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(g.pad_top);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t kx = 0; kx < kw; ++kx) {
            auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(g.pad_left);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
            const T* xp = xd + ((s * h + static_cast<std::size_t>(iy)) * wd + static_cast<std::size_t>(ix)) * cin;
            const T* wp = wdp + (ky * kw + kx) * cin * cout;
            for (std::size_t ci = 0; ci < cin; ++ci) {
              const double xv = static_cast<double>(xp[ci]);
              if (xv == 0.0) continue;
              const T* wr = wp + ci * cout;
              for (std::size_t co = 0; co < cout; ++co) acc[co] += xv * static_cast<double>(wr[co]);
            }
          }
        }
        T* yp = y.ptr() + ((s * g.out_h + oy) * g.out_w + ox) * cout;
        for (std::size_t co = 0; co < cout; ++co) yp[co] = static_cast<T>(acc[co]);
      }
  return y;
}

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& grad_out, std::size_t stride,
                             Padding padding, bool input_grad) {
  require_rank(x.shape(), 4, "conv2d input");
  require_rank(w.shape(), 4, "conv2d weight");
  require_rank(grad_out.shape(), 4, "conv2d gradient");
  const std::size_t n = x.dim(0), h = x.dim(1), wd = x.dim(2), cin = x.dim(3);
  const std::size_t kh = w.dim(0), kw = w.dim(1), cout = w.dim(3);
  if (w.dim(2) != cin) fail(ErrorCode::ShapeMismatch, "conv2d channel mismatch");
  auto g = conv_geometry(h, wd, kh, kw, stride, padding);
  if (grad_out.shape() != Shape{n, g.out_h, g.out_w, cout})
    fail(ErrorCode::ShapeMismatch, "conv2d gradient shape " + shape_string(grad_out.shape()) +
                                       " does not match the forward output");

  std::vector<double> gx(input_grad ? x.size() : 0, 0.0), gw(w.size(), 0.0), gb(cout, 0.0);
  const T* xd = x.ptr();
  const T* wdp = w.ptr();
  std::vector<double> go(cout);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t oy = 0; oy < g.out_h; ++oy)
      for (std::size_t ox = 0; ox < g.out_w; ++ox) {
        const T* gp = grad_out.ptr() + ((s * g.out_h + oy) * g.out_w + ox) * cout;
        bool any = false;
        for (std::size_t co = 0; co < cout; ++co) {
          go[co] = static_cast<double>(gp[co]);
          any = any || go[co] != 0.0;
        }
        if (!any) continue;
        for (std::size_t co = 0; co < cout; ++co) gb[co] += go[co];
        for (std::size_t ky = 0; ky < kh; ++ky) {
          auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(g.pad_top);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t kx = 0; kx < kw; ++kx) {
            auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(g.pad_left);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
            const std::size_t xo = ((s * h + static_cast<std::size_t>(iy)) * wd + static_cast<std::size_t>(ix)) * cin;
            const std::size_t wo = (ky * kw + kx) * cin * cout;
            for (std::size_t ci = 0; ci < cin; ++ci) {
              const double xv = static_cast<double>(xd[xo + ci]);
              const T* wr = wdp + wo + ci * cout;
              double* gwr = gw.data() + wo + ci * cout;
              for (std::size_t co = 0; co < cout; ++co) gwr[co] += xv * go[co];
              if (!input_grad) continue;
              double sum = 0.0;
              for (std::size_t co = 0; co < cout; ++co) sum += static_cast<double>(wr[co]) * go[co];
              gx[xo + ci] += sum;
            }
          }
        }
      }
  ConvGrads<T> out{Tensor<T>(x.shape()), Tensor<T>(w.shape()), Tensor<T>({cout})};
  for (std::size_t i = 0; i < gx.size(); ++i) out.x[i] = static_cast<T>(gx[i]);  // stays zero without input_grad
  for (std::size_t i = 0; i < gw.size(); ++i) out.w[i] = static_cast<T>(gw[i]);
  for (std::size_t i = 0; i < cout; ++i) out.b[i] = static_cast<T>(gb[i]);
  return out;
}

template <typename T>
PoolResult<T> maxpool2d_forward(const Tensor<T>& x, std::size_t pool, std::size_t stride) {
  require_rank(x.shape(), 4, "maxpool2d input");
  const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  if (pool == 0 || stride == 0 || h < pool || w < pool)
    fail(ErrorCode::ShapeMismatch, "maxpool2d window " + std::to_string(pool) + " does not fit input " +
                                       shape_string(x.shape()));
  const std::size_t oh = (h - pool) / stride + 1, ow = (w - pool) / stride + 1;
  PoolResult<T> r{Tensor<T>({n, oh, ow, c}), std::vector<std::uint32_t>(n * oh * ow * c)};
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox)
        for (std::size_t ch = 0; ch < c; ++ch) {
          std::size_t best = ((s * h + oy * stride) * w + ox * stride) * c + ch;
          for (std::size_t py = 0; py < pool; ++py)
            for (std::size_t px = 0; px < pool; ++px) {
              std::size_t idx = ((s * h + oy * stride + py) * w + ox * stride + px) * c + ch;
              if (x[idx] > x[best]) best = idx;
            }
          std::size_t o = ((s * oh + oy) * ow + ox) * c + ch;
          r.out[o] = x[best];
          r.argmax[o] = static_cast<std::uint32_t>(best);
        }
  return r;
}

template <typename T>
Tensor<T> maxpool2d_backward(const Shape& input_shape, const std::vector<std::uint32_t>& argmax,
                             const Tensor<T>& grad_out) {
  if (argmax.size() != grad_out.size()) fail(ErrorCode::ShapeMismatch, "maxpool2d gradient does not match indices");
  Tensor<T> gx(input_shape);
  for (std::size_t o = 0; o < argmax.size(); ++o) gx[argmax[o]] += grad_out[o];
  return gx;
}

template <typename T>
Tensor<T> dense_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  require_rank(x.shape(), 2, "dense input");
  require_rank(w.shape(), 2, "dense weight");
  const std::size_t n = x.dim(0), d = x.dim(1), u = w.dim(1);
  if (w.dim(0) != d) fail(ErrorCode::ShapeMismatch, "dense input width " + std::to_string(d) +
                                                        " does not match weight " + shape_string(w.shape()));
  if (b.size() != u) fail(ErrorCode::ShapeMismatch, "dense bias length differs from units");
  Tensor<T> y({n, u});
  std::vector<double> acc(u);
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t j = 0; j < u; ++j) acc[j] = static_cast<double>(b[j]);
    const T* xp = x.ptr() + s * d;
    for (std::size_t i = 0; i < d; ++i) {
      const double xv = static_cast<double>(xp[i]);
      if (xv == 0.0) continue;
      const T* wr = w.ptr() + i * u;
      for (std::size_t j = 0; j < u; ++j) acc[j] += xv * static_cast<double>(wr[j]);
    }
    for (std::size_t j = 0; j < u; ++j) y[s * u + j] = static_cast<T>(acc[j]);
  }
  return y;
}

template <typename T>
DenseGrads<T> dense_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& grad_out) {
  require_rank(x.shape(), 2, "dense input");
  const std::size_t n = x.dim(0), d = x.dim(1), u = w.dim(1);
  if (w.dim(0) != d || grad_out.shape() != Shape{n, u})
    fail(ErrorCode::ShapeMismatch, "dense gradient shapes inconsistent with forward");
  std::vector<double> gw(w.size(), 0.0), gb(u, 0.0);
  DenseGrads<T> out{Tensor<T>(x.shape()), Tensor<T>(w.shape()), Tensor<T>({u})};
  for (std::size_t s = 0; s < n; ++s) {
    const T* g = grad_out.ptr() + s * u;
    const T* xp = x.ptr() + s * d;
    for (std::size_t j = 0; j < u; ++j) gb[j] += static_cast<double>(g[j]);
    for (std::size_t i = 0; i < d; ++i) {
      const T* wr = w.ptr() + i * u;
      double* gwr = gw.data() + i * u;
      const double xv = static_cast<double>(xp[i]);
      double sum = 0.0;
      for (std::size_t j = 0; j < u; ++j) {
        sum += static_cast<double>(wr[j]) * static_cast<double>(g[j]);
        gwr[j] += xv * static_cast<double>(g[j]);
      }
      out.x[s * d + i] = static_cast<T>(sum);
    }
  }
  for (std::size_t i = 0; i < gw.size(); ++i) out.w[i] = static_cast<T>(gw[i]);
  for (std::size_t j = 0; j < u; ++j) out.b[j] = static_cast<T>(gb[j]);
  return out;
}

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& x) {
  Tensor<T> y = x;
  for (auto& v : y.data()) v = v > T(0) ? v : T(0);
  return y;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& grad_out) {
  if (x.shape() != grad_out.shape()) fail(ErrorCode::ShapeMismatch, "relu gradient shape mismatch");
  Tensor<T> g = grad_out;
  for (std::size_t i = 0; i < g.size(); ++i)
    if (!(x[i] > T(0))) g[i] = T(0);
  return g;
}

template <typename T>
Tensor<T> sigmoid_forward(const Tensor<T>& x) {
  Tensor<T> y = x;
  for (auto& v : y.data()) v = static_cast<T>(1.0 / (1.0 + std::exp(-static_cast<double>(v))));
  return y;
}

template <typename T>
Tensor<T> sigmoid_backward(const Tensor<T>& y, const Tensor<T>& grad_out) {
  if (y.shape() != grad_out.shape()) fail(ErrorCode::ShapeMismatch, "sigmoid gradient shape mismatch");
  Tensor<T> g = grad_out;
  for (std::size_t i = 0; i < g.size(); ++i) {
    double p = static_cast<double>(y[i]);
    g[i] = static_cast<T>(static_cast<double>(g[i]) * p * (1.0 - p));
  }
  return g;
}

template <typename T>
Tensor<T> softmax_forward(const Tensor<T>& x) {
  if (x.rank() == 0) fail(ErrorCode::ShapeMismatch, "softmax of an empty shape");
  const std::size_t c = x.shape().back(), rows = x.size() / c;
  Tensor<T> y(x.shape());
  std::vector<double> e(c);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xp = x.ptr() + r * c;
    double mx = static_cast<double>(*std::max_element(xp, xp + c));
    double sum = 0.0;
    for (std::size_t j = 0; j < c; ++j) sum += e[j] = std::exp(static_cast<double>(xp[j]) - mx);
    for (std::size_t j = 0; j < c; ++j) y[r * c + j] = static_cast<T>(e[j] / sum);
  }
  return y;
}

template <typename T>
Tensor<T> softmax_backward(const Tensor<T>& y, const Tensor<T>& grad_out) {
  if (y.shape() != grad_out.shape()) fail(ErrorCode::ShapeMismatch, "softmax gradient shape mismatch");
  const std::size_t c = y.shape().back(), rows = y.size() / c;
  Tensor<T> g(y.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    double dot = 0.0;
    for (std::size_t j = 0; j < c; ++j)
      dot += static_cast<double>(y[r * c + j]) * static_cast<double>(grad_out[r * c + j]);
    for (std::size_t j = 0; j < c; ++j)
      g[r * c + j] = static_cast<T>(static_cast<double>(y[r * c + j]) * (static_cast<double>(grad_out[r * c + j]) - dot));
  }
  return g;
}

template <typename T>
Tensor<T> dropout_forward(const Tensor<T>& x, double rate, Mode mode, std::uint64_t seed, std::vector<T>* mask) {
  if (!(rate >= 0.0 && rate < 1.0)) fail(ErrorCode::InvalidArgument, "dropout rate must lie in [0, 1)");
  if (mode == Mode::eval || rate == 0.0) {
    if (mask) mask->assign(x.size(), T(1));
    return x;
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const T keep = static_cast<T>(1.0 / (1.0 - rate));
  Tensor<T> y = x;
  if (mask) mask->resize(x.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    T m = u(rng) < rate ? T(0) : keep;
    y[i] *= m;
    if (mask) (*mask)[i] = m;
  }
  return y;
}

template <typename T>
LossResult<T> cross_entropy(const Tensor<T>& probs, const std::vector<int>& labels) {
  require_rank(probs.shape(), 2, "cross_entropy probabilities");
  const std::size_t n = probs.dim(0), c = probs.dim(1);
  if (labels.size() != n) fail(ErrorCode::LengthMismatch, "label count differs from batch size");
  if (n == 0) fail(ErrorCode::Empty, "empty batch");
  LossResult<T> r{0.0, Tensor<T>(probs.shape())};
  for (std::size_t s = 0; s < n; ++s) {
    if (labels[s] < 0 || static_cast<std::size_t>(labels[s]) >= c) fail(ErrorCode::InvalidArgument, "label out of range");
    const std::size_t k = s * c + static_cast<std::size_t>(labels[s]);
    double p = static_cast<double>(probs[k]);
    double pc = std::clamp(p, kProbabilityClamp, 1.0 - kProbabilityClamp);
    r.loss -= std::log(pc);
    r.grad[k] = static_cast<T>(pc == p ? -1.0 / (static_cast<double>(n) * p) : 0.0);
  }
  r.loss /= static_cast<double>(n);
  return r;
}

template <typename T>
LossResult<T> binary_cross_entropy(const Tensor<T>& probs, const std::vector<int>& labels) {
  require_rank(probs.shape(), 2, "binary_cross_entropy probabilities");
  const std::size_t n = probs.dim(0), c = probs.dim(1);
  if (labels.size() != n) fail(ErrorCode::LengthMismatch, "label count differs from batch size");
  if (n == 0) fail(ErrorCode::Empty, "empty batch");
  LossResult<T> r{0.0, Tensor<T>(probs.shape())};
  for (std::size_t s = 0; s < n; ++s) {
    if (labels[s] < 0 || static_cast<std::size_t>(labels[s]) >= c) fail(ErrorCode::InvalidArgument, "label out of range");
    for (std::size_t j = 0; j < c; ++j) {
      double y = static_cast<std::size_t>(labels[s]) == j ? 1.0 : 0.0;
      double p = static_cast<double>(probs[s * c + j]);
      double pc = std::clamp(p, kProbabilityClamp, 1.0 - kProbabilityClamp);
      r.loss -= y * std::log(pc) + (1.0 - y) * std::log(1.0 - pc);
      r.grad[s * c + j] =
          static_cast<T>(pc == p ? (-y / p + (1.0 - y) / (1.0 - p)) / static_cast<double>(n) : 0.0);
    }
  }
  r.loss /= static_cast<double>(n);
  return r;
}

template <typename T>
void sgd_step(std::span<T> params, std::span<const T> grads, double lr, double momentum, std::span<T> velocity) {
  if (params.size() != grads.size() || velocity.size() != params.size())
    fail(ErrorCode::ShapeMismatch, "sgd buffers differ in length");
  for (std::size_t i = 0; i < params.size(); ++i) {
    double v = momentum * static_cast<double>(velocity[i]) + static_cast<double>(grads[i]);
    velocity[i] = static_cast<T>(v);
    params[i] = static_cast<T>(static_cast<double>(params[i]) - lr * v);
  }
}

template <typename T>
void adam_step(std::span<T> params, std::span<const T> grads, std::span<T> m, std::span<T> v, long t,
               const AdamConfig& c) {
  if (params.size() != grads.size() || m.size() != params.size() || v.size() != params.size())
    fail(ErrorCode::ShapeMismatch, "adam buffers differ in length");
  if (t < 1) fail(ErrorCode::InvalidArgument, "adam step count starts at 1");
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = static_cast<double>(grads[i]);
    const double mi = c.beta1 * static_cast<double>(m[i]) + (1.0 - c.beta1) * g;
    const double vi = c.beta2 * static_cast<double>(v[i]) + (1.0 - c.beta2) * g * g;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    params[i] = static_cast<T>(static_cast<double>(params[i]) - c.lr * (mi / bc1) / (std::sqrt(vi / bc2) + c.epsilon));
  }
}

// ---- network ------------------------------------------------------------------------------

template <typename T>
Network<T>::Network(NetworkSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
  if (spec_.layers.empty()) fail(ErrorCode::InvalidArgument, "network has no layers");
  auto head = spec_.layers.back().kind;
  if (head != LayerKind::softmax && head != LayerKind::sigmoid)
    fail(ErrorCode::InvalidArgument, "network must end in a softmax or sigmoid head");
  const std::size_t n = spec_.layers.size();
  Shape in = spec_.input;
  shapes_.reserve(n);
  weights_.resize(n);
  biases_.resize(n);
  grad_w_.resize(n);
  grad_b_.resize(n);
  for (std::size_t l = 0; l < n; ++l) {
    const auto& layer = spec_.layers[l];
    Shape out = layer_output_shape(layer, in, l);
    if (layer.has_parameters()) {
      Shape ws = weight_shape(layer, in);
      Tensor<T> w(ws);
      double fan_in = 1, fan_out = 1;
      if (layer.kind == LayerKind::conv2d) {
        fan_in = static_cast<double>(ws[0] * ws[1] * ws[2]);
        fan_out = static_cast<double>(ws[0] * ws[1] * ws[3]);
      } else {
        fan_in = static_cast<double>(ws[0]);
        fan_out = static_cast<double>(ws[1]);
      }
      bool relu_next = l + 1 < n && spec_.layers[l + 1].kind == LayerKind::relu;
      double limit = relu_next ? std::sqrt(6.0 / fan_in) : std::sqrt(6.0 / (fan_in + fan_out));
      std::mt19937_64 rng(derive_seed(seed, l));
      std::uniform_real_distribution<double> dist(-limit, limit);
      for (auto& v : w.data()) v = static_cast<T>(dist(rng));
      weights_[l] = std::move(w);
      biases_[l] = Tensor<T>(bias_shape(layer));
      grad_w_[l] = Tensor<T>(weights_[l].shape());
      grad_b_[l] = Tensor<T>(biases_[l].shape());
    }
    shapes_.push_back(out);
    in = std::move(out);
  }
  if (in != Shape{spec_.num_classes})
    fail(ErrorCode::ShapeFlowBroken, "head width " + shape_string(in) + " differs from num_classes " +
                                         std::to_string(spec_.num_classes));
}

template <typename T>
std::size_t Network<T>::parameter_count() const noexcept {
  std::size_t total = 0;
  for (std::size_t l = 0; l < weights_.size(); ++l) total += weights_[l].size() + biases_[l].size();
  return total;
}

template <typename T>
std::vector<T> Network<T>::flat_parameters() const {
  std::vector<T> out;
  out.reserve(parameter_count());
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    out.insert(out.end(), weights_[l].data().begin(), weights_[l].data().end());
    out.insert(out.end(), biases_[l].data().begin(), biases_[l].data().end());
  }
  return out;
}

template <typename T>
void Network<T>::set_flat_parameters(std::span<const T> values) {
  if (values.size() != parameter_count())
    fail(ErrorCode::PayloadLengthMismatch, "expected " + std::to_string(parameter_count()) + " parameters, got " +
                                               std::to_string(values.size()));
  std::size_t off = 0;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(off), weights_[l].size(), weights_[l].data().begin());
    off += weights_[l].size();
    std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(off), biases_[l].size(), biases_[l].data().begin());
    off += biases_[l].size();
  }
}

template <typename T>
bool Network<T>::has_active_dropout() const noexcept {
  return std::any_of(spec_.layers.begin(), spec_.layers.end(),
                     [](const LayerSpec& l) { return l.kind == LayerKind::dropout && l.rate > 0.0; });
}

template <typename T>
Tensor<T> Network<T>::forward(const Tensor<T>& x, Mode mode, std::uint64_t dropout_seed) {
  Shape expect{0};
  expect.insert(expect.end(), spec_.input.begin(), spec_.input.end());
  if (x.rank() != expect.size() || !std::equal(expect.begin() + 1, expect.end(), x.shape().begin() + 1) || x.dim(0) == 0)
    fail(ErrorCode::ShapeMismatch, "network " + spec_.name + " expects (N, " +
                                       shape_string(spec_.input).substr(1) + " input, got " + shape_string(x.shape()));
  const std::size_t n = x.dim(0), layers = spec_.layers.size();
  inputs_.assign(layers, Tensor<T>());
  argmax_.assign(layers, {});
  masks_.assign(layers, {});
  Tensor<T> cur = x;
  for (std::size_t l = 0; l < layers; ++l) {
    const auto& layer = spec_.layers[l];
    Tensor<T> next;
    switch (layer.kind) {
      case LayerKind::conv2d:
        next = conv2d_forward(cur, weights_[l], biases_[l], layer.stride, layer.padding);
        break;
      case LayerKind::maxpool2d: {
        auto r = maxpool2d_forward(cur, layer.pool, layer.stride);
        next = std::move(r.out);
        argmax_[l] = std::move(r.argmax);
        break;
      }
      case LayerKind::dense: next = dense_forward(cur, weights_[l], biases_[l]); break;
      case LayerKind::relu: next = relu_forward(cur); break;
      case LayerKind::sigmoid: next = sigmoid_forward(cur); break;
      case LayerKind::softmax: next = softmax_forward(cur); break;
      case LayerKind::dropout:
        next = dropout_forward(cur, layer.rate, mode, derive_seed(dropout_seed, l), &masks_[l]);
        break;
      case LayerKind::flatten:
        next = cur;
        next.reshape({n, cur.size() / n});
        break;
    }
    inputs_[l] = std::move(cur);
    cur = std::move(next);
  }
  output_ = cur;
  return cur;
}

template <typename T>
double Network<T>::backward(const std::vector<int>& labels) {
  if (inputs_.empty()) fail(ErrorCode::InvalidArgument, "backward called before forward");
  const std::size_t n = output_.dim(0), c = output_.dim(1), layers = spec_.layers.size();
  const bool softmax_head = spec_.layers.back().kind == LayerKind::softmax;
  auto lr = softmax_head ? cross_entropy(output_, labels) : binary_cross_entropy(output_, labels);

  // softmax + cross-entropy and sigmoid + binary cross-entropy share the logit gradient p - y
  Tensor<T> g(output_.shape());
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t j = 0; j < c; ++j) {
      double y = static_cast<std::size_t>(labels[s]) == j ? 1.0 : 0.0;
      g[s * c + j] = static_cast<T>((static_cast<double>(output_[s * c + j]) - y) / static_cast<double>(n));
    }

  for (std::size_t l = layers - 1; l-- > 0;) {
    const auto& layer = spec_.layers[l];
    const Tensor<T>& x = inputs_[l];
    switch (layer.kind) {
      case LayerKind::conv2d: {
        auto r = conv2d_backward(x, weights_[l], g, layer.stride, layer.padding, l > 0);
        grad_w_[l] = std::move(r.w);
        grad_b_[l] = std::move(r.b);
        if (l > 0) g = std::move(r.x);
        break;
      }
      case LayerKind::dense: {
        auto r = dense_backward(x, weights_[l], g);
        grad_w_[l] = std::move(r.w);
        grad_b_[l] = std::move(r.b);
        g = std::move(r.x);
        break;
      }
      case LayerKind::maxpool2d: g = maxpool2d_backward(x.shape(), argmax_[l], g); break;
      case LayerKind::relu: g = relu_backward(x, g); break;
      case LayerKind::sigmoid: g = sigmoid_backward(inputs_[l + 1], g); break;
      case LayerKind::softmax: g = softmax_backward(inputs_[l + 1], g); break;
      case LayerKind::dropout:
        for (std::size_t i = 0; i < g.size(); ++i) g[i] *= masks_[l][i];
        break;
      case LayerKind::flatten: g.reshape(x.shape()); break;
    }
  }
  return lr.loss;
}

template <typename T>
double Network<T>::loss(const Tensor<T>& x, const std::vector<int>& labels, Mode mode, std::uint64_t dropout_seed) {
  auto probs = forward(x, mode, dropout_seed);
  return spec_.layers.back().kind == LayerKind::softmax ? cross_entropy(probs, labels).loss
                                                         : binary_cross_entropy(probs, labels).loss;
}

template <typename T>
double Network<T>::train_step(const Tensor<T>& x, const std::vector<int>& labels, const OptimizerConfig& opt,
                              std::uint64_t dropout_seed) {
  forward(x, Mode::train, dropout_seed);
  double loss = backward(labels);
  if (!std::isfinite(loss)) fail(ErrorCode::NonFiniteLoss, "loss became non-finite at step " + std::to_string(step_ + 1));
  if (m_w_.empty()) {
    m_w_.resize(weights_.size());
    m_b_.resize(weights_.size());
    v_w_.resize(weights_.size());
    v_b_.resize(weights_.size());
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      m_w_[l] = Tensor<T>(weights_[l].shape());
      m_b_[l] = Tensor<T>(biases_[l].shape());
      v_w_[l] = Tensor<T>(weights_[l].shape());
      v_b_[l] = Tensor<T>(biases_[l].shape());
    }
  }
  ++step_;
  AdamConfig ac{opt.lr, opt.beta1, opt.beta2, opt.epsilon};
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    if (weights_[l].size() == 0) continue;
    if (opt.kind == OptimizerKind::adam) {
      adam_step<T>(weights_[l].data(), grad_w_[l].data(), m_w_[l].data(), v_w_[l].data(), step_, ac);
      adam_step<T>(biases_[l].data(), grad_b_[l].data(), m_b_[l].data(), v_b_[l].data(), step_, ac);
    } else {
      sgd_step<T>(weights_[l].data(), grad_w_[l].data(), opt.lr, opt.momentum, m_w_[l].data());
      sgd_step<T>(biases_[l].data(), grad_b_[l].data(), opt.lr, opt.momentum, m_b_[l].data());
    }
  }
  return loss;
}

template <typename T>
std::uint64_t Network<T>::activation_signature() const noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t l = 0; l < spec_.layers.size() && l < inputs_.size(); ++l) {
    if (spec_.layers[l].kind == LayerKind::relu) {
      for (T v : inputs_[l].data()) {
        unsigned char bit = v > T(0) ? 1 : 0;
        h = fnv1a(h, &bit, 1);
      }
    } else if (spec_.layers[l].kind == LayerKind::maxpool2d) {
      h = fnv1a(h, argmax_[l].data(), argmax_[l].size() * sizeof(std::uint32_t));
    }
  }
  return h;
}

double grad_check(Network<double>& net, const Tensor<double>& x, const std::vector<int>& labels,
                  const GradCheckOptions& options) {
  if (options.mode == Mode::train && net.has_active_dropout())
    fail(ErrorCode::CheckRequiresEvalMode, "gradient check needs dropout disabled (eval mode)");
  const std::uint64_t dropout_seed = derive_seed(options.seed, 1);
  const double base_loss = net.loss(x, labels, options.mode, dropout_seed);
  net.forward(x, options.mode, dropout_seed);
  net.backward(labels);
  const std::uint64_t base_signature = net.activation_signature();

  std::mt19937_64 rng(options.seed);
  double worst = 0.0;
  const auto& layers = net.spec().layers;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    if (!layers[l].has_parameters()) continue;
    for (int which = 0; which < 2; ++which) {
      Tensor<double>& p = which == 0 ? net.weight(l) : net.bias(l);
      const Tensor<double> analytic = which == 0 ? net.weight_grad(l) : net.bias_grad(l);
      std::vector<std::size_t> idx(p.size());
      std::iota(idx.begin(), idx.end(), 0);
      if (options.per_tensor > 0 && idx.size() > options.per_tensor) {
        for (std::size_t i = 0; i < options.per_tensor; ++i) {
          std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
          std::swap(idx[i], idx[pick(rng)]);
        }
        idx.resize(options.per_tensor);
      }
      for (std::size_t i : idx) {
        const double orig = p[i];
        double h = options.eps * std::max(1.0, std::abs(orig));
        std::optional<double> numeric, one_sided;
        for (int attempt = 0; attempt < 6 && !numeric; ++attempt, h *= 0.1) {
          p[i] = orig + h;
          const double lp = net.loss(x, labels, options.mode, dropout_seed);
          const bool plus_ok = net.activation_signature() == base_signature;
          p[i] = orig - h;
          const double lm = net.loss(x, labels, options.mode, dropout_seed);
          const bool minus_ok = net.activation_signature() == base_signature;
          if (plus_ok && minus_ok) numeric = (lp - lm) / (2.0 * h);
          else if (plus_ok && !one_sided) one_sided = (lp - base_loss) / h;
          else if (minus_ok && !one_sided) one_sided = (base_loss - lm) / h;
        }
        p[i] = orig;
        if (!numeric) numeric = one_sided;
        // both sides cross an activation boundary: no derivative to compare against
        if (!numeric) continue;
        const double a = analytic[i];
        const double err = std::abs(a - *numeric) / std::max({std::abs(a), std::abs(*numeric), 1e-6});
        worst = std::max(worst, err);
      }
    }
  }
  return worst;
}

#define NEUROENS_INSTANTIATE(T)                                                                              \
  template class Tensor<T>;                                                                                   \
  template Tensor<T> conv2d_forward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t, Padding); \
  template ConvGrads<T> conv2d_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t,    \
                                        Padding, bool);                                                       \
  template PoolResult<T> maxpool2d_forward(const Tensor<T>&, std::size_t, std::size_t);                       \
  template Tensor<T> maxpool2d_backward(const Shape&, const std::vector<std::uint32_t>&, const Tensor<T>&);   \
  template Tensor<T> dense_forward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                     \
  template DenseGrads<T> dense_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                \
  template Tensor<T> relu_forward(const Tensor<T>&);                                                          \
  template Tensor<T> relu_backward(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> sigmoid_forward(const Tensor<T>&);                                                       \
  template Tensor<T> sigmoid_backward(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> softmax_forward(const Tensor<T>&);                                                       \
  template Tensor<T> softmax_backward(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> dropout_forward(const Tensor<T>&, double, Mode, std::uint64_t, std::vector<T>*);         \
  template LossResult<T> cross_entropy(const Tensor<T>&, const std::vector<int>&);                            \
  template LossResult<T> binary_cross_entropy(const Tensor<T>&, const std::vector<int>&);                     \
  template void sgd_step(std::span<T>, std::span<const T>, double, double, std::span<T>);                     \
  template void adam_step(std::span<T>, std::span<const T>, std::span<T>, std::span<T>, long, const AdamConfig&); \
  template class Network<T>;

NEUROENS_INSTANTIATE(float)
NEUROENS_INSTANTIATE(double)

#undef NEUROENS_INSTANTIATE

}  // namespace neuroens
