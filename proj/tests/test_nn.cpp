#include <cmath>
#include <functional>
#include <random>

#include "doctest.h"
#include "neuroens/nn.hpp"
#include "test_util.hpp"

using namespace neuroens;

namespace {

using TensorD = Tensor<double>;

TensorD random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  TensorD t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.data()) v = u(rng);
  return t;
}

// Direct-definition convolution: out[n,oy,ox,co] = b[co] + sum x[n, oy*s+ky-pt, ox*s+kx-pl, ci] w[ky,kx,ci,co].
TensorD naive_conv(const TensorD& x, const TensorD& w, const TensorD& b, std::size_t s, Padding pad) {
  const std::size_t n = x.dim(0), h = x.dim(1), wd = x.dim(2), cin = x.dim(3);
  const std::size_t kh = w.dim(0), kw = w.dim(1), cout = w.dim(3);
  std::size_t oh, ow;
  long pt = 0, pl = 0;
  if (pad == Padding::same) {
    oh = (h + s - 1) / s;
    ow = (wd + s - 1) / s;
    long th = std::max<long>(0, static_cast<long>((oh - 1) * s + kh) - static_cast<long>(h));
    long tw = std::max<long>(0, static_cast<long>((ow - 1) * s + kw) - static_cast<long>(wd));
    pt = th / 2;
    pl = tw / 2;
  } else {
    oh = (h - kh) / s + 1;
    ow = (wd - kw) / s + 1;
  }
  TensorD y({n, oh, ow, cout});
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox)
        for (std::size_t co = 0; co < cout; ++co) {
          double acc = b[co];
          for (std::size_t ky = 0; ky < kh; ++ky)
            for (std::size_t kx = 0; kx < kw; ++kx)
              for (std::size_t ci = 0; ci < cin; ++ci) {
                long iy = static_cast<long>(oy * s + ky) - pt, ix = static_cast<long>(ox * s + kx) - pl;
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(wd)) continue;
                acc += x[((a * h + iy) * wd + ix) * cin + ci] * w[((ky * kw + kx) * cin + ci) * cout + co];
              }
          y[((a * oh + oy) * ow + ox) * cout + co] = acc;
        }
  return y;
}

double weighted_sum(const TensorD& y, const TensorD& r) {
  double s = 0;
  for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * r[i];
  return s;
}

// Max relative error of `analytic` against central differences of f with respect to `param`.
double fd_error(TensorD& param, const TensorD& analytic, const std::function<double()>& f, double h = 1e-6) {
  double worst = 0;
  for (std::size_t i = 0; i < param.size(); ++i) {
    double orig = param[i];
    param[i] = orig + h;
    double fp = f();
    param[i] = orig - h;
    double fm = f();
    param[i] = orig;
    double num = (fp - fm) / (2 * h);
    worst = std::max(worst, std::abs(num - analytic[i]) / std::max({std::abs(num), std::abs(analytic[i]), 1e-6}));
  }
  return worst;
}

}  // namespace

TEST_CASE("conv2d forward") {
  SUBCASE("1x1 kernel scales") {
    TensorD x({1, 2, 2, 1}, {1, 2, 3, 4});
    TensorD w({1, 1, 1, 1}, {2});
    TensorD b({1}, {0});
    auto y = conv2d_forward(x, w, b, 1, Padding::same);
    CHECK(y == TensorD({1, 2, 2, 1}, {2, 4, 6, 8}));
  }
  SUBCASE("3x3 ones, valid, on ones gives 9") {
    TensorD x({1, 3, 3, 1}, 1.0), w({3, 3, 1, 1}, 1.0), b({1}, 0.0);
    auto y = conv2d_forward(x, w, b, 1, Padding::valid);
    CHECK(y.shape() == Shape{1, 1, 1, 1});
    CHECK(y[0] == 9.0);
  }
  SUBCASE("same padding preserves spatial dims at stride 1") {
    std::mt19937_64 rng(1);
    for (std::size_t k = 1; k <= 6; ++k) {
      auto x = random_tensor({2, 7, 5, 3}, rng);
      auto w = random_tensor({k, k, 3, 4}, rng);
      auto b = random_tensor({4}, rng);
      auto y = conv2d_forward(x, w, b, 1, Padding::same);
      CHECK(y.shape() == Shape{2, 7, 5, 4});
    }
  }
  SUBCASE("full-sized first layer") {
    Tensor<float> x({1, 176, 208, 3}, 0.5f), w({3, 3, 3, 16}, 0.1f), b({16}, 0.0f);
    CHECK(conv2d_forward(x, w, b, 1, Padding::same).shape() == Shape{1, 176, 208, 16});
  }
  SUBCASE("matches the direct definition") {
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 30; ++trial) {
      std::uniform_int_distribution<std::size_t> d(1, 8), k(1, 4), s(1, 3), c(1, 4);
      std::size_t kh = k(rng), kw = k(rng);
      std::size_t h = std::max(kh, d(rng)), wd = std::max(kw, d(rng)), stride = s(rng);
      auto pad = trial % 2 ? Padding::same : Padding::valid;
      auto x = random_tensor({2, h, wd, c(rng)}, rng);
      auto w = random_tensor({kh, kw, x.dim(3), c(rng)}, rng);
      auto b = random_tensor({w.dim(3)}, rng);
      auto y = conv2d_forward(x, w, b, stride, pad);
      auto ref = naive_conv(x, w, b, stride, pad);
      REQUIRE(y.shape() == ref.shape());
      for (std::size_t i = 0; i < y.size(); ++i) REQUIRE(y[i] == doctest::Approx(ref[i]).epsilon(1e-12));
    }
  }
  SUBCASE("channel mismatch") {
    TensorD x({1, 3, 3, 2}), w({3, 3, 1, 1}), b({1});
    CHECK(error_code_of([&] { conv2d_forward(x, w, b, 1, Padding::same); }) == ErrorCode::ShapeMismatch);
  }
}

TEST_CASE("conv2d backward") {
  std::mt19937_64 rng(3);
  SUBCASE("finite differences") {
    for (auto pad : {Padding::same, Padding::valid})
      for (std::size_t stride : {1, 2}) {
        auto x = random_tensor({1, 4, 4, 2}, rng);
        auto w = random_tensor({3, 3, 2, 3}, rng);
        auto b = random_tensor({3}, rng);
        auto y = conv2d_forward(x, w, b, stride, pad);
        auto r = random_tensor(y.shape(), rng);
        auto g = conv2d_backward(x, w, r, stride, pad);
        auto f = [&] { return weighted_sum(naive_conv(x, w, b, stride, pad), r); };
        CHECK(fd_error(x, g.x, f) < 1e-4);
        CHECK(fd_error(w, g.w, f) < 1e-4);
        CHECK(fd_error(b, g.b, f) < 1e-4);
      }
  }
  SUBCASE("zero upstream gradient") {
    auto x = random_tensor({2, 5, 5, 2}, rng);
    auto w = random_tensor({3, 3, 2, 2}, rng);
    auto g = conv2d_backward(x, w, TensorD({2, 5, 5, 2}), 1, Padding::same);
    for (double v : g.x.data()) CHECK(v == 0.0);
    for (double v : g.w.data()) CHECK(v == 0.0);
    for (double v : g.b.data()) CHECK(v == 0.0);
  }
  SUBCASE("bias gradient sums the upstream gradient") {
    auto x = random_tensor({3, 4, 5, 2}, rng);
    auto w = random_tensor({3, 3, 2, 4}, rng);
    auto r = random_tensor({3, 4, 5, 4}, rng);
    auto g = conv2d_backward(x, w, r, 1, Padding::same);
    for (std::size_t co = 0; co < 4; ++co) {
      double s = 0;
      for (std::size_t i = co; i < r.size(); i += 4) s += r[i];
      CHECK(g.b[co] == doctest::Approx(s).epsilon(1e-12));
    }
  }
}

TEST_CASE("maxpool2d") {
  CHECK(maxpool2d_forward(Tensor<float>({1, 176, 208, 16}), 2, 2).out.shape() == Shape{1, 88, 104, 16});
  CHECK(maxpool2d_forward(Tensor<float>({1, 11, 13, 256}), 2, 2).out.shape() == Shape{1, 5, 6, 256});
  auto r = maxpool2d_forward(TensorD({1, 2, 2, 1}, {1, 2, 3, 4}), 2, 2);
  CHECK(r.out[0] == 4.0);

  auto tie = maxpool2d_forward(TensorD({1, 2, 2, 1}, 5.0), 2, 2);
  auto gt = maxpool2d_backward({1, 2, 2, 1}, tie.argmax, TensorD({1, 1, 1, 1}, 1.0));
  CHECK(gt == TensorD({1, 2, 2, 1}, {1, 0, 0, 0}));

  auto zero = maxpool2d_backward({1, 2, 2, 1}, tie.argmax, TensorD({1, 1, 1, 1}, 0.0));
  for (double v : zero.data()) CHECK(v == 0.0);

  std::mt19937_64 rng(4);
  auto x = random_tensor({2, 7, 6, 3}, rng);
  auto fwd = maxpool2d_forward(x, 2, 2);
  auto up = random_tensor(fwd.out.shape(), rng);
  auto g = maxpool2d_backward(x.shape(), fwd.argmax, up);
  CHECK(fd_error(x, g, [&] { return weighted_sum(maxpool2d_forward(x, 2, 2).out, up); }) < 1e-4);
  CHECK(error_code_of([] { maxpool2d_forward(TensorD({1, 1, 4, 1}), 2, 2); }) == ErrorCode::ShapeMismatch);
}

TEST_CASE("dense") {
  TensorD x({2, 3}, {1, 2, 3, 4, 5, 6});
  TensorD eye({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  CHECK(dense_forward(x, eye, TensorD({3})) == x);
  CHECK(dense_forward(Tensor<float>({2, 7680}), Tensor<float>({7680, 512}), Tensor<float>({512})).shape() ==
        Shape{2, 512});
  std::mt19937_64 rng(5);
  auto xi = random_tensor({3, 6}, rng);
  auto w = random_tensor({6, 4}, rng);
  auto b = random_tensor({4}, rng);
  auto up = random_tensor({3, 4}, rng);
  auto g = dense_backward(xi, w, up);
  auto f = [&] { return weighted_sum(dense_forward(xi, w, b), up); };
  CHECK(fd_error(xi, g.x, f) < 1e-4);
  CHECK(fd_error(w, g.w, f) < 1e-4);
  CHECK(fd_error(b, g.b, f) < 1e-4);
}

TEST_CASE("activations") {
  auto r = relu_forward(TensorD({2}, {-1, 2}));
  CHECK(r[0] == 0.0);
  CHECK(r[1] == 2.0);
  CHECK(sigmoid_forward(TensorD({1}, {0}))[0] == 0.5);
  auto s = softmax_forward(TensorD({1, 2}, {0, 0}));
  CHECK(s[0] == 0.5);
  CHECK(s[1] == 0.5);

  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_tensor({4, 5}, rng, -30, 30);
    auto p = softmax_forward(x.cast<float>());
    for (std::size_t row = 0; row < 4; ++row) {
      double sum = 0;
      for (std::size_t j = 0; j < 5; ++j) {
        float v = p[row * 5 + j];
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
        sum += v;
      }
      CHECK(std::abs(sum - 1.0) < 1e-6);
    }
  }

  auto x = random_tensor({3, 4}, rng, -2, 2);
  for (auto& v : x.data())
    if (std::abs(v) < 1e-3) v = 0.5;  // keep away from the relu kink
  auto up = random_tensor({3, 4}, rng);
  CHECK(fd_error(x, relu_backward(x, up), [&] { return weighted_sum(relu_forward(x), up); }) < 1e-4);
  CHECK(fd_error(x, sigmoid_backward(sigmoid_forward(x), up), [&] { return weighted_sum(sigmoid_forward(x), up); }) <
        1e-4);
  CHECK(fd_error(x, softmax_backward(softmax_forward(x), up), [&] { return weighted_sum(softmax_forward(x), up); }) <
        1e-4);
}

TEST_CASE("dropout") {
  std::mt19937_64 rng(7);
  auto x = random_tensor({4, 10}, rng);
  CHECK(dropout_forward(x, 0.5, Mode::eval, 1) == x);
  CHECK(dropout_forward(x, 0.0, Mode::train, 1) == x);
  CHECK(error_code_of([&] { dropout_forward(x, 1.0, Mode::train, 1); }) == ErrorCode::InvalidArgument);

  Tensor<float> ones({100000}, 1.0f);
  auto y = dropout_forward(ones, 0.5, Mode::train, 42);
  double mean = 0;
  for (float v : y.data()) {
    CHECK((v == 0.0f || v == 2.0f));
    mean += v;
  }
  CHECK(std::abs(mean / 1e5 - 1.0) < 0.01);
  CHECK(dropout_forward(ones, 0.5, Mode::train, 42) == y);

  // expectation over seeds
  TensorD small({50}, 3.0);
  double total = 0;
  for (std::uint64_t seed = 0; seed < 400; ++seed) {
    auto d = dropout_forward(small, 0.3, Mode::train, seed);
    for (double v : d.data()) total += v;
  }
  CHECK(std::abs(total / (400 * 50) - 3.0) < 0.03);
}

TEST_CASE("losses") {
  auto ce = cross_entropy(TensorD({1, 2}, {0.0, 1.0}), {1});
  CHECK(ce.loss < 1e-6);
  CHECK(cross_entropy(TensorD({1, 2}, {0.5, 0.5}), {0}).loss == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(error_code_of([] { cross_entropy(TensorD({2, 2}, 0.5), {0}); }) == ErrorCode::LengthMismatch);

  std::mt19937_64 rng(8);
  auto p = softmax_forward(random_tensor({5, 3}, rng));
  std::vector<int> labels{0, 2, 1, 1, 0};
  CHECK(fd_error(p, cross_entropy(p, labels).grad, [&] { return cross_entropy(p, labels).loss; }) < 1e-4);
  auto q = sigmoid_forward(random_tensor({5, 3}, rng));
  CHECK(fd_error(q, binary_cross_entropy(q, labels).grad, [&] { return binary_cross_entropy(q, labels).loss; }) <
        1e-4);
  // binary cross-entropy of an exact one-hot prediction
  CHECK(binary_cross_entropy(TensorD({1, 2}, {1.0, 0.0}), {0}).loss < 1e-6);
}

TEST_CASE("optimizers") {
  std::vector<double> p{1.0}, g{0.5}, vel{0.0};
  sgd_step<double>(p, g, 0.1, 0.0, vel);
  CHECK(p[0] == doctest::Approx(0.95).epsilon(1e-15));

  std::vector<double> q{1.0, -2.0}, zero{0.0, 0.0}, v2{0.0, 0.0};
  sgd_step<double>(q, zero, 0.1, 0.0, v2);
  CHECK(q == std::vector<double>{1.0, -2.0});

  // step 1: m = (1-b1) g, v = (1-b2) g^2, so the update is lr * g / (|g| + eps / sqrt(1-b2) ...) ~ lr
  for (double scale : {1e-3, 1.0, 1e3}) {
    std::vector<double> w{0.0}, grad{scale}, m{0.0}, v{0.0};
    adam_step<double>(w, grad, m, v, 1, AdamConfig{});
    double expected = 1e-3 * scale / (std::abs(scale) + 1e-8);
    CHECK(w[0] == doctest::Approx(-expected).epsilon(1e-12));
    CHECK(std::abs(std::abs(w[0]) - 1e-3) < 1e-7);
  }
}

namespace {

NetworkSpec small_cnn(bool with_dropout) {
  NetworkSpec s;
  s.name = "small";
  s.input = {8, 6, 2};
  s.num_classes = 3;
  s.layers = {LayerSpec::conv(3, 3), LayerSpec::activation(LayerKind::relu), LayerSpec::maxpool(),
              LayerSpec::dropout(with_dropout ? 0.5 : 0.0), LayerSpec::flatten(), LayerSpec::dense(5),
              LayerSpec::activation(LayerKind::relu), LayerSpec::dense(3), LayerSpec::activation(LayerKind::softmax)};
  return s;
}

}  // namespace

TEST_CASE("network gradient check") {
  std::mt19937_64 rng(9);
  SUBCASE("single dense layer") {
    NetworkSpec s;
    s.input = {1, 1, 4};
    s.num_classes = 3;
    s.layers = {LayerSpec::flatten(), LayerSpec::dense(3), LayerSpec::activation(LayerKind::softmax)};
    Network<double> net(s, 1);
    auto x = random_tensor({5, 1, 1, 4}, rng);
    GradCheckOptions o;
    o.per_tensor = 0;
    CHECK(grad_check(net, x, {0, 1, 2, 1, 0}, o) < 1e-6);
  }
  SUBCASE("conv, pool and dense stack with either head") {
    for (auto head : {LayerKind::softmax, LayerKind::sigmoid}) {
      auto s = small_cnn(true);
      s.layers.back().kind = head;
      Network<double> net(s, 2);
      auto x = random_tensor({3, 8, 6, 2}, rng);
      GradCheckOptions o;
      o.per_tensor = 0;
      CHECK(grad_check(net, x, {0, 2, 1}, o) < 1e-4);
    }
  }
  SUBCASE("train-mode dropout is rejected") {
    Network<double> net(small_cnn(true), 3);
    auto x = random_tensor({2, 8, 6, 2}, rng);
    GradCheckOptions o;
    o.mode = Mode::train;
    CHECK(error_code_of([&] { grad_check(net, x, {0, 1}, o); }) == ErrorCode::CheckRequiresEvalMode);
    Network<double> plain(small_cnn(false), 3);
    CHECK(grad_check(plain, x, {0, 1}, o) < 1e-4);
  }
}

TEST_CASE("network forward is deterministic and training reduces loss") {
  Network<float> net(small_cnn(true), 4);
  std::mt19937_64 rng(10);
  auto x = random_tensor({6, 8, 6, 2}, rng).cast<float>();
  std::vector<int> labels{0, 1, 2, 0, 1, 2};
  CHECK(net.forward(x, Mode::eval) == net.forward(x, Mode::eval));
  CHECK(net.forward(x, Mode::train, 5) == net.forward(x, Mode::train, 5));
  double first = net.loss(x, labels);
  OptimizerConfig opt;
  opt.lr = 1e-2;
  for (int step = 0; step < 60; ++step) net.train_step(x, labels, opt, static_cast<std::uint64_t>(step));
  CHECK(net.loss(x, labels) < first);

  auto params = net.flat_parameters();
  CHECK(params.size() == net.parameter_count());
  Network<float> other(small_cnn(true), 99);
  other.set_flat_parameters(params);
  CHECK(other.forward(x, Mode::eval) == net.forward(x, Mode::eval));
  params.pop_back();
  CHECK(error_code_of([&] { other.set_flat_parameters(params); }) == ErrorCode::PayloadLengthMismatch);
}
