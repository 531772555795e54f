#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace neuroens {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& s);  // "(1, 176, 208, 3)"

/// Dense row-major array. Layer tensors are NHWC for images and [N, D] for vectors.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> data);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t dim(std::size_t i) const noexcept { return shape_[i]; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  T* ptr() noexcept { return data_.data(); }
  const T* ptr() const noexcept { return data_.data(); }
  T& operator[](std::size_t i) noexcept { return data_[i]; }
  T operator[](std::size_t i) const noexcept { return data_[i]; }

  // Same element count, new shape. Throws ShapeMismatch.
  void reshape(Shape shape);
  // Throws InvalidArgument on NaN/Inf.
  void check_finite() const;

  template <typename U>
  Tensor<U> cast() const {
    return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<T> data_;
};

enum class Padding { same, valid };
enum class Mode { train, eval };

enum class LayerKind { conv2d, maxpool2d, relu, sigmoid, softmax, dropout, flatten, dense };

const char* layer_kind_name(LayerKind k) noexcept;

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::size_t out_channels = 0;  // conv2d
  std::size_t kernel_h = 0, kernel_w = 0;
  std::size_t stride = 1;        // conv2d, maxpool2d
  Padding padding = Padding::same;
  std::size_t pool = 2;          // maxpool2d
  double rate = 0.0;             // dropout
  std::size_t units = 0;         // dense
  // Row of the published layer table this layer belongs to; -1 when untracked.
  int row = -1;
  std::string row_name;

  static LayerSpec conv(std::size_t out_channels, std::size_t kernel, std::size_t stride = 1,
                        Padding padding = Padding::same);
  static LayerSpec maxpool(std::size_t pool = 2, std::size_t stride = 2);
  static LayerSpec activation(LayerKind kind);
  static LayerSpec dropout(double rate);
  static LayerSpec flatten();
  static LayerSpec dense(std::size_t units);

  bool has_parameters() const noexcept { return kind == LayerKind::conv2d || kind == LayerKind::dense; }
  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct NetworkSpec {
  std::string name;
  Shape input;  // per sample: (H, W, C)
  std::size_t num_classes = 2;
  double width_multiplier = 1.0;
  std::vector<LayerSpec> layers;

  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

// Per-sample output shape of one layer. Throws ShapeFlowBroken with `index` in the message.
Shape layer_output_shape(const LayerSpec& layer, const Shape& in, std::size_t index);

// Weight and bias shapes; empty for parameterless layers.
Shape weight_shape(const LayerSpec& layer, const Shape& in);
Shape bias_shape(const LayerSpec& layer);

// ---- layer primitives --------------------------------------------------------------------

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, std::size_t stride,
                         Padding padding);

template <typename T>
struct ConvGrads {
  Tensor<T> x, w, b;
};

// With input_grad false the returned x gradient is left at zero.
template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& grad_out, std::size_t stride,
                             Padding padding, bool input_grad = true);

template <typename T>
struct PoolResult {
  Tensor<T> out;
  std::vector<std::uint32_t> argmax;  // flat input index per output element
};

// Floor semantics; within-window ties go to the first element in row-major order.
template <typename T>
PoolResult<T> maxpool2d_forward(const Tensor<T>& x, std::size_t pool, std::size_t stride);

template <typename T>
Tensor<T> maxpool2d_backward(const Shape& input_shape, const std::vector<std::uint32_t>& argmax,
                             const Tensor<T>& grad_out);

template <typename T>
Tensor<T> dense_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

template <typename T>
struct DenseGrads {
  Tensor<T> x, w, b;
};

template <typename T>
DenseGrads<T> dense_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& grad_out);

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& x);
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& grad_out);
template <typename T>
Tensor<T> sigmoid_forward(const Tensor<T>& x);
template <typename T>
Tensor<T> sigmoid_backward(const Tensor<T>& y, const Tensor<T>& grad_out);
// Row-wise over the last dimension.
template <typename T>
Tensor<T> softmax_forward(const Tensor<T>& x);
template <typename T>
Tensor<T> softmax_backward(const Tensor<T>& y, const Tensor<T>& grad_out);

// Inverted dropout. `mask` receives the per-element scale (0 or 1/(1-rate)) in train mode.
template <typename T>
Tensor<T> dropout_forward(const Tensor<T>& x, double rate, Mode mode, std::uint64_t seed,
                          std::vector<T>* mask = nullptr);

inline constexpr double kProbabilityClamp = 1e-7;

template <typename T>
struct LossResult {
  double loss = 0;
  Tensor<T> grad;  // d loss / d probs
};

// Mean over rows of -log p[label], p clamped to [1e-7, 1 - 1e-7].
template <typename T>
LossResult<T> cross_entropy(const Tensor<T>& probs, const std::vector<int>& labels);

// Per-neuron binary cross-entropy against one-hot targets, summed over neurons, mean over rows.
template <typename T>
LossResult<T> binary_cross_entropy(const Tensor<T>& probs, const std::vector<int>& labels);

// ---- optimizers -------------------------------------------------------------------------

// velocity = momentum * velocity + grad; param -= lr * velocity
template <typename T>
void sgd_step(std::span<T> params, std::span<const T> grads, double lr, double momentum, std::span<T> velocity);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// One Adam update at 1-based step t.
template <typename T>
void adam_step(std::span<T> params, std::span<const T> grads, std::span<T> m, std::span<T> v, long t,
               const AdamConfig& config);

enum class OptimizerKind { adam, sgd };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double lr = 1e-3;
  double momentum = 0.9;  // sgd
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// ---- network ----------------------------------------------------------------------------

template <typename T>
class Network {
 public:
  Network() = default;
  // Validates shape flow and initializes weights: He-uniform for layers feeding a relu,
  // Glorot-uniform otherwise, zero biases.
  Network(NetworkSpec spec, std::uint64_t seed);

  const NetworkSpec& spec() const noexcept { return spec_; }
  const std::vector<Shape>& output_shapes() const noexcept { return shapes_; }
  std::size_t parameter_count() const noexcept;

  // Layer l's parameters; empty tensors for parameterless layers.
  Tensor<T>& weight(std::size_t l) { return weights_[l]; }
  Tensor<T>& bias(std::size_t l) { return biases_[l]; }
  const Tensor<T>& weight(std::size_t l) const { return weights_[l]; }
  const Tensor<T>& bias(std::size_t l) const { return biases_[l]; }
  const Tensor<T>& weight_grad(std::size_t l) const { return grad_w_[l]; }
  const Tensor<T>& bias_grad(std::size_t l) const { return grad_b_[l]; }

  // All parameters, layer order, weight before bias.
  std::vector<T> flat_parameters() const;
  void set_flat_parameters(std::span<const T> values);  // throws PayloadLengthMismatch

  bool has_active_dropout() const noexcept;

  // x: [N, H, W, C]. Returns head outputs [N, classes]. Caches activations for backward.
  Tensor<T> forward(const Tensor<T>& x, Mode mode, std::uint64_t dropout_seed = 0);

  // Loss of the last forward pass against labels (cross-entropy for softmax heads, binary
  // cross-entropy for sigmoid heads); fills parameter gradients. Returns the loss.
  double backward(const std::vector<int>& labels);

  double loss(const Tensor<T>& x, const std::vector<int>& labels, Mode mode = Mode::eval,
              std::uint64_t dropout_seed = 0);

  // Forward + backward + one optimizer update.
  double train_step(const Tensor<T>& x, const std::vector<int>& labels, const OptimizerConfig& opt,
                    std::uint64_t dropout_seed);

  // Head outputs of the last forward pass.
  const Tensor<T>& output() const noexcept { return output_; }

  // Bit pattern of relu signs and pooling winners from the last forward pass.
  std::uint64_t activation_signature() const noexcept;

 private:
  NetworkSpec spec_;
  std::vector<Shape> shapes_;
  std::vector<Tensor<T>> weights_, biases_, grad_w_, grad_b_;
  std::vector<Tensor<T>> inputs_;
  Tensor<T> output_;
  std::vector<std::vector<std::uint32_t>> argmax_;
  std::vector<std::vector<T>> masks_;
  // optimizer state
  std::vector<Tensor<T>> m_w_, m_b_, v_w_, v_b_;
  long step_ = 0;
};

struct GradCheckOptions {
  Mode mode = Mode::eval;
  double eps = 1e-6;
  std::size_t per_tensor = 12;  // parameters sampled per weight/bias tensor; 0 checks all
  std::uint64_t seed = 0;
};

// Max relative error |a - n| / max(|a|, |n|, 1e-6) between analytic and central-difference
// gradients over a random parameter sample. Steps that cross a relu or pooling kink are
// shrunk. Throws CheckRequiresEvalMode for train-mode checks with active dropout.
double grad_check(Network<double>& net, const Tensor<double>& x, const std::vector<int>& labels,
                  const GradCheckOptions& options = {});

}  // namespace neuroens
