#ifndef ISCOM_NN_HPP
#define ISCOM_NN_HPP

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "iscom/core.hpp"

namespace iscom::nn {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Dense row-major array. Networks work on 2-D tensors: rows are points (or
/// batch entries), columns are features.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0);
  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0);
  static Tensor from_matrix(const RowMatrix& m);
  static Tensor from_points(const std::vector<Vec3>& pts);

  std::size_t size() const { return data.size(); }
  std::size_t rows() const;
  std::size_t cols() const;
  double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

  Eigen::Map<RowMatrix> matrix();
  Eigen::Map<const RowMatrix> matrix() const;
  std::vector<Vec3> to_points() const;

  bool all_finite() const;
  bool same_shape(const Tensor& other) const { return shape == other.shape; }
};

enum class LayerKind : std::uint8_t {
  kDense = 1,
  kRelu = 2,
  kTanh = 3,
  kMaxPoolPoints = 4,  // column-wise max over rows, output has one row
};

const char* layer_kind_name(LayerKind kind);

struct Layer {
  LayerKind kind = LayerKind::kRelu;
  Tensor weights;     // out x in, dense only
  Tensor bias;        // 1 x out
  Tensor prune_mask;  // same shape as weights, 1 keeps and 0 prunes

  static Layer dense(std::size_t in, std::size_t out);
  static Layer relu() { return Layer{LayerKind::kRelu, {}, {}, {}}; }
  static Layer tanh() { return Layer{LayerKind::kTanh, {}, {}, {}}; }
  static Layer maxpool_points() { return Layer{LayerKind::kMaxPoolPoints, {}, {}, {}}; }

  bool has_params() const { return kind == LayerKind::kDense; }
  std::size_t in_features() const { return weights.cols(); }
  std::size_t out_features() const { return weights.rows(); }
  /// Zeroes every weight whose mask entry is 0.
  void apply_mask();
  std::size_t zero_weight_count() const;
};

/// Parameter gradients, one slot per layer (empty for parameter-free layers).
struct Gradients {
  std::vector<Tensor> weights;
  std::vector<Tensor> bias;

  void set_zero();
  void scale(double s);
  void add(const Gradients& other);
  bool all_finite() const;
};

/// Intermediate activations of one forward pass; index i is the input of layer i.
struct ForwardCache {
  std::vector<Tensor> inputs;
  std::vector<std::vector<std::size_t>> argmax;  // maxpool layers only
};

class Network {
 public:
  std::vector<Layer> layers;

  Network() = default;
  explicit Network(std::vector<Layer> l) : layers(std::move(l)) {}

  /// He-style initialization of all dense layers; biases start at zero.
  void init(Rng& rng);

  /// Throws InvalidArgument on shape mismatch and NumericError on non-finite output.
  Tensor forward(const Tensor& input, ForwardCache* cache = nullptr) const;

  /// Accumulates parameter gradients into `grads` and returns d loss / d input.
  Tensor backward(const ForwardCache& cache, const Tensor& grad_output, Gradients& grads) const;

  Gradients zero_gradients() const;
  void apply_masks();

  std::size_t weight_count() const;
  std::size_t parameter_count() const;
  std::size_t input_features() const;
  std::size_t output_features() const;
};

/// Layer-by-layer evaluation; convenience wrapper over Network::forward.
Tensor forward(const Network& net, const Tensor& input, ForwardCache* cache = nullptr);

class SgdOptimizer {
 public:
  explicit SgdOptimizer(double lr, double momentum = 0.9) : lr_(lr), momentum_(momentum) {}

  /// w <- w - lr * v with v <- momentum * v + g; masks are re-applied after the update.
  void step(Network& net, const Gradients& grads);
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

 private:
  double lr_;
  double momentum_;
  Gradients velocity_;
};

/// One stateless step with fresh momentum (equivalent to plain SGD).
void sgd_step(Network& net, const Gradients& grads, double lr, double momentum);

class AdamOptimizer {
 public:
  explicit AdamOptimizer(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(Network& net, const Gradients& grads);

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  Gradients m_, v_;
};

struct LossResult {
  double value = 0.0;
  Tensor grad;  // d value / d pred, same shape as pred
};

/// Symmetric Chamfer distance (mean nearest-neighbor distance both ways) of
/// n x 3 point tensors, with the nearest-neighbor subgradient. B x n x 3
/// batches are averaged over B.
LossResult chamfer_loss(const Tensor& pred, const Tensor& target);

/// Minimum over bijections of the summed matched distances, solved exactly.
LossResult emd_loss(const Tensor& pred, const Tensor& target, std::size_t cap = 256);

struct LossSpec {
  double lambda_rec = 1.0;
  double rotation_penalty = 1.0;
  std::size_t emd_cap = 256;

  void validate() const;
};

struct TotalLossResult {
  double value = 0.0;
  double reconstruction = 0.0;
  Tensor grad_pred;
  Vec3 grad_rot = Vec3::Zero();
};

/// Rodrigues rotation for an axis-angle vector.
Eigen::Matrix3d rotation_from_axis_angle(const Vec3& theta);

/// lambda_rec * L_rec(R(theta) pred, target) + penalty * |theta|^2, with L_rec
/// the EMD when n <= emd_cap and the Chamfer distance otherwise.
TotalLossResult total_loss(const Tensor& pred, const Tensor& target, const Vec3& rot_params,
                           const LossSpec& spec);

}  // namespace iscom::nn

#endif  // ISCOM_NN_HPP
