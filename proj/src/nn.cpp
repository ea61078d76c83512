#include "iscom/nn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include <Eigen/Geometry>

#include "iscom/assignment.hpp"

namespace iscom::nn {

namespace {

std::string shape_str(const std::vector<std::size_t>& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ')';
  return os.str();
}

void require_finite(const Tensor& t, const char* what, std::size_t layer) {
  if (!t.all_finite()) {
    std::ostringstream os;
    os << what << ": non-finite value at layer " << layer;
    throw NumericError(os.str());
  }
}

Eigen::Matrix3d skew(const Vec3& v) {
  Eigen::Matrix3d m;
  m << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return m;
}

RowMatrix masked_weights(const Layer& l) {
  if (l.prune_mask.size() == 0) return l.weights.matrix();
  return l.weights.matrix().cwiseProduct(l.prune_mask.matrix());
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> s, double fill) : shape(std::move(s)) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  data.assign(n, fill);
}

Tensor::Tensor(std::size_t rows, std::size_t cols, double fill) : Tensor({rows, cols}, fill) {}

Tensor Tensor::from_matrix(const RowMatrix& m) {
  Tensor t(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()));
  t.matrix() = m;
  return t;
}

Tensor Tensor::from_points(const std::vector<Vec3>& pts) {
  Tensor t(pts.size(), 3);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    for (int k = 0; k < 3; ++k) t.data[i * 3 + k] = pts[i][k];
  }
  return t;
}

std::size_t Tensor::rows() const {
  if (shape.empty()) return 0;
  std::size_t r = 1;
  for (std::size_t i = 0; i + 1 < shape.size(); ++i) r *= shape[i];
  return r;
}

std::size_t Tensor::cols() const { return shape.empty() ? 0 : shape.back(); }

Eigen::Map<RowMatrix> Tensor::matrix() {
  return {data.data(), static_cast<Eigen::Index>(rows()), static_cast<Eigen::Index>(cols())};
}

Eigen::Map<const RowMatrix> Tensor::matrix() const {
  return {data.data(), static_cast<Eigen::Index>(rows()), static_cast<Eigen::Index>(cols())};
}

std::vector<Vec3> Tensor::to_points() const {
  if (cols() != 3) throw InvalidArgument("Tensor::to_points: expected 3 columns");
  std::vector<Vec3> pts(rows());
  for (std::size_t i = 0; i < pts.size(); ++i) {
    pts[i] = Vec3(data[i * 3], data[i * 3 + 1], data[i * 3 + 2]);
  }
  return pts;
}

bool Tensor::all_finite() const {
  return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
}

const char* layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::kDense: return "dense";
    case LayerKind::kRelu: return "relu";
    case LayerKind::kTanh: return "tanh";
    case LayerKind::kMaxPoolPoints: return "maxpool_points";
  }
  return "unknown";
}

Layer Layer::dense(std::size_t in, std::size_t out) {
  if (in == 0 || out == 0) throw InvalidArgument("Layer::dense: zero-sized layer");
  Layer l;
  l.kind = LayerKind::kDense;
  l.weights = Tensor(out, in);
  l.bias = Tensor(1, out);
  l.prune_mask = Tensor(out, in, 1.0);
  return l;
}

void Layer::apply_mask() {
  if (kind != LayerKind::kDense || prune_mask.size() == 0) return;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (prune_mask.data[i] == 0.0) weights.data[i] = 0.0;
  }
}

std::size_t Layer::zero_weight_count() const {
  return static_cast<std::size_t>(std::count(weights.data.begin(), weights.data.end(), 0.0));
}

void Gradients::set_zero() {
  for (auto& t : weights) std::fill(t.data.begin(), t.data.end(), 0.0);
  for (auto& t : bias) std::fill(t.data.begin(), t.data.end(), 0.0);
}

void Gradients::scale(double s) {
  for (auto& t : weights) t.matrix() *= s;
  for (auto& t : bias) t.matrix() *= s;
}

void Gradients::add(const Gradients& other) {
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (weights[i].size()) weights[i].matrix() += other.weights[i].matrix();
    if (bias[i].size()) bias[i].matrix() += other.bias[i].matrix();
  }
}

bool Gradients::all_finite() const {
  for (const auto& t : weights) {
    if (!t.all_finite()) return false;
  }
  for (const auto& t : bias) {
    if (!t.all_finite()) return false;
  }
  return true;
}

void Network::init(Rng& rng) {
  for (auto& l : layers) {
    if (!l.has_params()) continue;
    const double sd = std::sqrt(2.0 / static_cast<double>(l.in_features()));
    for (auto& w : l.weights.data) w = rng.normal(0.0, sd);
    std::fill(l.bias.data.begin(), l.bias.data.end(), 0.0);
    l.apply_mask();
  }
}

Tensor Network::forward(const Tensor& input, ForwardCache* cache) const {
  if (cache) {
    cache->inputs.assign(layers.size(), Tensor{});
    cache->argmax.assign(layers.size(), {});
  }
  Tensor x = input;
  for (std::size_t li = 0; li < layers.size(); ++li) {
    const Layer& l = layers[li];
    if (cache) cache->inputs[li] = x;
    switch (l.kind) {
      case LayerKind::kDense: {
        if (x.cols() != l.in_features()) {
          throw InvalidArgument("forward: layer " + std::to_string(li) + " expects " +
                                std::to_string(l.in_features()) + " features, got " +
                                shape_str(x.shape));
        }
        Tensor y(x.rows(), l.out_features());
        if (l.prune_mask.size()) {
          y.matrix().noalias() = x.matrix() * masked_weights(l).transpose();
        } else {
          y.matrix().noalias() = x.matrix() * l.weights.matrix().transpose();
        }
        y.matrix().rowwise() += l.bias.matrix().row(0);
        x = std::move(y);
        break;
      }
      case LayerKind::kRelu:
        for (auto& v : x.data) v = v > 0.0 ? v : 0.0;
        break;
      case LayerKind::kTanh:
        for (auto& v : x.data) v = std::tanh(v);
        break;
      case LayerKind::kMaxPoolPoints: {
        if (x.rows() == 0) throw InvalidArgument("forward: maxpool over zero points");
        Tensor y(1, x.cols());
        std::vector<std::size_t> arg(x.cols(), 0);
        for (std::size_t c = 0; c < x.cols(); ++c) {
          double best = x.at(0, c);
          for (std::size_t r = 1; r < x.rows(); ++r) {
            if (x.at(r, c) > best) {
              best = x.at(r, c);
              arg[c] = r;
            }
          }
          y.at(0, c) = best;
        }
        if (cache) cache->argmax[li] = std::move(arg);
        x = std::move(y);
        break;
      }
    }
    require_finite(x, "forward", li);
  }
  return x;
}

Tensor Network::backward(const ForwardCache& cache, const Tensor& grad_output,
                         Gradients& grads) const {
  if (cache.inputs.size() != layers.size()) throw InvalidArgument("backward: stale cache");
  if (grads.weights.size() != layers.size()) grads = zero_gradients();
  Tensor g = grad_output;
  for (std::size_t li = layers.size(); li-- > 0;) {
    const Layer& l = layers[li];
    const Tensor& x = cache.inputs[li];
    switch (l.kind) {
      case LayerKind::kDense: {
        Tensor dx(x.rows(), x.cols());
        if (l.prune_mask.size()) {
          grads.weights[li].matrix() +=
              (g.matrix().transpose() * x.matrix()).cwiseProduct(l.prune_mask.matrix());
          dx.matrix().noalias() = g.matrix() * masked_weights(l);
        } else {
          grads.weights[li].matrix().noalias() += g.matrix().transpose() * x.matrix();
          dx.matrix().noalias() = g.matrix() * l.weights.matrix();
        }
        grads.bias[li].matrix() += g.matrix().colwise().sum();
        g = std::move(dx);
        break;
      }
      case LayerKind::kRelu:
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (!(x.data[i] > 0.0)) g.data[i] = 0.0;
        }
        break;
      case LayerKind::kTanh:
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double t = std::tanh(x.data[i]);
          g.data[i] *= 1.0 - t * t;
        }
        break;
      case LayerKind::kMaxPoolPoints: {
        Tensor dx(x.rows(), x.cols());
        const auto& arg = cache.argmax[li];
        for (std::size_t c = 0; c < x.cols(); ++c) dx.at(arg[c], c) = g.at(0, c);
        g = std::move(dx);
        break;
      }
    }
    require_finite(g, "backward", li);
  }
  return g;
}

Gradients Network::zero_gradients() const {
  Gradients g;
  g.weights.resize(layers.size());
  g.bias.resize(layers.size());
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (!layers[i].has_params()) continue;
    g.weights[i] = Tensor(layers[i].weights.shape);
    g.bias[i] = Tensor(layers[i].bias.shape);
  }
  return g;
}

void Network::apply_masks() {
  for (auto& l : layers) l.apply_mask();
}

std::size_t Network::weight_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.weights.size();
  return n;
}

std::size_t Network::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.weights.size() + l.bias.size();
  return n;
}

std::size_t Network::input_features() const {
  for (const auto& l : layers) {
    if (l.has_params()) return l.in_features();
  }
  return 0;
}

std::size_t Network::output_features() const {
  for (auto it = layers.rbegin(); it != layers.rend(); ++it) {
    if (it->has_params()) return it->out_features();
  }
  return 0;
}

Tensor forward(const Network& net, const Tensor& input, ForwardCache* cache) {
  return net.forward(input, cache);
}

void SgdOptimizer::step(Network& net, const Gradients& grads) {
  if (grads.weights.size() != net.layers.size()) {
    throw InvalidArgument("sgd_step: gradient layout does not match the network");
  }
  if (velocity_.weights.size() != net.layers.size()) velocity_ = net.zero_gradients();
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    Layer& l = net.layers[i];
    if (!l.has_params()) continue;
    if (!grads.weights[i].same_shape(l.weights) || !grads.bias[i].same_shape(l.bias)) {
      throw InvalidArgument("sgd_step: gradient shape mismatch at layer " + std::to_string(i));
    }
    auto vw = velocity_.weights[i].matrix();
    auto vb = velocity_.bias[i].matrix();
    vw = momentum_ * vw + grads.weights[i].matrix();
    vb = momentum_ * vb + grads.bias[i].matrix();
    l.weights.matrix() -= lr_ * vw;
    l.bias.matrix() -= lr_ * vb;
    l.apply_mask();
  }
}

void sgd_step(Network& net, const Gradients& grads, double lr, double momentum) {
  SgdOptimizer opt(lr, momentum);
  opt.step(net, grads);
}

void AdamOptimizer::step(Network& net, const Gradients& grads) {
  if (grads.weights.size() != net.layers.size()) {
    throw InvalidArgument("adam: gradient layout does not match the network");
  }
  if (m_.weights.size() != net.layers.size()) {
    m_ = net.zero_gradients();
    v_ = net.zero_gradients();
  }
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  auto update = [&](Tensor& p, const Tensor& g, Tensor& m, Tensor& v) {
    for (std::size_t k = 0; k < p.size(); ++k) {
      m.data[k] = beta1_ * m.data[k] + (1 - beta1_) * g.data[k];
      v.data[k] = beta2_ * v.data[k] + (1 - beta2_) * g.data[k] * g.data[k];
      p.data[k] -= lr_ * (m.data[k] / c1) / (std::sqrt(v.data[k] / c2) + eps_);
    }
  };
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    Layer& l = net.layers[i];
    if (!l.has_params()) continue;
    update(l.weights, grads.weights[i], m_.weights[i], v_.weights[i]);
    update(l.bias, grads.bias[i], m_.bias[i], v_.bias[i]);
    l.apply_mask();
  }
}

namespace {

void check_points(const Tensor& t, const char* what) {
  if (t.shape.size() < 2 || t.cols() != 3) {
    throw InvalidArgument(std::string(what) + ": expected an n x 3 tensor, got " +
                          shape_str(t.shape));
  }
  if (t.rows() == 0) throw InvalidArgument(std::string(what) + ": empty point set");
}

// Splits a B x n x 3 tensor into B views of n x 3; 2-D tensors are one batch.
std::size_t batch_count(const Tensor& t) { return t.shape.size() == 3 ? t.shape[0] : 1; }

template <typename Fn>
LossResult batched(const Tensor& pred, const Tensor& target, const char* what, Fn single) {
  check_points(pred, what);
  check_points(target, what);
  const std::size_t b = batch_count(pred);
  if (batch_count(target) != b) throw InvalidArgument(std::string(what) + ": batch size mismatch");
  if (b == 1 && pred.shape.size() == 2 && target.shape.size() == 2) return single(pred, target);
  LossResult out;
  out.grad = Tensor(pred.shape);
  const std::size_t np = pred.rows() / b, nt = target.rows() / b;
  for (std::size_t i = 0; i < b; ++i) {
    Tensor p(np, 3), t(nt, 3);
    std::copy_n(pred.data.begin() + i * np * 3, np * 3, p.data.begin());
    std::copy_n(target.data.begin() + i * nt * 3, nt * 3, t.data.begin());
    LossResult r = single(p, t);
    out.value += r.value / b;
    for (std::size_t k = 0; k < np * 3; ++k) out.grad.data[i * np * 3 + k] = r.grad.data[k] / b;
  }
  return out;
}

LossResult chamfer_single(const Tensor& pred, const Tensor& target) {
  const std::size_t n = pred.rows(), m = target.rows();
  const auto P = pred.matrix();
  const auto T = target.matrix();
  LossResult out;
  out.grad = Tensor(n, 3);
  auto g = out.grad.matrix();
  std::vector<std::size_t> nn_of_target(m, 0);
  std::vector<double> best_t(m, std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t arg = 0;
    for (std::size_t j = 0; j < m; ++j) {
      const double d = (P.row(i) - T.row(j)).squaredNorm();
      if (d < best) {
        best = d;
        arg = j;
      }
      if (d < best_t[j]) {
        best_t[j] = d;
        nn_of_target[j] = i;
      }
    }
    const double dist = std::sqrt(best);
    out.value += dist / n;
    if (dist > 0) g.row(i) += (P.row(i) - T.row(arg)) / (dist * n);
  }
  for (std::size_t j = 0; j < m; ++j) {
    const double dist = std::sqrt(best_t[j]);
    out.value += dist / m;
    const std::size_t i = nn_of_target[j];
    if (dist > 0) g.row(i) += (P.row(i) - T.row(j)) / (dist * m);
  }
  return out;
}

LossResult emd_single(const Tensor& pred, const Tensor& target, std::size_t cap) {
  const std::size_t n = pred.rows();
  if (target.rows() != n) {
    throw InvalidArgument("emd_loss: cardinalities differ (" + std::to_string(n) + " vs " +
                          std::to_string(target.rows()) + ")");
  }
  if (n > cap) throw InvalidArgument("emd_loss: " + std::to_string(n) + " points exceed the cap");
  const auto P = pred.matrix();
  const auto T = target.matrix();
  Eigen::MatrixXd cost(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) cost(i, j) = (P.row(i) - T.row(j)).norm();
  }
  const Assignment a = solve_assignment(cost);
  LossResult out;
  out.grad = Tensor(n, 3);
  for (std::size_t i = 0; i < n; ++i) {
    const auto j = static_cast<std::size_t>(a.row_to_col[i]);
    const double d = cost(i, j);
    out.value += d;
    if (d > 0) out.grad.matrix().row(i) = (P.row(i) - T.row(j)) / d;
  }
  return out;
}

}  // namespace

LossResult chamfer_loss(const Tensor& pred, const Tensor& target) {
  return batched(pred, target, "chamfer_loss", chamfer_single);
}

LossResult emd_loss(const Tensor& pred, const Tensor& target, std::size_t cap) {
  return batched(pred, target, "emd_loss",
                 [cap](const Tensor& p, const Tensor& t) { return emd_single(p, t, cap); });
}

void LossSpec::validate() const {
  if (!(lambda_rec >= 0.0)) throw InvalidArgument("LossSpec: lambda_rec must be >= 0");
  if (!(rotation_penalty >= 0.0)) throw InvalidArgument("LossSpec: rotation_penalty must be >= 0");
}

Eigen::Matrix3d rotation_from_axis_angle(const Vec3& theta) {
  const double angle = theta.norm();
  if (angle < 1e-12) return Eigen::Matrix3d::Identity() + skew(theta);
  return Eigen::AngleAxisd(angle, theta / angle).toRotationMatrix();
}

TotalLossResult total_loss(const Tensor& pred, const Tensor& target, const Vec3& rot_params,
                           const LossSpec& spec) {
  spec.validate();
  check_points(pred, "total_loss");
  if (!rot_params.allFinite()) throw NumericError("total_loss: non-finite rotation parameters");
  const Eigen::Matrix3d r = rotation_from_axis_angle(rot_params);
  Tensor rotated(pred.shape);
  rotated.matrix().noalias() = pred.matrix() * r.transpose();

  const std::size_t per_cloud = pred.rows() / batch_count(pred);
  const LossResult rec = per_cloud <= spec.emd_cap ? emd_loss(rotated, target, spec.emd_cap)
                                                   : chamfer_loss(rotated, target);
  TotalLossResult out;
  out.reconstruction = rec.value;
  out.value = spec.lambda_rec * rec.value + spec.rotation_penalty * rot_params.squaredNorm();
  // q = R p, so dL/dp = R^T dL/dq; in row form that is G * R.
  out.grad_pred = Tensor(pred.shape);
  out.grad_pred.matrix().noalias() = spec.lambda_rec * rec.grad.matrix() * r;

  // dR/dv_k = (v_k [v]x + [v x (I - R) e_k]x) R / |v|^2, which tends to [e_k]x at v = 0.
  const double n2 = rot_params.squaredNorm();
  const Eigen::Matrix3d gp = rec.grad.matrix().transpose() * pred.matrix();  // sum_i g_i p_i^T
  for (int k = 0; k < 3; ++k) {
    Eigen::Matrix3d dr;
    if (n2 < 1e-20) {
      dr = skew(Vec3::Unit(k));
    } else {
      const Vec3 col = (Eigen::Matrix3d::Identity() - r).col(k);
      dr = (rot_params[k] * skew(rot_params) + skew(rot_params.cross(col))) * r / n2;
    }
    out.grad_rot[k] = spec.lambda_rec * dr.cwiseProduct(gp).sum() +
                      2.0 * spec.rotation_penalty * rot_params[k];
  }
  if (!out.grad_pred.all_finite() || !out.grad_rot.allFinite() || !std::isfinite(out.value)) {
    throw NumericError("total_loss: non-finite loss or gradient");
  }
  return out;
}

}  // namespace iscom::nn
