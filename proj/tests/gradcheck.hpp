// Finite-difference checks for the nn engine, shared by unit and acceptance tests.
#ifndef ISCOM_TESTS_GRADCHECK_HPP
#define ISCOM_TESTS_GRADCHECK_HPP

#include <algorithm>

#include "iscom/nn.hpp"
#include "oracles.hpp"

namespace gradcheck {

using iscom::Rng;
using iscom::nn::Layer;
using iscom::nn::LayerKind;
using iscom::nn::Network;
using iscom::nn::Tensor;

inline Tensor random_tensor(Rng& rng, std::size_t r, std::size_t c, double min_abs = 0.0) {
  Tensor t(r, c);
  for (auto& v : t.data) {
    do {
      v = rng.normal();
    } while (std::abs(v) < min_abs);
  }
  return t;
}

/// Worst relative error across input, weight and bias gradients of
/// sum(coeff * net(x)), against central differences with h = 1e-4.
inline double network_error(const Network& net, const Tensor& x, const Tensor& coeff) {
  auto loss = [&](const Network& n, const Tensor& in) {
    const Tensor y = n.forward(in);
    double s = 0;
    for (std::size_t i = 0; i < y.size(); ++i) s += coeff.data[i] * y.data[i];
    return s;
  };
  iscom::nn::ForwardCache cache;
  net.forward(x, &cache);
  auto grads = net.zero_gradients();
  const Tensor gx = net.backward(cache, coeff, grads);

  double worst = oracle::relative_error(
      gx.data, oracle::numeric_gradient(
                   [&](const std::vector<double>& v) {
                     Tensor in = x;
                     in.data = v;
                     return loss(net, in);
                   },
                   x.data));
  for (std::size_t li = 0; li < net.layers.size(); ++li) {
    if (!net.layers[li].has_params()) continue;
    for (int which = 0; which < 2; ++which) {
      const Tensor& p = which == 0 ? net.layers[li].weights : net.layers[li].bias;
      const Tensor& g = which == 0 ? grads.weights[li] : grads.bias[li];
      const auto num = oracle::numeric_gradient(
          [&](const std::vector<double>& v) {
            Network n = net;
            (which == 0 ? n.layers[li].weights : n.layers[li].bias).data = v;
            return loss(n, x);
          },
          p.data);
      worst = std::max(worst, oracle::relative_error(g.data, num));
    }
  }
  return worst;
}

/// One randomized instance per layer kind; returns the worst relative error.
inline double layer_instance_error(LayerKind kind, Rng& rng) {
  const std::size_t rows = 2 + rng.below(4), in = 2 + rng.below(4), out = 2 + rng.below(4);
  Network net;
  std::size_t cols = in;
  switch (kind) {
    case LayerKind::kDense:
      net.layers.push_back(Layer::dense(in, out));
      net.init(rng);
      for (auto& b : net.layers[0].bias.data) b = rng.normal();
      cols = out;
      break;
    case LayerKind::kRelu: net.layers.push_back(Layer::relu()); break;
    case LayerKind::kTanh: net.layers.push_back(Layer::tanh()); break;
    case LayerKind::kMaxPoolPoints: net.layers.push_back(Layer::maxpool_points()); break;
  }
  // Keep inputs away from the relu kink so central differences are valid.
  const Tensor x = random_tensor(rng, rows, in, kind == LayerKind::kRelu ? 1e-2 : 0.0);
  const std::size_t out_rows = kind == LayerKind::kMaxPoolPoints ? 1 : rows;
  const Tensor coeff = random_tensor(rng, out_rows, cols);
  return network_error(net, x, coeff);
}

inline std::vector<double> flat(const Tensor& t) { return t.data; }

/// Chamfer or EMD gradient on a random instance of n points.
inline double loss_instance_error(bool emd, std::size_t n, Rng& rng) {
  const Tensor pred = Tensor::from_points(oracle::random_points(rng, n));
  const Tensor target = Tensor::from_points(oracle::random_points(rng, n));
  auto value = [&](const std::vector<double>& v) {
    Tensor p = pred;
    p.data = v;
    return emd ? iscom::nn::emd_loss(p, target).value : iscom::nn::chamfer_loss(p, target).value;
  };
  const auto analytic =
      emd ? iscom::nn::emd_loss(pred, target).grad : iscom::nn::chamfer_loss(pred, target).grad;
  return oracle::relative_error(analytic.data, oracle::numeric_gradient(value, pred.data));
}

}  // namespace gradcheck

#endif  // ISCOM_TESTS_GRADCHECK_HPP
