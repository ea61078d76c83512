#include "iscom/codec.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "iscom/cloud.hpp"
#include "iscom/model_io.hpp"

namespace iscom::codec {

const char* dtype_name(DType d) {
  switch (d) {
    case DType::kF32: return "f32";
    case DType::kQ8: return "q8";
    case DType::kQ16: return "q16";
  }
  return "?";
}

int dtype_bits(DType d) {
  switch (d) {
    case DType::kQ8: return 8;
    case DType::kQ16: return 16;
    default: return 32;
  }
}

DType dtype_for_bits(int bits) {
  switch (bits) {
    case 8: return DType::kQ8;
    case 16: return DType::kQ16;
    case 32: return DType::kF32;
  }
  throw InvalidArgument("unsupported bit width " + std::to_string(bits) + " (expected 8, 16 or 32)");
}

// ---------------------------------------------------------------------------
// Quantization

double QuantizedTensor::scale() const {
  return (std::ldexp(1.0, bits) - 1.0) / (static_cast<double>(max) - static_cast<double>(min));
}

std::uint32_t QuantizedTensor::zero_code() const {
  return static_cast<std::uint32_t>(std::llround(scale() * (0.0 - static_cast<double>(min))));
}

std::vector<double> QuantizedTensor::dequantize(std::size_t count) const {
  if (degenerate()) return std::vector<double>(count, static_cast<double>(min));
  if (codes.size() != count) throw InvalidArgument("dequantize: payload length mismatch");
  const double q = scale();
  const std::uint32_t zc = zero_snap ? zero_code() : std::numeric_limits<std::uint32_t>::max();
  std::vector<double> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    out[i] = codes[i] == zc ? 0.0 : codes[i] / q + static_cast<double>(min);
  }
  return out;
}

QuantizedTensor quantize_weights(const std::vector<double>& values, int bits) {
  if (bits != 8 && bits != 16) throw InvalidArgument("quantize_weights: bits must be 8 or 16");
  if (values.empty()) throw InvalidArgument("quantize_weights: empty tensor");
  QuantizedTensor q;
  q.bits = static_cast<std::uint8_t>(bits);
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  const double lo = *lo_it, hi = *hi_it;
  if (!std::isfinite(lo) || !std::isfinite(hi)) throw NumericError("quantize_weights: non-finite weight");
  if (lo == hi) {
    q.min = q.max = static_cast<float>(lo);
    return q;
  }
  // Widen to float so the stored range still covers every weight.
  q.min = static_cast<float>(lo);
  if (static_cast<double>(q.min) > lo) q.min = std::nextafter(q.min, -INFINITY);
  q.max = static_cast<float>(hi);
  if (static_cast<double>(q.max) < hi) q.max = std::nextafter(q.max, INFINITY);

  const double s = q.scale();
  const auto top = static_cast<std::int64_t>((1u << bits) - 1);
  q.codes.resize(values.size());
  bool has_zero = false;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const std::int64_t c = std::llround(s * (values[i] - static_cast<double>(q.min)));
    q.codes[i] = static_cast<std::uint32_t>(std::clamp<std::int64_t>(c, 0, top));
    has_zero |= values[i] == 0.0;
  }
  // Exact zeros (pruned weights) decode back to exactly zero. A surviving
  // weight that shares the zero code is within one step of zero and decodes
  // to zero as well.
  q.zero_snap = has_zero;
  return q;
}

double percentile(std::vector<double> values, double pct) {
  if (values.empty()) throw InvalidArgument("percentile: empty input");
  if (!(pct >= 0.0 && pct <= 100.0)) throw InvalidArgument("percentile: pct outside [0, 100]");
  std::sort(values.begin(), values.end());
  const double pos = pct / 100.0 * static_cast<double>(values.size() - 1);
  const auto i = static_cast<std::size_t>(std::floor(pos));
  if (i + 1 >= values.size()) return values.back();
  const double frac = pos - static_cast<double>(i);
  return values[i] + frac * (values[i + 1] - values[i]);
}

InputQuantization quantize_inputs(const std::vector<double>& batch, int bits, double lo_percentile,
                                  double hi_percentile) {
  if (batch.empty()) throw InvalidArgument("quantize_inputs: empty batch");
  if (!(lo_percentile <= hi_percentile)) throw InvalidArgument("quantize_inputs: lo > hi percentile");
  InputQuantization out;
  out.range_lo = percentile(batch, lo_percentile);
  out.range_hi = percentile(batch, hi_percentile);
  std::vector<double> clipped(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    clipped[i] = std::clamp(batch[i], out.range_lo, out.range_hi);
  }
  out.q = quantize_weights(clipped, bits);
  out.q.zero_snap = false;
  return out;
}

// ---------------------------------------------------------------------------
// Model

CodecArch CodecArch::for_latent(std::size_t latent) {
  CodecArch a;
  a.latent = latent;
  switch (latent) {
    case 16: a.dec_hidden = 128; break;
    case 64: a.dec_hidden = 256; break;
    case 256:
      a.enc_hidden2 = 256;
      a.dec_hidden = 512;
      break;
    default: throw InvalidArgument("no default architecture for latent size " + std::to_string(latent));
  }
  return a;
}

void CodecArch::validate() const {
  if (points == 0 || latent == 0 || enc_hidden1 == 0 || enc_hidden2 == 0 || dec_hidden == 0) {
    throw InvalidArgument("CodecArch: all sizes must be positive");
  }
}

CodecModel CodecModel::create(const CodecArch& arch, std::uint64_t seed) {
  arch.validate();
  using nn::Layer;
  CodecModel m;
  m.points = arch.points;
  m.latent = arch.latent;
  m.encoder = nn::Network({Layer::dense(3, arch.enc_hidden1), Layer::relu(),
                           Layer::dense(arch.enc_hidden1, arch.enc_hidden2), Layer::relu(),
                           Layer::maxpool_points(), Layer::dense(arch.enc_hidden2, arch.latent)});
  m.decoder = nn::Network({Layer::dense(arch.latent, arch.dec_hidden), Layer::relu(),
                           Layer::dense(arch.dec_hidden, arch.dec_hidden), Layer::relu(),
                           Layer::dense(arch.dec_hidden, arch.points * 3)});
  Rng rng(seed);
  m.encoder.init(rng);
  m.decoder.init(rng);
  return m;
}

Block pad_block(const Block& block, std::size_t n) {
  if (block.empty()) throw InvalidArgument("pad_block: empty block");
  Block out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = block[i % block.size()];
  return out;
}

std::vector<double> CodecModel::encode(const Block& block) const {
  if (block.empty()) throw InvalidArgument("encode: empty block");
  const nn::Tensor x =
      nn::Tensor::from_points(block.size() == points ? block : pad_block(block, points));
  return encoder.forward(x).data;
}

Block CodecModel::decode(const std::vector<double>& latent_code) const {
  if (latent_code.size() != latent) {
    throw InvalidArgument("decode: latent has " + std::to_string(latent_code.size()) +
                          " values, model expects " + std::to_string(latent));
  }
  nn::Tensor z(1, latent);
  z.data = latent_code;
  nn::Tensor y = decoder.forward(z);
  y.shape = {points, 3};
  return y.to_points();
}

std::size_t CodecModel::weight_count() const {
  return encoder.weight_count() + decoder.weight_count();
}

std::size_t CodecModel::zero_weight_count() const {
  std::size_t n = 0;
  for (const auto* net : {&encoder, &decoder}) {
    for (const auto& l : net->layers) n += l.zero_weight_count();
  }
  return n;
}

// ---------------------------------------------------------------------------
// Training

namespace {

// Uniform random rotation from a normalized Gaussian quaternion.
Quat random_rotation(Rng& rng) {
  Quat q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
  q.normalize();
  return q;
}

/// One minibatch step. Encoders run per block (max-pool over that block's
/// points); the decoder runs on the stacked latents so its weights are read
/// once per batch.
void train_batch(const CodecModel& m, const std::vector<const Block*>& targets,
                 std::vector<Vec3*> thetas, const TrainConfig& cfg, nn::Gradients& ge,
                 nn::Gradients& gd, double& loss_sum, double& cd_sum) {
  const std::size_t n = targets.size();
  std::vector<nn::ForwardCache> ce(n);
  std::vector<nn::Tensor> xs(n);
  nn::Tensor zs(n, m.latent);
  for (std::size_t k = 0; k < n; ++k) {
    xs[k] = nn::Tensor::from_points(*targets[k]);
    const nn::Tensor z = m.encoder.forward(xs[k], &ce[k]);
    std::copy(z.data.begin(), z.data.end(), zs.data.begin() + k * m.latent);
  }
  nn::ForwardCache cd;
  const nn::Tensor ys = m.decoder.forward(zs, &cd);
  const std::size_t width = m.points * 3;
  nn::Tensor gys(n, width);
  for (std::size_t k = 0; k < n; ++k) {
    nn::Tensor y(m.points, 3);
    std::copy(ys.data.begin() + k * width, ys.data.begin() + (k + 1) * width, y.data.begin());
    const auto tl = nn::total_loss(y, xs[k], *thetas[k], cfg.loss);
    loss_sum += tl.value;
    cd_sum += nn::chamfer_loss(y, xs[k]).value;
    std::copy(tl.grad_pred.data.begin(), tl.grad_pred.data.end(), gys.data.begin() + k * width);
    *thetas[k] -= cfg.lr * tl.grad_rot;
  }
  const nn::Tensor gzs = m.decoder.backward(cd, gys, gd);
  for (std::size_t k = 0; k < n; ++k) {
    nn::Tensor gz(1, m.latent);
    std::copy(gzs.data.begin() + k * m.latent, gzs.data.begin() + (k + 1) * m.latent,
              gz.data.begin());
    m.encoder.backward(ce[k], gz, ge);
  }
}

std::vector<Block> padded(const CodecModel& m, const std::vector<Block>& data) {
  std::vector<Block> out;
  out.reserve(data.size());
  for (const auto& b : data) out.push_back(b.size() == m.points ? b : pad_block(b, m.points));
  return out;
}

}  // namespace

TrainingCurve train(CodecModel& model, const std::vector<Block>& dataset, const TrainConfig& cfg,
                    const EpochCallback& on_epoch) {
  if (dataset.empty()) throw InvalidArgument("train: empty dataset");
  if (cfg.batch == 0) throw InvalidArgument("train: batch size must be positive");
  cfg.loss.validate();
  const std::vector<Block> data = padded(model, dataset);
  std::vector<Vec3> thetas(data.size(), Vec3::Zero());
  nn::SgdOptimizer sgd_enc(cfg.lr, cfg.momentum), sgd_dec(cfg.lr, cfg.momentum);
  nn::AdamOptimizer adam_enc(cfg.lr), adam_dec(cfg.lr);
  TrainingCurve curve;
  std::vector<std::size_t> order(data.size());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng rng(Rng::mix(cfg.seed, epoch));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

    double loss_sum = 0.0, cd_sum = 0.0;
    try {
      for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
        const std::size_t end = std::min(order.size(), start + cfg.batch);
        auto ge = model.encoder.zero_gradients();
        auto gd = model.decoder.zero_gradients();
        std::vector<Block> rotated(cfg.augment ? end - start : 0);
        std::vector<const Block*> targets;
        std::vector<Vec3*> batch_thetas;
        for (std::size_t k = start; k < end; ++k) {
          const std::size_t i = order[k];
          if (cfg.augment) {
            const Quat q = random_rotation(rng);
            Block& r = rotated[k - start];
            r.reserve(data[i].size());
            for (const Vec3& p : data[i]) r.push_back(q * p);
            targets.push_back(&r);
          } else {
            targets.push_back(&data[i]);
          }
          batch_thetas.push_back(&thetas[i]);
        }
        train_batch(model, targets, batch_thetas, cfg, ge, gd, loss_sum, cd_sum);
        const double inv = 1.0 / static_cast<double>(end - start);
        ge.scale(inv);
        gd.scale(inv);
        if (cfg.optimizer == Optimizer::kAdam) {
          adam_enc.step(model.encoder, ge);
          adam_dec.step(model.decoder, gd);
        } else {
          sgd_enc.step(model.encoder, ge);
          sgd_dec.step(model.decoder, gd);
        }
      }
    } catch (const NumericError& e) {
      throw NumericError("train: epoch " + std::to_string(epoch + 1) + ": " + e.what());
    }
    const double mean_loss = loss_sum / data.size();
    if (!std::isfinite(mean_loss)) {
      throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch + 1));
    }
    curve.loss.push_back(mean_loss);
    curve.chamfer.push_back(cd_sum / data.size());
    if (on_epoch) on_epoch(epoch + 1, curve.loss.back(), curve.chamfer.back());
  }
  return curve;
}

double mean_chamfer(const CodecModel& model, const std::vector<Block>& blocks) {
  if (blocks.empty()) throw InvalidArgument("mean_chamfer: no blocks");
  double s = 0.0;
  for (const auto& b : blocks) s += chamfer_distance(model.reconstruct(b), b);
  return s / blocks.size();
}

double mean_hausdorff(const CodecModel& model, const std::vector<Block>& blocks) {
  if (blocks.empty()) throw InvalidArgument("mean_hausdorff: no blocks");
  double s = 0.0;
  for (const auto& b : blocks) s += hausdorff_distance(model.reconstruct(b), b);
  return s / blocks.size();
}

// ---------------------------------------------------------------------------
// Pruning

double prune_threshold(const std::vector<double>& weights, double zeta) {
  if (weights.empty()) throw InvalidArgument("prune_threshold: empty layer");
  if (!(zeta >= 0.0 && zeta < 1.0)) throw InvalidArgument("prune_threshold: zeta must be in [0, 1)");
  std::vector<double> mags(weights.size());
  std::transform(weights.begin(), weights.end(), mags.begin(), [](double w) { return std::abs(w); });
  const std::size_t k = ceil_count(zeta, mags.size());
  if (k == 0) {
    return std::nextafter(*std::min_element(mags.begin(), mags.end()), -INFINITY);
  }
  std::nth_element(mags.begin(), mags.begin() + (k - 1), mags.end());
  return mags[k - 1];
}

void prune_layer(nn::Layer& layer, double w_th, std::optional<std::size_t> exact_zeros) {
  if (!layer.has_params()) return;
  auto& w = layer.weights.data;
  auto& mask = layer.prune_mask.data;
  std::size_t zeros = 0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (w[i] == 0.0 || std::abs(w[i]) < w_th) {
      w[i] = 0.0;
      mask[i] = 0.0;
      ++zeros;
    }
  }
  // Ties at the threshold, lowest flat index first.
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (w[i] == 0.0 || std::abs(w[i]) != w_th) continue;
    if (exact_zeros && zeros >= *exact_zeros) break;
    w[i] = 0.0;
    mask[i] = 0.0;
    ++zeros;
  }
}

void prune_model(CodecModel& model, double zeta) {
  for (auto* net : {&model.encoder, &model.decoder}) {
    for (auto& l : net->layers) {
      if (!l.has_params()) continue;
      const std::size_t target = ceil_count(zeta, l.weights.size());
      prune_layer(l, prune_threshold(l.weights.data, zeta), target);
    }
  }
  model.zeta_applied = zeta;
}

// ---------------------------------------------------------------------------
// Quantization of a whole model

void quantize_model(CodecModel& model, int bits) {
  const DType dtype = dtype_for_bits(bits);
  if (model.dtype != DType::kF32) throw InvalidArgument("quantize_model: model is already quantized");
  if (dtype == DType::kF32) return;
  auto run = [bits](nn::Network& net, std::vector<LayerQuant>& out) {
    out.assign(net.layers.size(), LayerQuant{});
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
      nn::Layer& l = net.layers[i];
      if (!l.has_params()) continue;
      out[i].weights = quantize_weights(l.weights.data, bits);
      out[i].bias = quantize_weights(l.bias.data, bits);
      out[i].bias.zero_snap = false;
      l.weights.data = out[i].weights.dequantize(l.weights.size());
      l.bias.data = out[i].bias.dequantize(l.bias.size());
      for (std::size_t k = 0; k < l.weights.size(); ++k) {
        l.prune_mask.data[k] = l.weights.data[k] == 0.0 ? 0.0 : 1.0;
      }
    }
  };
  run(model.encoder, model.encoder_quant);
  run(model.decoder, model.decoder_quant);
  model.dtype = dtype;
}

// ---------------------------------------------------------------------------
// Lightweight training

double PruneConfig::sparsity_after(std::size_t round) const {
  if (round == 0) return 0.0;
  if (round >= rounds) return zeta;
  return 1.0 - std::pow(1.0 - zeta, static_cast<double>(round) / static_cast<double>(rounds));
}

void PruneConfig::validate() const {
  if (!(zeta >= 0.0 && zeta < 1.0)) throw InvalidArgument("PruneConfig: zeta must be in [0, 1)");
  if (rounds == 0) throw InvalidArgument("PruneConfig: rounds must be positive");
}

namespace {

double eval_loss(const CodecModel& m, const std::vector<Block>& data, const nn::LossSpec& spec) {
  double s = 0.0;
  for (const auto& b : data) {
    const Block blk = b.size() == m.points ? b : pad_block(b, m.points);
    nn::Tensor y = nn::Tensor::from_points(m.reconstruct(blk));
    s += nn::total_loss(y, nn::Tensor::from_points(blk), Vec3::Zero(), spec).value;
  }
  return s / data.size();
}

}  // namespace

CodecModel lightweight_train(const CodecModel& model, const std::vector<Block>& dataset,
                             const PruneConfig& cfg, int bits, LightweightReport* report) {
  cfg.validate();
  if (model.dtype != DType::kF32) throw InvalidArgument("lightweight_train: expects an f32 model");
  if (dataset.empty()) throw InvalidArgument("lightweight_train: empty dataset");
  CodecModel m = model;
  LightweightReport rep;
  std::size_t round = 0;
  if (cfg.zeta > 0.0) {
    rep.loss_threshold = cfg.loss_threshold.value_or(1.1 * eval_loss(m, dataset, cfg.train.loss));
    double current = eval_loss(m, dataset, cfg.train.loss);
    while (round < cfg.rounds && rep.epochs_used < cfg.epoch_budget) {
      if (current < rep.loss_threshold) {
        ++round;
        prune_model(m, cfg.sparsity_after(round));
      }
      TrainConfig tc = cfg.train;
      tc.epochs = std::min(cfg.finetune_epochs, cfg.epoch_budget - rep.epochs_used);
      tc.seed = Rng::mix(cfg.train.seed, rep.epochs_used);
      const auto curve = train(m, dataset, tc);
      rep.epochs_used += tc.epochs;
      if (!curve.loss.empty()) current = curve.loss.back();
      rep.round_loss.push_back(current);
    }
  }
  m.zeta_applied = cfg.sparsity_after(round);
  m.prune_incomplete = cfg.zeta > 0.0 && round < cfg.rounds;
  rep.rounds_completed = round;
  rep.pruned = m;
  quantize_model(m, bits);
  if (report) *report = std::move(rep);
  return m;
}

// ---------------------------------------------------------------------------
// Toy dataset, block normalization and chunking

BlockFrame normalize_block(Block& block) {
  BlockFrame f;
  if (block.empty()) return f;
  const Aabb box = bounding_box(block);
  f.center = 0.5 * (box.min + box.max);
  double r = 0.0;
  for (const auto& p : block) r = std::max(r, (p - f.center).norm());
  f.scale = r > 0.0 ? r : 1.0;
  for (auto& p : block) p = (p - f.center) / f.scale;
  return f;
}

void denormalize_block(Block& block, const BlockFrame& frame) {
  for (auto& p : block) p = p * frame.scale + frame.center;
}

namespace {

// One point on a local surface patch of the given kind, before rotation.
Vec3 sample_patch(int kind, double param, Rng& rng) {
  const double u = rng.uniform(-1, 1), v = rng.uniform(-1, 1);
  switch (kind) {
    case 0:  // plane
      return Vec3(u, v, 0.0);
    case 1: {  // edge: two half-planes meeting at angle `param`
      if (u >= 0) return Vec3(u, v, 0.0);
      return Vec3(-u * std::cos(param), v, -u * std::sin(param));
    }
    case 2: {  // corner of three quarter-planes
      const double a = std::abs(u), b = std::abs(v);
      switch (rng.below(3)) {
        case 0: return Vec3(a, b, 0.0);
        case 1: return Vec3(a, 0.0, b);
        default: return Vec3(0.0, a, b);
      }
    }
    default: {  // spherical cap with radius `param`
      const Vec3 d = Vec3(u, v, param).normalized();
      return d * param - Vec3(0, 0, param);
    }
  }
}

}  // namespace

std::vector<Block> make_toy_dataset(std::size_t count, std::size_t points, std::uint64_t seed) {
  if (points == 0) throw InvalidArgument("make_toy_dataset: points must be positive");
  std::vector<Block> out;
  out.reserve(count);
  for (std::size_t b = 0; b < count; ++b) {
    Rng rng(Rng::mix(seed, b));
    const int kind = static_cast<int>(rng.below(4));
    const double param = kind == 1 ? rng.uniform(0.3, 2.6) : rng.uniform(0.8, 2.5);
    const Vec3 stretch(rng.uniform(0.6, 1.0), rng.uniform(0.6, 1.0), 1.0);
    const Quat q = random_rotation(rng);
    Block blk(points);
    for (auto& p : blk) {
      const Vec3 s = sample_patch(kind, param, rng).cwiseProduct(stretch);
      p = q * s + Vec3(rng.normal(0, 0.01), rng.normal(0, 0.01), rng.normal(0, 0.01));
    }
    normalize_block(blk);
    out.push_back(std::move(blk));
  }
  return out;
}

namespace {

std::uint64_t spread_bits(std::uint64_t v) {
  v &= 0x1fffff;
  v = (v | v << 32) & 0x1f00000000ffffULL;
  v = (v | v << 16) & 0x1f0000ff0000ffULL;
  v = (v | v << 8) & 0x100f00f00f00f00fULL;
  v = (v | v << 4) & 0x10c30c30c30c30c3ULL;
  v = (v | v << 2) & 0x1249249249249249ULL;
  return v;
}

}  // namespace

std::vector<Chunk> chunk_points(const std::vector<Vec3>& points, std::size_t n) {
  if (n == 0) throw InvalidArgument("chunk_points: block size must be positive");
  std::vector<Chunk> chunks;
  if (points.empty()) return chunks;
  const Aabb box = bounding_box(points);
  const Vec3 ext = box.max - box.min;
  const double edge = std::max({ext.x(), ext.y(), ext.z(), 1e-12});
  const double cells = static_cast<double>((1u << 21) - 1);
  std::vector<std::pair<std::uint64_t, std::size_t>> keyed(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    const Vec3 u = (points[i] - box.min) / edge * cells;
    std::uint64_t code = 0;
    for (int k = 0; k < 3; ++k) {
      const auto c = static_cast<std::uint64_t>(std::clamp(u[k], 0.0, cells));
      code |= spread_bits(c) << k;
    }
    keyed[i] = {code, i};
  }
  std::sort(keyed.begin(), keyed.end());
  for (std::size_t start = 0; start < keyed.size(); start += n) {
    Chunk c;
    const std::size_t end = std::min(keyed.size(), start + n);
    for (std::size_t k = start; k < end; ++k) c.indices.push_back(keyed[k].second);
    const std::size_t real = c.indices.size();
    for (std::size_t k = real; k < n; ++k) c.indices.push_back(c.indices[k % real]);
    c.padding = n - real;
    chunks.push_back(std::move(c));
  }
  return chunks;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

void write_network(io::ByteWriter& w, const nn::Network& net, DType dtype,
                   const std::vector<LayerQuant>& quant) {
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const auto& l = net.layers[i];
    io::write_layer(w, l, static_cast<std::uint8_t>(l.kind), dtype,
                    dtype == DType::kF32 || !l.has_params() ? nullptr : &quant[i]);
  }
}

}  // namespace

std::vector<std::uint8_t> serialize(const CodecModel& model) {
  io::ByteWriter w;
  io::write_preamble(w, ModelType::kCodec);
  w.u32(static_cast<std::uint32_t>(model.points));
  w.u32(static_cast<std::uint32_t>(model.latent));
  w.f32(static_cast<float>(model.zeta_applied));
  w.u8(model.prune_incomplete ? 1 : 0);
  w.u32(static_cast<std::uint32_t>(model.encoder.layers.size()));
  w.u32(static_cast<std::uint32_t>(model.encoder.layers.size() + model.decoder.layers.size()));
  write_network(w, model.encoder, model.dtype, model.encoder_quant);
  write_network(w, model.decoder, model.dtype, model.decoder_quant);
  return std::move(w.bytes());
}

CodecModel deserialize(const std::vector<std::uint8_t>& bytes) {
  io::ByteReader r(bytes);
  io::read_preamble(r, ModelType::kCodec);
  CodecModel m;
  m.points = r.u32();
  m.latent = r.u32();
  m.zeta_applied = r.f32();
  m.prune_incomplete = (r.u8() & 1) != 0;
  const std::uint32_t enc_layers = r.u32();
  const std::uint32_t total = r.u32();
  if (enc_layers > total || total > 4096) throw FormatError("implausible layer count");
  const std::vector<std::uint8_t> dense{static_cast<std::uint8_t>(nn::LayerKind::kDense)};
  bool first_dense = true;
  for (std::uint32_t i = 0; i < total; ++i) {
    io::LayerRecord rec = io::read_layer(r, dense);
    const bool enc = i < enc_layers;
    auto& net = enc ? m.encoder : m.decoder;
    auto& quant = enc ? m.encoder_quant : m.decoder_quant;
    if (rec.layer.has_params()) {
      if (first_dense) {
        m.dtype = rec.dtype;
        first_dense = false;
      } else if (rec.dtype != m.dtype) {
        throw FormatError("mixed layer dtypes in one model");
      }
    }
    net.layers.push_back(std::move(rec.layer));
    quant.push_back(std::move(rec.quant));
  }
  if (!r.at_end()) throw FormatError("trailing bytes after the last layer");
  if (m.dtype == DType::kF32) {
    m.encoder_quant.clear();
    m.decoder_quant.clear();
  }
  if (m.encoder.output_features() != m.latent || m.decoder.input_features() != m.latent ||
      m.decoder.output_features() != m.points * 3 || m.encoder.input_features() != 3) {
    throw FormatError("layer shapes do not match the model header");
  }
  return m;
}

void save_model(const CodecModel& model, const std::string& path) {
  io::write_file(path, serialize(model));
}

CodecModel load_model(const std::string& path) { return deserialize(io::read_file(path)); }

std::size_t payload_bytes(const CodecModel& model) {
  std::size_t total = 0;
  const std::size_t code_bytes = model.dtype == DType::kQ8 ? 1 : 2;
  for (int part = 0; part < 2; ++part) {
    const auto& net = part == 0 ? model.encoder : model.decoder;
    const auto& quant = part == 0 ? model.encoder_quant : model.decoder_quant;
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
      const auto& l = net.layers[i];
      if (!l.has_params()) continue;
      if (model.dtype == DType::kF32) {
        total += 4 * (l.weights.size() + l.bias.size());
        continue;
      }
      // weights: min, max, m, codes; bias: min, max, codes
      total += 9 + quant[i].weights.codes.size() * code_bytes;
      total += 8 + quant[i].bias.codes.size() * code_bytes;
    }
  }
  return total;
}

}  // namespace iscom::codec
