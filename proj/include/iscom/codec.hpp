#ifndef ISCOM_CODEC_HPP
#define ISCOM_CODEC_HPP

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "iscom/core.hpp"
#include "iscom/nn.hpp"

namespace iscom::codec {

using Block = std::vector<Vec3>;

enum class DType : std::uint8_t { kF32 = 0, kQ8 = 1, kQ16 = 2 };

const char* dtype_name(DType d);
int dtype_bits(DType d);  // 32, 8 or 16
DType dtype_for_bits(int bits);

/// Affine m-bit encoding of one tensor: code = round(q_w * (w - min)),
/// q_w = (2^m - 1) / (max - min). A constant tensor keeps only `min`.
struct QuantizedTensor {
  float min = 0.0f;
  float max = 0.0f;
  std::uint8_t bits = 8;
  bool zero_snap = false;  // the code that `0` maps to decodes to exactly 0
  std::vector<std::uint32_t> codes;

  bool degenerate() const { return codes.empty(); }
  double scale() const;  // q_w
  std::uint32_t zero_code() const;
  std::vector<double> dequantize(std::size_t count) const;
};

QuantizedTensor quantize_weights(const std::vector<double>& values, int bits);

/// Calibrated input quantization: values are clipped to the [lo, hi]
/// percentile range (linear interpolation between order statistics) before
/// the affine mapping.
struct InputQuantization {
  double range_lo = 0.0;
  double range_hi = 0.0;
  QuantizedTensor q;
};

InputQuantization quantize_inputs(const std::vector<double>& batch, int bits,
                                  double lo_percentile = 0.5, double hi_percentile = 99.5);

double percentile(std::vector<double> values, double pct);

struct LayerQuant {
  QuantizedTensor weights;
  QuantizedTensor bias;
};

struct CodecArch {
  std::size_t points = 128;
  std::size_t latent = 64;
  std::size_t enc_hidden1 = 64;
  std::size_t enc_hidden2 = 128;
  std::size_t dec_hidden = 256;

  /// Default architecture for one of the three latent sizes.
  static CodecArch for_latent(std::size_t latent);
  void validate() const;
};

/// Point-block autoencoder. Quantized models keep dequantized working
/// weights in the networks and the integer payloads in `quant`.
struct CodecModel {
  nn::Network encoder;
  nn::Network decoder;
  std::size_t points = 128;
  std::size_t latent = 64;
  DType dtype = DType::kF32;
  std::vector<LayerQuant> encoder_quant;  // aligned with encoder layers, empty if f32
  std::vector<LayerQuant> decoder_quant;
  double zeta_applied = 0.0;
  bool prune_incomplete = false;

  static CodecModel create(const CodecArch& arch, std::uint64_t seed);

  /// Latent code of one block; pads by repetition or truncates to `points`.
  std::vector<double> encode(const Block& block) const;
  Block decode(const std::vector<double>& latent_code) const;
  Block reconstruct(const Block& block) const { return decode(encode(block)); }

  std::size_t weight_count() const;
  std::size_t zero_weight_count() const;
};

/// Repeats points cyclically up to n, or keeps the first n.
Block pad_block(const Block& block, std::size_t n);

enum class Optimizer { kSgd, kAdam };

struct TrainConfig {
  Optimizer optimizer = Optimizer::kAdam;
  std::size_t epochs = 50;
  double lr = 0.001;
  double momentum = 0.9;  // SGD only
  std::size_t batch = 8;
  bool augment = true;  // random rotation of every sample in every epoch
  std::uint64_t seed = 1;
  nn::LossSpec loss;
};

struct TrainingCurve {
  std::vector<double> loss;     // mean total loss per epoch
  std::vector<double> chamfer;  // mean Chamfer distance of the reconstructions per epoch
};

using EpochCallback = std::function<void(std::size_t epoch, double loss, double chamfer)>;

/// Minibatch SGD on lambda_rec * EMD(R(theta_i) x_hat, x) + |theta_i|^2 with a
/// zero-initialized rotation per training sample. Throws NumericError naming
/// the epoch when the loss stops being finite.
TrainingCurve train(CodecModel& model, const std::vector<Block>& dataset, const TrainConfig& cfg,
                    const EpochCallback& on_epoch = nullptr);

/// Mean reconstruction Chamfer distance over a set of blocks.
double mean_chamfer(const CodecModel& model, const std::vector<Block>& blocks);
double mean_hausdorff(const CodecModel& model, const std::vector<Block>& blocks);

/// The ceil(zeta * C)-th smallest |w|; below every |w| when zeta = 0.
double prune_threshold(const std::vector<double>& weights, double zeta);

/// Zeroes weights with |w| < w_th and those equal to w_th; with
/// `exact_zeros`, ties at w_th are zeroed in ascending flat index only until
/// that many zeros exist. The mask records every zero.
void prune_layer(nn::Layer& layer, double w_th, std::optional<std::size_t> exact_zeros = {});

/// Prunes every dense layer of the model to exactly ceil(zeta * C) zeros.
void prune_model(CodecModel& model, double zeta);

/// Replaces every dense layer by its m-bit encoding (m = 32 keeps f32).
void quantize_model(CodecModel& model, int bits);

struct PruneConfig {
  double zeta = 0.5;
  std::size_t rounds = 5;
  std::optional<double> loss_threshold;  // default: 1.1 x the pre-training loss
  std::size_t finetune_epochs = 4;
  std::size_t epoch_budget = 40;
  TrainConfig train;

  /// Cumulative sparsity after round k (1-based): 1 - (1 - zeta)^(k / rounds).
  double sparsity_after(std::size_t round) const;
  void validate() const;
};

struct LightweightReport {
  double loss_threshold = 0.0;
  std::size_t rounds_completed = 0;
  std::size_t epochs_used = 0;
  std::vector<double> round_loss;
  CodecModel pruned;  // before quantization
};

/// Prune in rounds whenever the loss is under the threshold, fine-tune after
/// each attempt, then quantize to `bits`.
CodecModel lightweight_train(const CodecModel& model, const std::vector<Block>& dataset,
                             const PruneConfig& cfg, int bits,
                             LightweightReport* report = nullptr);

/// Procedural local surface patches (plane, edge, corner, spherical cap) with
/// random orientation and light noise, normalized to the unit ball.
std::vector<Block> make_toy_dataset(std::size_t count, std::size_t points, std::uint64_t seed);

/// Center and scale that map a block into the unit ball.
struct BlockFrame {
  Vec3 center = Vec3::Zero();
  double scale = 1.0;
};

BlockFrame normalize_block(Block& block);
void denormalize_block(Block& block, const BlockFrame& frame);

/// Splits points into consecutive groups of n along a Morton curve. The tail
/// block is padded by repetition; `padding` counts the duplicates.
struct Chunk {
  std::vector<std::size_t> indices;
  std::size_t padding = 0;
};

std::vector<Chunk> chunk_points(const std::vector<Vec3>& points, std::size_t n);

// Model file I/O.

inline constexpr std::uint16_t kModelFormatVersion = 1;

enum class ModelType : std::uint8_t { kCodec = 1, kPolicy = 2 };

class FormatError : public Error {
 public:
  using Error::Error;
};

std::vector<std::uint8_t> serialize(const CodecModel& model);
CodecModel deserialize(const std::vector<std::uint8_t>& bytes);
void save_model(const CodecModel& model, const std::string& path);
CodecModel load_model(const std::string& path);

/// Serialized payload of the layers alone (weights and biases plus per-tensor
/// quantization metadata), excluding file and layer headers.
std::size_t payload_bytes(const CodecModel& model);

}  // namespace iscom::codec

#endif  // ISCOM_CODEC_HPP
