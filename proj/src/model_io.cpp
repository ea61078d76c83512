#include "iscom/model_io.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace iscom::io {

static_assert(std::endian::native == std::endian::little, "model files assume a little-endian host");

using codec::DType;
using codec::FormatError;

void ByteWriter::u16(std::uint16_t v) { raw(&v, 2); }
void ByteWriter::u32(std::uint32_t v) { raw(&v, 4); }
void ByteWriter::f32(float v) { raw(&v, 4); }

void ByteWriter::raw(const void* p, std::size_t n) {
  const auto* b = static_cast<const std::uint8_t*>(p);
  buf_.insert(buf_.end(), b, b + n);
}

void ByteReader::need(std::size_t n) {
  if (bytes_.size() - pos_ < n) {
    throw FormatError("truncated model file: need " + std::to_string(n) + " bytes at offset " +
                      std::to_string(pos_));
  }
}

std::uint8_t ByteReader::u8() {
  need(1);
  return bytes_[pos_++];
}

std::uint16_t ByteReader::u16() {
  std::uint16_t v;
  raw(&v, 2);
  return v;
}

std::uint32_t ByteReader::u32() {
  std::uint32_t v;
  raw(&v, 4);
  return v;
}

float ByteReader::f32() {
  float v;
  raw(&v, 4);
  return v;
}

void ByteReader::raw(void* p, std::size_t n) {
  need(n);
  std::memcpy(p, bytes_.data() + pos_, n);
  pos_ += n;
}

void write_preamble(ByteWriter& w, codec::ModelType type) {
  w.raw("ISCM", 4);
  w.u16(codec::kModelFormatVersion);
  w.u8(static_cast<std::uint8_t>(type));
}

void read_preamble(ByteReader& r, codec::ModelType expected) {
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, "ISCM", 4) != 0) throw FormatError("bad magic: not a model file");
  const std::uint16_t version = r.u16();
  if (version != codec::kModelFormatVersion) {
    throw FormatError("unsupported model format version " + std::to_string(version));
  }
  const std::uint8_t type = r.u8();
  if (type != static_cast<std::uint8_t>(expected)) {
    throw FormatError("unexpected model type " + std::to_string(type));
  }
}

namespace {

constexpr std::uint8_t kZeroSnapFlag = 0x80;

void write_codes(ByteWriter& w, const codec::QuantizedTensor& q) {
  for (std::uint32_t c : q.codes) {
    if (q.bits == 8) {
      w.u8(static_cast<std::uint8_t>(c));
    } else {
      w.u16(static_cast<std::uint16_t>(c));
    }
  }
}

void read_codes(ByteReader& r, codec::QuantizedTensor& q, std::size_t count) {
  if (q.min == q.max) return;  // degenerate: scalar only
  q.codes.resize(count);
  const std::uint32_t limit = (1u << q.bits) - 1;
  for (auto& c : q.codes) {
    c = q.bits == 8 ? r.u8() : r.u16();
    if (c > limit) throw FormatError("quantized code out of range");
  }
}

}  // namespace

void write_layer(ByteWriter& w, const nn::Layer& layer, std::uint8_t kind_tag, DType dtype,
                 const codec::LayerQuant* quant) {
  w.u8(kind_tag);
  if (!layer.has_params()) {
    w.u32(0);
    w.u32(0);
    w.u8(0);
    return;
  }
  const auto rows = static_cast<std::uint32_t>(layer.weights.rows());
  const auto cols = static_cast<std::uint32_t>(layer.weights.cols());
  w.u32(rows);
  w.u32(cols);
  if (dtype == DType::kF32) {
    w.u8(0);
    for (double v : layer.weights.data) w.f32(static_cast<float>(v));
    for (double v : layer.bias.data) w.f32(static_cast<float>(v));
    return;
  }
  if (!quant) throw InvalidArgument("write_layer: quantized layer without payload");
  std::uint8_t tag = static_cast<std::uint8_t>(dtype);
  if (quant->weights.zero_snap) tag |= kZeroSnapFlag;
  w.u8(tag);
  w.f32(quant->weights.min);
  w.f32(quant->weights.max);
  w.u8(quant->weights.bits);
  write_codes(w, quant->weights);
  w.f32(quant->bias.min);
  w.f32(quant->bias.max);
  write_codes(w, quant->bias);
}

LayerRecord read_layer(ByteReader& r, const std::vector<std::uint8_t>& dense_tags) {
  LayerRecord rec;
  rec.kind_tag = r.u8();
  const std::uint32_t rows = r.u32();
  const std::uint32_t cols = r.u32();
  const std::uint8_t tag = r.u8();
  const bool dense =
      std::find(dense_tags.begin(), dense_tags.end(), rec.kind_tag) != dense_tags.end();
  if (!dense) {
    switch (rec.kind_tag) {
      case static_cast<std::uint8_t>(nn::LayerKind::kRelu): rec.layer = nn::Layer::relu(); break;
      case static_cast<std::uint8_t>(nn::LayerKind::kTanh): rec.layer = nn::Layer::tanh(); break;
      case static_cast<std::uint8_t>(nn::LayerKind::kMaxPoolPoints):
        rec.layer = nn::Layer::maxpool_points();
        break;
      default: throw FormatError("unknown layer kind " + std::to_string(rec.kind_tag));
    }
    if (rows != 0 || cols != 0 || tag != 0) throw FormatError("parameter-free layer with payload");
    return rec;
  }
  if (rows == 0 || cols == 0 || rows > (1u << 24) || cols > (1u << 24)) {
    throw FormatError("implausible layer shape");
  }
  rec.layer = nn::Layer::dense(cols, rows);
  const std::size_t count = std::size_t{rows} * cols;
  const std::uint8_t dtype = tag & static_cast<std::uint8_t>(~kZeroSnapFlag);
  if (dtype == 0) {
    if (tag != 0) throw FormatError("zero-snap flag on an f32 layer");
    for (auto& v : rec.layer.weights.data) v = r.f32();
    for (auto& v : rec.layer.bias.data) v = r.f32();
  } else if (dtype == 1 || dtype == 2) {
    rec.dtype = static_cast<DType>(dtype);
    auto& qw = rec.quant.weights;
    qw.min = r.f32();
    qw.max = r.f32();
    qw.bits = r.u8();
    if (qw.bits != codec::dtype_bits(rec.dtype)) throw FormatError("bit width does not match dtype");
    qw.zero_snap = (tag & kZeroSnapFlag) != 0;
    read_codes(r, qw, count);
    auto& qb = rec.quant.bias;
    qb.bits = qw.bits;
    qb.min = r.f32();
    qb.max = r.f32();
    read_codes(r, qb, rows);
    rec.layer.weights.data = qw.dequantize(count);
    rec.layer.bias.data = qb.dequantize(rows);
  } else {
    throw FormatError("unknown dtype " + std::to_string(dtype));
  }
  for (std::size_t i = 0; i < count; ++i) {
    rec.layer.prune_mask.data[i] = rec.layer.weights.data[i] == 0.0 ? 0.0 : 1.0;
  }
  return rec;
}

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed: " + path);
}

}  // namespace iscom::io
