// Little-endian byte streams and the layer record shared by model files.
#ifndef ISCOM_MODEL_IO_HPP
#define ISCOM_MODEL_IO_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "iscom/codec.hpp"
#include "iscom/nn.hpp"

namespace iscom::io {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v);
  void u32(std::uint32_t v);
  void f32(float v);
  void raw(const void* p, std::size_t n);

  std::vector<std::uint8_t>& bytes() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

/// Bounds-checked reader; running past the end throws codec::FormatError.
class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  std::uint8_t u8();
  std::uint16_t u16();
  std::uint32_t u32();
  float f32();
  void raw(void* p, std::size_t n);

  std::size_t offset() const { return pos_; }
  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n);
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

/// Writes "ISCM", the format version and the model type byte.
void write_preamble(ByteWriter& w, codec::ModelType type);
/// Validates magic, version and type.
void read_preamble(ByteReader& r, codec::ModelType expected);

/// Layer record: kind tag u8, rows u32, cols u32, dtype u8, then for dense
/// layers either f32 weights and biases or the quantized payload. `quant`
/// must be non-null exactly when dtype is quantized.
void write_layer(ByteWriter& w, const nn::Layer& layer, std::uint8_t kind_tag, codec::DType dtype,
                 const codec::LayerQuant* quant);

struct LayerRecord {
  nn::Layer layer;
  std::uint8_t kind_tag = 0;
  codec::DType dtype = codec::DType::kF32;
  codec::LayerQuant quant;
};

/// Reads one record; `dense_tags` lists the kind tags that carry dense weights.
LayerRecord read_layer(ByteReader& r, const std::vector<std::uint8_t>& dense_tags);

std::vector<std::uint8_t> read_file(const std::string& path);
void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes);

}  // namespace iscom::io

#endif  // ISCOM_MODEL_IO_HPP
