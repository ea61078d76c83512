#ifndef ISCOM_PLY_HPP
#define ISCOM_PLY_HPP

#include <cstddef>
#include <string>
#include <vector>

#include "iscom/cloud.hpp"

namespace iscom {

/// Malformed or unsupported PLY input. `offset` is the byte position in the
/// file where the problem was detected.
class PlyError : public Error {
 public:
  PlyError(const std::string& message, std::size_t offset)
      : Error(message + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

enum class PlyEncoding { kAscii, kBinary };

/// Reads ASCII or binary_little_endian PLY. Vertex properties other than
/// x/y/z/red/green/blue are skipped; one warning per skipped property is
/// appended to `warnings` when given.
PointCloud load_ply(const std::string& path, std::vector<std::string>* warnings = nullptr);
PointCloud parse_ply(const std::string& bytes, std::vector<std::string>* warnings = nullptr);

/// Writes float x/y/z and, when present, uchar red/green/blue.
void save_ply(const PointCloud& cloud, const std::string& path, PlyEncoding encoding,
              const std::vector<std::string>& comments = {});
std::string format_ply(const PointCloud& cloud, PlyEncoding encoding,
                       const std::vector<std::string>& comments = {});

}  // namespace iscom

#endif  // ISCOM_PLY_HPP
