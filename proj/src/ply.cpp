#include "iscom/ply.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

namespace iscom {

namespace {

enum class Scalar { kInt8, kUint8, kInt16, kUint16, kInt32, kUint32, kFloat32, kFloat64 };

std::size_t scalar_size(Scalar s) {
  switch (s) {
    case Scalar::kInt8:
    case Scalar::kUint8:
      return 1;
    case Scalar::kInt16:
    case Scalar::kUint16:
      return 2;
    case Scalar::kInt32:
    case Scalar::kUint32:
    case Scalar::kFloat32:
      return 4;
    case Scalar::kFloat64:
      return 8;
  }
  return 0;
}

bool parse_scalar(const std::string& name, Scalar& out) {
  static const std::pair<const char*, Scalar> kNames[] = {
      {"char", Scalar::kInt8},     {"int8", Scalar::kInt8},      {"uchar", Scalar::kUint8},
      {"uint8", Scalar::kUint8},   {"short", Scalar::kInt16},    {"int16", Scalar::kInt16},
      {"ushort", Scalar::kUint16}, {"uint16", Scalar::kUint16},  {"int", Scalar::kInt32},
      {"int32", Scalar::kInt32},   {"uint", Scalar::kUint32},    {"uint32", Scalar::kUint32},
      {"float", Scalar::kFloat32}, {"float32", Scalar::kFloat32}, {"double", Scalar::kFloat64},
      {"float64", Scalar::kFloat64}};
  for (const auto& [n, s] : kNames) {
    if (name == n) {
      out = s;
      return true;
    }
  }
  return false;
}

struct Property {
  std::string name;
  Scalar type = Scalar::kFloat32;
  bool is_list = false;
  Scalar count_type = Scalar::kUint8;
};

struct Element {
  std::string name;
  std::size_t count = 0;
  std::vector<Property> properties;
};

struct Header {
  bool ascii = true;
  std::vector<Element> elements;
  std::size_t body_offset = 0;
};

Header parse_header(const std::string& bytes) {
  Header h;
  std::size_t pos = 0;
  bool saw_format = false;
  bool first = true;
  while (true) {
    const std::size_t eol = bytes.find('\n', pos);
    if (eol == std::string::npos) throw PlyError("unterminated PLY header", pos);
    std::string line = bytes.substr(pos, eol - pos);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::size_t line_start = pos;
    pos = eol + 1;

    std::istringstream ls(line);
    std::string keyword;
    ls >> keyword;
    if (first) {
      if (keyword != "ply") throw PlyError("missing 'ply' magic", line_start);
      first = false;
      continue;
    }
    if (keyword.empty() || keyword == "comment" || keyword == "obj_info") continue;
    if (keyword == "format") {
      std::string fmt, version;
      ls >> fmt >> version;
      if (fmt == "ascii") {
        h.ascii = true;
      } else if (fmt == "binary_little_endian") {
        h.ascii = false;
      } else {
        throw PlyError("unsupported PLY format '" + fmt + "'", line_start);
      }
      if (version != "1.0") throw PlyError("unsupported PLY version '" + version + "'", line_start);
      saw_format = true;
    } else if (keyword == "element") {
      Element e;
      long long count = -1;
      ls >> e.name >> count;
      if (e.name.empty() || count < 0 || ls.fail()) {
        throw PlyError("malformed element line", line_start);
      }
      e.count = static_cast<std::size_t>(count);
      h.elements.push_back(std::move(e));
    } else if (keyword == "property") {
      if (h.elements.empty()) throw PlyError("property before any element", line_start);
      Property p;
      std::string type;
      ls >> type;
      if (type == "list") {
        std::string count_type, item_type;
        ls >> count_type >> item_type >> p.name;
        p.is_list = true;
        if (!parse_scalar(count_type, p.count_type) || !parse_scalar(item_type, p.type)) {
          throw PlyError("unsupported list property type", line_start);
        }
      } else {
        ls >> p.name;
        if (!parse_scalar(type, p.type)) {
          throw PlyError("unsupported property type '" + type + "'", line_start);
        }
      }
      if (p.name.empty()) throw PlyError("property without a name", line_start);
      h.elements.back().properties.push_back(p);
    } else if (keyword == "end_header") {
      break;
    } else {
      throw PlyError("unknown header keyword '" + keyword + "'", line_start);
    }
  }
  if (!saw_format) throw PlyError("missing format line", 0);
  h.body_offset = pos;
  return h;
}

// Binary little-endian cursor. Host is assumed little-endian.
class BinaryCursor {
 public:
  BinaryCursor(const std::string& bytes, std::size_t pos) : bytes_(bytes), pos_(pos) {}

  double read(Scalar s) {
    const std::size_t n = scalar_size(s);
    if (pos_ + n > bytes_.size()) throw PlyError("truncated PLY payload", pos_);
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    switch (s) {
      case Scalar::kInt8: return static_cast<double>(load<std::int8_t>(p));
      case Scalar::kUint8: return static_cast<double>(load<std::uint8_t>(p));
      case Scalar::kInt16: return static_cast<double>(load<std::int16_t>(p));
      case Scalar::kUint16: return static_cast<double>(load<std::uint16_t>(p));
      case Scalar::kInt32: return static_cast<double>(load<std::int32_t>(p));
      case Scalar::kUint32: return static_cast<double>(load<std::uint32_t>(p));
      case Scalar::kFloat32: return static_cast<double>(load<float>(p));
      case Scalar::kFloat64: return load<double>(p);
    }
    return 0.0;
  }

  void skip_property(const Property& prop) {
    if (!prop.is_list) {
      read(prop.type);
      return;
    }
    const double count = read(prop.count_type);
    for (std::size_t i = 0; i < static_cast<std::size_t>(count); ++i) read(prop.type);
  }

  std::size_t pos() const { return pos_; }

 private:
  template <typename T>
  static T load(const char* p) {
    T v;
    std::memcpy(&v, p, sizeof(T));
    return v;
  }

  const std::string& bytes_;
  std::size_t pos_;
};

class AsciiCursor {
 public:
  AsciiCursor(const std::string& bytes, std::size_t pos) : bytes_(bytes), pos_(pos) {}

  double read() {
    while (pos_ < bytes_.size() && std::isspace(static_cast<unsigned char>(bytes_[pos_]))) ++pos_;
    if (pos_ >= bytes_.size()) throw PlyError("truncated PLY payload", pos_);
    const char* begin = bytes_.c_str() + pos_;
    char* end = nullptr;
    const double v = std::strtod(begin, &end);
    if (end == begin) throw PlyError("malformed numeric token", pos_);
    pos_ += static_cast<std::size_t>(end - begin);
    return v;
  }

  void skip_property(const Property& prop) {
    if (!prop.is_list) {
      read();
      return;
    }
    const double count = read();
    for (std::size_t i = 0; i < static_cast<std::size_t>(count); ++i) read();
  }

  void skip_line() {
    while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
    if (pos_ < bytes_.size()) ++pos_;
  }

  std::size_t pos() const { return pos_; }

 private:
  const std::string& bytes_;
  std::size_t pos_;
};

template <typename Cursor, typename ReadFn>
PointCloud read_vertices(Cursor& cur, const Element& vertex, ReadFn&& read_value) {
  int ix = -1, iy = -1, iz = -1, ir = -1, ig = -1, ib = -1;
  for (std::size_t i = 0; i < vertex.properties.size(); ++i) {
    const auto& n = vertex.properties[i].name;
    const int k = static_cast<int>(i);
    if (n == "x") ix = k;
    else if (n == "y") iy = k;
    else if (n == "z") iz = k;
    else if (n == "red") ir = k;
    else if (n == "green") ig = k;
    else if (n == "blue") ib = k;
  }
  const bool color = ir >= 0 && ig >= 0 && ib >= 0;

  PointCloud cloud;
  cloud.points.resize(vertex.count);
  if (color) cloud.colors.emplace(vertex.count);
  std::vector<double> values(vertex.properties.size());
  for (std::size_t v = 0; v < vertex.count; ++v) {
    for (std::size_t i = 0; i < vertex.properties.size(); ++i) {
      const auto& prop = vertex.properties[i];
      if (prop.is_list) {
        cur.skip_property(prop);
      } else {
        values[i] = read_value(prop.type);
      }
    }
    cloud.points[v] = Vec3(values[ix], values[iy], values[iz]);
    if (color) {
      auto to_u8 = [](double c) {
        return static_cast<std::uint8_t>(std::clamp(c, 0.0, 255.0));
      };
      (*cloud.colors)[v] = {to_u8(values[ir]), to_u8(values[ig]), to_u8(values[ib])};
    }
  }
  return cloud;
}

}  // namespace

PointCloud parse_ply(const std::string& bytes, std::vector<std::string>* warnings) {
  const Header h = parse_header(bytes);

  std::size_t vertex_index = h.elements.size();
  for (std::size_t i = 0; i < h.elements.size(); ++i) {
    if (h.elements[i].name == "vertex") {
      vertex_index = i;
      break;
    }
  }
  if (vertex_index == h.elements.size()) throw PlyError("no vertex element", h.body_offset);
  const Element& vertex = h.elements[vertex_index];

  bool has_x = false, has_y = false, has_z = false;
  for (const auto& p : vertex.properties) {
    const bool coord = p.name == "x" || p.name == "y" || p.name == "z";
    if (coord && (p.is_list || (p.type != Scalar::kFloat32 && p.type != Scalar::kFloat64))) {
      throw PlyError("coordinate property '" + p.name + "' must be float or double",
                     h.body_offset);
    }
    has_x |= p.name == "x";
    has_y |= p.name == "y";
    has_z |= p.name == "z";
    const bool known = coord || p.name == "red" || p.name == "green" || p.name == "blue";
    if (!known && warnings) warnings->push_back("skipping vertex property '" + p.name + "'");
  }
  if (!(has_x && has_y && has_z)) {
    throw PlyError("vertex element lacks x/y/z properties", h.body_offset);
  }

  PointCloud cloud;
  if (h.ascii) {
    AsciiCursor cur(bytes, h.body_offset);
    for (std::size_t e = 0; e < vertex_index; ++e) {
      for (std::size_t r = 0; r < h.elements[e].count; ++r) cur.skip_line();
    }
    cloud = read_vertices(cur, vertex, [&](Scalar s) {
      const double v = cur.read();
      return s == Scalar::kFloat32 ? static_cast<double>(static_cast<float>(v)) : v;
    });
  } else {
    BinaryCursor cur(bytes, h.body_offset);
    for (std::size_t e = 0; e < vertex_index; ++e) {
      for (std::size_t r = 0; r < h.elements[e].count; ++r) {
        for (const auto& p : h.elements[e].properties) cur.skip_property(p);
      }
    }
    cloud = read_vertices(cur, vertex, [&](Scalar s) { return cur.read(s); });
  }
  for (std::size_t i = 0; i < cloud.points.size(); ++i) {
    if (!all_finite(cloud.points[i])) {
      throw PlyError("non-finite coordinate in vertex " + std::to_string(i), h.body_offset);
    }
  }
  return cloud;
}

PointCloud load_ply(const std::string& path, std::vector<std::string>* warnings) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open PLY file '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_ply(bytes, warnings);
}

std::string format_ply(const PointCloud& cloud, PlyEncoding encoding,
                       const std::vector<std::string>& comments) {
  cloud.validate();
  std::string out = "ply\n";
  out += encoding == PlyEncoding::kAscii ? "format ascii 1.0\n"
                                         : "format binary_little_endian 1.0\n";
  for (const auto& c : comments) out += "comment " + c + "\n";
  out += "element vertex " + std::to_string(cloud.size()) + "\n";
  out += "property float x\nproperty float y\nproperty float z\n";
  if (cloud.has_color()) {
    out += "property uchar red\nproperty uchar green\nproperty uchar blue\n";
  }
  out += "end_header\n";

  if (encoding == PlyEncoding::kAscii) {
    char buf[96];
    for (std::size_t i = 0; i < cloud.size(); ++i) {
      const auto& p = cloud.points[i];
      // %.9g is enough digits to round-trip any float32 exactly.
      int n = std::snprintf(buf, sizeof(buf), "%.9g %.9g %.9g", static_cast<float>(p.x()),
                            static_cast<float>(p.y()), static_cast<float>(p.z()));
      out.append(buf, static_cast<std::size_t>(n));
      if (cloud.has_color()) {
        const auto& c = (*cloud.colors)[i];
        n = std::snprintf(buf, sizeof(buf), " %u %u %u", c[0], c[1], c[2]);
        out.append(buf, static_cast<std::size_t>(n));
      }
      out += '\n';
    }
  } else {
    const std::size_t stride = 12 + (cloud.has_color() ? 3 : 0);
    out.reserve(out.size() + stride * cloud.size());
    for (std::size_t i = 0; i < cloud.size(); ++i) {
      const auto& p = cloud.points[i];
      const float xyz[3] = {static_cast<float>(p.x()), static_cast<float>(p.y()),
                            static_cast<float>(p.z())};
      out.append(reinterpret_cast<const char*>(xyz), sizeof(xyz));
      if (cloud.has_color()) {
        const auto& c = (*cloud.colors)[i];
        out.append(reinterpret_cast<const char*>(c.data()), 3);
      }
    }
  }
  return out;
}

void save_ply(const PointCloud& cloud, const std::string& path, PlyEncoding encoding,
              const std::vector<std::string>& comments) {
  const std::string bytes = format_ply(cloud, encoding, comments);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for '" + path + "'");
}

}  // namespace iscom
