#include "iscom/sim.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "iscom/octree.hpp"
#include "iscom/ply.hpp"

namespace iscom::sim {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fmt(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

// Axis-aligned rectangle patch origin + s*u + t*v, s,t in [0,1].
struct Patch {
  Vec3 origin, u, v;
  Rgb color;
  double area() const { return u.cross(v).norm(); }
};

void add_box(std::vector<Patch>& out, const Vec3& lo, const Vec3& size, const Rgb& color) {
  const Vec3 x(size.x(), 0, 0), y(0, size.y(), 0), z(0, 0, size.z());
  out.push_back({lo + y, x, z, color});      // top
  out.push_back({lo, x, y, color});          // front
  out.push_back({lo + z, x, y, color});      // back
  out.push_back({lo, z, y, color});          // left
  out.push_back({lo + x, z, y, color});      // right
}

std::uint8_t jitter(Rng& rng, std::uint8_t c) {
  const int v = static_cast<int>(c) + static_cast<int>(rng.below(21)) - 10;
  return static_cast<std::uint8_t>(std::clamp(v, 0, 255));
}

struct Room {
  double width = 6.0, depth = 5.0, height = 3.0;
  std::vector<Vec3> points;
  std::vector<Rgb> colors;
  Vec3 path_center;
  double path_radius = 1.0;
  double phase = 0.0;
};

Room make_room(const SceneConfig& cfg, std::size_t index) {
  Rng rng(Rng::mix(cfg.seed, 100 + index));
  Room room;
  room.width = 6.0 + rng.uniform(-1.0, 1.0);
  room.depth = 5.0 + rng.uniform(-1.0, 1.0);
  const double W = room.width, D = room.depth, H = room.height;
  std::vector<Patch> patches;
  patches.push_back({Vec3(0, 0, 0), Vec3(W, 0, 0), Vec3(0, 0, D), {120, 90, 60}});  // floor
  patches.push_back({Vec3(0, H, 0), Vec3(W, 0, 0), Vec3(0, 0, D), {230, 230, 225}});
  patches.push_back({Vec3(0, 0, 0), Vec3(W, 0, 0), Vec3(0, H, 0), {210, 200, 180}});
  patches.push_back({Vec3(0, 0, D), Vec3(W, 0, 0), Vec3(0, H, 0), {210, 200, 180}});
  patches.push_back({Vec3(0, 0, 0), Vec3(0, 0, D), Vec3(0, H, 0), {200, 190, 170}});
  patches.push_back({Vec3(W, 0, 0), Vec3(0, 0, D), Vec3(0, H, 0), {200, 190, 170}});
  // Furniture along the side and back walls, clear of the subject's loop.
  for (int b = 0; b < 3; ++b) {
    const Vec3 size(rng.uniform(0.4, 1.2), rng.uniform(0.4, 1.2), rng.uniform(0.4, 1.0));
    Vec3 lo;
    if (b == 0) lo = Vec3(0.1, 0, rng.uniform(1.0, D - size.z() - 0.1));
    if (b == 1) lo = Vec3(W - size.x() - 0.1, 0, rng.uniform(1.0, D - size.z() - 0.1));
    if (b == 2) lo = Vec3(rng.uniform(0.1, W - size.x() - 0.1), 0, D - size.z() - 0.1);
    const Rgb color{static_cast<std::uint8_t>(rng.below(200) + 30),
                    static_cast<std::uint8_t>(rng.below(200) + 30),
                    static_cast<std::uint8_t>(rng.below(200) + 30)};
    add_box(patches, lo, size, color);
  }
  std::vector<double> cumulative;
  double total = 0.0;
  for (const auto& p : patches) cumulative.push_back(total += p.area());
  room.points.reserve(cfg.background_points);
  room.colors.reserve(cfg.background_points);
  for (std::size_t i = 0; i < cfg.background_points; ++i) {
    const double pick = rng.uniform(0.0, total);
    const std::size_t k = std::min<std::size_t>(
        std::upper_bound(cumulative.begin(), cumulative.end(), pick) - cumulative.begin(),
        patches.size() - 1);
    const Patch& p = patches[k];
    const double s = rng.uniform(), t = rng.uniform();
    room.points.push_back(p.origin + s * p.u + t * p.v);
    room.colors.push_back({jitter(rng, p.color[0]), jitter(rng, p.color[1]), jitter(rng, p.color[2])});
  }
  room.path_center = Vec3(W / 2, 0, D * 0.55);
  room.path_radius = 0.25 * std::min(W, D);
  room.phase = rng.uniform(0.0, 2 * M_PI);
  return room;
}

// Body-frame points of the subject: torso, head, arms and legs as ellipsoids.
std::vector<Vec3> make_subject(const SceneConfig& cfg) {
  struct Part {
    Vec3 center, radii;
  };
  const Part parts[] = {
      {{0, 1.05, 0}, {0.22, 0.35, 0.14}},   {{0, 1.58, 0}, {0.12, 0.13, 0.12}},
      {{-0.32, 1.1, 0}, {0.07, 0.3, 0.07}}, {{0.32, 1.1, 0}, {0.07, 0.3, 0.07}},
      {{-0.11, 0.4, 0}, {0.09, 0.4, 0.09}}, {{0.11, 0.4, 0}, {0.09, 0.4, 0.09}},
  };
  std::vector<double> cumulative;
  double total = 0.0;
  for (const auto& p : parts) {
    const Vec3& r = p.radii;
    cumulative.push_back(total += r.x() * r.y() + r.y() * r.z() + r.x() * r.z());
  }
  Rng rng(Rng::mix(cfg.seed, 7));
  std::vector<Vec3> pts;
  pts.reserve(cfg.subject_points);
  for (std::size_t i = 0; i < cfg.subject_points; ++i) {
    const double pick = rng.uniform(0.0, total);
    const std::size_t k = std::min<std::size_t>(
        std::upper_bound(cumulative.begin(), cumulative.end(), pick) - cumulative.begin(), 5);
    Vec3 d(rng.normal(), rng.normal(), rng.normal());
    if (d.norm() < 1e-12) d = Vec3::UnitY();
    d.normalize();
    pts.push_back(parts[k].center + parts[k].radii.cwiseProduct(d));
  }
  return pts;
}

Vec3 subject_offset(const Room& room, double speed, double t) {
  // Figure-eight loop; the angular rate gives roughly `speed` m/s.
  const double w = speed / room.path_radius;
  const double a = w * t + room.phase;
  return room.path_center +
         Vec3(room.path_radius * std::sin(a), 0.0, 0.5 * room.path_radius * std::sin(2 * a));
}

Pose viewer_pose(const Room& room, double t) {
  Pose p;
  p.position = Vec3(room.width / 2 + 0.3 * std::sin(0.4 * t), 1.6, 0.3);
  const double yaw = 0.17 * std::sin(0.3 * t);
  const Vec3 target = room.path_center + Vec3(0, 1.0, 0);
  Vec3 fwd = (target - p.position).normalized();
  fwd = Eigen::AngleAxisd(yaw, Vec3::UnitY()) * fwd;
  const Vec3 right = Vec3::UnitY().cross(fwd).normalized();
  const Vec3 up = fwd.cross(right);
  Eigen::Matrix3d m;
  m.col(0) = right;
  m.col(1) = up;
  m.col(2) = fwd;
  p.orientation = Quat(m).normalized();
  p.timestamp = t;
  return p;
}

}  // namespace

void SceneConfig::validate() const {
  if (rooms == 0) throw InvalidArgument("scene needs at least one room");
  if (frames < 2) throw InvalidArgument("scene needs at least 2 frames per room");
  if (!(subject_speed >= 0.0) || !std::isfinite(subject_speed)) {
    throw InvalidArgument("subject speed must be finite and >= 0");
  }
  if (!(frame_interval > 0.0)) throw InvalidArgument("frame interval must be positive");
}

json SceneConfig::to_json() const {
  return {{"rooms", rooms},
          {"frames", frames},
          {"subject_points", subject_points},
          {"background_points", background_points},
          {"subject_speed", subject_speed},
          {"frame_interval", frame_interval},
          {"seed", seed}};
}

Scene generate_scene(const SceneConfig& cfg) {
  cfg.validate();
  Scene scene;
  scene.frame_interval = cfg.frame_interval;
  const std::vector<Vec3> body = make_subject(cfg);
  for (std::size_t r = 0; r < cfg.rooms; ++r) {
    const Room room = make_room(cfg, r);
    for (std::size_t f = 0; f < cfg.frames; ++f) {
      const double t = static_cast<double>(f) * cfg.frame_interval;
      PointCloud cloud;
      cloud.frame_index = static_cast<std::uint32_t>(scene.frames.size());
      cloud.points = room.points;
      std::vector<Rgb> colors = room.colors;
      const Vec3 offset = subject_offset(room, cfg.subject_speed, t);
      std::vector<std::size_t> mask;
      mask.reserve(body.size());
      for (const Vec3& b : body) {
        mask.push_back(cloud.points.size());
        cloud.points.push_back(b + offset);
        colors.push_back({200, 40, 40});
      }
      cloud.colors = std::move(colors);
      scene.frames.push_back(std::move(cloud));
      scene.subject.push_back(std::move(mask));
      scene.viewer.push_back(viewer_pose(room, t));
      scene.room.push_back(r);
    }
  }
  return scene;
}

std::vector<Vec3> ground_truth_flow(const Scene& scene, std::size_t frame) {
  if (frame >= scene.size()) throw InvalidArgument("frame index out of range");
  std::vector<Vec3> flow(scene.frames[frame].size(), Vec3::Zero());
  if (scene.room_start(frame)) return flow;
  const auto& cur = scene.frames[frame].points;
  const auto& prev = scene.frames[frame - 1].points;
  for (std::size_t i : scene.subject[frame]) flow[i] = cur[i] - prev[i];
  return flow;
}

void save_scene(const Scene& scene, const std::string& dir, const json& config) {
  fs::create_directories(dir);
  json frames = json::array();
  std::vector<std::string> comments;
  if (!config.is_null()) comments.push_back("config " + config.dump());
  for (std::size_t f = 0; f < scene.size(); ++f) {
    char name[32];
    std::snprintf(name, sizeof(name), "frame_%04zu.ply", f);
    save_ply(scene.frames[f], (fs::path(dir) / name).string(), PlyEncoding::kBinary, comments);
    const Pose& p = scene.viewer[f];
    frames.push_back({{"file", name},
                      {"room", scene.room[f]},
                      {"subject", scene.subject[f]},
                      {"pose",
                       {p.position.x(), p.position.y(), p.position.z(), p.orientation.w(),
                        p.orientation.x(), p.orientation.y(), p.orientation.z(), p.timestamp}}});
  }
  json doc = {{"config", config}, {"frame_interval", scene.frame_interval}, {"frames", frames}};
  std::ofstream out(fs::path(dir) / "masks.json");
  if (!out) throw Error("cannot write " + (fs::path(dir) / "masks.json").string());
  out << doc.dump(1) << "\n";
}

Scene load_scene(const std::string& dir) {
  const fs::path index = fs::path(dir) / "masks.json";
  std::ifstream in(index);
  if (!in) throw Error("cannot open " + index.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw Error(index.string() + ": " + e.what());
  }
  Scene scene;
  try {
    scene.frame_interval = doc.at("frame_interval").get<double>();
    for (const auto& f : doc.at("frames")) {
      PointCloud cloud = load_ply((fs::path(dir) / f.at("file").get<std::string>()).string());
      cloud.frame_index = static_cast<std::uint32_t>(scene.frames.size());
      auto mask = f.at("subject").get<std::vector<std::size_t>>();
      for (std::size_t i : mask) {
        if (i >= cloud.size()) throw Error("subject index out of range in " + index.string());
      }
      const auto v = f.at("pose").get<std::vector<double>>();
      if (v.size() != 8) throw Error("pose needs 8 values in " + index.string());
      Pose p;
      p.position = Vec3(v[0], v[1], v[2]);
      p.orientation = Quat(v[3], v[4], v[5], v[6]).normalized();
      p.timestamp = v[7];
      scene.frames.push_back(std::move(cloud));
      scene.subject.push_back(std::move(mask));
      scene.viewer.push_back(p);
      scene.room.push_back(f.at("room").get<std::size_t>());
    }
  } catch (const json::exception& e) {
    throw Error(index.string() + ": " + e.what());
  }
  if (scene.frames.empty()) throw Error(index.string() + ": no frames");
  return scene;
}

// ---------------------------------------------------------------------------

void NetworkTrace::validate() const {
  if (samples.empty()) throw InvalidArgument("trace has no samples");
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (!std::isfinite(samples[i].t) || !(samples[i].mbps > 0.0) || !std::isfinite(samples[i].mbps)) {
      throw InvalidArgument("trace sample " + std::to_string(i) +
                            " needs a finite time and positive bandwidth");
    }
    if (i > 0 && samples[i].t < samples[i - 1].t) {
      throw InvalidArgument("trace timestamps must be non-decreasing");
    }
  }
}

namespace {

// Index of the sample in force at time t.
std::size_t segment_at(const NetworkTrace& trace, double t) {
  const auto it = std::upper_bound(trace.samples.begin(), trace.samples.end(), t,
                                   [](double x, const TraceSample& s) { return x < s.t; });
  return it == trace.samples.begin() ? 0 : static_cast<std::size_t>(it - trace.samples.begin()) - 1;
}

}  // namespace

double NetworkTrace::bandwidth_at(double t) const {
  validate();
  return samples[segment_at(*this, t)].mbps;
}

double preset_mbps(const std::string& preset) {
  if (preset == "3g") return 2.0;
  if (preset == "4g") return 25.0;
  if (preset == "wifi") return 60.0;
  if (preset == "5g") return 100.0;
  throw InvalidArgument("unknown trace preset '" + preset + "' (expected 3g, 4g, wifi or 5g)");
}

NetworkTrace make_trace_mbps(double mean_mbps, double duration_s, std::uint64_t seed,
                             double fluctuation, double step_s) {
  if (!(mean_mbps > 0.0)) throw InvalidArgument("mean bandwidth must be positive");
  if (!(fluctuation >= 0.0 && fluctuation < 1.0)) {
    throw InvalidArgument("fluctuation must be in [0, 1)");
  }
  if (!(step_s > 0.0) || !(duration_s >= 0.0)) {
    throw InvalidArgument("trace step must be positive and duration >= 0");
  }
  NetworkTrace trace;
  Rng rng(seed);
  const auto steps = static_cast<std::size_t>(std::ceil(duration_s / step_s));
  for (std::size_t i = 0; i < std::max<std::size_t>(steps, 1); ++i) {
    trace.samples.push_back(
        {static_cast<double>(i) * step_s, mean_mbps * (1.0 + rng.uniform(-fluctuation, fluctuation))});
  }
  return trace;
}

NetworkTrace make_trace(const std::string& preset, double duration_s, std::uint64_t seed,
                        double fluctuation, double step_s) {
  NetworkTrace t = make_trace_mbps(preset_mbps(preset), duration_s, seed, fluctuation, step_s);
  t.preset = preset;
  return t;
}

NetworkTrace constant_trace(double mbps) {
  NetworkTrace t;
  t.samples.push_back({0.0, mbps});
  t.validate();
  return t;
}

NetworkTrace parse_trace_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  bool header = false;
  NetworkTrace trace;
  auto trim = [](std::string s) {
    while (!s.empty() && (s.back() == '\r' || s.back() == ' ' || s.back() == '\t')) s.pop_back();
    std::size_t i = 0;
    while (i < s.size() && (s[i] == ' ' || s[i] == '\t')) ++i;
    return s.substr(i);
  };
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    if (!header) {
      if (line != "t_seconds,bandwidth_mbps") {
        throw InvalidArgument("trace line " + std::to_string(lineno) +
                              ": expected header 't_seconds,bandwidth_mbps'");
      }
      header = true;
      continue;
    }
    const auto comma = line.find(',');
    double t = 0.0, b = 0.0;
    bool ok = comma != std::string::npos;
    if (ok) {
      const std::string a = trim(line.substr(0, comma)), c = trim(line.substr(comma + 1));
      const auto ra = std::from_chars(a.data(), a.data() + a.size(), t);
      const auto rc = std::from_chars(c.data(), c.data() + c.size(), b);
      ok = ra.ec == std::errc() && ra.ptr == a.data() + a.size() && rc.ec == std::errc() &&
           rc.ptr == c.data() + c.size();
    }
    if (!ok) throw InvalidArgument("trace line " + std::to_string(lineno) + ": expected two numbers");
    trace.samples.push_back({t, b});
  }
  if (!header) throw InvalidArgument("trace: missing header 't_seconds,bandwidth_mbps'");
  trace.validate();
  return trace;
}

NetworkTrace load_trace(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open trace " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  NetworkTrace t = parse_trace_csv(ss.str());
  t.preset = "file";
  return t;
}

std::string format_trace_csv(const NetworkTrace& trace) {
  std::string out = "t_seconds,bandwidth_mbps\n";
  for (const auto& s : trace.samples) out += fmt(s.t) + "," + fmt(s.mbps) + "\n";
  return out;
}

double transmit_time(std::size_t bytes, const NetworkTrace& trace, double start_t) {
  trace.validate();
  if (bytes == 0) return 0.0;
  double bits = 8.0 * static_cast<double>(bytes);
  std::size_t i = segment_at(trace, start_t);
  double t = start_t;
  for (;;) {
    const double rate = trace.samples[i].mbps * 1e6;
    const double end = i + 1 < trace.samples.size() ? trace.samples[i + 1].t
                                                    : std::numeric_limits<double>::infinity();
    const double capacity = (end - t) * rate;
    if (bits <= capacity) return t + bits / rate - start_t;
    bits -= capacity;
    t = end;
    ++i;
  }
}

// ---------------------------------------------------------------------------

void DeviceModel::validate() const {
  if (!(compute_scale > 0.0) || !std::isfinite(compute_scale)) {
    throw InvalidArgument("device compute_scale must be positive");
  }
}

DeviceModel device_preset(const std::string& name) {
  if (name == "device-1") return {name, 2.92 / 2.20};
  if (name == "device-2") return {name, 2.30 / 2.20};
  if (name == "device-3") return {name, 1.0};
  throw InvalidArgument("unknown device '" + name + "' (expected device-1, device-2 or device-3)");
}

std::vector<std::string> device_names() { return {"device-1", "device-2", "device-3"}; }

ModelProfile profile_of(const codec::CodecModel& model, const std::string& name, double accuracy) {
  ModelProfile p;
  p.name = name;
  p.latent = model.latent;
  p.points = model.points;
  p.dtype = model.dtype;
  p.accuracy = accuracy;
  bool pooled = false;
  for (const auto& l : model.encoder.layers) {
    if (l.kind == nn::LayerKind::kMaxPoolPoints) pooled = true;
    if (!l.has_params()) continue;
    const double macs = static_cast<double>(l.weights.size());
    p.encoder_macs_per_point += pooled ? macs / static_cast<double>(model.points) : macs;
  }
  for (const auto& l : model.decoder.layers) {
    if (l.has_params()) p.decoder_macs_per_block += static_cast<double>(l.weights.size());
  }
  return p;
}

void CostModel::validate() const {
  for (double v : {server_macs_per_s, device_macs_per_s, q8_factor, q16_factor}) {
    if (!(v > 0.0)) throw InvalidArgument("cost model rates and factors must be positive");
  }
  for (double v : {roi_s_per_point, octree_encode_s_per_point, octree_decode_s_per_byte}) {
    if (!(v >= 0.0)) throw InvalidArgument("cost model per-item costs must be >= 0");
  }
}

json CostModel::to_json() const {
  return {{"server_macs_per_s", server_macs_per_s},
          {"device_macs_per_s", device_macs_per_s},
          {"q8_factor", q8_factor},
          {"q16_factor", q16_factor},
          {"roi_s_per_point", roi_s_per_point},
          {"octree_encode_s_per_point", octree_encode_s_per_point},
          {"octree_decode_s_per_byte", octree_decode_s_per_byte},
          {"frame_header_bytes", frame_header_bytes},
          {"block_header_bytes", block_header_bytes}};
}

double CostModel::dtype_factor(codec::DType dtype) const {
  switch (dtype) {
    case codec::DType::kQ8: return q8_factor;
    case codec::DType::kQ16: return q16_factor;
    default: return 1.0;
  }
}

std::size_t CostModel::latent_bytes(const ModelProfile& m) const {
  // Quantized models send latents at their own precision plus a min/max pair.
  switch (m.dtype) {
    case codec::DType::kQ8: return m.latent + 8;
    case codec::DType::kQ16: return 2 * m.latent + 8;
    default: return 4 * m.latent;
  }
}

std::size_t CostModel::payload_bytes(const ModelProfile& m, std::size_t blocks) const {
  return frame_header_bytes + blocks * (block_header_bytes + latent_bytes(m));
}

double CostModel::encode_s(const ModelProfile& m, std::size_t roi_points, std::size_t blocks,
                           std::size_t input_points, bool roi) const {
  (void)roi_points;
  const double selection = roi ? roi_s_per_point * static_cast<double>(input_points) : 0.0;
  const double macs = m.encoder_macs_per_point * static_cast<double>(blocks * m.points);
  return selection + macs / server_macs_per_s;
}

double CostModel::decode_s(const ModelProfile& m, std::size_t blocks,
                           const DeviceModel& device) const {
  const double macs = m.decoder_macs_per_block * static_cast<double>(blocks) * dtype_factor(m.dtype);
  return macs / (device_macs_per_s * device.compute_scale);
}

double pipeline_fps(double encode_s, double transmit_s, double decode_s) {
  const double phase = std::max({encode_s, transmit_s, decode_s});
  return phase > 0.0 ? 1.0 / phase : std::numeric_limits<double>::infinity();
}

// ---------------------------------------------------------------------------

std::size_t ModelSet::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].name == name) return i;
  }
  throw InvalidArgument("model '" + name + "' is not in the model set");
}

std::vector<ModelProfile> ModelSet::profiles() const {
  std::vector<ModelProfile> out;
  for (const auto& e : entries) out.push_back(profile_of(e.model, e.name, e.accuracy));
  return out;
}

std::vector<double> ModelSet::accuracy_table() const {
  std::vector<double> out;
  for (const auto& e : entries) out.push_back(e.accuracy);
  return out;
}

void ModelSet::measure_accuracy(const std::vector<codec::Block>& validation) {
  if (entries.empty()) return;
  std::vector<double> cd;
  for (const auto& e : entries) cd.push_back(codec::mean_chamfer(e.model, validation));
  const double best = *std::min_element(cd.begin(), cd.end());
  for (std::size_t i = 0; i < entries.size(); ++i) {
    entries[i].accuracy = cd[i] > 0.0 ? best / cd[i] : 1.0;
  }
}

std::string grid_name(std::size_t latent) {
  switch (latent) {
    case 16: return "4x4";
    case 64: return "8x8";
    case 256: return "16x16";
    default: throw InvalidArgument("latent size must be 16, 64 or 256");
  }
}

std::size_t latent_for_grid(const std::string& grid) {
  if (grid == "4x4") return 16;
  if (grid == "8x8") return 64;
  if (grid == "16x16") return 256;
  throw InvalidArgument("unknown model grid '" + grid + "' (expected 4x4, 8x8 or 16x16)");
}

std::vector<std::string> default_model_names() {
  std::vector<std::string> out;
  for (const char* g : {"4x4", "8x8", "16x16"}) {
    for (const char* q : {"q8", "q16"}) out.push_back(std::string(g) + "-" + q);
  }
  return out;
}

ModelSet load_model_set(const std::string& dir) {
  ModelSet set;
  for (const auto& name : default_model_names()) {
    const fs::path path = fs::path(dir) / (name + ".iscm");
    if (!fs::exists(path)) throw Error("missing model " + path.string());
    codec::CodecModel model = codec::load_model(path.string());
    // Masks rebuilt on load mark exact zeros, so inference can skip them.
    for (auto* net : {&model.encoder, &model.decoder}) {
      for (auto& l : net->layers) l.prune_mask = nn::Tensor();
    }
    set.entries.push_back({name, std::move(model), 1.0});
  }
  return set;
}

// ---------------------------------------------------------------------------

PolicySpec PolicySpec::parse(const std::string& text) {
  PolicySpec p;
  if (text == "drl") {
    p.kind = Kind::kDrl;
    return p;
  }
  const auto colon = text.find(':');
  const std::string head = text.substr(0, colon);
  const std::string arg = colon == std::string::npos ? "" : text.substr(colon + 1);
  if (head == "fixed" && !arg.empty()) {
    p.kind = Kind::kFixed;
    p.model = arg.find('-') == std::string::npos ? arg + "-q16" : arg;
    latent_for_grid(p.model.substr(0, p.model.find('-')));
    const std::string q = p.model.substr(p.model.find('-') + 1);
    if (q != "q8" && q != "q16") throw InvalidArgument("fixed model precision must be q8 or q16");
    return p;
  }
  if (head == "octree" && !arg.empty()) {
    p.kind = Kind::kOctree;
    int depth = 0;
    const auto r = std::from_chars(arg.data(), arg.data() + arg.size(), depth);
    if (r.ec != std::errc() || r.ptr != arg.data() + arg.size() || depth < 1 ||
        depth > octree::kMaxDepth) {
      throw InvalidArgument("octree depth must be an integer in [1, 16]");
    }
    p.depth = depth;
    return p;
  }
  throw InvalidArgument("unknown policy '" + text +
                        "' (expected drl, fixed:<grid>[-q8|-q16] or octree:<depth>)");
}

std::string PolicySpec::label() const {
  switch (kind) {
    case Kind::kDrl: return "drl";
    case Kind::kFixed: return "fixed:" + model;
    default: return "octree:" + std::to_string(depth);
  }
}

void SessionConfig::validate() const {
  roi_config.validate();
  device.validate();
  cost.validate();
  state.validate();
  if (act_every == 0) throw InvalidArgument("act_every must be positive");
  if (!(eta >= 0.0 && eta <= 1.0)) throw InvalidArgument("eta must be in [0, 1]");
  if (!(f_target > 0.0)) throw InvalidArgument("f_target must be positive");
}

json SessionConfig::to_json() const {
  return {{"policy", policy.label()},
          {"roi", roi},
          {"device", device.name},
          {"compute_scale", device.compute_scale},
          {"cost", cost.to_json()},
          {"k", state.k},
          {"t_ref_s", state.t_ref_s},
          {"b_ref_mbps", state.b_ref_mbps},
          {"eta", eta},
          {"f_target", f_target},
          {"act_every", act_every},
          {"first_frame", first_frame},
          {"max_frames", max_frames},
          {"score_full_frame", score_full_frame},
          {"seed", seed}};
}

namespace {

roi::PoseHistory history_for(const Scene& scene, std::size_t f, std::size_t k) {
  roi::PoseHistory h;
  std::size_t lo = f;
  while (lo > 0 && f - lo < k && !scene.room_start(lo)) --lo;
  for (std::size_t i = lo; i < f; ++i) h.samples.push_back(scene.viewer[i]);
  if (h.samples.empty()) h.samples.push_back(scene.viewer[f]);
  if (h.samples.size() == 1) {
    // A stationary earlier sample lets the predictor run at room starts.
    Pose still = h.samples.front();
    still.timestamp -= scene.frame_interval;
    h.samples.insert(h.samples.begin(), still);
  }
  return h;
}

std::vector<Vec3> codec_roundtrip(const codec::CodecModel& model, const std::vector<Vec3>& points) {
  std::vector<Vec3> out;
  out.reserve(points.size());
  const int bits = codec::dtype_bits(model.dtype);
  for (const auto& chunk : codec::chunk_points(points, model.points)) {
    codec::Block block;
    block.reserve(chunk.indices.size());
    for (std::size_t i : chunk.indices) block.push_back(points[i]);
    const codec::BlockFrame frame = codec::normalize_block(block);
    std::vector<double> latent = model.encode(block);
    if (bits < 32) latent = codec::quantize_weights(latent, bits).dequantize(latent.size());
    codec::Block rec = model.decode(latent);
    codec::denormalize_block(rec, frame);
    const std::size_t keep = chunk.indices.size() - chunk.padding;
    out.insert(out.end(), rec.begin(), rec.begin() + static_cast<std::ptrdiff_t>(keep));
  }
  return out;
}

}  // namespace

StreamSession run_session(const Scene& scene, const SessionConfig& cfg, const NetworkTrace& trace,
                          const ModelSet* models, const scheduler::Policy* policy) {
  cfg.validate();
  trace.validate();
  const bool uses_models = cfg.policy.kind != PolicySpec::Kind::kOctree;
  if (uses_models && (!models || models->size() == 0)) {
    throw InvalidArgument("policy " + cfg.policy.label() + " needs a model set");
  }
  std::vector<ModelProfile> profiles;
  if (uses_models) profiles = models->profiles();
  std::size_t current = 0;
  if (cfg.policy.kind == PolicySpec::Kind::kFixed) current = models->index_of(cfg.policy.model);
  if (cfg.policy.kind == PolicySpec::Kind::kDrl) {
    if (!policy) throw InvalidArgument("drl policy needs a trained scheduler");
    if (policy->actions() != models->size() || policy->state_size() != 3 * cfg.state.k) {
      throw InvalidArgument("scheduler shape does not match the model set or state window");
    }
  }
  if (cfg.first_frame >= scene.size()) throw InvalidArgument("first_frame beyond the scene");
  std::size_t count = scene.size() - cfg.first_frame;
  if (cfg.max_frames > 0) count = std::min(count, cfg.max_frames);

  StreamSession session;
  session.label = cfg.policy.label();
  session.config = cfg.to_json();
  session.seed = cfg.seed;
  std::vector<scheduler::FrameRecord> log;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t f = cfg.first_frame + i;
    const PointCloud& frame = scene.frames[f];
    PointCloud sent;
    if (cfg.roi) {
      const PointCloud& prev = scene.room_start(f) ? frame : scene.frames[f - 1];
      sent = roi::select_roi(frame, prev, history_for(scene, f, cfg.roi_config.history_length),
                             cfg.roi_config, cfg.intrinsics, Rng::mix(cfg.seed, f))
                 .cloud;
    } else {
      sent = frame;
    }
    const PointCloud& truth = cfg.score_full_frame ? frame : sent;

    FrameRecord rec;
    rec.frame_idx = f;
    rec.input_points = frame.size();
    rec.roi_points = sent.size();
    PointCloud recon;
    const double send_offset = static_cast<double>(i) * scene.frame_interval;
    if (uses_models) {
      if (cfg.policy.kind == PolicySpec::Kind::kDrl && i % cfg.act_every == 0) {
        current = scheduler::select_action(*policy, scheduler::build_state(log, cfg.state),
                                           scheduler::ActionMode::kGreedy, Rng::mix(cfg.seed, f));
      }
      const ModelEntry& m = models->entries[current];
      const ModelProfile& prof = profiles[current];
      const std::size_t blocks = (sent.size() + m.model.points - 1) / m.model.points;
      recon.points = codec_roundtrip(m.model, sent.points);
      rec.model_id = m.name;
      rec.payload_bytes = cfg.cost.payload_bytes(prof, blocks);
      rec.encode_s = cfg.cost.encode_s(prof, sent.size(), blocks, frame.size(), cfg.roi);
      rec.decode_s = cfg.cost.decode_s(prof, blocks, cfg.device);
    } else {
      const auto bytes = octree::encode(sent, cfg.policy.depth);
      recon = octree::decode(bytes);
      rec.model_id = "octree-" + std::to_string(cfg.policy.depth);
      rec.payload_bytes = bytes.size();
      rec.encode_s = (cfg.roi ? cfg.cost.roi_s_per_point * static_cast<double>(frame.size()) : 0.0) +
                     cfg.cost.octree_encode_s_per_point * static_cast<double>(sent.size());
      rec.decode_s = cfg.cost.octree_decode_s_per_byte * static_cast<double>(bytes.size()) /
                     cfg.device.compute_scale;
    }
    rec.transmit_s = transmit_time(rec.payload_bytes, trace, send_offset + rec.encode_s);
    if (!recon.empty() && !truth.empty()) {
      const CloudDistances d = cloud_distances(recon, truth);
      rec.cd = d.chamfer;
      rec.hd = d.hausdorff;
    }
    const double mbps = rec.transmit_s > 0.0
                            ? 8.0 * static_cast<double>(rec.payload_bytes) / rec.transmit_s / 1e6
                            : trace.bandwidth_at(send_offset + rec.encode_s);
    log.push_back({frame.empty() ? 0.0 : static_cast<double>(sent.size()) / frame.size(),
                   rec.decode_s, mbps});
    session.frames.push_back(std::move(rec));
  }
  return session;
}

std::string session_csv(const StreamSession& session, const std::string& comment) {
  std::string out;
  if (!comment.empty()) out += "# " + comment + "\n";
  out += "frame_idx,input_points,roi_points,payload_bytes,encode_s,transmit_s,decode_s,cd,hd,model_id\n";
  for (const auto& r : session.frames) {
    out += std::to_string(r.frame_idx) + "," + std::to_string(r.input_points) + "," +
           std::to_string(r.roi_points) + "," + std::to_string(r.payload_bytes) + "," +
           fmt(r.encode_s) + "," + fmt(r.transmit_s) + "," + fmt(r.decode_s) + "," + fmt(r.cd) +
           "," + fmt(r.hd) + "," + r.model_id + "\n";
  }
  return out;
}

PolicySummary summarize(const StreamSession& session) {
  PolicySummary s;
  s.label = session.label;
  s.frames = session.frames.size();
  if (session.frames.empty()) return s;
  s.min_fps = std::numeric_limits<double>::infinity();
  for (const auto& r : session.frames) {
    s.avg_payload_bytes += static_cast<double>(r.payload_bytes);
    s.avg_encode_s += r.encode_s;
    s.avg_transmit_s += r.transmit_s;
    s.max_transmit_s = std::max(s.max_transmit_s, r.transmit_s);
    s.avg_decode_s += r.decode_s;
    s.max_decode_s = std::max(s.max_decode_s, r.decode_s);
    s.avg_fps += r.fps();
    s.min_fps = std::min(s.min_fps, r.fps());
    s.avg_latency_s += r.latency_s();
    s.avg_cd += r.cd;
    s.avg_hd += r.hd;
  }
  const double n = static_cast<double>(s.frames);
  for (double* v : {&s.avg_payload_bytes, &s.avg_encode_s, &s.avg_transmit_s, &s.avg_decode_s,
                    &s.avg_fps, &s.avg_latency_s, &s.avg_cd, &s.avg_hd}) {
    *v /= n;
  }
  return s;
}

std::string ComparisonReport::csv() const {
  std::string out =
      "policy,frames,avg_payload_bytes,avg_encode_s,avg_transmit_s,max_transmit_s,avg_decode_s,"
      "max_decode_s,avg_fps,min_fps,avg_latency_s,avg_cd,avg_hd\n";
  for (const auto& r : rows) {
    out += r.label + "," + std::to_string(r.frames) + "," + fmt(r.avg_payload_bytes) + "," +
           fmt(r.avg_encode_s) + "," + fmt(r.avg_transmit_s) + "," + fmt(r.max_transmit_s) + "," +
           fmt(r.avg_decode_s) + "," + fmt(r.max_decode_s) + "," + fmt(r.avg_fps) + "," +
           fmt(r.min_fps) + "," + fmt(r.avg_latency_s) + "," + fmt(r.avg_cd) + "," +
           fmt(r.avg_hd) + "\n";
  }
  return out;
}

json ComparisonReport::to_json() const {
  json arr = json::array();
  for (const auto& r : rows) {
    arr.push_back({{"policy", r.label},
                   {"frames", r.frames},
                   {"avg_payload_bytes", r.avg_payload_bytes},
                   {"avg_encode_s", r.avg_encode_s},
                   {"avg_transmit_s", r.avg_transmit_s},
                   {"max_transmit_s", r.max_transmit_s},
                   {"avg_decode_s", r.avg_decode_s},
                   {"max_decode_s", r.max_decode_s},
                   {"avg_fps", r.avg_fps},
                   {"min_fps", r.min_fps},
                   {"avg_latency_s", r.avg_latency_s},
                   {"avg_cd", r.avg_cd},
                   {"avg_hd", r.avg_hd}});
  }
  return {{"policies", arr}};
}

ComparisonReport compare_policies(const std::vector<StreamSession>& sessions) {
  if (sessions.size() < 2) throw InvalidArgument("compare_policies needs at least two sessions");
  ComparisonReport report;
  for (const auto& s : sessions) {
    if (s.frames.size() != sessions.front().frames.size()) {
      throw InvalidArgument("sessions cover different frame counts");
    }
    report.rows.push_back(summarize(s));
  }
  return report;
}

// ---------------------------------------------------------------------------

void StreamingEnvConfig::validate() const {
  if (models.empty()) throw InvalidArgument("streaming env needs at least one model");
  device.validate();
  cost.validate();
  state.validate();
  if (mean_mbps <= 0.0) preset_mbps(trace_preset);
  if (!(roi_fraction_min > 0.0 && roi_fraction_min <= roi_fraction_max && roi_fraction_max <= 1.0)) {
    throw InvalidArgument("roi fraction range must satisfy 0 < min <= max <= 1");
  }
  if (input_points == 0 || episode_frames == 0) {
    throw InvalidArgument("input points and episode length must be positive");
  }
}

StreamingEnv::StreamingEnv(StreamingEnvConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  spec_.eta = cfg_.eta;
  spec_.f_target = cfg_.f_target;
  for (const auto& m : cfg_.models) spec_.accuracy.push_back(m.accuracy);
  spec_.validate();
}

scheduler::SchedulerState StreamingEnv::reset(std::uint64_t seed) {
  rng_ = Rng(seed);
  const double mean = cfg_.mean_mbps > 0.0 ? cfg_.mean_mbps : preset_mbps(cfg_.trace_preset);
  const double frames = static_cast<double>(cfg_.episode_frames + cfg_.state.k);
  trace_ = make_trace_mbps(mean, frames * cfg_.frame_interval + 1.0, Rng::mix(seed, 1),
                           cfg_.fluctuation);
  fraction_ = rng_.uniform(cfg_.roi_fraction_min, cfg_.roi_fraction_max);
  log_.clear();
  t_ = 0;
  // Warm-up frames with random models so the first state carries history.
  for (std::size_t i = 0; i < cfg_.state.k; ++i) step(rng_.below(cfg_.models.size()));
  t_ = 0;
  return scheduler::build_state(log_, cfg_.state);
}

scheduler::EnvStep StreamingEnv::step(std::size_t action) {
  if (action >= cfg_.models.size()) throw InvalidArgument("streaming env action out of range");
  const ModelProfile& m = cfg_.models[action];
  const auto roi_points = static_cast<std::size_t>(std::llround(fraction_ * cfg_.input_points));
  const std::size_t blocks = (roi_points + m.points - 1) / m.points;
  const std::size_t payload = cfg_.cost.payload_bytes(m, blocks);
  const double encode = cfg_.cost.encode_s(m, roi_points, blocks, cfg_.input_points, true);
  const double send_t = static_cast<double>(log_.size()) * cfg_.frame_interval + encode;
  const double transmit = transmit_time(payload, trace_, send_t);
  const double decode = cfg_.cost.decode_s(m, blocks, cfg_.device);
  const double fps = pipeline_fps(encode, transmit, decode);
  const double mbps = transmit > 0.0 ? 8.0 * static_cast<double>(payload) / transmit / 1e6
                                     : trace_.bandwidth_at(send_t);
  log_.push_back({static_cast<double>(roi_points) / cfg_.input_points, decode, mbps});
  fraction_ = std::clamp(fraction_ + rng_.uniform(-0.02, 0.02), cfg_.roi_fraction_min,
                         cfg_.roi_fraction_max);
  scheduler::EnvStep out;
  out.fps = fps;
  out.reward = scheduler::reward(std::isfinite(fps) ? fps : cfg_.f_target, action, spec_);
  ++t_;
  out.done = t_ >= cfg_.episode_frames;
  out.state = scheduler::build_state(log_, cfg_.state);
  return out;
}

std::unique_ptr<scheduler::Environment> StreamingEnv::clone() const {
  return std::make_unique<StreamingEnv>(*this);
}

}  // namespace iscom::sim
