#include "iscom/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <ostream>
#include <sstream>

#include "iscom/codec.hpp"
#include "iscom/scheduler.hpp"
#include "iscom/sim.hpp"

#ifndef ISCOM_VERSION
#define ISCOM_VERSION "0.0.0"
#endif

namespace iscom::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

/// Bad flags, config keys or values; maps to exit code 2.
class UsageError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Config

void flatten(const json& node, const std::string& prefix, json& out) {
  for (const auto& [key, value] : node.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (value.is_object()) {
      flatten(value, path, out);
    } else {
      out[path] = value;
    }
  }
}

bool same_kind(const json& a, const json& b) {
  if (a.is_boolean() || a.is_string()) return a.type() == b.type();
  if (a.is_number_unsigned()) return b.is_number_unsigned() || (b.is_number_integer() && b >= 0);
  if (a.is_number_float()) return b.is_number();
  return false;
}

/// Converts flag text to the type of the default value at `key`.
json coerce(const json& def, const std::string& key, const std::string& text) {
  const auto fail = [&] { return UsageError(key + ": cannot parse '" + text + "'"); };
  if (def.is_string()) return text;
  if (def.is_boolean()) {
    if (text == "on" || text == "true" || text == "1") return true;
    if (text == "off" || text == "false" || text == "0") return false;
    throw fail();
  }
  const char* first = text.data();
  const char* last = first + text.size();
  if (def.is_number_unsigned()) {
    std::uint64_t v = 0;
    const auto r = std::from_chars(first, last, v);
    if (r.ec != std::errc() || r.ptr != last) throw fail();
    return v;
  }
  double v = 0.0;
  const auto r = std::from_chars(first, last, v);
  if (r.ec != std::errc() || r.ptr != last) throw fail();
  return v;
}

struct Config {
  json values;  // flat, dotted keys

  template <typename T>
  T get(const std::string& key) const {
    return values.at(key).get<T>();
  }
  double num(const std::string& key) const { return values.at(key).get<double>(); }
  std::size_t count(const std::string& key) const {
    return static_cast<std::size_t>(values.at(key).get<std::uint64_t>());
  }
  std::string str(const std::string& key) const { return values.at(key).get<std::string>(); }

  /// A path key; empty means <output_dir>/<fallback>.
  std::string path(const std::string& key, const std::string& fallback) const {
    const std::string p = str(key);
    if (!p.empty()) return p;
    return (fs::path(str("output_dir")) / fallback).string();
  }
};

std::string snapshot(const Config& cfg, const std::string& command) {
  json j = cfg.values;
  j["command"] = command;
  return j.dump();
}

void write_text(const std::string& path, const std::string& text) {
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out << text;
  if (!out) throw Error("write failed: " + path);
}

void write_json(const std::string& path, const json& doc) { write_text(path, doc.dump(2) + "\n"); }

void write_sidecar(const std::string& artifact, const Config& cfg, const std::string& command) {
  write_json(artifact + ".config.json", json::parse(snapshot(cfg, command)));
}

// ---------------------------------------------------------------------------
// Config -> module structs

sim::SceneConfig scene_config(const Config& c) {
  sim::SceneConfig s;
  s.rooms = c.count("sim.rooms");
  s.frames = c.count("sim.frames");
  s.subject_points = c.count("sim.subject_points");
  s.background_points = c.count("sim.background_points");
  s.subject_speed = c.num("sim.subject_speed");
  s.frame_interval = c.num("sim.frame_interval");
  s.seed = c.get<std::uint64_t>("seed");
  s.validate();
  return s;
}

roi::RoiConfig roi_config(const Config& c) {
  roi::RoiConfig r;
  r.coarse_keep_fraction = c.num("roi.coarse_keep_fraction");
  const std::string mode = c.str("roi.keep_mode");
  if (mode == "block_count") {
    r.keep_mode = roi::KeepMode::kBlockCount;
  } else if (mode == "point_count") {
    r.keep_mode = roi::KeepMode::kPointCount;
  } else {
    throw UsageError("roi.keep_mode must be block_count or point_count");
  }
  r.beta = c.num("roi.beta");
  r.lambda = c.num("roi.lambda");
  r.neighbors = c.count("roi.neighbors");
  r.coarse_cell_size = c.num("roi.coarse_cell_size");
  r.fine_cell_size = c.num("roi.fine_cell_size");
  r.sub_bins = static_cast<int>(c.count("roi.sub_bins"));
  r.r_min = c.num("roi.r_min");
  r.r_max = c.num("roi.r_max");
  r.history_length = c.count("roi.history_length");
  r.validate();
  return r;
}

roi::CameraIntrinsics intrinsics(const Config& c) {
  roi::CameraIntrinsics k;
  k.vertical_fov_deg = c.num("roi.fov_deg");
  k.aspect = c.num("roi.aspect");
  k.near = c.num("roi.near");
  k.far = c.num("roi.far");
  if (!(k.vertical_fov_deg > 0.0 && k.vertical_fov_deg < 180.0 && k.aspect > 0.0 && k.near > 0.0 &&
        k.far > k.near)) {
    throw UsageError("invalid camera intrinsics");
  }
  return k;
}

sim::CostModel cost_model(const Config& c) {
  sim::CostModel m;
  m.server_macs_per_s = c.num("sim.cost.server_macs_per_s");
  m.device_macs_per_s = c.num("sim.cost.device_macs_per_s");
  m.q8_factor = c.num("sim.cost.q8_factor");
  m.q16_factor = c.num("sim.cost.q16_factor");
  m.roi_s_per_point = c.num("sim.cost.roi_s_per_point");
  m.octree_encode_s_per_point = c.num("sim.cost.octree_encode_s_per_point");
  m.octree_decode_s_per_byte = c.num("sim.cost.octree_decode_s_per_byte");
  m.frame_header_bytes = c.count("sim.cost.frame_header_bytes");
  m.block_header_bytes = c.count("sim.cost.block_header_bytes");
  m.validate();
  return m;
}

sim::DeviceModel device(const std::string& name) {
  const auto names = sim::device_names();
  if (std::find(names.begin(), names.end(), name) == names.end()) {
    throw UsageError("unknown device '" + name + "'");
  }
  return sim::device_preset(name);
}

scheduler::StateConfig state_config(const Config& c) {
  scheduler::StateConfig s;
  s.k = c.count("scheduler.k");
  s.t_ref_s = c.num("scheduler.t_ref_s");
  s.b_ref_mbps = c.num("scheduler.b_ref_mbps");
  s.validate();
  return s;
}

std::vector<std::size_t> latents(const Config& c) {
  const std::size_t d = c.count("codec.latent");
  if (d == 0) return {16, 64, 256};
  if (d != 16 && d != 64 && d != 256) throw UsageError("codec.latent must be 16, 64 or 256");
  return {d};
}

std::vector<int> bit_widths(const Config& c) {
  const std::size_t b = c.count("codec.bits");
  if (b == 0) return {8, 16};
  if (b != 8 && b != 16) throw UsageError("codec.bits must be 8 or 16");
  return {static_cast<int>(b)};
}

codec::TrainConfig train_config(const Config& c) {
  codec::TrainConfig t;
  const std::string opt = c.str("codec.optimizer");
  if (opt == "adam") {
    t.optimizer = codec::Optimizer::kAdam;
  } else if (opt == "sgd") {
    t.optimizer = codec::Optimizer::kSgd;
  } else {
    throw UsageError("codec.optimizer must be adam or sgd");
  }
  t.epochs = c.count("codec.epochs");
  t.lr = c.num("codec.lr");
  t.momentum = c.num("codec.momentum");
  t.batch = c.count("codec.batch");
  t.augment = c.get<bool>("codec.augment");
  t.seed = c.get<std::uint64_t>("seed");
  t.loss.lambda_rec = c.num("codec.lambda_rec");
  t.loss.rotation_penalty = c.num("codec.rotation_penalty");
  t.loss.emd_cap = c.count("codec.emd_cap");
  t.loss.validate();
  if (!(t.lr > 0.0) || t.batch == 0) throw UsageError("codec.lr and codec.batch must be positive");
  return t;
}

struct Dataset {
  std::vector<codec::Block> train;
  std::vector<codec::Block> test;
};

/// Toy patches by default; otherwise Morton-ordered blocks of a scene
/// directory, normalized to the unit ball and subsampled with the seed.
Dataset dataset(const Config& c, std::size_t points) {
  const std::size_t total = c.count("codec.dataset_blocks");
  const double test_fraction = c.num("codec.test_fraction");
  if (total < 2 || !(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw UsageError("codec.dataset_blocks must be >= 2 and codec.test_fraction in (0, 1)");
  }
  const std::uint64_t seed = c.get<std::uint64_t>("seed");
  std::vector<codec::Block> blocks;
  const std::string dir = c.str("codec.data");
  if (dir.empty()) {
    blocks = codec::make_toy_dataset(total, points, seed);
  } else {
    const sim::Scene scene = sim::load_scene(dir);
    for (const auto& frame : scene.frames) {
      for (const auto& chunk : codec::chunk_points(frame.points, points)) {
        codec::Block b;
        b.reserve(chunk.indices.size());
        for (std::size_t i : chunk.indices) b.push_back(frame.points[i]);
        codec::normalize_block(b);
        blocks.push_back(std::move(b));
      }
    }
    Rng rng(Rng::mix(seed, 0xb10c));
    for (std::size_t i = blocks.size(); i > 1; --i) std::swap(blocks[i - 1], blocks[rng.below(i)]);
    if (blocks.size() > total) blocks.resize(total);
    if (blocks.size() < 2) throw Error("scene yields fewer than two blocks");
  }
  const std::size_t n_test =
      std::clamp<std::size_t>(ceil_count(test_fraction, blocks.size()), 1, blocks.size() - 1);
  Dataset d;
  d.train.assign(blocks.begin(), blocks.end() - static_cast<std::ptrdiff_t>(n_test));
  d.test.assign(blocks.end() - static_cast<std::ptrdiff_t>(n_test), blocks.end());
  return d;
}

std::string fmt(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

sim::NetworkTrace trace_for(const std::string& spec, double duration, std::uint64_t seed,
                            double fluctuation) {
  static const std::vector<std::string> presets = {"3g", "4g", "wifi", "5g"};
  if (std::find(presets.begin(), presets.end(), spec) != presets.end()) {
    return sim::make_trace(spec, duration, seed, fluctuation);
  }
  if (!fs::exists(spec)) throw UsageError("trace must be 3g, 4g, wifi, 5g or a CSV file: " + spec);
  return sim::load_trace(spec);
}

// ---------------------------------------------------------------------------
// Commands

int cmd_generate(const Config& c, std::ostream& out) {
  const sim::SceneConfig sc = scene_config(c);
  const std::string dir = c.path("paths.data", "scene");
  const sim::Scene scene = sim::generate_scene(sc);
  sim::save_scene(scene, dir, json::parse(snapshot(c, "generate")));
  out << "wrote " << scene.size() << " frames to " << dir << "\n";
  return kExitOk;
}

int cmd_train_codec(const Config& c, std::ostream& out) {
  const auto ds = latents(c);
  const codec::TrainConfig tc = train_config(c);
  const std::size_t points = c.count("codec.points");
  const Dataset data = dataset(c, points);
  const std::string dir = c.path("paths.models", "models");
  const std::string snap = snapshot(c, "train-codec");
  for (std::size_t d : ds) {
    codec::CodecArch arch = codec::CodecArch::for_latent(d);
    arch.points = points;
    codec::CodecModel model = codec::CodecModel::create(arch, Rng::mix(tc.seed, d));
    std::string csv = "# config: " + snap + "\nepoch,loss,chamfer\n";
    codec::train(model, data.train, tc, [&](std::size_t epoch, double loss, double chamfer) {
      csv += std::to_string(epoch) + "," + fmt(loss) + "," + fmt(chamfer) + "\n";
    });
    const std::string base = (fs::path(dir) / (sim::grid_name(d) + "-f32")).string();
    fs::create_directories(dir);
    codec::save_model(model, base + ".iscm");
    write_sidecar(base + ".iscm", c, "train-codec");
    write_text(base + ".curve.csv", csv);
    out << sim::grid_name(d) << "-f32: test CD " << fmt(codec::mean_chamfer(model, data.test))
        << " -> " << base << ".iscm\n";
  }
  return kExitOk;
}

double inference_ms(const Config& c, const codec::CodecModel& m, const std::string& name) {
  const sim::CostModel cost = cost_model(c);
  return 1000.0 * cost.decode_s(sim::profile_of(m, name), 1, device(c.str("sim.device")));
}

json table_row(const Config& c, const std::string& name, const codec::CodecModel& m,
               const std::vector<codec::Block>& test) {
  return {{"model", name},
          {"CD", codec::mean_chamfer(m, test)},
          {"HD", codec::mean_hausdorff(m, test)},
          {"Model Size (MB)", static_cast<double>(codec::serialize(m).size()) / 1e6},
          {"Inference Time (ms)", inference_ms(c, m, name)}};
}

int cmd_compress(const Config& c, std::ostream& out) {
  const auto bits = bit_widths(c);
  codec::PruneConfig pc;
  pc.zeta = c.num("codec.zeta");
  pc.rounds = c.count("codec.rounds");
  pc.finetune_epochs = c.count("codec.finetune_epochs");
  pc.epoch_budget = c.count("codec.epoch_budget");
  pc.train = train_config(c);
  pc.validate();
  device(c.str("sim.device"));
  const std::string dir = c.path("paths.models", "models");

  std::vector<std::string> inputs;
  if (!c.str("codec.model").empty()) {
    inputs.push_back(c.str("codec.model"));
  } else {
    for (std::size_t d : latents(c)) {
      inputs.push_back((fs::path(dir) / (sim::grid_name(d) + "-f32.iscm")).string());
    }
  }
  for (const auto& path : inputs) {
    const codec::CodecModel f32 = codec::load_model(path);
    const Dataset data = dataset(c, f32.points);
    codec::LightweightReport rep;
    const codec::CodecModel first = codec::lightweight_train(f32, data.train, pc, bits[0], &rep);
    const std::string grid = sim::grid_name(f32.latent);
    const std::size_t f32_bytes = codec::serialize(f32).size();
    for (int b : bits) {
      codec::CodecModel q = first;
      if (b != bits[0]) {
        q = rep.pruned;
        codec::quantize_model(q, b);
      }
      const std::string name = grid + "-q" + std::to_string(b);
      const std::string base = (fs::path(dir) / name).string();
      fs::create_directories(dir);
      codec::save_model(q, base + ".iscm");
      write_sidecar(base + ".iscm", c, "compress");
      const std::size_t q_bytes = codec::serialize(q).size();
      const double sparsity =
          static_cast<double>(q.zero_weight_count()) / static_cast<double>(q.weight_count());
      json report = {
          {"config", json::parse(snapshot(c, "compress"))},
          {"input", path},
          {"output", base + ".iscm"},
          {"bits", b},
          {"zeta", pc.zeta},
          {"sparsity", sparsity},
          {"rounds_completed", rep.rounds_completed},
          {"epochs_used", rep.epochs_used},
          {"loss_threshold", rep.loss_threshold},
          {"prune_incomplete", q.prune_incomplete},
          {"size", {{"f32_bytes", f32_bytes},
                    {"compressed_bytes", q_bytes},
                    {"ratio", static_cast<double>(q_bytes) / static_cast<double>(f32_bytes)}}},
          {"test",
           {{"blocks", data.test.size()},
            {"cd_before", codec::mean_chamfer(f32, data.test)},
            {"hd_before", codec::mean_hausdorff(f32, data.test)},
            {"cd_after", codec::mean_chamfer(q, data.test)},
            {"hd_after", codec::mean_hausdorff(q, data.test)}}},
          {"table",
           {table_row(c, grid + "-f32", f32, data.test), table_row(c, name, q, data.test)}}};
      write_json(base + ".report.json", report);
      out << name << ": size ratio " << fmt(report["size"]["ratio"].get<double>()) << ", sparsity "
          << fmt(sparsity) << " -> " << base << ".iscm\n";
    }
  }
  return kExitOk;
}

sim::ModelSet model_set_with_accuracy(const Config& c) {
  sim::ModelSet set = sim::load_model_set(c.path("paths.models", "models"));
  const Dataset data = dataset(c, set.entries.front().model.points);
  set.measure_accuracy(data.test);
  return set;
}

int cmd_train_scheduler(const Config& c, std::ostream& out) {
  scheduler::SchedulerTrainConfig tc;
  tc.workers = c.count("scheduler.workers");
  tc.epochs = c.count("scheduler.epochs");
  tc.lr = c.num("scheduler.lr");
  tc.hidden = c.count("scheduler.hidden");
  tc.a3c.gamma = c.num("scheduler.gamma");
  tc.a3c.entropy_weight = c.num("scheduler.entropy_weight");
  tc.a3c.value_weight = c.num("scheduler.value_weight");
  tc.decay_entropy = c.get<bool>("scheduler.decay_entropy");
  tc.seed = c.get<std::uint64_t>("seed");
  tc.validate();

  sim::StreamingEnvConfig ec;
  ec.device = device(c.str("scheduler.device"));
  ec.cost = cost_model(c);
  ec.trace_preset = c.str("scheduler.trace");
  ec.fluctuation = c.num("scheduler.fluctuation");
  ec.episode_frames = c.count("scheduler.episode_frames");
  ec.frame_interval = c.num("sim.frame_interval");
  ec.state = state_config(c);
  ec.eta = c.num("scheduler.eta");
  ec.f_target = c.num("scheduler.f_target");
  ec.input_points = c.count("sim.subject_points") + c.count("sim.background_points");

  const sim::ModelSet models = model_set_with_accuracy(c);
  ec.models = models.profiles();
  ec.validate();
  const sim::StreamingEnv env(ec);
  const scheduler::TrainResult result = scheduler::train_scheduler(env, tc);

  const std::string path = c.path("paths.policy", "scheduler.iscp");
  if (fs::path(path).has_parent_path()) fs::create_directories(fs::path(path).parent_path());
  scheduler::save_policy(result.policy, path);
  write_sidecar(path, c, "train-scheduler");
  write_text(path + ".rewards.csv",
             scheduler::curve_csv(result.curve, "config: " + snapshot(c, "train-scheduler")));
  double tail = 0.0;
  const std::size_t n = std::min<std::size_t>(100, result.curve.size());
  for (std::size_t i = result.curve.size() - n; i < result.curve.size(); ++i) {
    tail += result.curve[i].mean_reward;
  }
  out << "policy -> " << path;
  if (n > 0) out << " (final " << n << "-epoch mean reward " << fmt(tail / static_cast<double>(n)) << ")";
  out << "\n";
  return kExitOk;
}

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> parts;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, sep)) {
    if (!item.empty()) parts.push_back(item);
  }
  return parts;
}

std::string file_label(std::string label) {
  std::replace(label.begin(), label.end(), ':', '_');
  return label;
}

json table_json(const sim::PolicySummary& s) {
  return {{"Data size (KB)", s.avg_payload_bytes / 1000.0},
          {"Encoding time (s)", s.avg_encode_s},
          {"Transmission time (s)", s.avg_transmit_s},
          {"Decoding time (s)", s.avg_decode_s},
          {"Avg. frame rate (fps)", s.avg_fps},
          {"Min. frame rate (fps)", s.min_fps},
          {"Avg. latency (s)", s.avg_latency_s},
          {"CD", s.avg_cd},
          {"HD", s.avg_hd}};
}

int cmd_simulate(const Config& c, std::ostream& out) {
  std::vector<sim::PolicySpec> policies;
  for (const auto& p : split(c.str("sim.policy"), ',')) {
    try {
      policies.push_back(sim::PolicySpec::parse(p));
    } catch (const InvalidArgument& e) {
      throw UsageError(e.what());
    }
  }
  if (policies.empty()) throw UsageError("sim.policy is empty");

  sim::SessionConfig base;
  base.roi = c.get<bool>("roi.enabled");
  base.roi_config = roi_config(c);
  base.intrinsics = intrinsics(c);
  base.device = device(c.str("sim.device"));
  base.cost = cost_model(c);
  base.state = state_config(c);
  base.eta = c.num("scheduler.eta");
  base.f_target = c.num("scheduler.f_target");
  base.act_every = c.count("sim.act_every");
  base.max_frames = c.count("sim.max_frames");
  base.score_full_frame = c.get<bool>("sim.score_full_frame");
  base.seed = c.get<std::uint64_t>("seed");
  base.validate();
  const std::string trace_spec = c.str("sim.trace");
  if (trace_spec.empty()) throw UsageError("sim.trace is empty");

  const sim::Scene scene = sim::load_scene(c.path("paths.data", "scene"));
  const std::size_t frames =
      base.max_frames == 0 ? scene.size() : std::min(base.max_frames, scene.size());
  const double duration = static_cast<double>(frames) * scene.frame_interval + 10.0;
  const sim::NetworkTrace trace =
      trace_for(trace_spec, duration, base.seed, c.num("sim.fluctuation"));

  const bool needs_models = std::any_of(policies.begin(), policies.end(), [](const auto& p) {
    return p.kind != sim::PolicySpec::Kind::kOctree;
  });
  const bool needs_policy = std::any_of(policies.begin(), policies.end(), [](const auto& p) {
    return p.kind == sim::PolicySpec::Kind::kDrl;
  });
  std::optional<sim::ModelSet> models;
  if (needs_models) models = sim::load_model_set(c.path("paths.models", "models"));
  std::optional<scheduler::Policy> policy;
  if (needs_policy) policy = scheduler::load_policy(c.path("paths.policy", "scheduler.iscp"));

  const std::string dir = c.path("paths.sim", "sim");
  fs::create_directories(dir);
  const std::string snap = snapshot(c, "simulate");
  std::vector<sim::StreamSession> sessions;
  json rows = json::array();
  for (const auto& p : policies) {
    sim::SessionConfig cfg = base;
    cfg.policy = p;
    sim::StreamSession s = sim::run_session(scene, cfg, trace, models ? &*models : nullptr,
                                            policy ? &*policy : nullptr);
    const std::string file = "session_" + file_label(s.label) + ".csv";
    write_text((fs::path(dir) / file).string(), sim::session_csv(s, "config: " + snap));
    const sim::PolicySummary sum = sim::summarize(s);
    rows.push_back({{"label", s.label},
                    {"file", file},
                    {"frames", sum.frames},
                    {"avg_payload_bytes", sum.avg_payload_bytes},
                    {"avg_encode_s", sum.avg_encode_s},
                    {"avg_transmit_s", sum.avg_transmit_s},
                    {"max_transmit_s", sum.max_transmit_s},
                    {"avg_decode_s", sum.avg_decode_s},
                    {"max_decode_s", sum.max_decode_s},
                    {"avg_fps", sum.avg_fps},
                    {"min_fps", sum.min_fps},
                    {"avg_latency_s", sum.avg_latency_s},
                    {"avg_cd", sum.avg_cd},
                    {"avg_hd", sum.avg_hd},
                    {"table", table_json(sum)}});
    out << s.label << ": avg fps " << fmt(sum.avg_fps) << ", min fps " << fmt(sum.min_fps)
        << ", avg payload " << fmt(sum.avg_payload_bytes) << " B\n";
    sessions.push_back(std::move(s));
  }
  json summary = {{"config", json::parse(snap)},
                  {"roi", base.roi},
                  {"device", base.device.name},
                  {"trace", trace.preset},
                  {"frames", frames},
                  {"sessions", rows}};
  if (sessions.size() >= 2) {
    const sim::ComparisonReport report = sim::compare_policies(sessions);
    write_text((fs::path(dir) / "comparison.csv").string(), "# config: " + snap + "\n" + report.csv());
    summary["comparison"] = report.to_json();
  }
  write_json((fs::path(dir) / "summary.json").string(), summary);
  out << "wrote " << sessions.size() << " session(s) to " << dir << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// Flag plumbing

struct Binding {
  CLI::Option* option = nullptr;
  std::string key;
  std::string text;
};

json read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw UsageError(path + ": " + e.what());
  }
}

}  // namespace

std::string version() { return ISCOM_VERSION; }

json default_config() {
  return {
      {"seed", 1u},
      {"output_dir", "out"},
      {"paths.data", ""},
      {"paths.models", ""},
      {"paths.policy", ""},
      {"paths.sim", ""},

      {"roi.enabled", true},
      {"roi.coarse_keep_fraction", 0.6},
      {"roi.keep_mode", "block_count"},
      {"roi.beta", 0.5},
      {"roi.lambda", 0.35},
      {"roi.neighbors", 6u},
      {"roi.coarse_cell_size", 0.5},
      {"roi.fine_cell_size", 0.25},
      {"roi.sub_bins", 2u},
      {"roi.r_min", 0.1},
      {"roi.r_max", 1.0},
      {"roi.history_length", 8u},
      {"roi.fov_deg", 70.0},
      {"roi.aspect", 16.0 / 9.0},
      {"roi.near", 0.1},
      {"roi.far", 12.0},

      {"codec.latent", 0u},
      {"codec.points", 128u},
      {"codec.optimizer", "adam"},
      {"codec.epochs", 50u},
      {"codec.lr", 0.001},
      {"codec.momentum", 0.9},
      {"codec.batch", 8u},
      {"codec.augment", true},
      {"codec.data", ""},
      {"codec.dataset_blocks", 500u},
      {"codec.test_fraction", 0.2},
      {"codec.lambda_rec", 1.0},
      {"codec.rotation_penalty", 1.0},
      {"codec.emd_cap", 256u},
      {"codec.model", ""},
      {"codec.zeta", 0.5},
      {"codec.bits", 0u},
      {"codec.rounds", 5u},
      {"codec.finetune_epochs", 4u},
      {"codec.epoch_budget", 20u},

      {"scheduler.eta", 0.5},
      {"scheduler.epochs", 500u},
      {"scheduler.lr", 0.005},
      {"scheduler.gamma", 0.88},
      {"scheduler.hidden", 96u},
      {"scheduler.workers", 1u},
      {"scheduler.entropy_weight", 0.01},
      {"scheduler.value_weight", 0.5},
      {"scheduler.decay_entropy", true},
      {"scheduler.k", 8u},
      {"scheduler.t_ref_s", 1.0 / 30.0},
      {"scheduler.b_ref_mbps", 100.0},
      {"scheduler.episode_frames", 128u},
      {"scheduler.f_target", 30.0},
      {"scheduler.device", "device-2"},
      {"scheduler.trace", "4g"},
      {"scheduler.fluctuation", 0.3},

      {"sim.rooms", 5u},
      {"sim.frames", 100u},
      {"sim.subject_points", 2000u},
      {"sim.background_points", 20000u},
      {"sim.subject_speed", 0.6},
      {"sim.frame_interval", 1.0 / 30.0},
      {"sim.device", "device-2"},
      {"sim.trace", "4g"},
      {"sim.fluctuation", 0.3},
      {"sim.policy", "drl,fixed:16x16"},
      {"sim.max_frames", 300u},
      {"sim.act_every", 1u},
      {"sim.score_full_frame", false},
      {"sim.cost.server_macs_per_s", 2e10},
      {"sim.cost.device_macs_per_s", 2.5e8},
      {"sim.cost.q8_factor", 0.5},
      {"sim.cost.q16_factor", 0.75},
      {"sim.cost.roi_s_per_point", 2e-7},
      {"sim.cost.octree_encode_s_per_point", 1e-7},
      {"sim.cost.octree_decode_s_per_byte", 2e-7},
      {"sim.cost.frame_header_bytes", 8u},
      {"sim.cost.block_header_bytes", 16u},
  };
}

json merge_config(const json& base, const json& overrides) {
  if (!overrides.is_object()) throw InvalidArgument("config must be a JSON object");
  json flat = json::object();
  flatten(overrides, "", flat);
  json merged = base;
  for (const auto& [key, value] : flat.items()) {
    if (!merged.contains(key)) throw InvalidArgument("unknown config key '" + key + "'");
    if (!same_kind(merged[key], value)) {
      throw InvalidArgument("config key '" + key + "' expects " +
                            std::string(merged[key].type_name()) + ", got " + value.type_name());
    }
    merged[key] = merged[key].is_number_float() ? json(value.get<double>()) : value;
  }
  return merged;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Semantic point cloud video streaming: data, codec, scheduler and simulation",
               "iscom"};
  app.set_version_flag("--version", "iscom " + version());
  app.require_subcommand(1);
  std::string config_path;
  app.add_option("--config", config_path, "JSON config file (dotted or nested keys)");

  const json defaults = default_config();
  std::vector<Binding> bindings;
  std::map<CLI::App*, std::function<int(const Config&, std::ostream&)>> handlers;
  // Reserved up front so option targets stay valid.
  bindings.reserve(64);
  const auto opt = [&](CLI::App* sub, const std::string& flag, const std::string& key,
                       const std::string& help) -> CLI::Option* {
    bindings.push_back({nullptr, key, ""});
    Binding& b = bindings.back();
    b.option = sub->add_option(flag, b.text, help + " [" + key + "]");
    return b.option;
  };

  CLI::App* gen = app.add_subcommand("generate", "Write a synthetic PLY scene with masks");
  opt(gen, "--rooms", "sim.rooms", "Number of rooms");
  opt(gen, "--frames", "sim.frames", "Frames per room");
  opt(gen, "--subject-points", "sim.subject_points", "Subject points per frame");
  opt(gen, "--background-points", "sim.background_points", "Background points per room");
  opt(gen, "--seed", "seed", "Random seed");
  opt(gen, "--out", "paths.data", "Output directory");
  handlers[gen] = cmd_generate;

  CLI::App* tc = app.add_subcommand("train-codec", "Train f32 point-block autoencoders");
  opt(tc, "--latent", "codec.latent", "Latent size 16, 64 or 256 (default: all)")
      ->check(CLI::IsMember({"16", "64", "256"}));
  opt(tc, "--epochs", "codec.epochs", "Training epochs");
  opt(tc, "--lr", "codec.lr", "Learning rate");
  opt(tc, "--data", "codec.data", "Scene directory (default: toy dataset)");
  opt(tc, "--seed", "seed", "Random seed");
  opt(tc, "--out", "paths.models", "Model directory");
  handlers[tc] = cmd_train_codec;

  CLI::App* cp = app.add_subcommand("compress", "Prune and quantize trained models");
  opt(cp, "--model", "codec.model", "f32 model file (default: every <grid>-f32.iscm)");
  opt(cp, "--zeta", "codec.zeta", "Target sparsity");
  opt(cp, "--bits", "codec.bits", "8 or 16 (default: both)")->check(CLI::IsMember({"8", "16"}));
  opt(cp, "--data", "codec.data", "Scene directory (default: toy dataset)");
  opt(cp, "--seed", "seed", "Random seed");
  opt(cp, "--out", "paths.models", "Model directory");
  handlers[cp] = cmd_compress;

  CLI::App* ts = app.add_subcommand("train-scheduler", "Train the A3C transmission scheduler");
  opt(ts, "--eta", "scheduler.eta", "Accuracy weight in the reward");
  opt(ts, "--epochs", "scheduler.epochs", "Training epochs");
  opt(ts, "--lr", "scheduler.lr", "Learning rate");
  opt(ts, "--gamma", "scheduler.gamma", "Discount factor");
  opt(ts, "--hidden", "scheduler.hidden", "Hidden units");
  opt(ts, "--workers", "scheduler.workers", "Parallel workers");
  opt(ts, "--device", "scheduler.device", "Client device")->check(CLI::IsMember(sim::device_names()));
  opt(ts, "--trace", "scheduler.trace", "Bandwidth preset");
  opt(ts, "--models", "paths.models", "Model directory");
  opt(ts, "--seed", "seed", "Random seed");
  opt(ts, "--out", "paths.policy", "Policy file");
  handlers[ts] = cmd_train_scheduler;

  CLI::App* sm = app.add_subcommand("simulate", "Stream a scene and report per-frame costs");
  opt(sm, "--data", "paths.data", "Scene directory");
  opt(sm, "--policy", "sim.policy", "Comma list of drl, fixed:<model>, octree:<depth>");
  opt(sm, "--trace", "sim.trace", "Bandwidth preset (3g, 4g, wifi, 5g) or CSV file");
  opt(sm, "--device", "sim.device", "Client device")->check(CLI::IsMember(sim::device_names()));
  opt(sm, "--roi", "roi.enabled", "ROI selection on or off")->check(CLI::IsMember({"on", "off"}));
  opt(sm, "--models", "paths.models", "Model directory");
  opt(sm, "--policy-file", "paths.policy", "Scheduler policy file");
  opt(sm, "--max-frames", "sim.max_frames", "Frames to stream (0: all)");
  opt(sm, "--seed", "seed", "Random seed");
  opt(sm, "--out", "paths.sim", "Output directory");
  handlers[sm] = cmd_simulate;

  for (auto* sub : {gen, tc, cp, ts, sm}) sub->fallthrough();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    app.exit(e, out, err);
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    app.exit(e, out, err);
    return kExitOk;
  } catch (const CLI::CallForVersion& e) {
    app.exit(e, out, err);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitUsage;
  }

  CLI::App* active = app.get_subcommands().front();
  Config cfg;
  try {
    cfg.values = defaults;
    if (!config_path.empty()) cfg.values = merge_config(cfg.values, read_config_file(config_path));
    for (const auto& b : bindings) {
      if (b.option->count() == 0) continue;
      cfg.values[b.key] = coerce(defaults.at(b.key), b.key, b.text);
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    return handlers.at(active)(cfg, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const InvalidArgument& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace iscom::cli
