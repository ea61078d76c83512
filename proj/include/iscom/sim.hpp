#ifndef ISCOM_SIM_HPP
#define ISCOM_SIM_HPP

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "iscom/cloud.hpp"
#include "iscom/codec.hpp"
#include "iscom/roi.hpp"
#include "iscom/scheduler.hpp"
#include "json.hpp"

namespace iscom::sim {

// ---------------------------------------------------------------------------
// Synthetic scene

struct SceneConfig {
  std::size_t rooms = 5;
  std::size_t frames = 100;  // per room
  std::size_t subject_points = 2000;
  std::size_t background_points = 20000;
  double subject_speed = 0.6;  // m/s along the subject path
  double frame_interval = 1.0 / 30.0;
  std::uint64_t seed = 1;

  void validate() const;
  nlohmann::json to_json() const;
};

struct Scene {
  std::vector<PointCloud> frames;
  /// Indices of subject points per frame (ground-truth mask).
  std::vector<std::vector<std::size_t>> subject;
  std::vector<Pose> viewer;
  std::vector<std::size_t> room;  // room index per frame
  double frame_interval = 1.0 / 30.0;

  std::size_t size() const { return frames.size(); }
  /// True for the first frame of a room (no usable previous frame).
  bool room_start(std::size_t f) const { return f == 0 || room[f] != room[f - 1]; }
};

/// Static procedural rooms (floor, walls, ceiling, boxes) and a rigid
/// multi-sphere subject moving along a smooth seeded loop. Subject points come
/// last in every frame and keep their order, so index i tracks one body point.
Scene generate_scene(const SceneConfig& cfg);

/// Ground-truth displacement of every point from the previous frame (zero for
/// background points and at room starts).
std::vector<Vec3> ground_truth_flow(const Scene& scene, std::size_t frame);

/// frame_%04d.ply (binary) plus masks.json with subject indices and viewer poses.
void save_scene(const Scene& scene, const std::string& dir, const nlohmann::json& config = {});
Scene load_scene(const std::string& dir);

// ---------------------------------------------------------------------------
// Network traces

struct TraceSample {
  double t = 0.0;     // seconds
  double mbps = 0.0;  // bandwidth from t until the next sample
};

struct NetworkTrace {
  std::vector<TraceSample> samples;
  std::string preset = "file";

  void validate() const;
  /// Piecewise-constant bandwidth; before the first sample the first value
  /// holds, after the last sample the last value holds.
  double bandwidth_at(double t) const;
};

/// Mean bandwidth of a preset: 3g 2, 4g 25, wifi 60, 5g 100 Mbps.
double preset_mbps(const std::string& preset);

/// Seeded piecewise trace: every `step_s` the bandwidth is drawn uniformly
/// within mean * (1 +- fluctuation).
NetworkTrace make_trace(const std::string& preset, double duration_s, std::uint64_t seed,
                        double fluctuation = 0.3, double step_s = 0.5);
NetworkTrace make_trace_mbps(double mean_mbps, double duration_s, std::uint64_t seed,
                             double fluctuation = 0.3, double step_s = 0.5);
NetworkTrace constant_trace(double mbps);

/// CSV with header `t_seconds,bandwidth_mbps`.
NetworkTrace parse_trace_csv(const std::string& text);
NetworkTrace load_trace(const std::string& path);
std::string format_trace_csv(const NetworkTrace& trace);

/// Seconds needed to deliver `bytes` starting at `start_t`, integrating the
/// trace. The last sample extends forever.
double transmit_time(std::size_t bytes, const NetworkTrace& trace, double start_t);

// ---------------------------------------------------------------------------
// Devices and cost model

struct DeviceModel {
  std::string name;
  double compute_scale = 1.0;

  void validate() const;
};

/// device-1, device-2, device-3 (CPU clocks 2.92, 2.30, 2.20 GHz relative to device-3).
DeviceModel device_preset(const std::string& name);
std::vector<std::string> device_names();

/// What the cost model needs to know about one transmission model.
struct ModelProfile {
  std::string name;
  std::size_t latent = 64;
  std::size_t points = 128;
  codec::DType dtype = codec::DType::kF32;
  double encoder_macs_per_point = 0.0;
  double decoder_macs_per_block = 0.0;
  double accuracy = 1.0;  // L, normalized 1/CD on validation blocks
};

ModelProfile profile_of(const codec::CodecModel& model, const std::string& name,
                        double accuracy = 1.0);

/// Deterministic timing model: multiply-accumulate counts over fixed rates.
/// Quantized decoders run cheaper integer kernels (dtype factors).
struct CostModel {
  double server_macs_per_s = 2e10;
  double device_macs_per_s = 2.5e8;  // at compute_scale 1
  double q8_factor = 0.5;
  double q16_factor = 0.75;
  double roi_s_per_point = 2e-7;
  double octree_encode_s_per_point = 1e-7;
  double octree_decode_s_per_byte = 2e-7;  // at compute_scale 1
  std::size_t frame_header_bytes = 8;
  std::size_t block_header_bytes = 16;

  void validate() const;
  nlohmann::json to_json() const;

  double dtype_factor(codec::DType dtype) const;
  std::size_t latent_bytes(const ModelProfile& m) const;
  std::size_t payload_bytes(const ModelProfile& m, std::size_t blocks) const;
  double encode_s(const ModelProfile& m, std::size_t roi_points, std::size_t blocks,
                  std::size_t input_points, bool roi) const;
  double decode_s(const ModelProfile& m, std::size_t blocks, const DeviceModel& device) const;
};

/// Three-stage pipeline throughput: 1 / max phase.
double pipeline_fps(double encode_s, double transmit_s, double decode_s);

// ---------------------------------------------------------------------------
// Model sets

struct ModelEntry {
  std::string name;  // e.g. "8x8-q8"
  codec::CodecModel model;
  double accuracy = 1.0;
};

/// The scheduler's action space, ordered as loaded.
struct ModelSet {
  std::vector<ModelEntry> entries;

  std::size_t size() const { return entries.size(); }
  std::size_t index_of(const std::string& name) const;  // throws on unknown names
  std::vector<ModelProfile> profiles() const;
  std::vector<double> accuracy_table() const;

  /// Sets L_i = min_j CD_j / CD_i from the mean Chamfer distance on `validation`.
  void measure_accuracy(const std::vector<codec::Block>& validation);
};

/// "4x4", "8x8" or "16x16" for latent 16, 64, 256.
std::string grid_name(std::size_t latent);
std::size_t latent_for_grid(const std::string& grid);
/// Default action-space names: {4x4, 8x8, 16x16} x {q8, q16}.
std::vector<std::string> default_model_names();
/// Loads <dir>/<name>.iscm for every default name.
ModelSet load_model_set(const std::string& dir);

// ---------------------------------------------------------------------------
// Sessions

struct PolicySpec {
  enum class Kind { kDrl, kFixed, kOctree };
  Kind kind = Kind::kDrl;
  std::string model;  // fixed: model name
  int depth = 6;      // octree

  /// "drl", "fixed:<name>" (a bare grid such as 16x16 means its q16 model), "octree:<depth>".
  static PolicySpec parse(const std::string& text);
  std::string label() const;
};

struct SessionConfig {
  PolicySpec policy;
  bool roi = true;
  roi::RoiConfig roi_config;
  roi::CameraIntrinsics intrinsics;
  DeviceModel device = device_preset("device-2");
  CostModel cost;
  scheduler::StateConfig state;
  double eta = 0.5;
  double f_target = 30.0;
  std::size_t act_every = 1;
  std::size_t first_frame = 0;
  std::size_t max_frames = 0;  // 0 means all
  bool score_full_frame = false;
  std::uint64_t seed = 1;

  void validate() const;
  nlohmann::json to_json() const;
};

struct FrameRecord {
  std::size_t frame_idx = 0;
  std::size_t input_points = 0;
  std::size_t roi_points = 0;
  std::size_t payload_bytes = 0;
  double encode_s = 0.0;
  double transmit_s = 0.0;
  double decode_s = 0.0;
  double cd = 0.0;
  double hd = 0.0;
  std::string model_id;

  double fps() const { return pipeline_fps(encode_s, transmit_s, decode_s); }
  double latency_s() const { return encode_s + transmit_s + decode_s; }
};

struct StreamSession {
  std::string label;
  std::vector<FrameRecord> frames;
  nlohmann::json config;
  std::uint64_t seed = 0;
};

/// Runs the per-frame ROI -> chunk -> encode -> transmit -> decode timeline.
/// `models` is required for drl and fixed policies, `policy` for drl.
StreamSession run_session(const Scene& scene, const SessionConfig& cfg, const NetworkTrace& trace,
                          const ModelSet* models, const scheduler::Policy* policy = nullptr);

/// Session CSV: frame_idx,input_points,roi_points,payload_bytes,encode_s,
/// transmit_s,decode_s,cd,hd,model_id. `comment` becomes a leading "# " line.
std::string session_csv(const StreamSession& session, const std::string& comment = "");

struct PolicySummary {
  std::string label;
  std::size_t frames = 0;
  double avg_payload_bytes = 0.0;
  double avg_encode_s = 0.0;
  double avg_transmit_s = 0.0;
  double max_transmit_s = 0.0;
  double avg_decode_s = 0.0;
  double max_decode_s = 0.0;
  double avg_fps = 0.0;
  double min_fps = 0.0;
  double avg_latency_s = 0.0;
  double avg_cd = 0.0;
  double avg_hd = 0.0;
};

PolicySummary summarize(const StreamSession& session);

struct ComparisonReport {
  std::vector<PolicySummary> rows;

  std::string csv() const;
  nlohmann::json to_json() const;
};

/// Throws InvalidArgument when fewer than two sessions or frame counts differ.
ComparisonReport compare_policies(const std::vector<StreamSession>& sessions);

// ---------------------------------------------------------------------------
// Scheduler training environment

struct StreamingEnvConfig {
  std::vector<ModelProfile> models;
  DeviceModel device = device_preset("device-2");
  CostModel cost;
  std::string trace_preset = "4g";
  double mean_mbps = 0.0;  // overrides the preset when > 0
  double fluctuation = 0.3;
  std::size_t input_points = 22000;
  double roi_fraction_min = 0.1;
  double roi_fraction_max = 0.3;
  std::size_t episode_frames = 128;
  double frame_interval = 1.0 / 30.0;
  scheduler::StateConfig state;
  double eta = 0.5;
  double f_target = 30.0;

  void validate() const;
};

/// Per-frame model choice against the cost model: each step sends one frame
/// whose ROI size follows a seeded random walk over a fresh seeded trace.
class StreamingEnv : public scheduler::Environment {
 public:
  explicit StreamingEnv(StreamingEnvConfig cfg);

  scheduler::SchedulerState reset(std::uint64_t seed) override;
  scheduler::EnvStep step(std::size_t action) override;
  std::size_t action_count() const override { return cfg_.models.size(); }
  std::size_t history() const override { return cfg_.state.k; }
  std::unique_ptr<scheduler::Environment> clone() const override;

  const StreamingEnvConfig& config() const { return cfg_; }

 private:
  StreamingEnvConfig cfg_;
  scheduler::RewardSpec spec_;
  NetworkTrace trace_;
  std::vector<scheduler::FrameRecord> log_;
  Rng rng_{0};
  double fraction_ = 0.2;
  std::size_t t_ = 0;
};

}  // namespace iscom::sim

#endif  // ISCOM_SIM_HPP
