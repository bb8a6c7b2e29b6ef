#pragma once

// Untrimmed-video feature streams and their video-level annotations.

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace wtal::data {

using Matrix = Eigen::MatrixXd;
using FeatureMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr int kModalityDim = 1024;
inline constexpr double kFramesPerSegment = 16.0;

struct VideoFeatures {
  std::string video_id;
  FeatureMatrix rgb;   // T x D
  FeatureMatrix flow;  // T x D
  double seconds_per_segment = kFramesPerSegment / 25.0;

  Eigen::Index length() const { return rgb.rows(); }
};

struct GroundTruth {
  int class_id = 0;
  double start = 0.0;  // seconds
  double end = 0.0;
};

struct ManifestEntry {
  std::string id;
  std::filesystem::path rgb;
  std::filesystem::path flow;
  std::vector<int> label;  // length C, 0/1
  double fps = 25.0;
  std::vector<GroundTruth> ground_truth;

  double seconds_per_segment() const { return kFramesPerSegment / fps; }
};

enum class Split { kTrain, kTest };

struct DatasetManifest {
  std::vector<std::string> class_names;
  std::vector<ManifestEntry> entries;
  Split split = Split::kTrain;

  int num_classes() const { return static_cast<int>(class_names.size()); }
};

// Parses and validates a manifest. Relative feature paths resolve against the
// manifest's directory. Throws ValidationError naming the offending entry.
DatasetManifest load_manifest(const std::filesystem::path& path);
// Writes `manifest`, storing feature paths relative to the manifest directory
// when they live beneath it.
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);
void validate_manifest(const DatasetManifest& manifest);

// Feature file: "WTAL1", uint32 LE T, uint32 LE D, T*D float32 LE row-major.
FeatureMatrix read_feature_file(const std::filesystem::path& path);
void write_feature_file(const std::filesystem::path& path, const FeatureMatrix& features);

// Loads both modalities; rejects length mismatch, D != 1024 and non-finite values.
VideoFeatures load_features(const ManifestEntry& entry, int expected_dim = kModalityDim);

enum class FusionMode { kConcat, kGated };

// Cross-modal channel gates. Zero weights give gates of exactly 0.5.
struct GateWeights {
  Matrix rgb_from_flow;  // D x D
  Matrix rgb_bias;       // 1 x D
  Matrix flow_from_rgb;  // D x D
  Matrix flow_bias;      // 1 x D

  static GateWeights zeros(int dim);
};

// T x 2D. kGated re-weights each modality by sigmoid(gate(mean_t(other))).
Matrix fuse_modalities(const VideoFeatures& video, FusionMode mode = FusionMode::kConcat,
                       const GateWeights* gates = nullptr);

enum class SamplingMode { kRandom, kUniform };

// Row indices of length t_target. Uniform: floor(i*T/t_target). Random: one
// index drawn per stratum [floor(i*T/t), floor((i+1)*T/t)).
std::vector<int> sample_indices(int length, int t_target, SamplingMode mode, std::mt19937_64& rng);
Matrix sample_segments(const Matrix& x, int t_target, SamplingMode mode, std::mt19937_64& rng);
Matrix sample_segments(const Matrix& x, int t_target, SamplingMode mode, std::uint64_t seed);

struct SyntheticSpec {
  int num_classes = 3;
  int train_videos_per_class = 10;
  int test_videos_per_class = 5;
  int min_length = 40;
  int max_length = 80;
  int feature_dim = kModalityDim;
  // Ratio of signature norm (1) to expected noise norm; infinity = no noise.
  double snr = 3.0;
  int min_instances = 1;
  int max_instances = 2;
  int min_instance_length = 6;
  // Upper bound on instance length as a fraction of the video length.
  double max_instance_fraction = 0.25;
  // Fraction of each instance (from its head) carrying the shared signature
  // for classes listed in shared_pairs. 0 disables.
  double shared_fraction = 0.0;
  std::vector<std::pair<int, int>> shared_pairs{{0, 1}};
  double fps = 25.0;
  // Empty: take the first num_classes names of a built-in action list.
  std::vector<std::string> class_names;
};

struct SyntheticDataset {
  DatasetManifest train;
  DatasetManifest test;
  std::filesystem::path train_manifest;
  std::filesystem::path test_manifest;
  // Per-class unit signatures (rgb, flow) as written to disk.
  std::vector<std::pair<Eigen::VectorXf, Eigen::VectorXf>> signatures;
};

// Writes features/ plus train.json and test.json under out_dir. Fully
// determined by (spec, seed).
SyntheticDataset generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed,
                                    const std::filesystem::path& out_dir);

// Built-in action names used by the generator (THUMOS14 classes).
const std::vector<std::string>& builtin_class_names();

}  // namespace wtal::data
