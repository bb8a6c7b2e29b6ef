#include "wtal/dataset_io.hpp"

#include "wtal/error.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

namespace wtal::data {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::array<char, 5> kMagic{'W', 'T', 'A', 'L', '1'};

static_assert(std::endian::native == std::endian::little,
              "feature file I/O assumes a little-endian host");

std::string entry_label(const ManifestEntry& e, std::size_t index) {
  return "entry " + std::to_string(index) + " ('" + e.id + "')";
}

int parse_gt_class(const json& value, const std::vector<std::string>& classes, const std::string& where) {
  if (value.is_number_integer()) return value.get<int>();
  if (value.is_string()) {
    const auto name = value.get<std::string>();
    auto it = std::find(classes.begin(), classes.end(), name);
    if (it == classes.end()) throw ValidationError(where + ": unknown ground-truth class '" + name + "'");
    return static_cast<int>(it - classes.begin());
  }
  throw ValidationError(where + ": ground-truth class must be a name or an index");
}

}  // namespace

void validate_manifest(const DatasetManifest& m) {
  const int C = m.num_classes();
  if (C == 0) throw ValidationError("manifest has no classes");
  for (std::size_t i = 0; i < m.entries.size(); ++i) {
    const auto& e = m.entries[i];
    const auto where = entry_label(e, i);
    if (static_cast<int>(e.label.size()) != C) {
      throw ValidationError(where + ": label length " + std::to_string(e.label.size()) +
                            " != number of classes " + std::to_string(C));
    }
    int positives = 0;
    for (int v : e.label) {
      if (v != 0 && v != 1) throw ValidationError(where + ": label entries must be 0 or 1");
      positives += v;
    }
    if (m.split == Split::kTrain && positives == 0)
      throw ValidationError(where + ": training video without any positive label");
    if (!(e.fps > 0.0)) throw ValidationError(where + ": fps must be positive");
    for (const auto& g : e.ground_truth) {
      if (g.class_id < 0 || g.class_id >= C)
        throw ValidationError(where + ": ground-truth class index " + std::to_string(g.class_id) + " out of range");
      if (!(g.start >= 0.0) || !(g.start < g.end))
        throw ValidationError(where + ": invalid ground-truth interval [" + std::to_string(g.start) + ", " +
                              std::to_string(g.end) + "]");
    }
  }
}

DatasetManifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open manifest: " + path.string());
  json doc;
  try {
    in >> doc;
  } catch (const json::parse_error& e) {
    throw ValidationError("manifest " + path.string() + " is not valid JSON: " + e.what());
  }

  DatasetManifest m;
  const fs::path base = path.parent_path();
  try {
    m.class_names = doc.at("classes").get<std::vector<std::string>>();
    const auto split = doc.value("split", std::string("train"));
    if (split == "train") {
      m.split = Split::kTrain;
    } else if (split == "test") {
      m.split = Split::kTest;
    } else {
      throw ValidationError("manifest split must be 'train' or 'test', got '" + split + "'");
    }
    std::size_t index = 0;
    for (const auto& v : doc.at("videos")) {
      ManifestEntry e;
      e.id = v.at("id").get<std::string>();
      const auto where = "entry " + std::to_string(index) + " ('" + e.id + "')";
      fs::path rgb = v.at("rgb").get<std::string>();
      fs::path flow = v.at("flow").get<std::string>();
      e.rgb = rgb.is_relative() ? base / rgb : rgb;
      e.flow = flow.is_relative() ? base / flow : flow;
      e.label = v.at("label").get<std::vector<int>>();
      e.fps = v.value("fps", 25.0);
      if (v.contains("gt")) {
        for (const auto& g : v.at("gt")) {
          e.ground_truth.push_back(
              {parse_gt_class(g.at("class"), m.class_names, where), g.at("start").get<double>(),
               g.at("end").get<double>()});
        }
      }
      m.entries.push_back(std::move(e));
      ++index;
    }
  } catch (const json::exception& e) {
    throw ValidationError("manifest " + path.string() + ": " + e.what());
  }
  validate_manifest(m);
  return m;
}

void save_manifest(const DatasetManifest& m, const fs::path& path) {
  const fs::path base = fs::absolute(path).parent_path();
  auto rel = [&](const fs::path& p) {
    auto r = fs::absolute(p).lexically_relative(base);
    if (!r.empty() && *r.begin() != "..") return r.generic_string();
    return p.generic_string();
  };
  json videos = json::array();
  for (const auto& e : m.entries) {
    json gt = json::array();
    for (const auto& g : e.ground_truth)
      gt.push_back({{"class", m.class_names.at(static_cast<std::size_t>(g.class_id))},
                    {"start", g.start},
                    {"end", g.end}});
    videos.push_back({{"id", e.id},
                      {"rgb", rel(e.rgb)},
                      {"flow", rel(e.flow)},
                      {"label", e.label},
                      {"fps", e.fps},
                      {"gt", gt}});
  }
  json doc = {{"classes", m.class_names},
              {"videos", videos},
              {"split", m.split == Split::kTrain ? "train" : "test"}};
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write manifest: " + path.string());
  out << doc.dump(2) << '\n';
}

FeatureMatrix read_feature_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open feature file: " + path.string());
  std::array<char, 5> magic{};
  std::uint32_t t = 0;
  std::uint32_t d = 0;
  in.read(magic.data(), magic.size());
  in.read(reinterpret_cast<char*>(&t), sizeof t);
  in.read(reinterpret_cast<char*>(&d), sizeof d);
  if (!in || magic != kMagic) throw ValidationError("bad feature file header: " + path.string());
  FeatureMatrix m(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(d));
  const auto bytes = static_cast<std::streamsize>(sizeof(float) * static_cast<std::size_t>(t) * d);
  in.read(reinterpret_cast<char*>(m.data()), bytes);
  if (in.gcount() != bytes) throw ValidationError("truncated feature file: " + path.string());
  return m;
}

void write_feature_file(const fs::path& path, const FeatureMatrix& features) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write feature file: " + path.string());
  const auto t = static_cast<std::uint32_t>(features.rows());
  const auto d = static_cast<std::uint32_t>(features.cols());
  out.write(kMagic.data(), kMagic.size());
  out.write(reinterpret_cast<const char*>(&t), sizeof t);
  out.write(reinterpret_cast<const char*>(&d), sizeof d);
  out.write(reinterpret_cast<const char*>(features.data()),
            static_cast<std::streamsize>(sizeof(float) * features.size()));
}

VideoFeatures load_features(const ManifestEntry& entry, int expected_dim) {
  VideoFeatures v;
  v.video_id = entry.id;
  v.rgb = read_feature_file(entry.rgb);
  v.flow = read_feature_file(entry.flow);
  v.seconds_per_segment = entry.seconds_per_segment();
  if (v.rgb.rows() != v.flow.rows()) {
    throw ValidationError("video '" + entry.id + "': modality length mismatch (rgb T=" +
                          std::to_string(v.rgb.rows()) + ", flow T=" + std::to_string(v.flow.rows()) + ")");
  }
  for (const auto* m : {&v.rgb, &v.flow}) {
    if (m->cols() != expected_dim) {
      throw ValidationError("video '" + entry.id + "': feature dimension " + std::to_string(m->cols()) +
                            " != " + std::to_string(expected_dim));
    }
    if (!m->allFinite()) throw ValidationError("video '" + entry.id + "': non-finite feature values");
  }
  if (v.length() == 0) throw ValidationError("video '" + entry.id + "': empty feature stream");
  return v;
}

GateWeights GateWeights::zeros(int dim) {
  return {Matrix::Zero(dim, dim), Matrix::Zero(1, dim), Matrix::Zero(dim, dim), Matrix::Zero(1, dim)};
}

Matrix fuse_modalities(const VideoFeatures& video, FusionMode mode, const GateWeights* gates) {
  const Eigen::Index T = video.length();
  const Eigen::Index D = video.rgb.cols();
  if (video.flow.rows() != T || video.flow.cols() != D)
    throw ValidationError("fuse_modalities: rgb and flow shapes differ");
  Matrix rgb = video.rgb.cast<double>();
  Matrix flow = video.flow.cast<double>();
  if (mode == FusionMode::kGated) {
    const GateWeights zero = GateWeights::zeros(static_cast<int>(D));
    const GateWeights& g = gates ? *gates : zero;
    auto sig = [](const Matrix& z) { return Matrix((1.0 / (1.0 + (-z.array()).exp())).matrix()); };
    Matrix rgb_gate = sig(flow.colwise().mean() * g.rgb_from_flow + g.rgb_bias);
    Matrix flow_gate = sig(rgb.colwise().mean() * g.flow_from_rgb + g.flow_bias);
    rgb = rgb.array().rowwise() * rgb_gate.row(0).array();
    flow = flow.array().rowwise() * flow_gate.row(0).array();
  }
  Matrix x(T, 2 * D);
  x.leftCols(D) = rgb;
  x.rightCols(D) = flow;
  return x;
}

std::vector<int> sample_indices(int length, int t_target, SamplingMode mode, std::mt19937_64& rng) {
  if (t_target < 1) throw ValidationError("sample_segments: T_target must be >= 1");
  if (length < 1) throw ValidationError("sample_segments: empty input");
  std::vector<int> idx(static_cast<std::size_t>(t_target));
  const auto T = static_cast<std::int64_t>(length);
  const auto N = static_cast<std::int64_t>(t_target);
  for (std::int64_t i = 0; i < N; ++i) {
    const auto lo = i * T / N;
    const auto hi = (i + 1) * T / N;
    if (mode == SamplingMode::kRandom && hi - lo > 1) {
      std::uniform_int_distribution<std::int64_t> pick(lo, hi - 1);
      idx[static_cast<std::size_t>(i)] = static_cast<int>(pick(rng));
    } else {
      idx[static_cast<std::size_t>(i)] = static_cast<int>(lo);
    }
  }
  return idx;
}

Matrix sample_segments(const Matrix& x, int t_target, SamplingMode mode, std::mt19937_64& rng) {
  const auto idx = sample_indices(static_cast<int>(x.rows()), t_target, mode, rng);
  Matrix out(t_target, x.cols());
  for (int i = 0; i < t_target; ++i) out.row(i) = x.row(idx[static_cast<std::size_t>(i)]);
  return out;
}

Matrix sample_segments(const Matrix& x, int t_target, SamplingMode mode, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sample_segments(x, t_target, mode, rng);
}

const std::vector<std::string>& builtin_class_names() {
  static const std::vector<std::string> names{
      "HighJump",      "LongJump",       "Diving",       "PoleVault",   "CleanAndJerk",
      "BaseballPitch", "BasketballDunk", "Billiards",    "CliffDiving", "CricketBowling",
      "CricketShot",   "FrisbeeCatch",   "GolfSwing",    "HammerThrow", "JavelinThrow",
      "Shotput",       "SoccerPenalty",  "TennisSwing",  "ThrowDiscus", "VolleyballSpiking"};
  return names;
}

namespace {

Eigen::VectorXf random_unit(int dim, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::VectorXd v(dim);
  for (int i = 0; i < dim; ++i) v[i] = n(rng);
  v.normalize();
  return v.cast<float>();
}

struct Instance {
  int start;
  int length;
};

std::vector<Instance> place_instances(int T, const SyntheticSpec& spec, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> count_dist(spec.min_instances, spec.max_instances);
  int n = count_dist(rng);
  // Each instance gets its own zone so instances never overlap and are
  // separated by at least one background segment.
  while (n > 1 && T / n < spec.min_instance_length + 2) --n;
  const int zone = T / n;
  const int max_len = std::max(spec.min_instance_length,
                               static_cast<int>(std::floor(spec.max_instance_fraction * T)));
  std::vector<Instance> out;
  for (int z = 0; z < n; ++z) {
    const int zone_lo = z * zone + 1;
    const int zone_hi = (z == n - 1 ? T : (z + 1) * zone) - 1;  // exclusive
    const int room = zone_hi - zone_lo;
    const int hi_len = std::max(1, std::min(max_len, room));
    const int lo_len = std::min(spec.min_instance_length, hi_len);
    std::uniform_int_distribution<int> len_dist(lo_len, hi_len);
    const int len = len_dist(rng);
    std::uniform_int_distribution<int> start_dist(zone_lo, zone_lo + room - len);
    out.push_back({start_dist(rng), len});
  }
  return out;
}

}  // namespace

SyntheticDataset generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed, const fs::path& out_dir) {
  if (spec.num_classes < 1) throw ValidationError("synthetic spec: need at least one class");
  if (spec.min_length < 4 || spec.max_length < spec.min_length)
    throw ValidationError("synthetic spec: invalid length range");
  if (spec.min_instances < 1 || spec.max_instances < spec.min_instances)
    throw ValidationError("synthetic spec: invalid instance count range");
  if (!(spec.snr > 0.0)) throw ValidationError("synthetic spec: snr must be positive");

  std::vector<std::string> names = spec.class_names;
  if (names.empty()) {
    const auto& builtin = builtin_class_names();
    if (spec.num_classes > static_cast<int>(builtin.size()))
      throw ValidationError("synthetic spec: more classes than built-in names; pass class_names");
    names.assign(builtin.begin(), builtin.begin() + spec.num_classes);
  }
  if (static_cast<int>(names.size()) != spec.num_classes)
    throw ValidationError("synthetic spec: class_names size != num_classes");

  std::mt19937_64 rng(seed);
  const int D = spec.feature_dim;
  SyntheticDataset ds;
  for (int c = 0; c < spec.num_classes; ++c) {
    auto rgb = random_unit(D, rng);
    auto flow = random_unit(D, rng);
    ds.signatures.emplace_back(std::move(rgb), std::move(flow));
  }
  const auto shared_rgb = random_unit(D, rng);
  const auto shared_flow = random_unit(D, rng);
  std::vector<bool> has_shared(static_cast<std::size_t>(spec.num_classes), false);
  if (spec.shared_fraction > 0.0) {
    for (auto [a, b] : spec.shared_pairs) {
      if (a >= 0 && a < spec.num_classes) has_shared[static_cast<std::size_t>(a)] = true;
      if (b >= 0 && b < spec.num_classes) has_shared[static_cast<std::size_t>(b)] = true;
    }
  }

  const double sigma = std::isinf(spec.snr) ? 0.0 : 1.0 / (spec.snr * std::sqrt(static_cast<double>(D)));
  std::normal_distribution<double> noise(0.0, 1.0);
  const double sps = kFramesPerSegment / spec.fps;

  fs::create_directories(out_dir / "features");
  auto make_split = [&](Split split, int per_class, const std::string& prefix) {
    DatasetManifest m;
    m.class_names = names;
    m.split = split;
    int serial = 0;
    for (int v = 0; v < per_class; ++v) {
      for (int c = 0; c < spec.num_classes; ++c) {
        std::uniform_int_distribution<int> len_dist(spec.min_length, spec.max_length);
        const int T = len_dist(rng);
        FeatureMatrix rgb(T, D);
        FeatureMatrix flow(T, D);
        for (int t = 0; t < T; ++t) {
          for (int d = 0; d < D; ++d) rgb(t, d) = static_cast<float>(sigma * noise(rng));
          for (int d = 0; d < D; ++d) flow(t, d) = static_cast<float>(sigma * noise(rng));
        }
        ManifestEntry e;
        char id[64];
        std::snprintf(id, sizeof id, "%s_%04d", prefix.c_str(), serial++);
        e.id = id;
        e.fps = spec.fps;
        e.label.assign(static_cast<std::size_t>(spec.num_classes), 0);
        e.label[static_cast<std::size_t>(c)] = 1;
        const auto& sig = ds.signatures[static_cast<std::size_t>(c)];
        for (const auto& inst : place_instances(T, spec, rng)) {
          const int shared_len = has_shared[static_cast<std::size_t>(c)]
                                     ? static_cast<int>(std::lround(spec.shared_fraction * inst.length))
                                     : 0;
          for (int t = inst.start; t < inst.start + inst.length; ++t) {
            const bool shared = (t - inst.start) < shared_len;
            rgb.row(t) += (shared ? shared_rgb : sig.first).transpose();
            flow.row(t) += (shared ? shared_flow : sig.second).transpose();
          }
          e.ground_truth.push_back({c, inst.start * sps, (inst.start + inst.length) * sps});
        }
        e.rgb = out_dir / "features" / (e.id + "_rgb.bin");
        e.flow = out_dir / "features" / (e.id + "_flow.bin");
        write_feature_file(e.rgb, rgb);
        write_feature_file(e.flow, flow);
        m.entries.push_back(std::move(e));
      }
    }
    return m;
  };

  ds.train = make_split(Split::kTrain, spec.train_videos_per_class, "train");
  ds.test = make_split(Split::kTest, spec.test_videos_per_class, "test");
  ds.train_manifest = out_dir / "train.json";
  ds.test_manifest = out_dir / "test.json";
  save_manifest(ds.train, ds.train_manifest);
  save_manifest(ds.test, ds.test_manifest);
  return ds;
}

}  // namespace wtal::data
