#pragma once

// Turns attention and background-suppressed similarity maps into scored
// temporal action proposals.

#include <Eigen/Dense>

#include <json.hpp>

#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace wtal::loc {

struct Proposal {
  int class_id = 0;
  double start = 0.0;  // seconds
  double end = 0.0;
  double confidence = 0.0;
};

// Inclusive segment index range.
struct Segment {
  int start = 0;
  int end = 0;

  int length() const { return end - start + 1; }
  auto operator<=>(const Segment&) const = default;
};

struct InferenceConfig {
  double class_threshold = 0.2;
  std::vector<double> attention_thresholds = default_thresholds();
  double inflation = 0.25;
  double nms_sigma = 0.3;
  int min_length = 2;
  double min_confidence = 1e-4;

  // 0.10, 0.15, ..., 0.90
  static std::vector<double> default_thresholds();
  void validate() const;
};

// {c < C : p_bar[c] > threshold}, falling back to the top non-background class.
// p_bar has C + 1 entries; the last one is background.
std::vector<int> select_classes(const Eigen::VectorXd& p_bar, double threshold);

// Maximal runs with att >= theta for every theta, runs shorter than min_length
// dropped, union without duplicates (sorted).
std::vector<Segment> generate_proposals(const Eigen::VectorXd& attention, std::span<const double> thresholds,
                                        int min_length);

// Mean inside [s, e] minus mean over the inflated flanks, each of length
// max(1, round(inflation * len)) and clipped to the video.
double outer_inner_score(const Eigen::VectorXd& column, Segment segment, double inflation);

// Temporal IoU of two second intervals.
double interval_iou(double a_start, double a_end, double b_start, double b_end);

// Greedy Gaussian soft-NMS over proposals of one class. Returns proposals in
// selection order; those decayed below min_confidence are dropped.
std::vector<Proposal> soft_nms(std::vector<Proposal> proposals, double sigma, double min_confidence = 1e-4);

// [s, e] -> (s * dt, (e + 1) * dt)
std::pair<double, double> to_seconds(Segment segment, double seconds_per_segment);

// Full per-video post-processing. suppressed is T x (C+1).
std::vector<Proposal> localize(const Eigen::VectorXd& attention, const Eigen::MatrixXd& suppressed,
                               const Eigen::VectorXd& p_bar, const InferenceConfig& config,
                               double seconds_per_segment);

// {"results": {video_id: [{"label", "score", "segment": [s, e]}]}}
using DetectionMap = std::map<std::string, std::vector<Proposal>>;
nlohmann::json detections_to_json(const DetectionMap& detections, const std::vector<std::string>& class_names);
DetectionMap detections_from_json(const nlohmann::json& doc, const std::vector<std::string>& class_names);

}  // namespace wtal::loc
