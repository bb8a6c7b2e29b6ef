#pragma once

// Detection scoring: interpolated average precision per class and IoU
// threshold, and segment-level false positive / false negative rates of the
// foreground attention.

#include "wtal/dataset_io.hpp"
#include "wtal/localization.hpp"

#include <json.hpp>

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace wtal::eval {

struct Interval {
  double start = 0.0;
  double end = 0.0;
};

double iou_1d(Interval a, Interval b);

struct Detection {
  std::string video_id;
  int class_id = 0;
  double start = 0.0;
  double end = 0.0;
  double score = 0.0;
};

struct GroundTruthInstance {
  std::string video_id;
  int class_id = 0;
  double start = 0.0;
  double end = 0.0;
};

// Score descending, then earlier start, then video id.
void sort_detections(std::vector<Detection>& detections);

// Interpolated AP for one class. Each detection, in sorted order, takes the
// unmatched ground truth of its video with the highest IoU >= iou_threshold.
// nullopt when there is no ground truth.
std::optional<double> average_precision(std::vector<Detection> detections,
                                        std::span<const GroundTruthInstance> ground_truth, double iou_threshold);

// {0.3, ..., 0.7} for thumos, {0.5, ..., 0.95} for anet, {0.3, 0.5, 0.7} for synthetic.
std::vector<double> iou_thresholds(const std::string& profile);

struct EvalReport {
  std::vector<double> ious;
  std::vector<double> map;  // per IoU
  double average = 0.0;
  // ap[i][c]: class c at ious[i]; nullopt for classes without ground truth.
  std::vector<std::vector<std::optional<double>>> ap;
  std::optional<double> frame_fpr;
  std::optional<double> frame_fnr;
};

EvalReport map_at_ious(std::span<const Detection> detections, std::span<const GroundTruthInstance> ground_truth,
                       int num_classes, std::span<const double> ious);

std::vector<GroundTruthInstance> ground_truth_of(const data::DatasetManifest& manifest);
std::vector<Detection> flatten(const loc::DetectionMap& detections);

struct ConfusionCounts {
  long long tp = 0;
  long long fp = 0;
  long long tn = 0;
  long long fn = 0;

  // Zero when the denominator is empty.
  double fpr() const;
  double fnr() const;
  ConfusionCounts& operator+=(const ConfusionCounts& o);
};

// Segment t is positive when its midpoint (t + 0.5) * dt lies in a ground
// truth interval [start, end).
std::vector<bool> occupancy(int length, std::span<const data::GroundTruth> ground_truth, double seconds_per_segment);
ConfusionCounts confusion(const Eigen::VectorXd& attention, const std::vector<bool>& truth, double threshold = 0.5);

struct VideoAttention {
  Eigen::VectorXd attention;
  std::vector<data::GroundTruth> ground_truth;
  double seconds_per_segment = 0.64;
};
// Pooled over videos.
ConfusionCounts frame_metrics(std::span<const VideoAttention> videos, double threshold = 0.5);

nlohmann::json report_to_json(const EvalReport& report, const std::vector<std::string>& class_names);
EvalReport report_from_json(const nlohmann::json& doc);
std::string format_table(const EvalReport& report, const std::vector<std::string>& class_names);
std::string report_csv(const EvalReport& report);

}  // namespace wtal::eval
