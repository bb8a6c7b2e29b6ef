#include "wtal/evaluation.hpp"

#include "wtal/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

namespace wtal::eval {

double iou_1d(Interval a, Interval b) {
  const double inter = std::max(0.0, std::min(a.end, b.end) - std::max(a.start, b.start));
  const double uni = (a.end - a.start) + (b.end - b.start) - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

void sort_detections(std::vector<Detection>& detections) {
  std::stable_sort(detections.begin(), detections.end(), [](const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.start != b.start) return a.start < b.start;
    return a.video_id < b.video_id;
  });
}

std::optional<double> average_precision(std::vector<Detection> detections,
                                        std::span<const GroundTruthInstance> ground_truth, double iou_threshold) {
  if (ground_truth.empty()) return std::nullopt;
  if (detections.empty()) return 0.0;
  sort_detections(detections);

  std::vector<bool> matched(ground_truth.size(), false);
  std::vector<double> tp(detections.size(), 0.0);
  for (std::size_t d = 0; d < detections.size(); ++d) {
    const auto& det = detections[d];
    std::vector<std::pair<double, std::size_t>> candidates;
    for (std::size_t g = 0; g < ground_truth.size(); ++g) {
      if (ground_truth[g].video_id != det.video_id) continue;
      candidates.emplace_back(iou_1d({det.start, det.end}, {ground_truth[g].start, ground_truth[g].end}), g);
    }
    std::stable_sort(candidates.begin(), candidates.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (const auto& [iou, g] : candidates) {
      if (iou < iou_threshold) break;
      if (matched[g]) continue;
      matched[g] = true;
      tp[d] = 1.0;
      break;
    }
  }

  const auto n = detections.size();
  std::vector<double> recall(n), precision(n);
  double cum_tp = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    cum_tp += tp[i];
    recall[i] = cum_tp / static_cast<double>(ground_truth.size());
    precision[i] = cum_tp / static_cast<double>(i + 1);
  }
  // Precision envelope over [0, recall..., 1].
  std::vector<double> mrec{0.0}, mprec{0.0};
  mrec.insert(mrec.end(), recall.begin(), recall.end());
  mprec.insert(mprec.end(), precision.begin(), precision.end());
  mrec.push_back(1.0);
  mprec.push_back(0.0);
  for (std::size_t i = mprec.size() - 1; i-- > 0;) mprec[i] = std::max(mprec[i], mprec[i + 1]);
  double ap = 0.0;
  for (std::size_t i = 1; i < mrec.size(); ++i) {
    if (mrec[i] != mrec[i - 1]) ap += (mrec[i] - mrec[i - 1]) * mprec[i];
  }
  return ap;
}

std::vector<double> iou_thresholds(const std::string& profile) {
  std::vector<double> out;
  if (profile == "thumos") {
    for (int i = 0; i < 5; ++i) out.push_back(0.3 + 0.1 * i);
  } else if (profile == "anet") {
    for (int i = 0; i < 10; ++i) out.push_back(0.5 + 0.05 * i);
  } else if (profile == "synthetic") {
    out = {0.3, 0.5, 0.7};
  } else {
    throw ValidationError("unknown evaluation profile '" + profile + "'");
  }
  return out;
}

EvalReport map_at_ious(std::span<const Detection> detections, std::span<const GroundTruthInstance> ground_truth,
                       int num_classes, std::span<const double> ious) {
  if (ious.empty()) throw ValidationError("map_at_ious: empty IoU list");
  std::vector<std::vector<Detection>> det_by_class(static_cast<std::size_t>(num_classes));
  std::vector<std::vector<GroundTruthInstance>> gt_by_class(static_cast<std::size_t>(num_classes));
  for (const auto& d : detections) {
    if (d.class_id < 0 || d.class_id >= num_classes) throw ValidationError("detection class id out of range");
    det_by_class[static_cast<std::size_t>(d.class_id)].push_back(d);
  }
  for (const auto& g : ground_truth) {
    if (g.class_id < 0 || g.class_id >= num_classes) throw ValidationError("ground-truth class id out of range");
    gt_by_class[static_cast<std::size_t>(g.class_id)].push_back(g);
  }

  EvalReport report;
  report.ious.assign(ious.begin(), ious.end());
  for (double thr : ious) {
    std::vector<std::optional<double>> row;
    double sum = 0.0;
    int counted = 0;
    for (int c = 0; c < num_classes; ++c) {
      const auto ap = average_precision(det_by_class[static_cast<std::size_t>(c)],
                                        gt_by_class[static_cast<std::size_t>(c)], thr);
      row.push_back(ap);
      if (ap) {
        sum += *ap;
        ++counted;
      }
    }
    report.map.push_back(counted > 0 ? sum / counted : 0.0);
    report.ap.push_back(std::move(row));
  }
  report.average = std::accumulate(report.map.begin(), report.map.end(), 0.0) / static_cast<double>(report.map.size());
  return report;
}

std::vector<GroundTruthInstance> ground_truth_of(const data::DatasetManifest& manifest) {
  std::vector<GroundTruthInstance> out;
  for (const auto& e : manifest.entries)
    for (const auto& g : e.ground_truth) out.push_back({e.id, g.class_id, g.start, g.end});
  return out;
}

std::vector<Detection> flatten(const loc::DetectionMap& detections) {
  std::vector<Detection> out;
  for (const auto& [video, props] : detections)
    for (const auto& p : props) out.push_back({video, p.class_id, p.start, p.end, p.confidence});
  return out;
}

double ConfusionCounts::fpr() const { return fp + tn > 0 ? static_cast<double>(fp) / static_cast<double>(fp + tn) : 0.0; }
double ConfusionCounts::fnr() const { return fn + tp > 0 ? static_cast<double>(fn) / static_cast<double>(fn + tp) : 0.0; }

ConfusionCounts& ConfusionCounts::operator+=(const ConfusionCounts& o) {
  tp += o.tp;
  fp += o.fp;
  tn += o.tn;
  fn += o.fn;
  return *this;
}

std::vector<bool> occupancy(int length, std::span<const data::GroundTruth> ground_truth, double seconds_per_segment) {
  std::vector<bool> out(static_cast<std::size_t>(length), false);
  for (int t = 0; t < length; ++t) {
    const double mid = (t + 0.5) * seconds_per_segment;
    for (const auto& g : ground_truth) {
      if (mid >= g.start && mid < g.end) {
        out[static_cast<std::size_t>(t)] = true;
        break;
      }
    }
  }
  return out;
}

ConfusionCounts confusion(const Eigen::VectorXd& attention, const std::vector<bool>& truth, double threshold) {
  if (static_cast<std::size_t>(attention.size()) != truth.size())
    throw ValidationError("confusion: attention and ground-truth lengths differ");
  ConfusionCounts c;
  for (std::size_t t = 0; t < truth.size(); ++t) {
    const bool pred = attention[static_cast<Eigen::Index>(t)] >= threshold;
    if (pred && truth[t]) ++c.tp;
    else if (pred) ++c.fp;
    else if (truth[t]) ++c.fn;
    else ++c.tn;
  }
  return c;
}

ConfusionCounts frame_metrics(std::span<const VideoAttention> videos, double threshold) {
  ConfusionCounts total;
  for (const auto& v : videos) {
    const auto truth = occupancy(static_cast<int>(v.attention.size()), v.ground_truth, v.seconds_per_segment);
    total += confusion(v.attention, truth, threshold);
  }
  return total;
}

namespace {

std::string iou_key(double iou) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", iou);
  return buf;
}

}  // namespace

nlohmann::json report_to_json(const EvalReport& report, const std::vector<std::string>& class_names) {
  nlohmann::json j;
  j["ious"] = report.ious;
  j["map"] = report.map;
  j["average"] = report.average;
  nlohmann::json per_class = nlohmann::json::array();
  for (std::size_t i = 0; i < report.ap.size(); ++i) {
    nlohmann::json row = nlohmann::json::object();
    for (std::size_t c = 0; c < report.ap[i].size(); ++c) {
      const auto name = c < class_names.size() ? class_names[c] : std::to_string(c);
      row[name] = report.ap[i][c] ? nlohmann::json(*report.ap[i][c]) : nlohmann::json(nullptr);
    }
    per_class.push_back({{"iou", report.ious[i]}, {"ap", row}});
  }
  j["per_class"] = per_class;
  j["class_names"] = class_names;
  j["frame_fpr"] = report.frame_fpr ? nlohmann::json(*report.frame_fpr) : nlohmann::json(nullptr);
  j["frame_fnr"] = report.frame_fnr ? nlohmann::json(*report.frame_fnr) : nlohmann::json(nullptr);
  return j;
}

EvalReport report_from_json(const nlohmann::json& doc) {
  EvalReport r;
  try {
    r.ious = doc.at("ious").get<std::vector<double>>();
    r.map = doc.at("map").get<std::vector<double>>();
    r.average = doc.at("average").get<double>();
    const auto names = doc.at("class_names").get<std::vector<std::string>>();
    for (const auto& entry : doc.at("per_class")) {
      std::vector<std::optional<double>> row;
      for (const auto& name : names) {
        const auto& v = entry.at("ap").at(name);
        row.push_back(v.is_null() ? std::nullopt : std::optional<double>(v.get<double>()));
      }
      r.ap.push_back(std::move(row));
    }
    if (!doc.at("frame_fpr").is_null()) r.frame_fpr = doc.at("frame_fpr").get<double>();
    if (!doc.at("frame_fnr").is_null()) r.frame_fnr = doc.at("frame_fnr").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed report JSON: ") + e.what());
  }
  return r;
}

std::string format_table(const EvalReport& report, const std::vector<std::string>& class_names) {
  std::ostringstream out;
  char buf[64];
  out << "mAP@IoU(%)";
  for (double iou : report.ious) out << "  " << iou_key(iou);
  out << "  Avg\n";
  out << "          ";
  for (double m : report.map) {
    std::snprintf(buf, sizeof buf, "  %4.1f", 100.0 * m);
    out << buf;
  }
  std::snprintf(buf, sizeof buf, "  %4.1f\n", 100.0 * report.average);
  out << buf;
  for (std::size_t c = 0; c < class_names.size(); ++c) {
    out << class_names[c];
    for (const auto& row : report.ap) {
      if (c < row.size() && row[c]) {
        std::snprintf(buf, sizeof buf, "  %4.1f", 100.0 * *row[c]);
        out << buf;
      } else {
        out << "     -";
      }
    }
    out << "\n";
  }
  if (report.frame_fpr && report.frame_fnr) {
    std::snprintf(buf, sizeof buf, "frame FPR %.1f%%  FNR %.1f%%\n", 100.0 * *report.frame_fpr,
                  100.0 * *report.frame_fnr);
    out << buf;
  }
  return out.str();
}

std::string report_csv(const EvalReport& report) {
  std::ostringstream out;
  out << "iou,map\n";
  char buf[64];
  for (std::size_t i = 0; i < report.ious.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%s,%.17g\n", iou_key(report.ious[i]).c_str(), report.map[i]);
    out << buf;
  }
  std::snprintf(buf, sizeof buf, "avg,%.17g\n", report.average);
  out << buf;
  return out.str();
}

}  // namespace wtal::eval
