#include "wtal/localization.hpp"

#include "wtal/error.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace wtal::loc {

std::vector<double> InferenceConfig::default_thresholds() {
  std::vector<double> t;
  for (int i = 0; i <= 16; ++i) t.push_back(0.10 + 0.05 * i);
  return t;
}

void InferenceConfig::validate() const {
  if (!(class_threshold > 0.0 && class_threshold <= 1.0))
    throw ValidationError("class threshold must be in (0, 1]");
  if (attention_thresholds.empty()) throw ValidationError("attention threshold set is empty");
  for (double t : attention_thresholds)
    if (!(t > 0.0 && t < 1.0)) throw ValidationError("attention thresholds must lie in (0, 1)");
  if (!(inflation >= 0.0)) throw ValidationError("inflation ratio must be >= 0");
  if (!(nms_sigma > 0.0)) throw ValidationError("soft-NMS sigma must be positive");
  if (min_length < 1) throw ValidationError("minimum proposal length must be >= 1");
}

std::vector<int> select_classes(const Eigen::VectorXd& p_bar, double threshold) {
  const int C = static_cast<int>(p_bar.size()) - 1;
  if (C < 1) throw ValidationError("select_classes: need at least one action class");
  std::vector<int> out;
  for (int c = 0; c < C; ++c)
    if (p_bar[c] > threshold) out.push_back(c);
  if (out.empty()) {
    Eigen::Index best = 0;
    p_bar.head(C).maxCoeff(&best);
    out.push_back(static_cast<int>(best));
  }
  return out;
}

std::vector<Segment> generate_proposals(const Eigen::VectorXd& attention, std::span<const double> thresholds,
                                        int min_length) {
  std::set<Segment> found;
  const auto T = static_cast<int>(attention.size());
  for (double theta : thresholds) {
    int t = 0;
    while (t < T) {
      if (attention[t] < theta) {
        ++t;
        continue;
      }
      int e = t;
      while (e + 1 < T && attention[e + 1] >= theta) ++e;
      if (e - t + 1 >= min_length) found.insert({t, e});
      t = e + 1;
    }
  }
  return {found.begin(), found.end()};
}

double outer_inner_score(const Eigen::VectorXd& column, Segment seg, double inflation) {
  const auto T = static_cast<int>(column.size());
  if (seg.start < 0 || seg.end < seg.start || seg.end >= T) throw ValidationError("outer_inner_score: bad segment");
  const double inner = column.segment(seg.start, seg.length()).mean();
  const int flank = std::max(1, static_cast<int>(std::lround(inflation * seg.length())));
  const int lo = std::max(0, seg.start - flank);
  const int hi = std::min(T - 1, seg.end + flank);
  double outer_sum = 0.0;
  int outer_count = 0;
  for (int t = lo; t < seg.start; ++t, ++outer_count) outer_sum += column[t];
  for (int t = seg.end + 1; t <= hi; ++t, ++outer_count) outer_sum += column[t];
  const double outer = outer_count > 0 ? outer_sum / outer_count : 0.0;
  return inner - outer;
}

double interval_iou(double a_start, double a_end, double b_start, double b_end) {
  const double inter = std::max(0.0, std::min(a_end, b_end) - std::max(a_start, b_start));
  const double uni = (a_end - a_start) + (b_end - b_start) - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

std::vector<Proposal> soft_nms(std::vector<Proposal> proposals, double sigma, double min_confidence) {
  std::vector<Proposal> kept;
  while (!proposals.empty()) {
    auto best = std::max_element(proposals.begin(), proposals.end(),
                                 [](const Proposal& a, const Proposal& b) { return a.confidence < b.confidence; });
    Proposal top = *best;
    proposals.erase(best);
    for (auto& p : proposals) {
      const double iou = interval_iou(top.start, top.end, p.start, p.end);
      p.confidence *= std::exp(-(iou * iou) / sigma);
    }
    kept.push_back(top);
  }
  std::erase_if(kept, [min_confidence](const Proposal& p) { return p.confidence < min_confidence; });
  return kept;
}

std::pair<double, double> to_seconds(Segment segment, double seconds_per_segment) {
  return {segment.start * seconds_per_segment, (segment.end + 1) * seconds_per_segment};
}

std::vector<Proposal> localize(const Eigen::VectorXd& attention, const Eigen::MatrixXd& suppressed,
                               const Eigen::VectorXd& p_bar, const InferenceConfig& config,
                               double seconds_per_segment) {
  if (suppressed.rows() != attention.size() || suppressed.cols() != p_bar.size())
    throw ValidationError("localize: shape mismatch between attention, S_bar and p_bar");
  const auto segments = generate_proposals(attention, config.attention_thresholds, config.min_length);
  std::vector<Proposal> out;
  for (int c : select_classes(p_bar, config.class_threshold)) {
    std::vector<Proposal> candidates;
    const Eigen::VectorXd column = suppressed.col(c);
    for (const auto& seg : segments) {
      auto [s, e] = to_seconds(seg, seconds_per_segment);
      candidates.push_back({c, s, e, outer_inner_score(column, seg, config.inflation)});
    }
    auto kept = soft_nms(std::move(candidates), config.nms_sigma, config.min_confidence);
    out.insert(out.end(), kept.begin(), kept.end());
  }
  return out;
}

nlohmann::json detections_to_json(const DetectionMap& detections, const std::vector<std::string>& class_names) {
  nlohmann::json results = nlohmann::json::object();
  for (const auto& [video, props] : detections) {
    nlohmann::json list = nlohmann::json::array();
    for (const auto& p : props) {
      list.push_back({{"label", class_names.at(static_cast<std::size_t>(p.class_id))},
                      {"score", p.confidence},
                      {"segment", {p.start, p.end}}});
    }
    results[video] = std::move(list);
  }
  return {{"results", results}};
}

DetectionMap detections_from_json(const nlohmann::json& doc, const std::vector<std::string>& class_names) {
  DetectionMap out;
  try {
    for (const auto& [video, list] : doc.at("results").items()) {
      auto& props = out[video];
      for (const auto& d : list) {
        const auto label = d.at("label").get<std::string>();
        auto it = std::find(class_names.begin(), class_names.end(), label);
        if (it == class_names.end()) throw ValidationError("detection for video '" + video + "' has unknown label '" + label + "'");
        const auto& seg = d.at("segment");
        props.push_back({static_cast<int>(it - class_names.begin()), seg.at(0).get<double>(), seg.at(1).get<double>(),
                         d.at("score").get<double>()});
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed detection JSON: ") + e.what());
  }
  return out;
}

}  // namespace wtal::loc
