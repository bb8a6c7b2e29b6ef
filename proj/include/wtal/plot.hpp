#pragma once

// Offline SVG figures: loss curves from the metrics CSV and per-video
// timeline strips comparing ground truth with predicted foreground.

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace wtal::plot {

using Columns = std::map<std::string, std::vector<double>>;

// Numeric CSV with a header row. Every name in `required` must be present;
// otherwise ValidationError naming the missing column.
Columns read_csv(const std::filesystem::path& path, std::span<const std::string> required);

// One polyline per loss column against "iteration".
std::string loss_curves_svg(const Columns& metrics);

using Intervals = std::vector<std::pair<double, double>>;

struct TimelineVideo {
  std::string id;
  double duration = 0.0;  // seconds
  // rows[0] is ground truth, followed by one row per compared model.
  std::vector<Intervals> rows;
};

inline const std::vector<std::string> kTimelineRows{"ground truth", "baseline", "TSM", "full"};

// Maximal runs of attention >= threshold as second intervals.
Intervals foreground_intervals(std::span<const double> attention, double seconds_per_segment,
                               double threshold = 0.5);

// One <g class="strip"> per (video, row).
std::string timeline_svg(std::span<const TimelineVideo> videos, const std::vector<std::string>& row_labels);

}  // namespace wtal::plot
