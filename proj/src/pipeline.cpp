#include "wtal/pipeline.hpp"

#include "wtal/error.hpp"

#include <cstdio>
#include <fstream>

namespace wtal::pipeline {

TrainOutcome train_model(const train::TrainConfig& config, const data::DatasetManifest& manifest,
                         const std::filesystem::path& out_dir,
                         const std::function<void(const train::MetricsRow&)>& on_step) {
  return train_model(config, manifest, train::load_training_videos(manifest), out_dir, on_step);
}

TrainOutcome train_model(const train::TrainConfig& config, const data::DatasetManifest& manifest,
                         std::vector<train::TrainingVideo> videos, const std::filesystem::path& out_dir,
                         const std::function<void(const train::MetricsRow&)>& on_step) {
  if (manifest.entries.empty()) throw ValidationError("training split is empty");
  TrainOutcome outcome;
  outcome.framework = std::make_unique<train::Framework>(config, manifest.class_names);
  train::Trainer trainer(*outcome.framework, std::move(videos));

  std::ofstream csv;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    csv.open(out_dir / "metrics.csv", std::ios::trunc);
    if (!csv) throw ValidationError("cannot write " + (out_dir / "metrics.csv").string());
    csv << train::kMetricsHeader << "\n";
  }
  try {
    outcome.metrics = trainer.run([&](const train::MetricsRow& row) {
      if (csv.is_open()) csv << train::metrics_csv_line(row) << "\n";
      if (on_step) on_step(row);
    });
  } catch (const train::DivergenceError&) {
    if (!out_dir.empty()) train::save_checkpoint(out_dir / "checkpoint.bin", *outcome.framework, &trainer);
    throw;
  }
  if (!out_dir.empty()) train::save_checkpoint(out_dir / "checkpoint.bin", *outcome.framework, &trainer);
  return outcome;
}

SplitPrediction predict(const train::Framework& framework, const data::DatasetManifest& manifest,
                        const loc::InferenceConfig& config) {
  std::vector<train::TrainingVideo> videos;
  videos.reserve(manifest.entries.size());
  for (const auto& e : manifest.entries)
    videos.push_back({e.id, data::fuse_modalities(data::load_features(e)), e.label});
  return predict(framework, manifest, videos, config);
}

SplitPrediction predict(const train::Framework& framework, const data::DatasetManifest& manifest,
                        std::span<const train::TrainingVideo> videos, const loc::InferenceConfig& config) {
  config.validate();
  if (videos.size() != manifest.entries.size()) throw ValidationError("predict: feature count differs from manifest");
  if (manifest.num_classes() != framework.num_classes())
    throw ValidationError("manifest has " + std::to_string(manifest.num_classes()) + " classes, model has " +
                          std::to_string(framework.num_classes()));
  SplitPrediction out;
  for (std::size_t i = 0; i < videos.size(); ++i) {
    const auto& entry = manifest.entries[i];
    const auto r = framework.infer(videos[i].features);
    const double dt = entry.seconds_per_segment();
    out.detections[entry.id] = loc::localize(r.attention, r.suppressed, r.probs_suppressed, config, dt);
    out.attention.push_back({r.attention, entry.ground_truth, dt});
  }
  return out;
}

eval::EvalReport evaluate(const loc::DetectionMap& detections, const data::DatasetManifest& manifest,
                          std::span<const double> ious, std::span<const eval::VideoAttention> attention) {
  const auto dets = eval::flatten(detections);
  const auto gts = eval::ground_truth_of(manifest);
  auto report = eval::map_at_ious(dets, gts, manifest.num_classes(), ious);
  if (!attention.empty()) {
    const auto counts = eval::frame_metrics(attention);
    report.frame_fpr = counts.fpr();
    report.frame_fnr = counts.fnr();
  }
  return report;
}

std::vector<AblationCell> ablation_cells(const std::string& grid, const train::TrainConfig& base) {
  std::vector<AblationCell> cells;
  const bool all = grid == "all";
  bool known = all;
  if (all || grid == "component") {
    known = true;
    auto baseline = base;
    baseline.head = "conv";
    baseline.use_vlc = false;
    auto with_vlc = base;
    with_vlc.head = "conv";
    with_vlc.beta = 0.0;
    auto with_lc = base;
    with_lc.head = "conv";
    cells.push_back({"component", "baseline", baseline});
    cells.push_back({"component", "baseline+VLC", with_vlc});
    cells.push_back({"component", "baseline+VLC+Lc", with_lc});
    cells.push_back({"component", "TSM+VLC+Lc", base});
  }
  if (all || grid == "consistency") {
    known = true;
    for (const char* type : {"share", "kl", "mae", "mse"}) {
      auto c = base;
      c.consistency = type;
      cells.push_back({"consistency", type, c});
    }
  }
  if (all || grid == "reconstructor") {
    known = true;
    for (const char* r : {"transformer", "gru", "lstm"}) {
      auto c = base;
      c.reconstructor = r;
      cells.push_back({"reconstructor", r, c});
    }
  }
  if (all || grid == "prompt") {
    known = true;
    for (const char* p : {"handcraft", "learnable"}) {
      auto c = base;
      c.tsm_prompt = p;
      cells.push_back({"prompt", std::string("tsm:") + p, c});
    }
    for (const char* t : {"a [CLS]", "a video of action [CLS]", "a video of the [CLS]"}) {
      auto c = base;
      c.vlc_template = t;
      cells.push_back({"prompt", std::string("vlc:") + t, c});
    }
  }
  if (!known) throw ValidationError("unknown ablation grid '" + grid + "' (component, consistency, reconstructor, prompt, all)");
  return cells;
}

std::string ablation_csv_header(std::span<const double> ious) {
  std::string h = "grid,variant,seed";
  char buf[32];
  for (double iou : ious) {
    std::snprintf(buf, sizeof buf, ",map@%.2f", iou);
    h += buf;
  }
  return h + ",avg,frame_fpr,frame_fnr";
}

std::string ablation_csv_row(const AblationResult& r) {
  std::string row = r.cell.grid + "," + r.cell.variant + "," + std::to_string(r.seed);
  char buf[48];
  for (double m : r.report.map) {
    std::snprintf(buf, sizeof buf, ",%.6f", m);
    row += buf;
  }
  std::snprintf(buf, sizeof buf, ",%.6f,%.6f,%.6f", r.report.average, r.report.frame_fpr.value_or(0.0),
                r.report.frame_fnr.value_or(0.0));
  return row + buf;
}

nlohmann::json attention_to_json(const data::DatasetManifest& manifest, std::span<const eval::VideoAttention> att) {
  if (att.size() != manifest.entries.size()) throw ValidationError("attention dump: size differs from manifest");
  nlohmann::json videos = nlohmann::json::array();
  for (std::size_t i = 0; i < att.size(); ++i) {
    nlohmann::json gt = nlohmann::json::array();
    for (const auto& g : att[i].ground_truth) gt.push_back({{"class", g.class_id}, {"start", g.start}, {"end", g.end}});
    std::vector<double> values(att[i].attention.data(), att[i].attention.data() + att[i].attention.size());
    videos.push_back({{"id", manifest.entries[i].id},
                      {"seconds_per_segment", att[i].seconds_per_segment},
                      {"gt", gt},
                      {"attention", values}});
  }
  return {{"videos", videos}};
}

std::vector<std::pair<std::string, eval::VideoAttention>> attention_from_json(const nlohmann::json& doc) {
  std::vector<std::pair<std::string, eval::VideoAttention>> out;
  try {
    for (const auto& v : doc.at("videos")) {
      eval::VideoAttention a;
      a.seconds_per_segment = v.at("seconds_per_segment").get<double>();
      const auto values = v.at("attention").get<std::vector<double>>();
      a.attention = Eigen::Map<const Eigen::VectorXd>(values.data(), static_cast<Eigen::Index>(values.size()));
      for (const auto& g : v.at("gt"))
        a.ground_truth.push_back({g.at("class").get<int>(), g.at("start").get<double>(), g.at("end").get<double>()});
      out.emplace_back(v.at("id").get<std::string>(), std::move(a));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed attention dump: ") + e.what());
  }
  return out;
}

}  // namespace wtal::pipeline
