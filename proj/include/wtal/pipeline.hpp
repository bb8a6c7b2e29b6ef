#pragma once

// End-to-end glue: train from a manifest, localise a split, score it, and run
// ablation grids.

#include "wtal/evaluation.hpp"
#include "wtal/joint_training.hpp"
#include "wtal/localization.hpp"

#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace wtal::pipeline {

struct TrainOutcome {
  std::unique_ptr<train::Framework> framework;
  std::vector<train::MetricsRow> metrics;
};

// Trains on every entry of `manifest`. With a non-empty out_dir writes
// metrics.csv and checkpoint.bin there (also on divergence, before rethrowing).
TrainOutcome train_model(const train::TrainConfig& config, const data::DatasetManifest& manifest,
                         const std::filesystem::path& out_dir = {},
                         const std::function<void(const train::MetricsRow&)>& on_step = {});
TrainOutcome train_model(const train::TrainConfig& config, const data::DatasetManifest& manifest,
                         std::vector<train::TrainingVideo> videos, const std::filesystem::path& out_dir = {},
                         const std::function<void(const train::MetricsRow&)>& on_step = {});

struct SplitPrediction {
  loc::DetectionMap detections;
  std::vector<eval::VideoAttention> attention;  // manifest order
};

SplitPrediction predict(const train::Framework& framework, const data::DatasetManifest& manifest,
                        const loc::InferenceConfig& config = {});
SplitPrediction predict(const train::Framework& framework, const data::DatasetManifest& manifest,
                        std::span<const train::TrainingVideo> videos, const loc::InferenceConfig& config = {});

// mAP over `ious`; frame FPR/FNR when attention is given.
eval::EvalReport evaluate(const loc::DetectionMap& detections, const data::DatasetManifest& manifest,
                          std::span<const double> ious, std::span<const eval::VideoAttention> attention = {});

struct AblationCell {
  std::string grid;
  std::string variant;
  train::TrainConfig config;
};

// Grids: "component", "consistency", "reconstructor", "prompt", or "all".
std::vector<AblationCell> ablation_cells(const std::string& grid, const train::TrainConfig& base);

struct AblationResult {
  AblationCell cell;
  std::uint64_t seed = 0;
  eval::EvalReport report;
};

std::string ablation_csv_header(std::span<const double> ious);
std::string ablation_csv_row(const AblationResult& result);

// Attention dump: per video, segment length, ground truth and att_m.
nlohmann::json attention_to_json(const data::DatasetManifest& manifest, std::span<const eval::VideoAttention> att);
std::vector<std::pair<std::string, eval::VideoAttention>> attention_from_json(const nlohmann::json& doc);

}  // namespace wtal::pipeline
