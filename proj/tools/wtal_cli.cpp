// wtal: synthesize data, train, infer, evaluate, ablate and plot.

#include "wtal/dataset_io.hpp"
#include "wtal/error.hpp"
#include "wtal/evaluation.hpp"
#include "wtal/joint_training.hpp"
#include "wtal/localization.hpp"
#include "wtal/pipeline.hpp"
#include "wtal/plot.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <limits>
#include <optional>
#include <sstream>

namespace fs = std::filesystem;
using namespace wtal;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitNumerical = 3;

// Flags shared by every command that builds a TrainConfig.
struct ConfigFlags {
  std::string config_path;
  std::string profile;
  std::optional<std::uint64_t> seed;
  std::optional<double> alpha, beta, lambda, gamma1, gamma2;
  std::optional<int> iterations;
  std::vector<std::string> sets;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "key=value config file")->check(CLI::ExistingFile);
    cmd->add_option("--profile", profile, "thumos, anet or synthetic")
        ->check(CLI::IsMember({"thumos", "anet", "synthetic"}));
    cmd->add_option("--seed", seed, "random seed");
    cmd->add_option("--alpha", alpha, "weight of L_rec");
    cmd->add_option("--beta", beta, "weight of L_c");
    cmd->add_option("--lambda", lambda, "weight of L_con");
    cmd->add_option("--gamma1", gamma1, "margin against the all-ones attention");
    cmd->add_option("--gamma2", gamma2, "margin against the inverted attention");
    cmd->add_option("--iterations", iterations, "training iterations");
    cmd->add_option("--set", sets, "extra key=value override (repeatable)");
  }

  train::TrainConfig build() const {
    train::TrainConfig cfg = train::TrainConfig::profile_defaults(profile.empty() ? "thumos" : profile);
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      std::string text;
      // An explicit --profile wins over a profile key in the file.
      for (std::string line; std::getline(in, line);) {
        std::istringstream ls(line.substr(0, line.find('=')));
        std::string key;
        ls >> key;
        const bool is_profile = key == "profile" && line.find('=') != std::string::npos;
        if (!(is_profile && !profile.empty())) text += line + "\n";
      }
      cfg = train::parse_config(text, cfg);
    }
    for (const auto& kv : sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ValidationError("--set expects key=value, got '" + kv + "'");
      cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (seed) cfg.seed = *seed;
    if (alpha) cfg.alpha = *alpha;
    if (beta) cfg.beta = *beta;
    if (lambda) cfg.lambda = *lambda;
    if (gamma1) cfg.gamma1 = *gamma1;
    if (gamma2) cfg.gamma2 = *gamma2;
    if (iterations) cfg.iterations = *iterations;
    cfg.validate();
    return cfg;
  }
};

struct InferenceFlags {
  loc::InferenceConfig config;

  void attach(CLI::App* cmd) {
    cmd->add_option("--class-threshold", config.class_threshold, "video-level class score threshold");
    cmd->add_option("--inflation", config.inflation, "outer-inner flank ratio");
    cmd->add_option("--nms-sigma", config.nms_sigma, "soft-NMS Gaussian sigma");
    cmd->add_option("--min-length", config.min_length, "minimum proposal length in segments");
  }
};

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ValidationError("cannot write " + path.string());
  out << text;
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Weakly-supervised temporal action localisation with text-segment mining and language completion"};
  app.require_subcommand(1);

  // prepare-synthetic
  auto* prep = app.add_subcommand("prepare-synthetic", "Generate a synthetic feature dataset");
  data::SyntheticSpec spec;
  std::uint64_t prep_seed = 0;
  std::string prep_out;
  std::string snr_text = "3";
  std::vector<std::string> prep_classes;
  prep->add_option("--out", prep_out, "output directory")->required();
  prep->add_option("--seed", prep_seed, "random seed");
  prep->add_option("--classes", spec.num_classes, "number of classes");
  prep->add_option("--class-names", prep_classes, "explicit class names (overrides --classes)");
  prep->add_option("--train-per-class", spec.train_videos_per_class, "training videos per class");
  prep->add_option("--test-per-class", spec.test_videos_per_class, "test videos per class");
  prep->add_option("--min-length", spec.min_length, "shortest video in segments");
  prep->add_option("--max-length", spec.max_length, "longest video in segments");
  prep->add_option("--snr", snr_text, "signal-to-noise ratio, or inf");
  prep->add_option("--shared-fraction", spec.shared_fraction, "head fraction of instances showing a shared signature");

  // train
  auto* tr = app.add_subcommand("train", "Train a model and write metrics.csv and checkpoint.bin");
  ConfigFlags train_flags;
  std::string train_manifest, train_out;
  train_flags.attach(tr);
  tr->add_option("--manifest", train_manifest, "training manifest")->required()->check(CLI::ExistingFile);
  tr->add_option("--out", train_out, "output directory")->required();

  // infer
  auto* inf = app.add_subcommand("infer", "Localise actions and write detection JSON");
  std::string inf_ckpt, inf_manifest, inf_out, inf_dump;
  InferenceFlags inf_flags;
  inf_flags.attach(inf);
  inf->add_option("--checkpoint", inf_ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
  inf->add_option("--manifest", inf_manifest, "manifest of the split to localise")->required()->check(CLI::ExistingFile);
  inf->add_option("--out", inf_out, "detection JSON path")->required();
  inf->add_option("--dump-attention", inf_dump, "also write per-video attention JSON");

  // eval
  auto* ev = app.add_subcommand("eval", "Score detections against ground truth");
  std::string ev_det, ev_manifest, ev_profile = "thumos", ev_out, ev_csv, ev_att;
  ev->add_option("--detections", ev_det, "detection JSON")->required()->check(CLI::ExistingFile);
  ev->add_option("--manifest", ev_manifest, "manifest with ground truth")->required()->check(CLI::ExistingFile);
  ev->add_option("--profile", ev_profile, "IoU list: thumos, anet or synthetic")
      ->check(CLI::IsMember({"thumos", "anet", "synthetic"}));
  ev->add_option("--attention", ev_att, "attention dump for frame FPR/FNR")->check(CLI::ExistingFile);
  ev->add_option("--out", ev_out, "report JSON path");
  ev->add_option("--csv", ev_csv, "report CSV path");

  // ablate
  auto* ab = app.add_subcommand("ablate", "Train and score every cell of an ablation grid");
  ConfigFlags ab_flags;
  std::string ab_grid = "component", ab_train, ab_test, ab_out;
  std::vector<std::uint64_t> ab_seeds{0};
  InferenceFlags ab_inf;
  ab_flags.attach(ab);
  ab_inf.attach(ab);
  ab->add_option("--grid", ab_grid, "component, consistency, reconstructor, prompt or all");
  ab->add_option("--train", ab_train, "training manifest")->required()->check(CLI::ExistingFile);
  ab->add_option("--test", ab_test, "evaluation manifest")->required()->check(CLI::ExistingFile);
  ab->add_option("--seeds", ab_seeds, "seeds to run per cell");
  ab->add_option("--out", ab_out, "CSV path")->required();

  // plot
  auto* pl = app.add_subcommand("plot", "Write loss curves and timeline strips as SVG");
  std::string pl_metrics, pl_gt_dump, pl_baseline, pl_tsm, pl_full, pl_out;
  pl->add_option("--metrics", pl_metrics, "metrics CSV")->check(CLI::ExistingFile);
  pl->add_option("--baseline", pl_baseline, "attention dump of the baseline model")->check(CLI::ExistingFile);
  pl->add_option("--tsm", pl_tsm, "attention dump of the TSM-only model")->check(CLI::ExistingFile);
  pl->add_option("--full", pl_full, "attention dump of the full model")->check(CLI::ExistingFile);
  pl->add_option("--out", pl_out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitValidation;
  }

  try {
    if (*prep) {
      if (snr_text == "inf") {
        spec.snr = std::numeric_limits<double>::infinity();
      } else {
        try {
          spec.snr = std::stod(snr_text);
        } catch (const std::exception&) {
          throw ValidationError("--snr expects a number or inf, got '" + snr_text + "'");
        }
      }
      if (prep->count("--class-names")) {
        spec.class_names = prep_classes;
        spec.num_classes = static_cast<int>(prep_classes.size());
      }
      const auto ds = data::generate_synthetic(spec, prep_seed, prep_out);
      std::cout << ds.train_manifest.string() << "\n" << ds.test_manifest.string() << "\n";
      return 0;
    }

    if (*tr) {
      const auto cfg = train_flags.build();
      const auto manifest = data::load_manifest(train_manifest);
      write_text(fs::path(train_out) / "config.txt", train::serialize_config(cfg));
      const auto outcome = pipeline::train_model(cfg, manifest, train_out);
      const auto& last = outcome.metrics.back();
      std::printf("trained %d iterations: L_mil %.4f  L_total %.4f\n", last.iteration, last.mil, last.total);
      std::cout << (fs::path(train_out) / "checkpoint.bin").string() << "\n";
      return 0;
    }

    if (*inf) {
      const auto manifest = data::load_manifest(inf_manifest);
      const auto ck = train::load_checkpoint(inf_ckpt, &manifest.class_names);
      const auto pred = pipeline::predict(*ck.framework, manifest, inf_flags.config);
      write_text(inf_out, loc::detections_to_json(pred.detections, manifest.class_names).dump(2) + "\n");
      if (!inf_dump.empty()) write_text(inf_dump, pipeline::attention_to_json(manifest, pred.attention).dump() + "\n");
      std::cout << inf_out << "\n";
      return 0;
    }

    if (*ev) {
      const auto manifest = data::load_manifest(ev_manifest);
      const auto detections = loc::detections_from_json(read_json(ev_det), manifest.class_names);
      std::vector<eval::VideoAttention> attention;
      if (!ev_att.empty())
        for (auto& [id, a] : pipeline::attention_from_json(read_json(ev_att))) attention.push_back(std::move(a));
      const auto ious = eval::iou_thresholds(ev_profile);
      const auto report = pipeline::evaluate(detections, manifest, ious, attention);
      std::cout << eval::format_table(report, manifest.class_names);
      const auto json = eval::report_to_json(report, manifest.class_names);
      if (!ev_out.empty()) write_text(ev_out, json.dump(2) + "\n");
      if (!ev_csv.empty()) write_text(ev_csv, eval::report_csv(report));
      std::cout << json.dump() << "\n";
      return 0;
    }

    if (*ab) {
      const auto base = ab_flags.build();
      const auto train_m = data::load_manifest(ab_train);
      const auto test_m = data::load_manifest(ab_test);
      const auto train_videos = train::load_training_videos(train_m);
      const auto test_videos = train::load_training_videos(test_m);
      const auto ious = eval::iou_thresholds(base.profile);
      std::string csv = pipeline::ablation_csv_header(ious) + "\n";
      for (const auto& cell : pipeline::ablation_cells(ab_grid, base)) {
        for (auto seed : ab_seeds) {
          auto cfg = cell.config;
          cfg.seed = seed;
          const auto outcome = pipeline::train_model(cfg, train_m, train_videos);
          const auto pred = pipeline::predict(*outcome.framework, test_m, test_videos, ab_inf.config);
          pipeline::AblationResult result{cell, seed, pipeline::evaluate(pred.detections, test_m, ious, pred.attention)};
          const auto row = pipeline::ablation_csv_row(result);
          std::cout << row << std::endl;
          csv += row + "\n";
        }
      }
      write_text(ab_out, csv);
      return 0;
    }

    if (*pl) {
      if (pl_metrics.empty() && pl_full.empty())
        throw ValidationError("plot needs --metrics and/or the attention dumps");
      if (!pl_metrics.empty()) {
        const std::vector<std::string> required{"iteration", "L_mil", "L_rec", "L_c", "L_con", "L_total"};
        const auto cols = plot::read_csv(pl_metrics, required);
        write_text(fs::path(pl_out) / "loss_curves.svg", plot::loss_curves_svg(cols));
        std::cout << (fs::path(pl_out) / "loss_curves.svg").string() << "\n";
      }
      if (!pl_full.empty() || !pl_tsm.empty() || !pl_baseline.empty()) {
        if (pl_full.empty() || pl_tsm.empty() || pl_baseline.empty())
          throw ValidationError("timeline strips need --baseline, --tsm and --full attention dumps");
        const auto base = pipeline::attention_from_json(read_json(pl_baseline));
        const auto tsm_only = pipeline::attention_from_json(read_json(pl_tsm));
        const auto full = pipeline::attention_from_json(read_json(pl_full));
        if (base.size() != full.size() || tsm_only.size() != full.size())
          throw ValidationError("attention dumps cover different videos");
        std::vector<plot::TimelineVideo> videos;
        for (std::size_t i = 0; i < full.size(); ++i) {
          const auto& [id, a] = full[i];
          if (base[i].first != id || tsm_only[i].first != id)
            throw ValidationError("attention dumps disagree on video order at '" + id + "'");
          plot::TimelineVideo v;
          v.id = id;
          v.duration = static_cast<double>(a.attention.size()) * a.seconds_per_segment;
          plot::Intervals gt;
          for (const auto& g : a.ground_truth) gt.emplace_back(g.start, g.end);
          auto fg = [](const eval::VideoAttention& x) {
            return plot::foreground_intervals({x.attention.data(), static_cast<std::size_t>(x.attention.size())},
                                              x.seconds_per_segment);
          };
          v.rows = {gt, fg(base[i].second), fg(tsm_only[i].second), fg(a)};
          videos.push_back(std::move(v));
        }
        write_text(fs::path(pl_out) / "timelines.svg", plot::timeline_svg(videos, plot::kTimelineRows));
        std::cout << (fs::path(pl_out) / "timelines.svg").string() << "\n";
      }
      return 0;
    }
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  }
  return 0;
}
