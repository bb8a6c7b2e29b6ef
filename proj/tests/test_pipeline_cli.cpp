#include "support.hpp"

#include "wtal/error.hpp"
#include "wtal/pipeline.hpp"
#include "wtal/plot.hpp"

#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

using namespace wtal;
namespace fs = std::filesystem;

namespace {

int count_of(const std::string& text, const std::string& needle) {
  int n = 0;
  for (auto pos = text.find(needle); pos != std::string::npos; pos = text.find(needle, pos + 1)) ++n;
  return n;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// Exit status of the wtal binary with stdout and stderr discarded.
int run_cli(const std::string& args) {
  const std::string cmd = std::string("\"") + WTAL_CLI_PATH + "\" " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("metrics CSV reader names a missing column") {
  const auto dir = testing::scratch_dir("csv");
  std::ofstream(dir / "m.csv") << "iteration,L_mil,L_total\n1,0.5,0.9\n2,0.4,0.8\n";
  const std::vector<std::string> ok{"iteration", "L_mil"};
  const auto cols = plot::read_csv(dir / "m.csv", ok);
  CHECK(cols.at("L_mil") == std::vector<double>{0.5, 0.4});
  const std::vector<std::string> missing{"iteration", "L_con"};
  try {
    plot::read_csv(dir / "m.csv", missing);
    FAIL("expected a missing-column error");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("L_con") != std::string::npos);
  }
  const auto svg = plot::loss_curves_svg(cols);
  CHECK(svg.rfind("<svg", 0) == 0);
  CHECK(count_of(svg, "<polyline") == 2);
}

TEST_CASE("timeline figure has one strip per video and row") {
  const std::vector<double> att{0.1, 0.9, 0.8, 0.2, 0.7};
  const auto fg = plot::foreground_intervals(att, 1.0);
  CHECK(fg == plot::Intervals{{1.0, 3.0}, {4.0, 5.0}});
  std::vector<plot::TimelineVideo> videos;
  for (int v = 0; v < 3; ++v) videos.push_back({"vid" + std::to_string(v), 5.0, {{{0, 2}}, fg, fg, {}}});
  const auto svg = plot::timeline_svg(videos, plot::kTimelineRows);
  CHECK(count_of(svg, "class=\"strip\"") == 12);
  CHECK(count_of(svg, "data-video=\"vid1\"") == 4);
}

TEST_CASE("ablation grids") {
  const auto base = train::TrainConfig::profile_defaults("synthetic");
  const auto comp = pipeline::ablation_cells("component", base);
  REQUIRE(comp.size() == 4);
  CHECK_FALSE(comp[0].config.use_vlc);
  CHECK(comp[0].config.head == "conv");
  CHECK(comp[1].config.use_vlc);
  CHECK(comp[1].config.beta == 0.0);
  CHECK(comp[2].config.beta == base.beta);
  CHECK(comp[3].config.head == "text");
  CHECK(train::config_hash(comp[3].config) == train::config_hash(base));

  const auto cons = pipeline::ablation_cells("consistency", base);
  REQUIRE(cons.size() == 4);
  CHECK(cons[3].variant == "mse");
  CHECK(train::config_hash(cons[3].config) == train::config_hash(base));
  CHECK(pipeline::ablation_cells("reconstructor", base).size() == 3);
  CHECK(pipeline::ablation_cells("prompt", base).size() == 5);
  CHECK(pipeline::ablation_cells("all", base).size() == 16);
  CHECK_THROWS_AS(pipeline::ablation_cells("optimizer", base), ValidationError);

  const std::vector<double> ious{0.3, 0.5};
  CHECK(pipeline::ablation_csv_header(ious).find("map@0.30") != std::string::npos);
}

TEST_CASE("command-line exit codes and empty splits") {
  const auto dir = testing::scratch_dir("cli");
  CHECK(run_cli("--help") == 0);
  for (const char* sub : {"prepare-synthetic", "train", "infer", "eval", "ablate", "plot"})
    CHECK(run_cli(std::string(sub) + " --help") == 0);
  CHECK(run_cli("frobnicate") == 2);
  CHECK(run_cli("train") == 2);

  const auto d = dir.string();
  REQUIRE(run_cli("prepare-synthetic --out \"" + d + "/data\" --classes 2 --train-per-class 2 --test-per-class 1 "
                  "--min-length 16 --max-length 20 --seed 4") == 0);
  const std::string train = "--manifest \"" + d + "/data/train.json\" --profile synthetic --iterations 2 "
                            "--set t_target=16 --set batch_size=2";
  CHECK(run_cli("train " + train + " --out \"" + d + "/bad\" --set no_such_key=1") == 2);
  CHECK(run_cli("train " + train + " --out \"" + d + "/bad\" --set consistency=cosine") == 2);
  CHECK(run_cli("train " + train + " --out \"" + d + "/bad\" --set divergence_limit=1e-9") == 3);
  REQUIRE(run_cli("train " + train + " --out \"" + d + "/run\"") == 0);
  CHECK(fs::exists(dir / "run" / "metrics.csv"));
  CHECK(fs::exists(dir / "run" / "checkpoint.bin"));

  std::ofstream(dir / "empty.json") << R"({"classes": ["HighJump", "LongJump"], "split": "test", "videos": []})";
  REQUIRE(run_cli("infer --checkpoint \"" + d + "/run/checkpoint.bin\" --manifest \"" + d + "/empty.json\" --out \"" +
                  d + "/det.json\"") == 0);
  const auto det = nlohmann::json::parse(slurp(dir / "det.json"));
  CHECK(det.at("results").is_object());
  CHECK(det.at("results").empty());
  CHECK(run_cli("eval --detections \"" + d + "/det.json\" --manifest \"" + d + "/empty.json\" --profile synthetic") ==
        0);

  REQUIRE(run_cli("infer --checkpoint \"" + d + "/run/checkpoint.bin\" --manifest \"" + d +
                  "/data/test.json\" --out \"" + d + "/det_test.json\" --dump-attention \"" + d + "/att.json\"") == 0);
  CHECK(run_cli("eval --detections \"" + d + "/det_test.json\" --manifest \"" + d + "/data/test.json\" --profile "
                "synthetic --attention \"" + d + "/att.json\" --csv \"" + d + "/report.csv\"") == 0);
  CHECK(slurp(dir / "report.csv").rfind("iou,map\n0.30,", 0) == 0);
  CHECK(run_cli("plot --metrics \"" + d + "/run/metrics.csv\" --out \"" + d + "/fig\"") == 0);
  CHECK(fs::exists(dir / "fig" / "loss_curves.svg"));
  CHECK(run_cli("plot --full \"" + d + "/att.json\" --out \"" + d + "/fig\"") == 2);

  std::ofstream(dir / "two_classes.json")
      << R"({"classes": ["HighJump", "LongJump", "Diving"], "split": "test", "videos": []})";
  CHECK(run_cli("infer --checkpoint \"" + d + "/run/checkpoint.bin\" --manifest \"" + d +
                "/two_classes.json\" --out \"" + d + "/x.json\"") == 2);
}
