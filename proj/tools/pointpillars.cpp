// pointpillars: command-line front end.
//
// Exit codes: 0 success, 1 unexpected error, 2 configuration error,
// 3 data error (missing/corrupt input, weight shape mismatch),
// 4 invariant failure.

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "pointpillars/commands.hpp"
#include "pointpillars/selfcheck.hpp"

namespace pp = pointpillars;

namespace {

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> jobs;
  std::string data_root, weights, out, cls, frame;
  std::optional<double> resolution;
  std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "key = value configuration file");
  cmd->add_option("--seed", f.seed, "seed for every random draw");
  cmd->add_option("--jobs", f.jobs, "frames processed in parallel");
  cmd->add_option("--data-root", f.data_root, "KITTI layout root (velodyne/, calib/, label_2/); synthetic frames if unset");
  cmd->add_option("--weights", f.weights, "weights container");
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_option("--resolution", f.resolution, "pillar size in meters");
  cmd->add_option("--class", f.cls, "car or pedcyc")->check(CLI::IsMember({"car", "pedcyc"}));
  cmd->add_option("--frame", f.frame, "process only this frame id");
  cmd->add_option("--set", f.sets, "extra key=value override (repeatable)");
}

pp::RunConfig make_config(const CommonFlags& f) {
  pp::Settings file;
  if (!f.config.empty()) file = pp::parse_settings_file(f.config);
  pp::Settings over;
  if (!f.cls.empty()) over.emplace_back("class", f.cls);
  for (const auto& s : f.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw pp::ConfigError("--set expects key=value, got '" + s + "'");
    over.emplace_back(pp::config_detail::trim(s.substr(0, eq)), pp::config_detail::trim(s.substr(eq + 1)));
  }
  if (f.seed) over.emplace_back("seed", std::to_string(*f.seed));
  if (f.jobs) over.emplace_back("jobs", std::to_string(*f.jobs));
  if (!f.data_root.empty()) over.emplace_back("data_root", f.data_root);
  if (!f.weights.empty()) over.emplace_back("weights", f.weights);
  if (!f.out.empty()) over.emplace_back("out", f.out);
  if (!f.frame.empty()) over.emplace_back("frame", f.frame);
  if (f.resolution) over.emplace_back("grid.resolution", pp::fmt("%.17g", *f.resolution));
  return pp::build_config(file, over);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"PointPillars pipeline: pillar encoding, inference, losses, augmentation and evaluation"};
  app.require_subcommand(1);

  CommonFlags flags;
  auto* pillarize = app.add_subcommand("pillarize", "write pillar tensors and sparsity stats per frame");
  auto* init = app.add_subcommand("init-weights", "write freshly initialized weights");
  auto* infer = app.add_subcommand("infer", "detect objects and write KITTI result files");
  auto* loss = app.add_subcommand("loss", "loss terms and gradient check on a labeled frame");
  auto* eval = app.add_subcommand("eval", "BEV and 3D average precision of result files");
  auto* augment = app.add_subcommand("augment", "apply the training augmentation to a frame");
  auto* bench = app.add_subcommand("bench", "stage timings across pillar resolutions");
  auto* selfcheck = app.add_subcommand("selfcheck", "run the invariant suite");
  auto* fixture = app.add_subcommand("fixture", "write synthetic frames in the KITTI layout");
  for (auto* c : {pillarize, init, infer, loss, eval, augment, bench, selfcheck, fixture}) add_common(c, flags);

  bool zero = false;
  init->add_flag("--zero", zero, "all weights zero (biases keep their priors)");
  std::string results;
  eval->add_option("--results", results, "directory of result files");
  std::string loss_mode = "network";
  loss->add_option("--predictions", loss_mode, "network or targets")->check(CLI::IsMember({"network", "targets"}));
  int frames = 0;
  fixture->add_option("--frames", frames, "number of frames");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : pp::kExitConfig;
  }

  try {
    if (!results.empty()) flags.sets.push_back("results=" + results);
    if (frames > 0) flags.sets.push_back("synthetic.frames=" + std::to_string(frames));
    const pp::RunConfig cfg = make_config(flags);
    if (pillarize->parsed()) return pp::cmd_pillarize(cfg);
    if (init->parsed()) return pp::cmd_init_weights(cfg, zero);
    if (infer->parsed()) return pp::cmd_infer(cfg);
    if (loss->parsed())
      return pp::cmd_loss(cfg, loss_mode == "targets" ? pp::LossPredictions::targets : pp::LossPredictions::network);
    if (eval->parsed()) return pp::cmd_eval(cfg);
    if (augment->parsed()) return pp::cmd_augment(cfg);
    if (bench->parsed()) return pp::cmd_bench(cfg);
    if (selfcheck->parsed()) return pp::cmd_selfcheck(cfg);
    if (fixture->parsed()) {
      if (!cfg.data_root.empty()) throw pp::ConfigError("fixture writes synthetic frames; drop --data-root");
      return pp::cmd_fixture(cfg);
    }
  } catch (const pp::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return pp::kExitConfig;
  } catch (const pp::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return pp::kExitData;
  } catch (const pp::ShapeError& e) {
    std::cerr << "shape error: " << e.what() << "\n";
    return pp::kExitData;
  } catch (const pp::Error& e) {
    std::cerr << "invariant failure: " << e.what() << "\n";
    return pp::kExitInvariant;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return pp::kExitOther;
  }
  return pp::kExitOther;
}
