#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "opt/config.hpp"
#include "opt/error.hpp"
#include "opt/pipeline.hpp"

namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config;
  std::optional<uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, const std::string& out_help) {
  cmd->add_option("--config", c.config, "JSON run configuration");
  cmd->add_option("--seed", c.seed, "Seed override");
  cmd->add_option("--out", c.out, out_help);
}

opt::RunConfig resolve(const Common& c) { return opt::load_run_config(c.config); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"One-shot talking-head pipeline: synthetic data, staged training, generation and evaluation"};
  app.require_subcommand(1);

  Common synth_c, train_c, gen_c, eval_c, ablate_c;

  auto* synth = app.add_subcommand("synth-data", "Build the synthetic corpus");
  add_common(synth, synth_c, "Corpus root (overrides data_dir)");

  auto* train = app.add_subcommand("train", "Train one stage: afdm, aem or vg");
  std::string stage;
  train->add_option("stage", stage, "afdm | aem | vg")->required()->check(CLI::IsMember({"afdm", "aem", "vg"}));
  add_common(train, train_c, "Run directory (overrides out_dir)");

  auto* gen = app.add_subcommand("generate", "Generate frames from a source image and driving audio");
  opt::pipeline::GenerateRequest req;
  std::string src, wav, run_dir;
  gen->add_option("--src", src, "Source face image (PNG)")->required();
  gen->add_option("--audio", wav, "Driving audio (WAV)")->required();
  gen->add_option("--pose", req.pose_source, "Corpus clip id supplying the pose track, or 'fix'");
  gen->add_option("--run", run_dir, "Run directory holding the checkpoints (overrides out_dir)");
  gen->add_flag("--mux", req.mux, "Also mux frames and audio into video.mp4 (needs ffmpeg)");
  add_common(gen, gen_c, "Output clip directory");
  gen->get_option("--out")->required();

  auto* eval = app.add_subcommand("evaluate", "Score generated clips against the corpus");
  std::string generated, corpus_arg, eval_run;
  bool mouth_only = false;
  eval->add_option("--generated", generated, "Generated clip directory or a directory of them")->required();
  eval->add_option("--corpus", corpus_arg, "Corpus root or its manifest.jsonl (default: data_dir)");
  eval->add_option("--run", eval_run, "Run directory holding the face-embedding checkpoint");
  eval->add_flag("--mouth-only", mouth_only, "LMD over mouth points 48-67 only");
  add_common(eval, eval_c, "MetricsReport JSON path (a CSV is written next to it)");
  eval->get_option("--out")->required();

  auto* ablate = app.add_subcommand("ablate", "Full model vs. entangled encoder vs. no landmark loss, over seeds");
  add_common(ablate, ablate_c, "Run directory (overrides out_dir)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*synth) {
      auto cfg = resolve(synth_c);
      if (synth_c.seed) cfg.corpus.seed = *synth_c.seed;
      if (!synth_c.out.empty()) cfg.data_dir = synth_c.out;
      cfg.validate();
      opt::pipeline::cmd_synth_data(cfg);
    } else if (*train) {
      auto cfg = resolve(train_c);
      if (train_c.seed) cfg.seed = *train_c.seed;
      if (!train_c.out.empty()) cfg.out_dir = train_c.out;
      opt::pipeline::cmd_train(stage, cfg);
    } else if (*gen) {
      auto cfg = resolve(gen_c);
      if (!run_dir.empty()) cfg.out_dir = run_dir;
      req.src_image = src;
      req.driving_wav = wav;
      req.out_dir = gen_c.out;
      opt::pipeline::cmd_generate(cfg, req);
    } else if (*eval) {
      auto cfg = resolve(eval_c);
      if (!eval_run.empty()) cfg.out_dir = eval_run;
      fs::path corpus = corpus_arg.empty() ? cfg.data_dir : fs::path(corpus_arg);
      if (fs::is_regular_file(corpus)) corpus = corpus.parent_path();
      auto report = opt::pipeline::cmd_evaluate(cfg, generated, corpus, eval_c.out, mouth_only);
      std::cout << report.to_json().at("aggregate").dump() << "\n";
    } else if (*ablate) {
      auto cfg = resolve(ablate_c);
      if (ablate_c.seed) cfg.seed = *ablate_c.seed;
      if (!ablate_c.out.empty()) cfg.out_dir = ablate_c.out;
      opt::pipeline::cmd_ablate(cfg);
    }
  } catch (const opt::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const opt::MissingPrerequisite& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
