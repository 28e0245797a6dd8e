// gfprune: command line front end for pretraining, pruning and the experiment
// tables. Errors go to stderr as a single line "error: <code>: <message>".

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "gfprune/error.hpp"
#include "gfprune/experiment.hpp"

namespace {

using namespace gfprune;
using namespace gfprune::harness;

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string stage;
  std::string criterion;
  std::string mode;
};

RunConfig resolve(const Flags& f) {
  RunConfig c = f.config.empty() ? RunConfig{} : load_config(f.config);
  if (f.seed) c.seeds = {*f.seed};
  if (!f.out.empty()) c.out_dir = f.out;
  if (!f.criterion.empty()) c.plan.criterion = parse_criterion(f.criterion);
  if (!f.mode.empty()) c.plan.mode = pruning::parse_mode(f.mode);
  return c;
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << text;
}

std::string stage_or(const Flags& f, const std::string& fallback) {
  const std::string s = f.stage.empty() ? fallback : f.stage;
  if (s != "pretrain" && s != "iterative" && s != "hardprune" && s != "final") {
    throw ArgumentError("unknown stage '" + s + "' (pretrain, iterative, hardprune, final)");
  }
  return s;
}

Checkpoint load_stage(const RunConfig& c, std::uint64_t seed, const std::string& stage) {
  const auto path = stage_checkpoint(c, seed, stage);
  if (!std::filesystem::exists(path)) {
    throw MissingCheckpointError("missing checkpoint '" + path.string() + "'");
  }
  Checkpoint ck = load_checkpoint(path);
  const std::uint64_t want = stage == "pretrain" ? pretrain_hash(c) : config_hash(c);
  if (ck.config_hash != want) {
    throw MissingCheckpointError("checkpoint '" + path.string() +
                                 "' was written under a different config");
  }
  return ck;
}

int cmd_pretrain(const Flags& f) {
  RunConfig c = resolve(f);
  c.stages.pretrain = true;
  const World w = make_world(c);
  for (std::uint64_t seed : c.seeds) {
    const auto model = pretrain_or_load(c, w, seed);
    const double l = diffusion::loss_at_step(model, w.sched, w.data, c.adam,
                                             pretrain_batch_seed(seed), c.pretrain_steps);
    std::printf("{\"seed\": %llu, \"checkpoint\": \"%s\", \"next_step_loss\": %.17g}\n",
                static_cast<unsigned long long>(seed),
                stage_checkpoint(c, seed, "pretrain").string().c_str(), l);
  }
  return 0;
}

int cmd_prune(const Flags& f) {
  const RunConfig c = resolve(f);
  std::string stop;
  if (!f.stage.empty()) {
    stop = stage_or(f, "final");
    if (stop == "pretrain") throw ArgumentError("prune --stage must be iterative, hardprune or final");
    if (stop == "final") stop.clear();
  }
  const RunReport r = run_pipeline(c, stop);
  std::cout << report_json(r) << "\n";
  return 0;
}

int cmd_sample(const Flags& f) {
  const RunConfig c = resolve(f);
  const std::string stage = stage_or(f, "final");
  const World w = make_world(c);
  for (std::uint64_t seed : c.seeds) {
    const Checkpoint ck = load_stage(c, seed, stage);
    const Tensor s = eval_samples(ck.model, w, c);
    std::string csv;
    for (std::size_t i = 0; i < s.rows(); ++i) {
      for (std::size_t j = 0; j < s.cols(); ++j) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.17g", s.at(i, j));
        csv += (j ? "," : "") + std::string(buf);
      }
      csv += "\n";
    }
    const auto path = seed_dir(c, seed) / ("samples_" + stage + ".csv");
    write_file(path, csv);
    std::printf("%s\n", path.string().c_str());
  }
  return 0;
}

int cmd_evaluate(const Flags& f) {
  const RunConfig c = resolve(f);
  const std::string stage = stage_or(f, "final");
  const World w = make_world(c);
  for (std::uint64_t seed : c.seeds) {
    const Checkpoint dense = load_stage(c, seed, "pretrain");
    const Checkpoint ck = stage == "pretrain" ? dense : load_stage(c, seed, stage);
    const Tensor reference = eval_samples(dense.model, w, c);
    const auto gran = stage == "iterative" ? c.plan.granularity : c.plan.final_granularity;
    const auto q = evaluate_model(ck.model, &reference, w, c, gran);
    const std::string j = quality_json(q);
    write_file(seed_dir(c, seed) / ("eval_" + stage + ".json"), j + "\n");
    std::cout << j << "\n";
  }
  return 0;
}

int cmd_table(const Flags& f, const std::string& which) {
  const RunConfig c = resolve(f);
  ExperimentRunner runner(c);
  const std::filesystem::path out(c.out_dir);
  if (which == "fig2") {
    const Fig2 fig = fig2(runner);
    write_file(out / "fig2.csv", fig.csv());
    std::cout << fig.csv();
    return 0;
  }
  const Table t = which == "table1" ? table1(runner) : table2(runner);
  write_file(out / (which + ".csv"), t.csv());
  write_file(out / (which + ".json"), t.json() + "\n");
  std::cout << t.csv();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gradient-flow progressive soft pruning for small diffusion models"};
  app.require_subcommand(1);
  Flags flags;
  std::uint64_t seed = 0;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", flags.config, "Run configuration file");
    sub->add_option("--seed", seed, "Run a single seed instead of the configured list");
    sub->add_option("--out", flags.out, "Output directory");
    sub->add_option("--stage", flags.stage, "Checkpoint stage: pretrain, iterative, hardprune, final");
    sub->add_option("--criterion", flags.criterion, "magnitude, taylor or gradient-flow");
    sub->add_option("--mode", flags.mode,
                    "one-shot, iterative, iterative+soft, iterative+progressive, progressive-soft");
  };
  const char* names[][2] = {
      {"pretrain", "Train dense models and save pretrain checkpoints"},
      {"prune", "Run the pruning pipeline for every seed"},
      {"sample", "Write DDIM samples from a stage checkpoint"},
      {"evaluate", "Quality and efficiency metrics of a stage checkpoint"},
      {"table1", "Criterion comparison table"},
      {"table2", "Schedule ablation table"},
      {"fig2", "Quality traces over the iterative stage"},
  };
  for (const auto& n : names) add_common(app.add_subcommand(n[0], n[1]));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "error: usage: %s\n", e.what());
    return 2;
  }

  const std::string cmd = app.get_subcommands().front()->get_name();
  if (app.get_subcommands().front()->count("--seed") > 0) flags.seed = seed;
  try {
    if (cmd == "pretrain") return cmd_pretrain(flags);
    if (cmd == "prune") return cmd_prune(flags);
    if (cmd == "sample") return cmd_sample(flags);
    if (cmd == "evaluate") return cmd_evaluate(flags);
    return cmd_table(flags, cmd);
  } catch (const gfprune::Error& e) {
    std::fprintf(stderr, "error: %s: %s\n", e.code().c_str(), e.what());
    return 1;
  } catch (const std::filesystem::filesystem_error& e) {
    std::fprintf(stderr, "error: io: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: internal: %s\n", e.what());
    return 1;
  }
}
