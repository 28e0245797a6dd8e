#include "gfprune/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "gfprune/error.hpp"

namespace gfprune::harness {

namespace {

using Clock = std::chrono::steady_clock;
using json = nlohmann::json;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::uint64_t init_seed(std::uint64_t seed) { return mix64(seed ^ 0x1A17'0000ULL); }
std::uint64_t arm_seed(std::uint64_t seed) { return mix64(seed ^ 0xA2A2'0000ULL); }

Tensor clamp01(const Tensor& t) {
  Tensor out = t;
  for (double& v : out.data()) v = std::clamp(v, 0.0, 1.0);
  return out;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << text;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

World make_world(const RunConfig& config) {
  if (config.model.data_dim != data::kind_dim(config.dataset.kind)) {
    throw ConfigError("model.data_dim does not match dataset '" +
                      std::string(data::kind_name(config.dataset.kind)) + "'");
  }
  World w;
  w.sched = diffusion::make_schedule(config.diffusion.T, config.diffusion.beta_start,
                                     config.diffusion.beta_end);
  w.data = data::generate(config.dataset);
  return w;
}

std::uint64_t pretrain_batch_seed(std::uint64_t seed) { return mix64(seed ^ 0xBA7C'0000ULL); }

Pretrained pretrain(const RunConfig& config, const World& world, std::uint64_t seed) {
  Pretrained p;
  p.model = diffusion::NoisePredictor(config.model, init_seed(seed));
  diffusion::TrainOptions opts;
  opts.log_interval = config.log_interval;
  opts.batch_seed = pretrain_batch_seed(seed);
  if (config.pretrain_steps > 0) {
    p.trace = diffusion::train(p.model, world.sched, world.data, config.pretrain_steps, config.adam,
                               p.optimizer, opts);
  }
  return p;
}

Tensor eval_samples(const diffusion::NoisePredictor& model, const World& world,
                    const RunConfig& config) {
  return diffusion::sample_ddim(model, world.sched, config.eval.samples, config.eval.ddim_steps,
                                config.eval.seed);
}

metrics::QualityReport evaluate_samples(const Tensor& samples, const Tensor* reference,
                                        const diffusion::NoisePredictor& model, const World& world,
                                        const RunConfig& config, mask::Granularity granularity) {
  metrics::QualityReport q;
  q.frechet = metrics::frechet_distance(samples, world.data);
  if (reference != nullptr) {
    if (config.model.data_dim == 2) {
      metrics::RasterOptions r;
      r.resolution = config.eval.raster;
      r.bandwidth = config.eval.bandwidth;
      q.ssim = metrics::point_set_ssim(samples, *reference, r);
    } else {
      q.ssim = metrics::mean_ssim(clamp01(samples), clamp01(*reference), data::kImageSide,
                                  data::kImageSide);
    }
  }
  q.nonzero_params = model.nonzero_param_count();
  q.dense_params = model.dense_param_count();
  const auto macs = metrics::count_macs(model, granularity);
  q.macs_dense = macs.dense;
  q.macs_sparse = macs.sparse;
  q.eval_seed = config.eval.seed;
  return q;
}

metrics::QualityReport evaluate_model(const diffusion::NoisePredictor& model, const Tensor* reference,
                                      const World& world, const RunConfig& config,
                                      mask::Granularity granularity) {
  return evaluate_samples(eval_samples(model, world, config), reference, model, world, config,
                          granularity);
}

ArmResult run_arm(const RunConfig& config, const World& world,
                  const diffusion::NoisePredictor& pretrained, const Tensor& dense_reference,
                  const ArmSpec& arm, std::uint64_t seed, const ArmHooks& hooks) {
  const pruning::PrunePlan& plan = arm.plan;
  pruning::validate(plan);
  ArmResult r;
  r.label = arm.label;
  r.seed = seed;
  r.plan = plan;
  r.model = pretrained;

  auto stage_done = [&](const std::string& stage) {
    if (hooks.on_stage) hooks.on_stage(stage, r.model, r.optimizer);
    return arm.stop_after == stage;
  };
  auto finish = [&] {
    if (arm.evaluate) {
      const auto t0 = Clock::now();
      r.report = evaluate_model(r.model, &dense_reference, world, config, plan.final_granularity);
      r.timing.push_back({"evaluate", seconds_since(t0)});
    }
    return r;
  };

  if (plan.s == 0.0) {
    // Identity run: nothing to prune and nothing to retrain.
    for (const char* stage : {"iterative", "hardprune", "final"}) {
      if (stage_done(stage)) return r;
    }
    return finish();
  }

  pruning::RunContext ctx;
  ctx.sched = &world.sched;
  ctx.data = &world.data;
  ctx.adam = config.adam;
  ctx.scoring = config.scoring;
  ctx.seed = arm_seed(seed);
  if (arm.trace) {
    ctx.probe = [&](std::size_t, const diffusion::NoisePredictor& m) -> std::optional<double> {
      const Tensor s = diffusion::sample_ddim(m, world.sched, config.eval.trace_samples,
                                              config.eval.trace_ddim_steps, config.eval.seed);
      return metrics::frechet_distance(s, world.data);
    };
  }

  auto t0 = Clock::now();
  auto iterative = pruning::run_progressive_soft(r.model, plan, ctx);
  r.diagnostics = std::move(iterative.diagnostics);
  r.optimizer = std::move(iterative.optimizer);
  r.timing.push_back({"iterative", seconds_since(t0)});
  if (stage_done("iterative")) return r;

  t0 = Clock::now();
  r.kept_overlap = pruning::final_hard_prune(r.model, plan, ctx).kept_overlap;
  r.timing.push_back({"hardprune", seconds_since(t0)});
  if (stage_done("hardprune")) return r;

  t0 = Clock::now();
  pruning::finetune(r.model, plan.finetune_steps(), ctx, r.optimizer);
  r.timing.push_back({"finetune", seconds_since(t0)});
  if (stage_done("final")) return r;
  return finish();
}

std::filesystem::path seed_dir(const RunConfig& config, std::uint64_t seed) {
  return std::filesystem::path(config.out_dir) / ("seed_" + std::to_string(seed));
}

std::filesystem::path stage_checkpoint(const RunConfig& config, std::uint64_t seed,
                                       const std::string& stage) {
  return seed_dir(config, seed) / (stage + ".ckpt");
}

diffusion::NoisePredictor pretrain_or_load(const RunConfig& config, const World& world,
                                           std::uint64_t seed) {
  const auto path = stage_checkpoint(config, seed, "pretrain");
  const std::uint64_t want = pretrain_hash(config);
  if (std::filesystem::exists(path)) {
    Checkpoint c = load_checkpoint(path);
    if (c.stage == "pretrain" && c.config_hash == want) return std::move(c.model);
    if (!config.stages.pretrain) {
      throw MissingCheckpointError("checkpoint '" + path.string() +
                                   "' was made with a different pretraining config");
    }
  } else if (!config.stages.pretrain) {
    throw MissingCheckpointError("missing checkpoint '" + path.string() + "'");
  }
  Pretrained p = pretrain(config, world, seed);
  Checkpoint c;
  c.config_hash = want;
  c.stage = "pretrain";
  c.iteration = p.optimizer.step;
  c.model = p.model;
  c.optimizer = p.optimizer;
  save_checkpoint(path, c);
  return std::move(p.model);
}

void write_diagnostics_csv(const std::filesystem::path& path, const pruning::EnergyDiagnostics& d) {
  std::string s = "iteration,loss,grad_flow,energy,s_t,p_t,churn,soft_sparsity,quality\n";
  for (const auto& r : d.records) {
    s += std::to_string(r.iteration) + "," + fmt(r.loss) + "," + fmt(r.grad_flow) + "," +
         fmt(r.energy) + "," + fmt(r.s_t) + "," + fmt(r.p_t) + "," + std::to_string(r.churn) + "," +
         fmt(r.soft_sparsity) + "," + (r.quality ? fmt(*r.quality) : "") + "\n";
  }
  write_text(path, s);
}

namespace {

json quality_to_json(const metrics::QualityReport& q) {
  return {{"frechet", q.frechet},
          {"ssim", q.ssim},
          {"nonzero_params", q.nonzero_params},
          {"dense_params", q.dense_params},
          {"macs_dense", q.macs_dense},
          {"macs_sparse", q.macs_sparse},
          {"eval_seed", q.eval_seed}};
}

json timing_json(const std::vector<StageTime>& t) {
  json j = json::object();
  for (const auto& s : t) j[s.stage] = s.seconds;
  return j;
}

}  // namespace

std::string quality_json(const metrics::QualityReport& q) { return quality_to_json(q).dump(2); }

std::string report_json(const RunReport& report) {
  json j;
  char hash[17];
  std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(report.config_hash));
  j["config_hash"] = hash;
  j["seeds"] = json::array();
  std::vector<double> fd;
  std::vector<double> ss;
  for (const auto& s : report.seeds) {
    json e;
    e["seed"] = s.seed;
    e["dense"] = s.dense ? quality_to_json(*s.dense) : json(nullptr);
    e["pruned"] = s.pruned ? quality_to_json(*s.pruned) : json(nullptr);
    e["kept_overlap"] = s.kept_overlap;
    e["diagnostics_csv"] = s.diagnostics_csv.string();
    e["checkpoints"] = json::object();
    for (const auto& [stage, path] : s.checkpoints) e["checkpoints"][stage] = path.string();
    e["timing"] = timing_json(s.timing);
    j["seeds"].push_back(std::move(e));
    if (s.pruned) {
      fd.push_back(s.pruned->frechet);
      ss.push_back(s.pruned->ssim);
    }
  }
  if (!fd.empty()) j["median"] = {{"frechet", median(fd)}, {"ssim", median(ss)}};
  return j.dump(2);
}

RunReport run_pipeline(const RunConfig& config, const std::string& stop_after) {
  const World world = make_world(config);
  RunReport report;
  report.config_hash = config_hash(config);
  std::filesystem::create_directories(config.out_dir);
  save_config(std::filesystem::path(config.out_dir) / "config.txt", config);

  for (std::uint64_t seed : config.seeds) {
    SeedReport sr;
    sr.seed = seed;
    auto t0 = Clock::now();
    const auto dense = pretrain_or_load(config, world, seed);
    sr.timing.push_back({"pretrain", seconds_since(t0)});
    sr.checkpoints["pretrain"] = stage_checkpoint(config, seed, "pretrain");

    if (config.stages.prune) {
      t0 = Clock::now();
      const Tensor reference = eval_samples(dense, world, config);
      if (config.stages.evaluate) {
        sr.dense = evaluate_samples(reference, &reference, dense, world, config,
                                    config.plan.final_granularity);
      }
      sr.timing.push_back({"evaluate_dense", seconds_since(t0)});

      ArmSpec arm;
      arm.label = "pipeline";
      arm.plan = config.plan;
      arm.evaluate = config.stages.evaluate;
      arm.stop_after = stop_after;
      ArmHooks hooks;
      hooks.on_stage = [&](const std::string& stage, const diffusion::NoisePredictor& m,
                           const diffusion::AdamState& opt) {
        Checkpoint c;
        c.config_hash = report.config_hash;
        c.stage = stage;
        c.iteration = opt.step;
        c.model = m;
        c.optimizer = opt;
        const auto path = stage_checkpoint(config, seed, stage);
        save_checkpoint(path, c);
        sr.checkpoints[stage] = path;
      };
      ArmResult r = run_arm(config, world, dense, reference, arm, seed, hooks);
      if (config.stages.evaluate && stop_after.empty()) sr.pruned = r.report;
      sr.kept_overlap = r.kept_overlap;
      sr.diagnostics_csv = seed_dir(config, seed) / "diagnostics.csv";
      write_diagnostics_csv(sr.diagnostics_csv, r.diagnostics);
      sr.timing.insert(sr.timing.end(), r.timing.begin(), r.timing.end());
    }
    report.seeds.push_back(std::move(sr));
  }
  report.json_path = std::filesystem::path(config.out_dir) / "report.json";
  write_text(report.json_path, report_json(report));
  return report;
}

// ---------------------------------------------------------------------------

ExperimentRunner::ExperimentRunner(RunConfig config)
    : config_(std::move(config)), world_(make_world(config_)) {}

ExperimentRunner::SeedCache& ExperimentRunner::seed_cache(std::uint64_t seed) {
  auto it = seeds_.find(seed);
  if (it != seeds_.end()) return it->second;
  const auto t0 = Clock::now();
  SeedCache c;
  c.model = pretrain(config_, world_, seed).model;
  c.samples = eval_samples(c.model, world_, config_);
  c.report = evaluate_samples(c.samples, &c.samples, c.model, world_, config_,
                              config_.plan.final_granularity);
  elapsed_ += seconds_since(t0);
  return seeds_.emplace(seed, std::move(c)).first->second;
}

const diffusion::NoisePredictor& ExperimentRunner::pretrained(std::uint64_t seed) {
  return seed_cache(seed).model;
}

const metrics::QualityReport& ExperimentRunner::dense_report(std::uint64_t seed) {
  return seed_cache(seed).report;
}

const Tensor& ExperimentRunner::dense_samples(std::uint64_t seed) { return seed_cache(seed).samples; }

namespace {

/// Everything about an arm that influences its numbers. One-shot plans never
/// use their iterative criterion, so it is left out for them.
std::string arm_key(const ArmSpec& spec, std::uint64_t seed) {
  const auto& p = spec.plan;
  std::string k = std::to_string(seed) + "|" + std::string(pruning::mode_name(p.mode)) + "|" +
                  (p.mask_iterations() ? std::string(criterion_name(p.criterion)) : "-") + "|" +
                  fmt(p.s) + "|" + std::to_string(p.K) + "|" + std::to_string(p.M_iters) + "|" +
                  std::to_string(p.N) + "|" + std::to_string(p.interval) + "|" +
                  std::string(mask::granularity_name(p.granularity)) + "|" +
                  (p.per_layer ? "L" : "G") + "|" + std::string(criterion_name(p.final_criterion)) +
                  "|" + std::string(mask::granularity_name(p.final_granularity)) + "|" +
                  (p.final_per_layer ? "L" : "G") + "|" + (spec.evaluate ? "E" : "-") + "|" +
                  spec.stop_after;
  return k;
}

}  // namespace

const ArmResult& ExperimentRunner::arm(const ArmSpec& spec, std::uint64_t seed) {
  const std::string key = arm_key(spec, seed);
  auto it = arms_.find(key);
  const bool traced = it != arms_.end() && !it->second.diagnostics.records.empty() &&
                      it->second.diagnostics.records.front().quality.has_value();
  if (it != arms_.end() && (!spec.trace || traced || it->second.diagnostics.records.empty())) {
    return it->second;
  }
  SeedCache& c = seed_cache(seed);
  const auto t0 = Clock::now();
  ArmResult r = run_arm(config_, world_, c.model, c.samples, spec, seed);
  elapsed_ += seconds_since(t0);
  return arms_.insert_or_assign(key, std::move(r)).first->second;
}

double ExperimentRunner::elapsed() const { return elapsed_; }

ArmSpec progressive_soft_arm(const RunConfig& config, Criterion criterion, bool trace) {
  ArmSpec a;
  a.plan = config.plan;
  a.plan.mode = pruning::ScheduleMode::kProgressiveSoft;
  a.plan.criterion = criterion;
  a.label = "progressive-soft/" + std::string(criterion_name(criterion));
  a.trace = trace;
  return a;
}

ArmSpec diff_pruning_arm(const RunConfig& config) {
  ArmSpec a;
  a.plan = config.plan;
  a.plan.mode = pruning::ScheduleMode::kOneShot;
  a.plan.criterion = config.plan.final_criterion;
  a.label = "diff-pruning";
  return a;
}

ArmSpec iterative_arm(const RunConfig& config, Criterion criterion, pruning::ScheduleMode mode) {
  ArmSpec a;
  a.plan = config.plan;
  a.plan.mode = mode;
  a.plan.criterion = criterion;
  a.label = std::string(pruning::mode_name(mode)) + "/" + std::string(criterion_name(criterion));
  return a;
}

double median(std::vector<double> v) {
  if (v.empty()) throw ArgumentError("median of an empty set");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double TableRow::median_frechet() const {
  std::vector<double> v;
  for (const auto& q : per_seed) v.push_back(q.frechet);
  return median(v);
}

double TableRow::median_ssim() const {
  std::vector<double> v;
  for (const auto& q : per_seed) v.push_back(q.ssim);
  return median(v);
}

const TableRow& Table::row(const std::string& method, const std::string& criterion) const {
  for (const auto& r : rows) {
    if (r.method == method && (criterion.empty() || r.criterion == criterion)) return r;
  }
  throw ArgumentError("table " + name + " has no row " + method + "/" + criterion);
}

std::string Table::csv() const {
  std::string s =
      "method,criterion,seed,frechet,ssim,nonzero_params,dense_params,macs_dense,macs_sparse\n";
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < r.per_seed.size(); ++i) {
      const auto& q = r.per_seed[i];
      s += r.method + "," + r.criterion + "," + std::to_string(r.seeds[i]) + "," + fmt(q.frechet) +
           "," + fmt(q.ssim) + "," + std::to_string(q.nonzero_params) + "," +
           std::to_string(q.dense_params) + "," + std::to_string(q.macs_dense) + "," +
           std::to_string(q.macs_sparse) + "\n";
    }
    const auto& q = r.per_seed.front();
    s += r.method + "," + r.criterion + ",median," + fmt(r.median_frechet()) + "," +
         fmt(r.median_ssim()) + "," + std::to_string(q.nonzero_params) + "," +
         std::to_string(q.dense_params) + "," + std::to_string(q.macs_dense) + "," +
         std::to_string(q.macs_sparse) + "\n";
  }
  return s;
}

std::string Table::json() const {
  nlohmann::json j;
  j["table"] = name;
  j["rows"] = nlohmann::json::array();
  for (const auto& r : rows) {
    nlohmann::json e;
    e["method"] = r.method;
    e["criterion"] = r.criterion;
    e["per_seed"] = nlohmann::json::array();
    for (std::size_t i = 0; i < r.per_seed.size(); ++i) {
      nlohmann::json q = quality_to_json(r.per_seed[i]);
      q["seed"] = r.seeds[i];
      e["per_seed"].push_back(std::move(q));
    }
    e["median"] = {{"frechet", r.median_frechet()}, {"ssim", r.median_ssim()}};
    j["rows"].push_back(std::move(e));
  }
  return j.dump(2);
}

namespace {

TableRow arm_row(ExperimentRunner& runner, const ArmSpec& spec, std::string method,
                 std::string criterion) {
  TableRow row{std::move(method), std::move(criterion), {}, {}};
  for (std::uint64_t seed : runner.config().seeds) {
    row.seeds.push_back(seed);
    row.per_seed.push_back(runner.arm(spec, seed).report);
  }
  return row;
}

}  // namespace

Table table1(ExperimentRunner& runner) {
  const auto& cfg = runner.config();
  Table t;
  t.name = "table1";
  TableRow dense{"dense", "", {}, {}};
  for (std::uint64_t seed : cfg.seeds) {
    dense.seeds.push_back(seed);
    dense.per_seed.push_back(runner.dense_report(seed));
  }
  t.rows.push_back(std::move(dense));
  for (Criterion c : {Criterion::kMagnitude, Criterion::kTaylor}) {
    t.rows.push_back(arm_row(runner, progressive_soft_arm(cfg, c), std::string(criterion_name(c)),
                             std::string(criterion_name(c))));
  }
  t.rows.push_back(arm_row(runner, diff_pruning_arm(cfg), "diff-pruning",
                           std::string(criterion_name(cfg.plan.final_criterion))));
  t.rows.push_back(arm_row(runner, progressive_soft_arm(cfg, Criterion::kGradientFlow),
                           "gradient-flow", "gradient-flow"));
  return t;
}

Table table2(ExperimentRunner& runner) {
  using pruning::ScheduleMode;
  const auto& cfg = runner.config();
  Table t;
  t.name = "table2";
  for (Criterion c : {Criterion::kMagnitude, Criterion::kTaylor}) {
    t.rows.push_back(arm_row(runner, iterative_arm(cfg, c, ScheduleMode::kIterative), "iterative",
                             std::string(criterion_name(c))));
  }
  for (ScheduleMode m : {ScheduleMode::kIterative, ScheduleMode::kIterativeSoft,
                         ScheduleMode::kIterativeProgressive, ScheduleMode::kProgressiveSoft}) {
    t.rows.push_back(arm_row(runner, iterative_arm(cfg, Criterion::kGradientFlow, m),
                             std::string(pruning::mode_name(m)), "gradient-flow"));
  }
  return t;
}

TableRow one_shot_row(ExperimentRunner& runner) {
  return arm_row(runner,
                 iterative_arm(runner.config(), Criterion::kGradientFlow, pruning::ScheduleMode::kOneShot),
                 "one-shot", "gradient-flow");
}

Fig2 fig2(ExperimentRunner& runner) {
  const auto& cfg = runner.config();
  Fig2 f;
  for (Criterion c : {Criterion::kMagnitude, Criterion::kTaylor, Criterion::kGradientFlow}) {
    const ArmSpec spec = progressive_soft_arm(cfg, c, true);
    for (std::uint64_t seed : cfg.seeds) {
      for (const auto& rec : runner.arm(spec, seed).diagnostics.records) {
        f.points.push_back({seed, std::string(criterion_name(c)), rec});
      }
    }
  }
  return f;
}

std::string Fig2::csv() const {
  std::string s = "seed,criterion,iteration,s_t,p_t,frechet,loss,grad_flow,energy,churn\n";
  for (const auto& p : points) {
    const auto& r = p.record;
    s += std::to_string(p.seed) + "," + p.criterion + "," + std::to_string(r.iteration) + "," +
         fmt(r.s_t) + "," + fmt(r.p_t) + "," + (r.quality ? fmt(*r.quality) : "") + "," +
         fmt(r.loss) + "," + fmt(r.grad_flow) + "," + fmt(r.energy) + "," +
         std::to_string(r.churn) + "\n";
  }
  return s;
}

std::vector<std::vector<double>> Fig2::traces(const std::string& criterion) const {
  std::map<std::uint64_t, std::vector<double>> by_seed;
  for (const auto& p : points) {
    if (p.criterion == criterion && p.record.quality) by_seed[p.seed].push_back(*p.record.quality);
  }
  std::vector<std::vector<double>> out;
  for (auto& [seed, t] : by_seed) out.push_back(std::move(t));
  return out;
}

std::size_t settling_iteration(const std::vector<double>& trace, double tolerance) {
  if (trace.empty()) throw ArgumentError("empty quality trace");
  const double last = trace.back();
  const double band = tolerance * std::abs(last);
  std::size_t first = trace.size() - 1;
  for (std::size_t i = trace.size(); i-- > 0;) {
    if (std::abs(trace[i] - last) > band) break;
    first = i;
  }
  return first;
}

}  // namespace gfprune::harness
