#pragma once

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cascade.hpp"
#include "config.hpp"
#include "flow.hpp"
#include "geometry.hpp"
#include "json.hpp"
#include "metrics.hpp"
#include "nn.hpp"
#include "parallel.hpp"
#include "phantom.hpp"
#include "sampler.hpp"

namespace surf2ct::cli {

namespace fs = std::filesystem;
using nlohmann::json;

class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline constexpr int kExitOk = 0, kExitFailure = 1, kExitUsage = 2;
inline constexpr const char* kManifest = "manifest.json";

// ---- small file helpers --------------------------------------------------------------

inline std::string fnv1a64_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + p.string());
  std::uint64_t h = 1469598103934665603ull;
  char buf[1 << 16];
  while (is) {
    is.read(buf, sizeof buf);
    for (std::streamsize i = 0; i < is.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ull;
    }
  }
  char out[17];
  std::snprintf(out, sizeof out, "%016llx", static_cast<unsigned long long>(h));
  return out;
}

inline void write_json(const fs::path& p, const json& j) {
  const fs::path tmp = p.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + p.string());
    os << j.dump(2) << "\n";
    if (!os) throw std::runtime_error("failed writing " + p.string());
  }
  fs::rename(tmp, p);
}

inline json read_json(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw std::runtime_error("cannot open " + p.string());
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
}

inline json grid_json(const PhantomGrid& g) {
  return {{"nx", g.nx}, {"ny", g.ny}, {"nz", g.nz}, {"spacing_mm", g.spacing}, {"factor", g.factor}};
}

inline PhantomGrid grid_from_json(const json& j) {
  PhantomGrid g;
  g.nx = j.at("nx");
  g.ny = j.at("ny");
  g.nz = j.at("nz");
  g.spacing = j.at("spacing_mm");
  g.factor = j.at("factor");
  return g;
}

inline bool same_grid(const PhantomGrid& a, const PhantomGrid& b) {
  return a.nx == b.nx && a.ny == b.ny && a.nz == b.nz && a.spacing == b.spacing && a.factor == b.factor;
}

// ---- cohort directories ----------------------------------------------------------------

struct CohortSubject {
  std::string id;
  std::uint64_t seed = 0;
  Demographics demo;
  bool train = true;
  double tau = 0;
  std::map<std::string, std::string> files;  // relative to the cohort directory
};

struct CohortDir {
  fs::path root;
  PhantomGrid grid;
  std::vector<CohortSubject> subjects;
  std::string manifest_hash;

  std::vector<const CohortSubject*> split(bool train) const {
    std::vector<const CohortSubject*> out;
    for (const auto& s : subjects)
      if (s.train == train) out.push_back(&s);
    return out;
  }
  const CohortSubject* find(const std::string& id) const {
    for (const auto& s : subjects)
      if (s.id == id) return &s;
    return nullptr;
  }
  Volume3 volume(const CohortSubject& s, const std::string& key) const {
    const auto it = s.files.find(key);
    if (it == s.files.end()) throw FormatError("cohort subject " + s.id + " lacks a " + key + " file");
    return load_vol3((root / it->second).string()).vol;
  }
  PhantomRecord record(const CohortSubject& s) const {
    PhantomRecord r;
    r.id = s.id;
    r.seed = s.seed;
    r.demo = s.demo;
    r.density = volume(s, "density");
    r.labels = volume(s, "labels");
    r.coarse_density = volume(s, "coarse_density");
    r.sdf_full = {volume(s, "sdf_full"), s.tau};
    r.sdf_partial = {volume(s, "sdf_partial"), s.tau};
    return r;
  }
};

inline CohortDir load_cohort_dir(const fs::path& root) {
  const fs::path mp = root / kManifest;
  if (!fs::exists(mp)) throw std::runtime_error("no cohort manifest at " + mp.string());
  const json m = read_json(mp);
  if (m.value("command", "") != "gen-cohort") throw FormatError(mp.string() + " is not a cohort manifest");
  CohortDir c;
  c.root = root;
  c.grid = grid_from_json(m.at("grid"));
  c.manifest_hash = fnv1a64_file(mp);
  for (const auto& row : m.at("subjects")) {
    CohortSubject s;
    s.id = row.at("id");
    s.seed = row.at("seed");
    s.demo = demographics_from_json(row);
    s.train = row.at("split") == "train";
    s.tau = row.at("tau_mm");
    s.files = row.at("files").get<std::map<std::string, std::string>>();
    c.subjects.push_back(std::move(s));
  }
  return c;
}

// ---- shared option handling -------------------------------------------------------------

struct Common {
  std::optional<std::size_t> threads;
  std::string config_path;
};

inline RunConfig resolve_config(const Common& c) {
  RunConfig cfg = c.config_path.empty() ? RunConfig{} : load_config(c.config_path);
  cfg.validate();
  // Precedence: --threads, then SURF2CT_THREADS, then run.threads, then all cores.
  if (c.threads) set_thread_count(*c.threads);
  else if (!std::getenv("SURF2CT_THREADS") && cfg.threads) set_thread_count(cfg.threads);
  return cfg;
}

inline void require_out(const std::string& out) {
  if (out.empty()) throw UsageError("--out is required");
  fs::create_directories(out);
}

// ---- commands -----------------------------------------------------------------------------

struct GenCohortArgs {
  std::string out;
  std::optional<std::size_t> n, n_test;
  std::optional<std::uint64_t> seed;
};

inline int gen_cohort(const Common& common, const GenCohortArgs& a, std::ostream& log) {
  RunConfig cfg = resolve_config(common);
  if (a.seed) set_config_value(cfg, "run.seed", std::to_string(*a.seed));
  if (a.n) {
    // --n is the total; the test share keeps the configured proportion unless given.
    const std::size_t total0 = cfg.cohort.n_train + cfg.cohort.n_test;
    const std::size_t nt = a.n_test ? *a.n_test : (*a.n * cfg.cohort.n_test + total0 / 2) / total0;
    if (nt > *a.n) throw UsageError("--n-test exceeds --n");
    cfg.cohort.n_train = *a.n - nt;
    cfg.cohort.n_test = nt;
  } else if (a.n_test) {
    cfg.cohort.n_test = *a.n_test;
  }
  if (cfg.cohort.n_train + cfg.cohort.n_test == 0) throw UsageError("cohort must contain at least one subject");
  require_out(a.out);
  const fs::path root(a.out);
  const auto plan = plan_cohort(cfg.cohort);
  json subjects = json::array();
  // Generated in blocks to bound memory on large cohorts.
  const std::size_t block = std::max<std::size_t>(thread_count() * 4, 16);
  for (std::size_t b0 = 0; b0 < plan.size(); b0 += block) {
    const std::size_t b1 = std::min(plan.size(), b0 + block);
    std::vector<PhantomRecord> recs(b1 - b0);
    parallel_for(b1 - b0, [&](std::size_t i0, std::size_t i1) {
      for (std::size_t i = i0; i < i1; ++i)
        recs[i] = generate_phantom(plan[b0 + i].seed, plan[b0 + i].demo, cfg.cohort.grid, plan[b0 + i].id);
    });
    for (std::size_t i = 0; i < recs.size(); ++i) {
      const auto& e = plan[b0 + i];
      const auto& r = recs[i];
      fs::create_directories(root / e.id);
      const std::map<std::string, std::pair<const Volume3*, PayloadKind>> vols{
          {"density", {&r.density, PayloadKind::density_hu}},
          {"labels", {&r.labels, PayloadKind::mask}},
          {"coarse_density", {&r.coarse_density, PayloadKind::density_hu}},
          {"sdf_full", {&r.sdf_full.vol, PayloadKind::sdf_mm}},
          {"sdf_partial", {&r.sdf_partial.vol, PayloadKind::sdf_mm}}};
      json files = json::object();
      for (const auto& [key, v] : vols) {
        const std::string rel = e.id + "/" + key + ".vol3";
        save_vol3((root / rel).string(), *v.first, v.second);
        files[key] = rel;
      }
      json row = demographics_json(e.demo);
      row["id"] = e.id;
      row["seed"] = e.seed;
      row["split"] = e.train ? "train" : "test";
      row["tau_mm"] = r.sdf_full.tau;
      row["files"] = files;
      if (!r.warnings.empty()) row["warnings"] = r.warnings;
      subjects.push_back(row);
    }
    log << "generated " << b1 << "/" << plan.size() << " phantoms\n";
  }
  json m;
  m["command"] = "gen-cohort";
  m["config"] = config_json(cfg);
  m["grid"] = grid_json(cfg.cohort.grid);
  m["n_train"] = cfg.cohort.n_train;
  m["n_test"] = cfg.cohort.n_test;
  m["subjects"] = subjects;
  write_json(root / kManifest, m);
  return kExitOk;
}

struct TrainArgs {
  int stage = 0;
  std::string cohort, out;
  bool resume = false;
  std::size_t stop_after = 0;
};

inline std::string checkpoint_name(int stage) { return "stage" + std::to_string(stage) + ".ckpt"; }

inline int train(const Common& common, const TrainArgs& a, std::ostream& log) {
  if (a.stage < 1 || a.stage > 3) throw UsageError("--stage must be 1, 2 or 3");
  if (a.cohort.empty()) throw UsageError("--cohort is required");
  const RunConfig cfg = resolve_config(common);
  require_out(a.out);
  const CohortDir cohort = load_cohort_dir(a.cohort);
  if (!same_grid(cohort.grid, cfg.grid()))
    throw ConfigError("config grid " + grid_json(cfg.grid()).dump() + " does not match the cohort grid " +
                      grid_json(cohort.grid).dump());
  const auto train_subjects = cohort.split(true);
  if (train_subjects.empty()) throw std::runtime_error("cohort has no training subjects");
  const StageTrainConfig& sc = cfg.stages[a.stage - 1];

  std::vector<Demographics> demos;
  for (const auto* s : train_subjects) demos.push_back(s->demo);
  const DemoStats stats = compute_demo_stats(demos);
  std::vector<StageData> data(train_subjects.size());
  parallel_for(train_subjects.size(), [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i)
      data[i] = prepare_stage_data(cohort.record(*train_subjects[i]), stats, cfg.grid().factor);
  });
  const ExampleProvider provider = stage_provider(a.stage, data, cfg.patch);

  const fs::path out(a.out), ckpt = out / checkpoint_name(a.stage);
  const fs::path csv = out / ("loss_stage" + std::to_string(a.stage) + ".csv");
  TrainState st(sc.unet, sc.optimizer, sc.ema_decay, cfg.stage_seed(a.stage));
  if (a.resume && fs::exists(ckpt)) {
    const Checkpoint ck = load_checkpoint(ckpt.string());
    const json& meta = ck.header.at("meta");
    if (meta.value("stage", 0) != a.stage) throw ConfigError(ckpt.string() + " belongs to another stage");
    if (!same_grid(grid_from_json(meta.at("grid")), cfg.grid())) throw ConfigError(ckpt.string() + ": grid mismatch");
    if (json(ck.header.at("unet").get<UNetConfig>()) != json(sc.unet))
      throw ConfigError(ckpt.string() + ": network configuration differs from the config");
    st = restore_train_state(ck);
    log << "resuming stage " << a.stage << " at step " << st.optimizer.step_count() << "\n";
  }
  const std::size_t start = st.optimizer.step_count();

  // Keep logged rows up to the resume point, then append.
  std::vector<std::string> kept;
  if (start > 0 && fs::exists(csv)) {
    std::ifstream is(csv);
    std::string line;
    std::getline(is, line);
    while (std::getline(is, line))
      if (!line.empty() && std::stoull(line.substr(0, line.find(','))) <= start) kept.push_back(line);
  }
  std::ofstream os(csv, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + csv.string());
  os << kLossCsvHeader << "\n";
  for (const auto& l : kept) os << l << "\n";

  TrainStageOptions opt;
  opt.flow = sc.flow;
  opt.log_every = sc.log_every;
  opt.checkpoint_every = sc.checkpoint_every;
  opt.checkpoint_path = ckpt.string();
  opt.stop_after = a.stop_after;
  opt.meta = {{"stage", a.stage},
              {"grid", grid_json(cfg.grid())},
              {"demo_stats", stats},
              {"channels", channel_layout(a.stage)},
              {"patch", cfg.patch},
              {"cohort_manifest", cohort.manifest_hash},
              {"tau", "per subject, 0.25 x smallest physical extent"}};
  opt.on_log = [&](const LossRow& r) {
    write_loss_row(os, r);
    os.flush();
    char buf[160];
    std::snprintf(buf, sizeof buf, "stage %d step %zu/%zu loss %.5f lr %.3g\n", a.stage, r.step,
                  sc.flow.total_steps, r.loss, r.lr);
    log << buf << std::flush;
  };
  const TrainOutcome res = train_stage(st, provider, opt);

  json m;
  m["command"] = "train";
  m["stage"] = a.stage;
  m["cohort"] = a.cohort;
  m["cohort_manifest"] = cohort.manifest_hash;
  m["config"] = config_json(cfg);
  m["resumed_from_step"] = start;
  m["final_step"] = res.final_step;
  m["rejected_steps"] = res.rejected_steps;
  m["checkpoint"] = {{"path", ckpt.filename().string()}, {"fnv1a64", fnv1a64_file(ckpt)}};
  m["loss_csv"] = csv.filename().string();
  write_json(out / ("manifest.stage" + std::to_string(a.stage) + ".json"), m);
  return kExitOk;
}

struct SampleArgs {
  std::string checkpoints, cohort, out;
  std::vector<std::string> subjects;
  std::optional<std::uint64_t> seed;
};

struct LoadedStage {
  UNet<float> model;
  json meta;
  std::string hash;
};

inline LoadedStage load_stage(const fs::path& dir, int stage) {
  const fs::path p = dir / checkpoint_name(stage);
  if (!fs::exists(p)) throw std::runtime_error("missing checkpoint " + p.string());
  const Checkpoint ck = load_checkpoint(p.string());
  const json& meta = ck.header.at("meta");
  if (meta.value("stage", 0) != stage) throw FormatError(p.string() + " is not a stage " + std::to_string(stage) + " checkpoint");
  return {ema_model_from(ck), meta, fnv1a64_file(p)};
}

inline int sample_cmd(const Common& common, const SampleArgs& a, std::ostream& log) {
  if (a.checkpoints.empty() || a.cohort.empty()) throw UsageError("--checkpoints and --cohort are required");
  const RunConfig cfg = resolve_config(common);
  require_out(a.out);
  const CohortDir cohort = load_cohort_dir(a.cohort);
  const fs::path ckdir(a.checkpoints);
  const LoadedStage s1 = load_stage(ckdir, 1), s2 = load_stage(ckdir, 2), s3 = load_stage(ckdir, 3);
  for (const LoadedStage* s : {&s1, &s2, &s3})
    if (!same_grid(grid_from_json(s->meta.at("grid")), cohort.grid))
      throw ConfigError("checkpoint grid does not match the cohort grid");
  const DemoStats stats = s1.meta.at("demo_stats").get<DemoStats>();
  PipelineConfig pc = cfg.pipeline();
  pc.factor = cohort.grid.factor;
  pc.patch = s3.meta.at("patch").get<Extent3>();
  const std::uint64_t seed = a.seed ? *a.seed : cfg.seed;

  std::vector<const CohortSubject*> todo;
  if (a.subjects.empty()) todo = cohort.split(false);
  for (const auto& id : a.subjects) {
    const auto* s = cohort.find(id);
    if (!s) throw UsageError("subject " + id + " is not in the cohort");
    todo.push_back(s);
  }
  const fs::path out(a.out);
  json rows = json::array();
  for (std::size_t i = 0; i < todo.size(); ++i) {
    const CohortSubject& s = *todo[i];
    const std::uint64_t key = std::stoull(s.id.substr(s.id.find_first_of("0123456789")));
    const SdfGrid partial{cohort.volume(s, "sdf_partial"), s.tau};
    const auto res = run_pipeline(partial, stats.zscore(s.demo), s1.model, s2.model, s3.model, pc, {seed, key});
    fs::create_directories(out / s.id);
    const std::map<std::string, std::pair<const Volume3*, PayloadKind>> vols{
        {"restored_sdf", {&res.restored.vol, PayloadKind::sdf_mm}},
        {"coarse_hu", {&res.coarse_hu, PayloadKind::density_hu}},
        {"high_hu", {&res.high_hu, PayloadKind::density_hu}}};
    json files = json::object();
    for (const auto& [k, v] : vols) {
      const std::string rel = s.id + "/" + k + ".vol3";
      save_vol3((out / rel).string(), *v.first, v.second);
      files[k] = rel;
    }
    rows.push_back({{"id", s.id},
                    {"input", {{"sdf_partial", s.files.at("sdf_partial")}}},
                    {"tau_mm", s.tau},
                    {"outputs", files},
                    {"stages", res.stats}});
    log << "sampled " << s.id << " (" << i + 1 << "/" << todo.size() << ")\n" << std::flush;
  }
  json m;
  m["command"] = "sample";
  m["cohort"] = a.cohort;
  m["cohort_manifest"] = cohort.manifest_hash;
  m["checkpoints"] = {{"dir", a.checkpoints},
                      {"stage1", s1.hash},
                      {"stage2", s2.hash},
                      {"stage3", s3.hash}};
  m["seed"] = seed;
  m["sampler"] = cfg.sampler;
  m["patch"] = pc.patch;
  m["stride"] = pc.stride;
  m["config"] = config_json(cfg);
  m["subjects"] = rows;
  write_json(out / kManifest, m);
  return kExitOk;
}

struct EvaluateArgs {
  std::string cohort, generated, out, split = "test";
};

inline int evaluate_cmd(const Common& common, const EvaluateArgs& a, std::ostream& log) {
  if (a.cohort.empty() || a.generated.empty()) throw UsageError("--cohort and --generated are required");
  if (a.split != "test" && a.split != "train" && a.split != "all") throw UsageError("--split must be test, train or all");
  resolve_config(common);
  require_out(a.out);
  const CohortDir cohort = load_cohort_dir(a.cohort);
  const fs::path gen(a.generated);
  std::vector<const CohortSubject*> subjects;
  for (const auto& s : cohort.subjects)
    if (a.split == "all" || s.train == (a.split == "train")) subjects.push_back(&s);
  std::vector<SubjectEval> evals(subjects.size());
  parallel_for(subjects.size(), [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) {
      const CohortSubject& s = *subjects[i];
      SubjectEval& ev = evals[i];
      ev.id = s.id;
      ev.demo = s.demo;
      ev.original_hu = cohort.volume(s, "density");
      ev.sdf_gt = {cohort.volume(s, "sdf_full"), s.tau};
      ev.sdf_partial = {cohort.volume(s, "sdf_partial"), s.tau};
      ev.original_coarse_hu = cohort.volume(s, "coarse_density");
      const fs::path dir = gen / s.id;
      if (fs::exists(dir / "high_hu.vol3")) ev.generated_hu = load_vol3((dir / "high_hu.vol3").string()).vol;
      if (fs::exists(dir / "restored_sdf.vol3"))
        ev.sdf_restored = SdfGrid{load_vol3((dir / "restored_sdf.vol3").string()).vol, s.tau};
      if (fs::exists(dir / "coarse_hu.vol3")) ev.generated_coarse_hu = load_vol3((dir / "coarse_hu.vol3").string()).vol;
    }
  });
  MetricsReport rep = evaluate_cohort(evals, a.split);
  // Generated subjects without a counterpart in the evaluated split.
  std::set<std::string> known;
  for (const auto* s : subjects) known.insert(s->id);
  if (fs::exists(gen))
    for (const auto& entry : fs::directory_iterator(gen))
      if (entry.is_directory() && !known.count(entry.path().filename().string()))
        rep.notes.push_back("generated subject " + entry.path().filename().string() + " has no ground truth in the " +
                            a.split + " split");
  std::sort(rep.notes.begin(), rep.notes.end());
  write_report(a.out, rep);
  json m;
  m["command"] = "evaluate";
  m["cohort"] = a.cohort;
  m["cohort_manifest"] = cohort.manifest_hash;
  m["generated"] = a.generated;
  m["split"] = a.split;
  m["subjects"] = subjects.size();
  m["missing"] = rep.missing;
  m["files"] = {"report.csv", "surface.csv", "agreement.csv", "subjects.csv", "report.json"};
  write_json(fs::path(a.out) / kManifest, m);
  std::string why;
  if (!report_fully_populated(rep, &why)) log << "report incomplete: " << why << "\n";
  log << "evaluated " << subjects.size() - rep.missing.size() << "/" << subjects.size() << " subjects\n";
  return kExitOk;
}

// ---- entry point ----------------------------------------------------------------------------

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Surface-to-CT cascade: phantom cohorts, flow-matching training, sampling and evaluation"};
  app.require_subcommand(1);
  Common common;
  std::size_t threads = 0;
  app.add_option("--threads", threads, "worker threads (default: SURF2CT_THREADS or all cores)")
      ->check(CLI::PositiveNumber);

  auto* g = app.add_subcommand("gen-cohort", "generate a phantom cohort with its manifest");
  GenCohortArgs ga;
  std::size_t n = 0, n_test = 0;
  std::uint64_t seed = 0;
  g->add_option("--out", ga.out, "output directory");
  g->add_option("--config", common.config_path, "config file")->check(CLI::ExistingFile);
  auto* n_opt = g->add_option("--n", n, "total subjects (test share follows the config proportion)");
  auto* nt_opt = g->add_option("--n-test", n_test, "test subjects");
  auto* seed_opt = g->add_option("--seed", seed, "master seed");

  auto* t = app.add_subcommand("train", "train one cascade stage");
  TrainArgs ta;
  t->add_option("--stage", ta.stage, "stage 1, 2 or 3")->required()->check(CLI::Range(1, 3));
  t->add_option("--config", common.config_path, "config file")->check(CLI::ExistingFile);
  t->add_option("--cohort", ta.cohort, "cohort directory")->required();
  t->add_option("--out", ta.out, "output directory");
  t->add_flag("--resume", ta.resume, "continue from the stage checkpoint in --out");
  t->add_option("--stop-after", ta.stop_after, "stop once this many steps are done");

  auto* s = app.add_subcommand("sample", "run the three-stage pipeline");
  SampleArgs sa;
  std::uint64_t sample_seed = 0;
  s->add_option("--checkpoints", sa.checkpoints, "directory with stage1.ckpt, stage2.ckpt, stage3.ckpt")->required();
  s->add_option("--cohort", sa.cohort, "cohort directory")->required();
  s->add_option("--subject", sa.subjects, "subject id (repeatable; default: the test split)");
  auto* sseed_opt = s->add_option("--seed", sample_seed, "sampling seed (default: run.seed)");
  s->add_option("--config", common.config_path, "config file")->check(CLI::ExistingFile);
  s->add_option("--out", sa.out, "output directory");

  auto* e = app.add_subcommand("evaluate", "compare generated volumes against the cohort");
  EvaluateArgs ea;
  e->add_option("--cohort", ea.cohort, "cohort directory")->required();
  e->add_option("--generated", ea.generated, "sample output directory")->required();
  e->add_option("--out", ea.out, "report directory");
  e->add_option("--split", ea.split, "test, train or all");

  auto* c = app.add_subcommand("config", "inspect configuration");
  bool print_defaults = false;
  std::string check_path;
  c->add_flag("--print-defaults", print_defaults, "print every key with its default");
  c->add_option("--check", check_path, "validate a config file and print the resolved values");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& pe) {
    const int code = app.exit(pe, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }
  if (threads) common.threads = threads;
  try {
    if (*g) {
      if (*n_opt) ga.n = n;
      if (*nt_opt) ga.n_test = n_test;
      if (*seed_opt) ga.seed = seed;
      return gen_cohort(common, ga, err);
    }
    if (*t) return train(common, ta, err);
    if (*s) {
      if (*sseed_opt) sa.seed = sample_seed;
      return sample_cmd(common, sa, err);
    }
    if (*e) return evaluate_cmd(common, ea, err);
    if (*c) {
      if (print_defaults == !check_path.empty()) throw UsageError("config: give exactly one of --print-defaults, --check");
      out << format_config(print_defaults ? RunConfig{} : load_config(check_path));
      return kExitOk;
    }
  } catch (const UsageError& ex) {
    err << "usage error: " << ex.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& ex) {
    err << "config error: " << ex.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace surf2ct::cli
