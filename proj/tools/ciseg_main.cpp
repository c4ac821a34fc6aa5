#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "ciseg/checkpoint.hpp"
#include "ciseg/config.hpp"
#include "ciseg/data.hpp"
#include "ciseg/plot.hpp"
#include "ciseg/trainer.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

using ciseg::ExperimentConfig;

// precedence: --seed flag > CISEG_SEED env > config file
void apply_seed_override(ExperimentConfig& cfg, bool seed_flag_given, uint64_t flag_seed) {
  if (seed_flag_given) {
    cfg.seed = flag_seed;
    return;
  }
  if (const char* env = std::getenv("CISEG_SEED")) {
    try {
      cfg.seed = std::stoull(env);
    } catch (...) {
      throw ciseg::ConfigError("CISEG_SEED is not an integer: " + std::string(env));
    }
  }
}

void print_eval_table(const ciseg::MetricsRecord& rec, const ciseg::Protocol& proto, bool instance) {
  std::printf("step %d  iteration %d\n", rec.step, rec.iteration);
  std::printf("  %-22s %8s\n", "group", instance ? "ap50" : "miou");
  std::printf("  %-22s %8.4f\n", "old", instance ? rec.ap50_old : rec.miou_old);
  std::printf("  %-22s %8.4f\n", "new", instance ? rec.ap50_new : rec.miou_new);
  std::printf("  %-22s %8.4f\n", "all", instance ? rec.ap50 : rec.miou_all);
  std::printf("  per-class:\n");
  for (const auto& [cls, v] : rec.per_class_iou) {
    int step_of = -1;
    for (int s = 0; s < proto.steps; ++s) {
      const auto& sc = proto.step_classes[size_t(s)];
      if (std::find(sc.begin(), sc.end(), cls) != sc.end()) step_of = s;
    }
    std::printf("    %-12s (id %d, step %d)  %8.4f\n", ciseg::shape_name(cls), cls, step_of, v);
  }
}

int run_train(const std::string& config_path, bool seed_given, uint64_t seed,
              const std::string& out_override, const std::string& resume) {
  ExperimentConfig cfg = ExperimentConfig::from_file(config_path);
  apply_seed_override(cfg, seed_given, seed);
  if (!out_override.empty()) cfg.output_dir = out_override;
  ciseg::TrainConfig tc = cfg.to_train_config();

  std::filesystem::create_directories(cfg.output_dir);
  std::ofstream cf(std::filesystem::path(cfg.output_dir) / "config.json");
  cf << cfg.to_json_text() << "\n";

  std::fprintf(stderr, "[train] protocol=%s mode=%s seed=%llu hash=%s out=%s\n",
               cfg.protocol_name.c_str(), cfg.mode.c_str(),
               static_cast<unsigned long long>(cfg.seed), tc.config_hash.c_str(),
               cfg.output_dir.c_str());
  ciseg::TrainResult res = ciseg::train_continual(tc, resume);
  for (const auto& rec : res.end_of_step)
    std::fprintf(stderr, "[train] step %d done: miou all=%.4f old=%.4f new=%.4f\n", rec.step,
                 rec.miou_all, rec.miou_old, rec.miou_new);

  if (cfg.plots) {
    ciseg::render_run_plots(
        (std::filesystem::path(cfg.output_dir) / "metrics.jsonl").string(),
        (std::filesystem::path(cfg.output_dir) / "losses.jsonl").string(),
        (std::filesystem::path(cfg.output_dir) / "plots").string());
  }
  return kExitOk;
}

int run_eval(const std::string& config_path, const std::string& checkpoint_path, int step) {
  ExperimentConfig cfg = ExperimentConfig::from_file(config_path);
  ciseg::TrainConfig tc = cfg.to_train_config();
  ciseg::LoadedCheckpoint lc = ciseg::checkpoint_load(checkpoint_path);
  if (lc.config_hash != tc.config_hash) {
    std::fprintf(stderr,
                 "eval: config hash mismatch\n  checkpoint: %s\n  config:     %s\n",
                 lc.config_hash.c_str(), tc.config_hash.c_str());
    return kExitConfig;
  }
  if (step < 0) step = lc.step;
  if (step > lc.step) {
    std::fprintf(stderr, "eval: checkpoint covers steps 0..%d, requested %d\n", lc.step, step);
    return kExitConfig;
  }
  ciseg::MetricsRecord rec =
      ciseg::evaluate_model(*lc.model, *lc.queue, tc, step, 0, ciseg::resolve_threads(tc.threads));
  print_eval_table(rec, tc.protocol, tc.mode == ciseg::TaskMode::kInstance);
  return kExitOk;
}

int run_generate_data(const std::string& protocol, const std::string& setting, uint64_t seed,
                      const std::string& out, int size, int test_size, const std::string& mode,
                      int image_size) {
  ciseg::Protocol proto = ciseg::build_protocol(
      protocol, setting == "disjoint" ? ciseg::Setting::kDisjoint : ciseg::Setting::kOverlapped,
      seed);
  ciseg::TaskMode tm = mode == "instance" ? ciseg::TaskMode::kInstance : ciseg::TaskMode::kSemantic;
  ciseg::write_dataset_cache(out, proto, tm, ciseg::mix_seed(seed, 5), size, test_size, image_size,
                             image_size);
  ciseg::CacheManifest m = ciseg::read_cache_manifest(out);
  std::printf("wrote cache to %s\n", out.c_str());
  std::printf("  protocol %s (%d steps), %s, %s\n", m.protocol_name.c_str(), m.steps,
              m.setting.c_str(), m.mode.c_str());
  std::printf("  %d train / %d test scenes per step, %dx%d\n", m.train_size, m.test_size, m.height,
              m.width);
  for (int s = 0; s < m.steps; ++s)
    std::printf("  step %d: %zu classes\n", s, proto.step_classes[size_t(s)].size());
  return kExitOk;
}

int run_ablate(const std::string& config_path, const std::string& grid,
               const std::string& out_override) {
  ExperimentConfig base = ExperimentConfig::from_file(config_path);
  if (!out_override.empty()) base.output_dir = out_override;

  std::vector<std::string> flags;
  std::stringstream gs(grid);
  std::string tok;
  while (std::getline(gs, tok, ',')) {
    if (tok != "freeze_queries" && tok != "independent_match" && tok != "use_query_kd" &&
        tok != "use_class_kd" && tok != "use_mask_kd" && tok != "use_pod_kd")
      throw ciseg::ConfigError("ablate: unknown flag '" + tok + "'");
    flags.push_back(tok);
  }
  if (flags.empty()) throw ciseg::ConfigError("ablate: empty grid");
  if (flags.size() > 6) throw ciseg::ConfigError("ablate: grid too large");

  auto set_flag = [](ciseg::AblationFlags& a, const std::string& name, bool v) {
    if (name == "freeze_queries") a.freeze_queries = v;
    else if (name == "independent_match") a.independent_match = v;
    else if (name == "use_query_kd") a.use_query_kd = v;
    else if (name == "use_class_kd") a.use_class_kd = v;
    else if (name == "use_mask_kd") a.use_mask_kd = v;
    else a.use_pod_kd = v;
  };

  nlohmann::ordered_json table = nlohmann::ordered_json::array();
  std::printf("%-40s %10s %10s %10s\n", "variant", "miou_old", "miou_new", "miou_all");
  const int combos = 1 << flags.size();
  for (int bits = 0; bits < combos; ++bits) {
    ExperimentConfig run_cfg = base;
    std::string variant;
    for (size_t i = 0; i < flags.size(); ++i) {
      bool on = (bits >> i) & 1;
      set_flag(run_cfg.ablations, flags[i], on);
      variant += (variant.empty() ? "" : ",") + flags[i] + "=" + (on ? "1" : "0");
    }
    run_cfg.seed = ciseg::mix_seed(base.seed, uint64_t(bits) + 0xAB1A7Eull);
    run_cfg.output_dir =
        (std::filesystem::path(base.output_dir) / ("ablate_" + std::to_string(bits))).string();
    ciseg::TrainConfig tc = run_cfg.to_train_config();
    std::filesystem::create_directories(run_cfg.output_dir);
    std::ofstream cf(std::filesystem::path(run_cfg.output_dir) / "config.json");
    cf << run_cfg.to_json_text() << "\n";
    ciseg::TrainResult res = ciseg::train_continual(tc);
    const auto& fin = res.end_of_step.back();
    std::printf("%-40s %10.4f %10.4f %10.4f\n", variant.c_str(), fin.miou_old, fin.miou_new,
                fin.miou_all);
    table.push_back({{"variant", variant},
                     {"seed", run_cfg.seed},
                     {"miou_old", fin.miou_old},
                     {"miou_new", fin.miou_new},
                     {"miou_all", fin.miou_all},
                     {"ap50", fin.ap50}});
  }
  std::ofstream tf(std::filesystem::path(base.output_dir) / "ablation_table.json");
  tf << table.dump(2) << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"continual shapes segmentation experiment runner"};
  app.require_subcommand(1);

  // generate-data
  auto* gen = app.add_subcommand("generate-data", "materialize the dataset cache");
  std::string g_protocol = "6-2 (3 steps)", g_setting = "overlapped", g_out = "data_cache",
              g_mode = "semantic";
  uint64_t g_seed = 0;
  int g_size = 500, g_test_size = 64, g_image = 64;
  gen->add_option("--protocol", g_protocol, "protocol name, e.g. '6-2 (3 steps)'");
  gen->add_option("--setting", g_setting)->check(CLI::IsMember({"overlapped", "disjoint"}));
  gen->add_option("--seed", g_seed);
  gen->add_option("--out", g_out);
  gen->add_option("--size", g_size, "train scenes per step");
  gen->add_option("--test-size", g_test_size);
  gen->add_option("--mode", g_mode)->check(CLI::IsMember({"semantic", "instance"}));
  gen->add_option("--image-size", g_image);

  // train
  auto* train = app.add_subcommand("train", "run continual training from a config");
  std::string t_config, t_out, t_resume;
  uint64_t t_seed = 0;
  bool t_seed_given = false;
  train->add_option("--config", t_config)->required();
  auto* seed_opt = train->add_option("--seed", t_seed, "overrides config and CISEG_SEED");
  train->add_option("--out", t_out, "overrides output_dir");
  train->add_option("--resume", t_resume, "checkpoint to continue from");
  (void)seed_opt;

  // eval
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string e_config, e_ckpt;
  int e_step = -1;
  eval->add_option("--config", e_config)->required();
  eval->add_option("--checkpoint", e_ckpt)->required();
  eval->add_option("--step", e_step, "defaults to the checkpoint's step");

  // ablate
  auto* ablate = app.add_subcommand("ablate", "train every combination of the flag grid");
  std::string a_config, a_grid, a_out;
  ablate->add_option("--config", a_config)->required();
  ablate->add_option("--grid", a_grid, "comma-separated ablation flags")->required();
  ablate->add_option("--out", a_out);

  // plot
  auto* plot = app.add_subcommand("plot", "render metric curves to png");
  std::string p_metrics, p_losses, p_out = "plots";
  plot->add_option("--metrics", p_metrics)->required();
  plot->add_option("--losses", p_losses, "losses.jsonl (defaults to metrics sibling)");
  plot->add_option("--out", p_out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*gen)
      return run_generate_data(g_protocol, g_setting, g_seed, g_out, g_size, g_test_size, g_mode,
                               g_image);
    if (*train) {
      t_seed_given = train->count("--seed") > 0;
      return run_train(t_config, t_seed_given, t_seed, t_out, t_resume);
    }
    if (*eval) return run_eval(e_config, e_ckpt, e_step);
    if (*ablate) return run_ablate(a_config, a_grid, a_out);
    if (*plot) {
      if (p_losses.empty())
        p_losses =
            (std::filesystem::path(p_metrics).parent_path() / "losses.jsonl").string();
      ciseg::render_run_plots(p_metrics, p_losses, p_out);
      return kExitOk;
    }
  } catch (const ciseg::ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
  return kExitOk;
}
