// Command-line front end: dataset generation, training, attack crafting,
// campaign orchestration, sweeps, analyses, defenses and metrics.
//
// Exit codes: 0 success, 1 configuration error, 2 runtime error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "gradcast/attack.hpp"
#include "gradcast/campaign.hpp"
#include "gradcast/config.hpp"
#include "gradcast/dataset.hpp"
#include "gradcast/defenses.hpp"
#include "gradcast/metrics.hpp"
#include "gradcast/net3d.hpp"
#include "gradcast/rng.hpp"

namespace fs = std::filesystem;
using namespace gradcast;
using ordered_json = nlohmann::ordered_json;

namespace {

constexpr const char* kOutputRootEnv = "GRADCAST_OUTPUT_ROOT";

// Relative output paths land under $GRADCAST_OUTPUT_ROOT when it is set.
fs::path resolve_out(const fs::path& p) {
  if (p.is_absolute()) return p;
  if (const char* root = std::getenv(kOutputRootEnv); root && *root)
    return fs::path(root) / p;
  return p;
}

ConfigMap load_config(const std::string& config_path, const std::vector<std::string>& sets) {
  ConfigMap map;
  if (!config_path.empty()) map = parse_config_file(config_path);
  apply_overrides(map, sets);
  return map;
}

DatasetSpec dataset_spec_from(const ConfigMap& map) {
  CampaignConfig cfg = campaign_config_from_map(map);
  return cfg.dataset;
}

// Dataset resolution shared by train/flow-analysis/defend: a saved dataset
// dir when configured, otherwise deterministic regeneration from the spec.
Dataset resolve_dataset(const ConfigMap& map) {
  const std::string dir = map.get("dataset.dir");
  if (!dir.empty()) return load_dataset_dir(dir);
  return generate_dataset(dataset_spec_from(map));
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << text;
}

int run_gen_data(const ConfigMap& map, const std::string& out_dir) {
  const Dataset ds = generate_dataset(dataset_spec_from(map));
  const fs::path dir = resolve_out(out_dir);
  save_dataset(ds, dir);
  std::cout << "wrote " << ds.train.size() << " train / " << ds.test.size() << " test clips to "
            << dir.string() << "\n";
  return 0;
}

int run_train(const ConfigMap& map, const std::string& out_model, const std::string& log_path) {
  const Dataset ds = resolve_dataset(map);
  Model3D model = make_micro_c3d(ds.spec.num_classes, map.get_u64("train.init_seed", 1),
                                 ds.spec.t, ds.spec.c, ds.spec.h, ds.spec.w);
  TrainOptions opts;
  opts.epochs = map.get_int("train.epochs", 30);
  opts.lr = map.get_double("train.lr", 0.01);
  opts.seed = map.get_u64("train.seed", 0);
  opts.batch_size = map.get_int("train.batch_size", 8);
  opts.target_accuracy = map.get_double("train.target_accuracy", -1.0);
  const TrainLog log = train(model, ds.train, opts);

  const fs::path model_path = resolve_out(out_model);
  if (model_path.has_parent_path()) fs::create_directories(model_path.parent_path());
  save_model(model, model_path);

  ordered_json j;
  j["epochs_run"] = log.epochs_run;
  j["loss"] = log.loss;
  j["accuracy"] = log.accuracy;
  j["test_accuracy"] = evaluate_accuracy(model, ds.test);
  if (!log_path.empty()) write_text(resolve_out(log_path), j.dump(2) + "\n");
  std::cout << "trained " << log.epochs_run << " epochs; final train accuracy "
            << log.accuracy.back() << "; saved " << model_path.string() << "\n";
  return 0;
}

int run_attack_cmd(const ConfigMap& map, const std::string& clean_path,
                   const std::string& attack_path, const std::string& adv_out,
                   const std::string& json_out) {
  const CampaignConfig cfg = campaign_config_from_map(map);
  if (cfg.source_model.empty())
    throw std::invalid_argument("attack: source_model is required (config key source_model)");
  const Model3D source = load_model(cfg.source_model);
  const VideoTensor clean = load_video(clean_path);

  AdversarialResult result;
  if (cfg.attack_kind == AttackKind::UniformNoise) {
    result = random_noise_baseline(clean, cfg.attack.budget, cfg.attack.seed);
  } else {
    if (attack_path.empty())
      throw std::invalid_argument("attack: --attack-video is required for map attacks");
    const VideoTensor attack_vid = load_video(attack_path);
    result = craft_attack(clean, attack_vid, source, cfg.attack);
  }

  const fs::path adv_path = resolve_out(adv_out);
  if (adv_path.has_parent_path()) fs::create_directories(adv_path.parent_path());
  save_video(result.adv, adv_path);
  if (!json_out.empty()) write_text(resolve_out(json_out), adversarial_result_json(result));
  std::cout << "adversarial video written to " << adv_path.string() << " (|delta|_inf "
            << result.delta_inf_norm << ", queries " << result.queries << ")\n";
  return 0;
}

int run_campaign_cmd(const ConfigMap& map) {
  CampaignConfig cfg = campaign_config_from_map(map);
  if (!cfg.output_dir.empty()) cfg.output_dir = resolve_out(cfg.output_dir).string();
  const CampaignReport report = run_campaign(cfg);
  std::cout << report.summary_json;
  return 0;
}

int run_sweep(const ConfigMap& map, const std::string& alphas_csv) {
  CampaignConfig cfg = campaign_config_from_map(map);
  if (!cfg.output_dir.empty()) cfg.output_dir = resolve_out(cfg.output_dir).string();
  std::vector<double> alphas;
  std::size_t pos = 0;
  while (pos < alphas_csv.size()) {
    std::size_t comma = alphas_csv.find(',', pos);
    if (comma == std::string::npos) comma = alphas_csv.size();
    alphas.push_back(std::stod(alphas_csv.substr(pos, comma - pos)));
    pos = comma + 1;
  }
  const SweepTable table = alpha_sweep(cfg, alphas);
  std::cout << table.csv;
  return 0;
}

int run_flow_analysis(const ConfigMap& map, int levels, const std::string& out_csv,
                      const std::string& profile_dir) {
  const CampaignConfig cfg = campaign_config_from_map(map);
  if (cfg.victim_model.empty())
    throw std::invalid_argument("flow-analysis: victim_model (or source_model) is required");
  const Model3D model = load_model(cfg.victim_model);
  const Dataset ds = resolve_dataset(map);
  std::vector<VideoTensor> videos;
  for (const auto& clip : ds.test) videos.push_back(clip.video);

  if (!profile_dir.empty()) {
    const fs::path dir = resolve_out(profile_dir);
    fs::create_directories(dir);
    for (std::size_t i = 0; i < videos.size(); ++i) {
      char name[32];
      std::snprintf(name, sizeof(name), "profile_%03zu.csv", i);
      write_text(dir / name, flow_profile_csv(max_flow_frame(videos[i], cfg.attack.flow)));
    }
  }

  const FlowLevelHistogram hist =
      flow_level_analysis(model, videos, levels, cfg.attack.budget, cfg.attack.flow);
  if (!out_csv.empty()) write_text(resolve_out(out_csv), hist.csv);
  std::cout << hist.csv;

  const GradientNormReport norms = gradient_norm_analysis(model, videos, cfg.seed,
                                                          cfg.attack.flow);
  if (!out_csv.empty()) {
    fs::path norm_path = resolve_out(out_csv);
    norm_path.replace_extension(".norms.csv");
    write_text(norm_path, norms.csv);
  }
  return 0;
}

// Pairs a campaign's saved adversarial clips with their clean test clips.
std::vector<std::pair<LabeledClip, VideoTensor>> load_campaign_pairs(
    const ConfigMap& map, const fs::path& campaign_dir, bool successful_only) {
  const Dataset ds = resolve_dataset(map);
  std::ifstream csv(campaign_dir / "per_video.csv");
  if (!csv)
    throw std::runtime_error("defend: missing per_video.csv in " + campaign_dir.string());
  std::string line;
  std::getline(csv, line);  // header
  std::vector<std::pair<LabeledClip, VideoTensor>> pairs;
  while (std::getline(csv, line)) {
    if (line.empty()) continue;
    const auto first_comma = line.find(',');
    const auto last_comma = line.rfind(',');
    const std::string id = line.substr(0, first_comma);
    const bool success = line.substr(last_comma + 1) == "1";
    if (successful_only && !success) continue;
    const LabeledClip* clean = nullptr;
    for (std::size_t i = 0; i < ds.test_meta.size(); ++i)
      if (ds.test_meta[i].id == id) clean = &ds.test[i];
    if (!clean) throw std::runtime_error("defend: clip id not in dataset test split: " + id);
    pairs.push_back({*clean, load_video(campaign_dir / "adv" / (id + ".vten"))});
  }
  return pairs;
}

int run_defend(const ConfigMap& map, const std::string& campaign_dir,
               const std::string& defense_arg, bool train_dp, const std::string& pattern_out,
               const std::string& report_out) {
  const CampaignConfig cfg = campaign_config_from_map(map);
  const std::string victim_path = cfg.victim_model.empty() ? cfg.source_model : cfg.victim_model;
  if (victim_path.empty())
    throw std::invalid_argument("defend: victim_model (or source_model) is required");
  const Model3D victim = load_model(victim_path);
  const auto pairs = load_campaign_pairs(map, campaign_dir, true);
  if (pairs.empty()) throw std::runtime_error("defend: campaign has no successful attacks");

  ordered_json j;
  j["campaign"] = campaign_dir;
  j["pairs"] = pairs.size();

  if (train_dp) {
    std::vector<std::pair<VideoTensor, int>> adv_train;
    for (const auto& [clean, adv] : pairs) adv_train.emplace_back(adv, clean.label);
    const int epochs = map.get_int("defense.epochs", 20);
    const double lr = map.get_double("defense.lr", 0.05);
    const double budget = map.get_double("defense.budget", 0.1);
    const std::uint64_t seed = map.get_u64("defense.seed", 0);
    const DefensePattern pattern =
        train_defense_pattern(victim, adv_train, epochs, lr, budget, seed);
    const fs::path vten = resolve_out(pattern_out.empty() ? "defense_pattern.vten" : pattern_out);
    fs::path meta = vten;
    meta.replace_extension(".json");
    if (vten.has_parent_path()) fs::create_directories(vten.parent_path());
    save_defense_pattern(pattern, vten, meta);
    j["pattern"] = vten.string();
    j["loss_log"] = pattern.loss_log;
    j["residual_asr"] = residual_asr(victim, Defense{pattern}, pairs);
  } else {
    if (defense_arg.empty())
      throw std::invalid_argument("defend: --defense SPEC or --train-dp is required");
    ConfigMap one;
    one.set("defense", defense_arg);
    const CampaignConfig parsed = campaign_config_from_map(one);
    const DefenseSpec& spec = parsed.defenses.front();
    Defense defense;
    if (spec.name == "ts") {
      defense = spec.shuffle;
    } else {
      fs::path vten = spec.pattern_path;
      fs::path meta = vten;
      meta.replace_extension(".json");
      defense = load_defense_pattern(vten, meta);
    }
    j["defense"] = defense_arg;
    j["residual_asr"] = residual_asr(victim, defense, pairs);
  }

  const std::string text = j.dump(2) + "\n";
  if (!report_out.empty()) write_text(resolve_out(report_out), text);
  std::cout << text;
  return 0;
}

int run_metrics(const std::string& ref_path, const std::string& cmp_path,
                const std::string& out_json) {
  const VideoTensor ref = load_video(ref_path);
  const VideoTensor cmp = load_video(cmp_path);
  ordered_json j;
  j["ssim"] = ssim(ref, cmp);
  const double p = psnr(ref, cmp);
  if (std::isinf(p))
    j["psnr_db"] = "inf";
  else
    j["psnr_db"] = p;
  j["ti_ref"] = ref.t >= 2 ? temporal_inconsistency(ref) : 0.0;
  j["ti_cmp"] = cmp.t >= 2 ? temporal_inconsistency(cmp) : 0.0;
  const std::string text = j.dump(2) + "\n";
  if (!out_json.empty()) write_text(resolve_out(out_json), text);
  std::cout << text;
  return 0;
}

int run_visualize(const ConfigMap& map, const std::string& video_path, int conv_layer,
                  int class_idx, const std::string& out_pgm) {
  const CampaignConfig cfg = campaign_config_from_map(map);
  const std::string model_path = cfg.victim_model.empty() ? cfg.source_model : cfg.victim_model;
  if (model_path.empty())
    throw std::invalid_argument("visualize: victim_model (or source_model) is required");
  const Model3D model = load_model(model_path);
  const VideoTensor v = load_video(video_path);
  const int cls = class_idx >= 0 ? class_idx : predict(model, v);
  const GradientMap map_out = grad_cam(model, v, conv_layer, cls);
  GrayFrame heat = GrayFrame::zeros(map_out.h, map_out.w);
  for (int y = 0; y < map_out.h; ++y)
    for (int x = 0; x < map_out.w; ++x) heat.at(y, x) = map_out.at(0, y, x);
  const fs::path out = resolve_out(out_pgm);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  save_pgm(heat, out);
  std::cout << "grad-cam heatmap (class " << cls << ", layer " << conv_layer << ") -> "
            << out.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"zero-query video adversarial attack toolkit"};
  app.require_subcommand(1);
  app.fallthrough();  // global --config/--set may follow the subcommand

  std::string config_path;
  std::vector<std::string> sets;
  app.add_option("--config", config_path, "key=value configuration file")->expected(1);
  app.add_option("--set", sets, "override a config key (key=value, repeatable)");

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset");
  std::string gen_out;
  gen->add_option("--out", gen_out, "output dataset directory")->required();

  auto* tr = app.add_subcommand("train", "train a classifier on the dataset");
  std::string train_out = "model.m3dc", train_log;
  tr->add_option("--out", train_out, "checkpoint path");
  tr->add_option("--log", train_log, "training log JSON path");

  auto* atk = app.add_subcommand("attack", "craft one adversarial video");
  std::string clean_path, attack_path, adv_out = "adv.vten", adv_json;
  atk->add_option("--clean", clean_path, "clean video (.vten or frame dir)")->required();
  atk->add_option("--attack-video", attack_path, "attack video supplying the gradient map");
  atk->add_option("--out-adv", adv_out, "output adversarial .vten");
  atk->add_option("--out-json", adv_json, "output result JSON sidecar");

  auto* camp = app.add_subcommand("campaign", "run a full attack campaign");

  auto* sweep = app.add_subcommand("sweep-alpha", "campaigns across injection strengths");
  std::string alphas = "0.1,0.4,0.8,1.0";
  sweep->add_option("--alphas", alphas, "comma-separated alpha values");

  auto* flow = app.add_subcommand("flow-analysis", "per-frame attack success by flow level");
  int levels = 5;
  std::string flow_csv, profile_dir;
  flow->add_option("--levels", levels, "number of flow-magnitude levels");
  flow->add_option("--out", flow_csv, "histogram CSV path");
  flow->add_option("--profile-dir", profile_dir, "dump per-video flow profiles here");

  auto* def = app.add_subcommand("defend", "evaluate defenses on a finished campaign");
  std::string campaign_dir, defense_arg, pattern_out, defend_report;
  bool train_dp = false;
  def->add_option("--campaign", campaign_dir, "campaign output directory")->required();
  def->add_option("--defense", defense_arg, "defense spec, e.g. ts,h1=4,h2=2,seed=3");
  def->add_flag("--train-dp", train_dp, "train a defense pattern on the successful attacks");
  def->add_option("--out-pattern", pattern_out, "where to store a trained pattern");
  def->add_option("--report", defend_report, "defense report JSON path");

  auto* met = app.add_subcommand("metrics", "pairwise clip comparison");
  std::string ref_path, cmp_path, metrics_out;
  met->add_option("--ref", ref_path, "reference video")->required();
  met->add_option("--cmp", cmp_path, "comparison video")->required();
  met->add_option("--out", metrics_out, "metrics JSON path");

  auto* vis = app.add_subcommand("visualize", "grad-cam heatmap dump as PGM");
  std::string vis_video, vis_out = "heatmap.pgm";
  int vis_layer = 0, vis_class = -1;
  vis->add_option("--video", vis_video, "input video")->required();
  vis->add_option("--layer", vis_layer, "Conv3d layer index");
  vis->add_option("--class", vis_class, "class index (-1: predicted)");
  vis->add_option("--out", vis_out, "output PGM path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    const ConfigMap map = load_config(config_path, sets);
    if (gen->parsed()) return run_gen_data(map, gen_out);
    if (tr->parsed()) return run_train(map, train_out, train_log);
    if (atk->parsed()) return run_attack_cmd(map, clean_path, attack_path, adv_out, adv_json);
    if (camp->parsed()) return run_campaign_cmd(map);
    if (sweep->parsed()) return run_sweep(map, alphas);
    if (flow->parsed()) return run_flow_analysis(map, levels, flow_csv, profile_dir);
    if (def->parsed())
      return run_defend(map, campaign_dir, defense_arg, train_dp, pattern_out, defend_report);
    if (met->parsed()) return run_metrics(ref_path, cmp_path, metrics_out);
    if (vis->parsed()) return run_visualize(map, vis_video, vis_layer, vis_class, vis_out);
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
