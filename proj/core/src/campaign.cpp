#include "gradcast/campaign.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "gradcast/rng.hpp"
#include "json.hpp"

namespace gradcast {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace {

std::string fmt(double v, const char* spec = "%.6f") {
  char buf[64];
  std::snprintf(buf, sizeof(buf), spec, v);
  return buf;
}

std::string variant_name(AttackVariant v) {
  switch (v) {
    case AttackVariant::MaxFlow: return "max_flow";
    case AttackVariant::RandomFrame: return "random_frame";
    case AttackVariant::FullFrames: return "full_frames";
  }
  return "unknown";
}

AttackVariant variant_from_name(const std::string& s) {
  if (s == "max_flow") return AttackVariant::MaxFlow;
  if (s == "random_frame") return AttackVariant::RandomFrame;
  if (s == "full_frames") return AttackVariant::FullFrames;
  throw std::invalid_argument("unknown attack variant: " + s);
}

std::string selector_name(AttackSelector s) {
  switch (s) {
    case AttackSelector::Seeded: return "seeded";
    case AttackSelector::SsimSimilar: return "ssim";
    case AttackSelector::CosineSimilar: return "cosine";
  }
  return "unknown";
}

// "k1=v1,k2=v2" fragments inside a defense value.
std::vector<std::pair<std::string, std::string>> parse_kv_list(const std::string& s) {
  std::vector<std::pair<std::string, std::string>> out;
  std::size_t pos = 0;
  while (pos < s.size()) {
    std::size_t comma = s.find(',', pos);
    if (comma == std::string::npos) comma = s.size();
    const std::string item = s.substr(pos, comma - pos);
    if (!item.empty()) {
      const auto eq = item.find('=');
      if (eq == std::string::npos)
        out.emplace_back(item, "");
      else
        out.emplace_back(item.substr(0, eq), item.substr(eq + 1));
    }
    pos = comma + 1;
  }
  return out;
}

DefenseSpec parse_defense(const std::string& value) {
  const auto kvs = parse_kv_list(value);
  if (kvs.empty()) throw std::invalid_argument("defense: empty specification");
  DefenseSpec spec;
  spec.name = kvs.front().first;
  if (spec.name != "ts" && spec.name != "dp")
    throw std::invalid_argument("defense: expected 'ts' or 'dp', got '" + spec.name + "'");
  for (std::size_t i = 1; i < kvs.size(); ++i) {
    const auto& [k, v] = kvs[i];
    if (k == "h1") spec.shuffle.h1 = std::stoi(v);
    else if (k == "h2") spec.shuffle.h2 = std::stoi(v);
    else if (k == "seed") { spec.shuffle.seed = std::stoull(v); spec.seed = spec.shuffle.seed; }
    else if (k == "path") spec.pattern_path = v;
    else if (k == "train") spec.train = true;
    else if (k == "epochs") spec.epochs = std::stoi(v);
    else if (k == "lr") spec.lr = std::stod(v);
    else if (k == "budget") spec.budget = std::stod(v);
    else throw std::invalid_argument("defense: unknown field '" + k + "'");
  }
  if (spec.name == "dp" && !spec.train && spec.pattern_path.empty())
    throw std::invalid_argument("defense dp: needs path=... or train");
  return spec;
}

}  // namespace

CampaignConfig campaign_config_from_map(const ConfigMap& map) {
  CampaignConfig cfg;
  cfg.dataset.num_classes = map.get_int("dataset.num_classes", cfg.dataset.num_classes);
  cfg.dataset.clips_per_class = map.get_int("dataset.clips_per_class", cfg.dataset.clips_per_class);
  cfg.dataset.t = map.get_int("dataset.t", cfg.dataset.t);
  cfg.dataset.c = map.get_int("dataset.c", cfg.dataset.c);
  cfg.dataset.h = map.get_int("dataset.h", cfg.dataset.h);
  cfg.dataset.w = map.get_int("dataset.w", cfg.dataset.w);
  cfg.dataset.noise_std = map.get_double("dataset.noise_std", cfg.dataset.noise_std);
  cfg.dataset.seed = map.get_u64("dataset.seed", cfg.dataset.seed);
  if (map.has("dataset.motion_kinds")) {
    cfg.dataset.motion_kinds.clear();
    for (const auto& [k, v] : parse_kv_list(map.get("dataset.motion_kinds")))
      cfg.dataset.motion_kinds.push_back(motion_kind_from_name(k));
  }
  cfg.dataset_dir = map.get("dataset.dir");
  cfg.external_dir = map.get("dataset.external_dir");
  cfg.source_model = map.get("source_model");
  cfg.victim_model = map.get("victim_model", cfg.source_model);

  const std::string kind = map.get("attack.kind", "map");
  if (kind == "map") cfg.attack_kind = AttackKind::GradientMap;
  else if (kind == "noise") cfg.attack_kind = AttackKind::UniformNoise;
  else throw std::invalid_argument("attack.kind must be 'map' or 'noise'");

  cfg.attack.variant = variant_from_name(map.get("attack.variant", "max_flow"));
  const std::string mk = map.get("attack.map", "guided");
  if (mk == "guided") cfg.attack.map_kind = MapKind::GuidedBackprop;
  else if (mk == "gradcam") cfg.attack.map_kind = MapKind::GradCam;
  else throw std::invalid_argument("attack.map must be 'guided' or 'gradcam'");
  cfg.attack.budget.alpha = static_cast<float>(map.get_double("attack.alpha", 0.4));
  cfg.attack.budget.epsilon = static_cast<float>(map.get_double("attack.epsilon", 0.5));
  cfg.attack.layer = map.get_int("attack.layer", -1);
  cfg.attack.class_idx = map.get_int("attack.class", -1);
  cfg.attack.seed = map.get_u64("attack.seed", 0);

  const std::string sel = map.get("attack.selector", "seeded");
  if (sel == "seeded") cfg.selector = AttackSelector::Seeded;
  else if (sel == "ssim") cfg.selector = AttackSelector::SsimSimilar;
  else if (sel == "cosine") cfg.selector = AttackSelector::CosineSimilar;
  else throw std::invalid_argument("attack.selector must be seeded|ssim|cosine");

  for (const std::string& d : map.get_all("defense")) cfg.defenses.push_back(parse_defense(d));
  cfg.output_dir = map.get("output_dir");
  cfg.seed = map.get_u64("seed", 0);
  cfg.save_adv = map.get_int("save_adv", 1) != 0;
  return cfg;
}

namespace {

struct TestPool {
  std::vector<LabeledClip> clips;
  std::vector<std::string> ids;
};

TestPool resolve_test_pool(const CampaignConfig& cfg, const Model3D& victim) {
  TestPool pool;
  if (!cfg.external_dir.empty()) {
    pool.clips = load_external_dataset(cfg.external_dir, victim.in_t, victim.in_c, victim.in_h,
                                       victim.in_w);
    for (std::size_t i = 0; i < pool.clips.size(); ++i) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "ext_%03zu", i);
      pool.ids.push_back(buf);
    }
    return pool;
  }
  Dataset ds = cfg.dataset_dir.empty() ? generate_dataset(cfg.dataset)
                                       : load_dataset_dir(cfg.dataset_dir);
  pool.clips = std::move(ds.test);
  for (const auto& m : ds.test_meta) pool.ids.push_back(m.id);
  return pool;
}

VideoTensor middle_frame_clip(const VideoTensor& v) {
  return broadcast_temporal(v.frame(v.t / 2), 1);
}

double cosine_similarity(const Frame& a, const Frame& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.data.size() && i < b.data.size(); ++i) {
    dot += static_cast<double>(a.data[i]) * b.data[i];
    na += static_cast<double>(a.data[i]) * a.data[i];
    nb += static_cast<double>(b.data[i]) * b.data[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

// Picks an attack-video index from the pool for each victim clip.
std::vector<int> select_attack_indices(const CampaignConfig& cfg, const TestPool& pool,
                                       const std::vector<int>& victim_pool_idx) {
  const int n = static_cast<int>(pool.clips.size());
  std::vector<int> out;
  out.reserve(victim_pool_idx.size());
  if (cfg.selector == AttackSelector::Seeded) {
    Rng rng(mix_seed(cfg.seed, 0x5e1ec7));
    const int designated = n > 0 ? rng.uniform_int(n) : 0;
    for (int vi : victim_pool_idx)
      out.push_back(vi == designated ? (designated + 1) % n : designated);
    return out;
  }
  for (int vi : victim_pool_idx) {
    const VideoTensor mid_v = middle_frame_clip(pool.clips[vi].video);
    const Frame mid_vf = pool.clips[vi].video.frame(pool.clips[vi].video.t / 2);
    int best = -1;
    double best_score = -std::numeric_limits<double>::infinity();
    for (int k = 0; k < n; ++k) {
      if (k == vi) continue;
      double score = 0.0;
      if (cfg.selector == AttackSelector::SsimSimilar)
        score = ssim(mid_v, middle_frame_clip(pool.clips[k].video));
      else
        score = cosine_similarity(mid_vf, pool.clips[k].video.frame(pool.clips[k].video.t / 2));
      if (score > best_score) {
        best_score = score;
        best = k;
      }
    }
    out.push_back(best >= 0 ? best : vi);
  }
  return out;
}

void expect_counter(const char* phase, std::uint64_t before, std::uint64_t after,
                    std::uint64_t expected) {
  if (after - before != expected)
    throw std::logic_error(std::string("victim query accounting broken in phase '") + phase +
                           "': got " + std::to_string(after - before) + ", expected " +
                           std::to_string(expected));
}

std::string psnr_csv_field(double psnr_db) {
  if (std::isinf(psnr_db)) return "inf";
  return fmt(psnr_db, "%.4f");
}

}  // namespace

std::string adversarial_result_json(const AdversarialResult& r) {
  ordered_json j;
  j["delta_inf_norm"] = r.delta_inf_norm;
  if (r.t_star.size() == 1)
    j["t_star"] = r.t_star.front();
  else
    j["t_star"] = r.t_star;
  if (r.clean_pred >= 0) j["clean_pred"] = r.clean_pred; else j["clean_pred"] = nullptr;
  if (r.adv_pred >= 0) j["adv_pred"] = r.adv_pred; else j["adv_pred"] = nullptr;
  j["queries"] = r.queries;
  return j.dump(2) + "\n";
}

CampaignReport run_campaign(const CampaignConfig& cfg) {
  if (cfg.source_model.empty())
    throw std::invalid_argument("campaign: source_model checkpoint is required");
  const Model3D source = load_model(cfg.source_model);
  const Model3D victim = load_model(cfg.victim_model.empty() ? cfg.source_model
                                                             : cfg.victim_model);

  TestPool pool = resolve_test_pool(cfg, victim);
  const int n_test = static_cast<int>(pool.clips.size());
  if (n_test == 0) throw std::runtime_error("campaign: empty test set");

  // Phase 1: keep only clips the victim classifies correctly.
  std::uint64_t mark = victim.calls.value();
  std::vector<int> kept;
  for (int i = 0; i < n_test; ++i)
    if (predict(victim, pool.clips[i].video) == pool.clips[i].label) kept.push_back(i);
  expect_counter("filter", mark, victim.calls.value(), static_cast<std::uint64_t>(n_test));

  const std::vector<int> attack_idx = select_attack_indices(cfg, pool, kept);

  // Phase 2: construction. The victim model is never invoked here.
  mark = victim.calls.value();
  std::vector<std::pair<LabeledClip, VideoTensor>> pairs;
  std::vector<std::string> ids;
  std::vector<AdversarialResult> results;
  long queries_total = 0;
  for (std::size_t j = 0; j < kept.size(); ++j) {
    const LabeledClip& clean = pool.clips[kept[j]];
    AdversarialResult res;
    if (cfg.attack_kind == AttackKind::UniformNoise) {
      res = random_noise_baseline(clean.video, cfg.attack.budget, mix_seed(cfg.seed, j));
    } else {
      AttackConfig acfg = cfg.attack;
      acfg.seed = mix_seed(cfg.seed, j);
      res = craft_attack(clean.video, pool.clips[attack_idx[j]].video, source, acfg);
    }
    queries_total += res.queries;
    pairs.emplace_back(clean, res.adv);
    ids.push_back(pool.ids[kept[j]]);
    results.push_back(std::move(res));
  }
  expect_counter("construction (zero-query)", mark, victim.calls.value(), 0);

  // Phase 3: evaluation. Re-checks the clean precondition, then scores adv.
  mark = victim.calls.value();
  CampaignReport report;
  report.stats = attack_success_rate(victim, pairs, &ids, true, cfg.attack.flow);
  expect_counter("evaluation", mark, victim.calls.value(),
                 static_cast<std::uint64_t>(2 * pairs.size()));

  for (std::size_t j = 0; j < report.stats.per_video.size(); ++j) {
    results[j].clean_pred = report.stats.per_video[j].clean_pred;
    results[j].adv_pred = report.stats.per_video[j].adv_pred;
  }

  report.test_clips = n_test;
  report.filtered_clips = static_cast<int>(kept.size());
  report.queries_total = queries_total;
  double ssim_sum = 0.0, psnr_sum = 0.0, ti_sum = 0.0;
  for (const auto& rec : report.stats.per_video) {
    ssim_sum += rec.quality.ssim;
    psnr_sum += psnr_capped(rec.quality.psnr_db);
    ti_sum += rec.quality.ti;
  }
  const int n_eval = report.stats.total;
  report.mean_ssim = n_eval ? ssim_sum / n_eval : 0.0;
  report.mean_psnr = n_eval ? psnr_sum / n_eval : 0.0;
  report.mean_ti = n_eval ? ti_sum / n_eval : 0.0;

  // Phase 4: defenses, applied to the successful adversarial clips only.
  std::vector<std::pair<LabeledClip, VideoTensor>> successful;
  for (std::size_t j = 0; j < report.stats.per_video.size(); ++j)
    if (report.stats.per_video[j].success) successful.push_back(pairs[j]);

  for (const DefenseSpec& spec : cfg.defenses) {
    DefenseOutcome outcome;
    outcome.name = spec.name;
    outcome.evaluated = static_cast<int>(successful.size());
    if (successful.empty()) {
      report.defenses.push_back(outcome);
      continue;
    }
    Defense defense;
    std::uint64_t expected_train = 0;
    if (spec.name == "ts") {
      defense = spec.shuffle;
    } else if (spec.train) {
      std::vector<std::pair<VideoTensor, int>> adv_train;
      for (const auto& [clean, adv] : successful) adv_train.emplace_back(adv, clean.label);
      mark = victim.calls.value();
      defense = train_defense_pattern(victim, adv_train, spec.epochs, spec.lr, spec.budget,
                                      spec.seed);
      expected_train = static_cast<std::uint64_t>(adv_train.size()) * (1 + 2 * spec.epochs);
      expect_counter("defense training", mark, victim.calls.value(), expected_train);
    } else {
      fs::path vten = spec.pattern_path;
      fs::path meta = vten;
      meta.replace_extension(".json");
      defense = load_defense_pattern(vten, meta);
    }
    mark = victim.calls.value();
    outcome.residual_asr = residual_asr(victim, defense, successful);
    expect_counter("defense evaluation", mark, victim.calls.value(), successful.size());
    report.defenses.push_back(outcome);
  }

  // Reports.
  ordered_json j;
  j["asr"] = report.stats.asr;
  j["mean_ssim"] = report.mean_ssim;
  j["mean_psnr"] = report.mean_psnr;
  j["mean_ti"] = report.mean_ti;
  j["queries_total"] = report.queries_total;
  j["successes"] = report.stats.successes;
  j["test_clips"] = report.test_clips;
  j["filtered_clips"] = report.filtered_clips;
  j["excluded"] = report.stats.excluded;
  j["source_model"] = cfg.source_model;
  j["victim_model"] = cfg.victim_model.empty() ? cfg.source_model : cfg.victim_model;
  ordered_json ja;
  ja["kind"] = cfg.attack_kind == AttackKind::UniformNoise ? "noise" : "map";
  ja["variant"] = variant_name(cfg.attack.variant);
  ja["map"] = cfg.attack.map_kind == MapKind::GradCam ? "gradcam" : "guided";
  ja["alpha"] = cfg.attack.budget.alpha;
  ja["epsilon"] = cfg.attack.budget.epsilon;
  ja["layer"] = cfg.attack.layer;
  ja["selector"] = selector_name(cfg.selector);
  j["attack"] = ja;
  ordered_json jd = ordered_json::array();
  for (const auto& d : report.defenses) {
    ordered_json e;
    e["name"] = d.name;
    e["residual_asr"] = d.residual_asr;
    e["evaluated"] = d.evaluated;
    jd.push_back(e);
  }
  j["defenses"] = jd;
  j["seed"] = cfg.seed;
  report.summary_json = j.dump(2) + "\n";

  std::string csv = "video_id,ssim,psnr_db,ti,success\n";
  for (const auto& rec : report.stats.per_video) {
    csv += rec.id + "," + fmt(rec.quality.ssim) + "," + psnr_csv_field(rec.quality.psnr_db) +
           "," + fmt(rec.quality.ti, "%.4f") + "," + (rec.success ? "1" : "0") + "\n";
  }
  report.per_video_csv = csv;

  if (!cfg.output_dir.empty()) {
    const fs::path out_dir = cfg.output_dir;
    fs::create_directories(out_dir);
    {
      std::ofstream out(out_dir / "summary.json", std::ios::binary);
      out << report.summary_json;
    }
    {
      std::ofstream out(out_dir / "per_video.csv", std::ios::binary);
      out << report.per_video_csv;
    }
    if (cfg.save_adv) {
      fs::create_directories(out_dir / "adv");
      for (std::size_t jdx = 0; jdx < results.size(); ++jdx) {
        save_video(results[jdx].adv, out_dir / "adv" / (ids[jdx] + ".vten"));
        std::ofstream out(out_dir / "adv" / (ids[jdx] + ".json"), std::ios::binary);
        out << adversarial_result_json(results[jdx]);
      }
    }
  }
  return report;
}

SweepTable alpha_sweep(const CampaignConfig& cfg, const std::vector<double>& alphas) {
  if (alphas.empty()) throw std::invalid_argument("alpha_sweep: empty alpha list");
  for (double a : alphas)
    if (!(a > 0.0 && a <= 1.0))
      throw std::invalid_argument("alpha_sweep: alpha values must lie in (0,1]");

  SweepTable table;
  table.csv = "alpha,asr,mean_ssim,mean_psnr,mean_ti\n";
  for (double a : alphas) {
    CampaignConfig run_cfg = cfg;
    run_cfg.attack.budget.alpha = static_cast<float>(a);
    run_cfg.defenses.clear();
    run_cfg.save_adv = false;
    if (!cfg.output_dir.empty())
      run_cfg.output_dir = (fs::path(cfg.output_dir) / ("alpha_" + fmt(a, "%.2f"))).string();
    const CampaignReport rep = run_campaign(run_cfg);
    SweepRow row{a, rep.stats.asr, rep.mean_ssim, rep.mean_psnr, rep.mean_ti};
    table.rows.push_back(row);
    table.csv += fmt(a, "%.2f") + "," + fmt(row.asr) + "," + fmt(row.mean_ssim) + "," +
                 fmt(row.mean_psnr, "%.4f") + "," + fmt(row.mean_ti, "%.4f") + "\n";
  }
  if (!cfg.output_dir.empty()) {
    fs::create_directories(cfg.output_dir);
    std::ofstream out(fs::path(cfg.output_dir) / "sweep.csv", std::ios::binary);
    out << table.csv;
  }
  return table;
}

FlowLevelHistogram flow_level_analysis(const Model3D& model,
                                       const std::vector<VideoTensor>& videos, int levels,
                                       const PerturbationBudget& budget,
                                       const FlowParams& flow) {
  if (videos.empty()) throw std::invalid_argument("flow_level_analysis: no videos");
  if (levels < 1) throw std::invalid_argument("flow_level_analysis: levels must be >= 1");

  FlowLevelHistogram hist;
  hist.levels = levels;
  hist.frame_counts.assign(levels, 0);
  hist.success_proportion.assign(levels, 0.0);

  for (const VideoTensor& v : videos) {
    const int clean_pred = predict(model, v);
    const FlowProfile profile = max_flow_frame(v, flow);
    const auto [mn_it, mx_it] =
        std::minmax_element(profile.magnitudes.begin(), profile.magnitudes.end());
    const double mn = *mn_it, mx = *mx_it;

    std::vector<int> frame_level(v.t, 0);
    for (int t = 0; t < v.t; ++t) {
      int lvl = 0;
      if (mx - mn > 1e-12)
        lvl = std::min(levels - 1, static_cast<int>((profile.magnitudes[t] - mn) / (mx - mn) *
                                                    levels));
      frame_level[t] = lvl;
      ++hist.frame_counts[lvl];
    }

    std::vector<int> success_per_level(levels, 0);
    int total_success = 0;
    for (int t = 0; t < v.t; ++t) {
      const GradientMap map = guided_backprop(model, v, t, -1, clean_pred);
      const Frame delta = perturbation_from_map(map, budget);
      const VideoTensor adv = clip_unit([&] {
        VideoTensor raw = v;
        const VideoTensor bc = broadcast_temporal(delta, v.t);
        for (std::size_t i = 0; i < raw.data.size(); ++i) raw.data[i] += bc.data[i];
        return raw;
      }());
      if (predict(model, adv) != clean_pred) {
        ++success_per_level[frame_level[t]];
        ++total_success;
      }
    }
    if (total_success > 0) {
      ++hist.videos_with_success;
      for (int l = 0; l < levels; ++l)
        hist.success_proportion[l] +=
            static_cast<double>(success_per_level[l]) / total_success;
    }
  }
  if (hist.videos_with_success > 0)
    for (double& p : hist.success_proportion) p /= hist.videos_with_success;

  hist.csv = "level,frame_count,success_proportion\n";
  for (int l = 0; l < levels; ++l)
    hist.csv += std::to_string(l + 1) + "," + std::to_string(hist.frame_counts[l]) + "," +
                fmt(hist.success_proportion[l]) + "\n";
  return hist;
}

GradientNormReport gradient_norm_analysis(const Model3D& model,
                                          const std::vector<VideoTensor>& videos,
                                          std::uint64_t seed, const FlowParams& flow) {
  if (videos.empty()) throw std::invalid_argument("gradient_norm_analysis: no videos");
  GradientNormReport report;
  report.csv = "video_id,strategy,norm\n";
  for (std::size_t vi = 0; vi < videos.size(); ++vi) {
    const VideoTensor& v = videos[vi];
    const int cls = predict(model, v);
    const FlowProfile profile = max_flow_frame(v, flow);
    int t_min = 0;
    for (int t = 1; t < v.t; ++t)
      if (profile.magnitudes[t] < profile.magnitudes[t_min]) t_min = t;
    Rng rng(mix_seed(seed, vi));
    const int t_rand = rng.uniform_int(v.t);

    const double n_max = guided_backprop_ex(model, v, profile.argmax_index, -1, cls).raw_l2;
    const double n_rand = guided_backprop_ex(model, v, t_rand, -1, cls).raw_l2;
    const double n_min = guided_backprop_ex(model, v, t_min, -1, cls).raw_l2;
    const double top = std::max({n_max, n_rand, n_min, 1e-300});

    const char* names[3] = {"max_flow", "random", "min_flow"};
    const double norms[3] = {n_max / top, n_rand / top, n_min / top};
    char idbuf[32];
    std::snprintf(idbuf, sizeof(idbuf), "v%03zu", vi);
    for (int k = 0; k < 3; ++k) {
      report.samples.push_back({idbuf, names[k], norms[k]});
      report.csv += std::string(idbuf) + "," + names[k] + "," + fmt(norms[k]) + "\n";
    }
  }
  return report;
}

}  // namespace gradcast
