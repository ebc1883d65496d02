#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "gradcast/attack.hpp"
#include "gradcast/config.hpp"
#include "gradcast/dataset.hpp"
#include "gradcast/defenses.hpp"
#include "gradcast/metrics.hpp"

namespace gradcast {

enum class AttackKind { GradientMap, UniformNoise };
enum class AttackSelector { Seeded, SsimSimilar, CosineSimilar };

struct DefenseSpec {
  std::string name;  // "ts" or "dp"
  // ts
  ShuffleParams shuffle;
  // dp: either a pre-trained pattern on disk or in-campaign training
  std::string pattern_path;  // .vten (meta sidecar alongside, .json)
  bool train = false;
  int epochs = 20;
  double lr = 0.05;
  double budget = 0.1;
  std::uint64_t seed = 0;
};

struct CampaignConfig {
  DatasetSpec dataset;
  std::string dataset_dir;   // load a saved dataset instead of generating
  std::string external_dir;  // frame-directory dataset root (test clips)
  std::string source_model;  // checkpoint path
  std::string victim_model;  // checkpoint path
  AttackKind attack_kind = AttackKind::GradientMap;
  AttackConfig attack;
  AttackSelector selector = AttackSelector::Seeded;
  std::vector<DefenseSpec> defenses;
  std::string output_dir;  // empty: nothing written
  std::uint64_t seed = 0;
  bool save_adv = true;  // write adv/<id>.vten + .json sidecars
};

struct DefenseOutcome {
  std::string name;
  double residual_asr = 0.0;
  int evaluated = 0;  // number of successful attacks fed to the defense
};

struct CampaignReport {
  CampaignStats stats;
  double mean_ssim = 0.0;
  double mean_psnr = 0.0;  // +inf entries capped at 100 dB
  double mean_ti = 0.0;
  long queries_total = 0;  // victim inferences spent constructing attacks
  int test_clips = 0;
  int filtered_clips = 0;
  std::vector<DefenseOutcome> defenses;
  std::string summary_json;   // byte-stable for a fixed config+seed
  std::string per_video_csv;  // video_id,ssim,psnr_db,ti,success
};

// Parses campaign keys out of a ConfigMap (see README for the key set).
CampaignConfig campaign_config_from_map(const ConfigMap& map);

// End-to-end run: load models, filter test clips the victim classifies
// correctly, craft one adversarial video per clip with zero victim queries
// (counter-asserted), evaluate ASR/SSIM/PSNR/TI, then any defenses. Writes
// summary.json, per_video.csv and adversarial sidecars under output_dir when
// it is set. Pure function of (config, seed): reruns produce identical bytes.
CampaignReport run_campaign(const CampaignConfig& cfg);

struct SweepRow {
  double alpha = 0.0;
  double asr = 0.0;
  double mean_ssim = 0.0;
  double mean_psnr = 0.0;
  double mean_ti = 0.0;
};

struct SweepTable {
  std::vector<SweepRow> rows;
  std::string csv;  // alpha,asr,mean_ssim,mean_psnr,mean_ti
};

// One campaign per alpha with a shared seed; defenses are skipped.
SweepTable alpha_sweep(const CampaignConfig& cfg, const std::vector<double>& alphas);

struct FlowLevelHistogram {
  int levels = 5;
  std::vector<long> frame_counts;          // frames per level, all videos
  std::vector<double> success_proportion;  // mean per-video share of successes
  int videos_with_success = 0;
  std::string csv;
};

// Attacks every frame of every video against the supplied model (which acts
// as both source and victim for this analysis) and buckets frames into
// uniformly spaced flow-magnitude levels per video.
FlowLevelHistogram flow_level_analysis(const Model3D& model,
                                       const std::vector<VideoTensor>& videos, int levels = 5,
                                       const PerturbationBudget& budget = {},
                                       const FlowParams& flow = {});

struct GradientNormSample {
  std::string video_id;
  std::string strategy;  // "max_flow", "random", "min_flow"
  double norm = 0.0;     // per-video normalized so the max strategy is 1
};

struct GradientNormReport {
  std::vector<GradientNormSample> samples;
  std::string csv;
};

// Raw guided-gradient L2 norms at the max-flow, seeded-random and min-flow
// frames of each video, normalized per video by the largest of the three.
GradientNormReport gradient_norm_analysis(const Model3D& model,
                                          const std::vector<VideoTensor>& videos,
                                          std::uint64_t seed = 0, const FlowParams& flow = {});

// AdversarialResult JSON: delta_inf_norm, t_star, clean_pred, adv_pred,
// queries (the adv tensor lives in a .vten sidecar).
std::string adversarial_result_json(const AdversarialResult& r);

}  // namespace gradcast
