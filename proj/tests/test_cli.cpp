// End-to-end CLI coverage: drives the installed binary through the full
// gen-data -> train -> attack -> campaign -> defend pipeline in a scratch
// directory and checks outputs and exit codes.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <string>

#include "gradcast/video.hpp"
#include "testutil.hpp"

namespace {

int run(const std::string& args, const std::filesystem::path& log) {
  const std::string cmd = std::string(GRADCAST_BIN) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("full CLI pipeline") {
  testutil::TempDir dir("cli");
  const auto log = dir.path() / "log.txt";
  const std::string root = dir.path().string();

  {
    std::ofstream cfg(dir.path() / "run.cfg");
    cfg << "dataset.clips_per_class = 5\n"
        << "dataset.t = 4\n"
        << "dataset.h = 16\n"
        << "dataset.w = 16\n"
        << "dataset.noise_std = 0.03\n"
        << "dataset.seed = 42\n"
        << "train.epochs = 20\n"
        << "train.lr = 0.02\n"
        << "train.seed = 2\n"
        << "train.target_accuracy = 0.95\n"
        << "source_model = " << root << "/model.m3dc\n"
        << "attack.alpha = 1.0\n"
        << "attack.epsilon = 0.8\n"
        << "seed = 7\n"
        << "output_dir = " << root << "/out\n"
        << "defense = ts,h1=2,h2=2,seed=3\n";
  }
  const std::string base = "--config " + root + "/run.cfg";

  SUBCASE("gen-data, train, attack, metrics, campaign, defend, visualize") {
    CHECK(run(base + " gen-data --out " + root + "/data", log) == 0);
    CHECK(std::filesystem::exists(dir.path() / "data" / "manifest.json"));

    CHECK(run(base + " train --out " + root + "/model.m3dc --log " + root + "/train.json",
              log) == 0);
    CHECK(std::filesystem::exists(dir.path() / "model.m3dc"));
    CHECK(slurp(dir.path() / "train.json").find("\"accuracy\"") != std::string::npos);

    // clean and attack clips from the generated test split
    const std::string clean = root + "/data/test/c0_004.vten";
    const std::string attacker = root + "/data/test/c1_004.vten";
    CHECK(run(base + " attack --clean " + clean + " --attack-video " + attacker +
                  " --out-adv " + root + "/adv.vten --out-json " + root + "/adv.json",
              log) == 0);
    const std::string adv_json = slurp(dir.path() / "adv.json");
    CHECK(adv_json.find("\"queries\": 0") != std::string::npos);
    CHECK(adv_json.find("\"t_star\"") != std::string::npos);

    CHECK(run(" metrics --ref " + clean + " --cmp " + root + "/adv.vten --out " + root +
                  "/metrics.json",
              log) == 0);
    CHECK(slurp(dir.path() / "metrics.json").find("\"ssim\"") != std::string::npos);

    CHECK(run(base + " campaign", log) == 0);
    CHECK(std::filesystem::exists(dir.path() / "out" / "summary.json"));
    CHECK(std::filesystem::exists(dir.path() / "out" / "per_video.csv"));
    const std::string summary = slurp(dir.path() / "out" / "summary.json");
    CHECK(summary.find("\"queries_total\": 0") != std::string::npos);
    CHECK(summary.find("\"defenses\"") != std::string::npos);

    CHECK(run(base + " defend --campaign " + root + "/out --defense ts,h1=2,h2=2,seed=3" +
                  " --report " + root + "/defend.json",
              log) == 0);
    CHECK(slurp(dir.path() / "defend.json").find("\"residual_asr\"") != std::string::npos);

    CHECK(run(base + " defend --campaign " + root + "/out --train-dp --out-pattern " + root +
                  "/dp.vten --report " + root + "/defend_dp.json --set defense.epochs=2",
              log) == 0);
    CHECK(std::filesystem::exists(dir.path() / "dp.vten"));
    CHECK(std::filesystem::exists(dir.path() / "dp.json"));

    CHECK(run(base + " visualize --video " + clean + " --layer 0 --out " + root +
                  "/heat.pgm",
              log) == 0);
    const std::string pgm = slurp(dir.path() / "heat.pgm");
    CHECK(pgm.substr(0, 2) == "P5");

    CHECK(run(base + " sweep-alpha --alphas 0.2,0.8 --set output_dir=" + root + "/sweep",
              log) == 0);
    const std::string sweep = slurp(dir.path() / "sweep" / "sweep.csv");
    CHECK(sweep.find("alpha,asr,mean_ssim,mean_psnr,mean_ti") == 0);

    CHECK(run(base + " flow-analysis --levels 4 --out " + root + "/flow.csv --profile-dir " +
                  root + "/profiles",
              log) == 0);
    CHECK(slurp(dir.path() / "flow.csv").find("level,frame_count") == 0);
    CHECK(std::filesystem::exists(dir.path() / "profiles" / "profile_000.csv"));
  }

  SUBCASE("exit codes: 1 for config errors, 2 for runtime errors") {
    CHECK(run("notacommand", log) == 1);
    CHECK(run(base + " campaign --set attack.variant=sideways", log) == 1);
    CHECK(run(base + " attack --clean nope.vten --attack-video also_nope.vten --set source_model=" +
                  root + "/missing.m3dc",
              log) == 2);
    CHECK(run("--config " + root + "/missing.cfg campaign", log) == 1);
  }

  SUBCASE("GRADCAST_OUTPUT_ROOT anchors relative outputs") {
    const auto out_root = dir.path() / "rooted";
    setenv("GRADCAST_OUTPUT_ROOT", out_root.c_str(), 1);
    CHECK(run(base + " gen-data --out nested/data", log) == 0);
    unsetenv("GRADCAST_OUTPUT_ROOT");
    CHECK(std::filesystem::exists(out_root / "nested" / "data" / "manifest.json"));
  }
}
