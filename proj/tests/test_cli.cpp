// Exercises the built CLI binary end to end. The binary path arrives as
// argv[1] (wired by CMake).
#define DOCTEST_CONFIG_IMPLEMENT
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <string>

#include "skilllab/config.hpp"

namespace fs = std::filesystem;

static std::string g_cli;

namespace {

int run(const std::string& args) {
  std::string cmd = g_cli + " " + args + " >/dev/null 2>&1";
  int rc = std::system(cmd.c_str());
  return WEXITSTATUS(rc);
}

std::string tmp_dir(const std::string& name) {
  std::string d = (fs::temp_directory_path() / name).string();
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

}  // namespace

TEST_CASE("gen writes dataset, manifest, and resolved config") {
  std::string dir = tmp_dir("skilllab_cli_gen");
  CHECK(run("gen --task pair:L1,IDLE --episodes 3 --seed 0 --out " + dir) == 0);
  CHECK(fs::exists(dir + "/pair_L1_IDLE.jsonl"));
  CHECK(fs::exists(dir + "/pair_L1_IDLE.jsonl.manifest.json"));
  CHECK(fs::exists(dir + "/config.resolved.json"));
  CHECK(fs::exists(dir + "/run_info.json"));
  fs::remove_all(dir);
}

TEST_CASE("gen is byte-identical across reruns") {
  std::string d1 = tmp_dir("skilllab_cli_det1");
  std::string d2 = tmp_dir("skilllab_cli_det2");
  REQUIRE(run("gen --task dual:D2 --episodes 3 --seed 5 --out " + d1) == 0);
  REQUIRE(run("gen --task dual:D2 --episodes 3 --seed 5 --out " + d2) == 0);
  CHECK(skilllab::read_text_file(d1 + "/dual_D2.jsonl") ==
        skilllab::read_text_file(d2 + "/dual_D2.jsonl"));
  CHECK(skilllab::read_text_file(d1 + "/config.resolved.json") ==
        skilllab::read_text_file(d2 + "/config.resolved.json"));
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST_CASE("bad task name exits 2") {
  std::string dir = tmp_dir("skilllab_cli_bad");
  CHECK(run("gen --task pair:L9,IDLE --episodes 1 --out " + dir) == 2);
  CHECK(run("gen --task nonsense --episodes 1 --out " + dir) == 2);
  fs::remove_all(dir);
}

TEST_CASE("config file with unknown keys exits 2") {
  std::string dir = tmp_dir("skilllab_cli_cfg");
  skilllab::write_text_file(dir + "/bad.json", R"({"wrold": {"v_max": 0.1}})");
  CHECK(run("gen --task pair:L1,IDLE --episodes 1 --config " + dir +
            "/bad.json --out " + dir) == 2);
  skilllab::write_text_file(dir + "/typo.json", R"({"world": {"vmax": 0.1}})");
  CHECK(run("gen --task pair:L1,IDLE --episodes 1 --config " + dir +
            "/typo.json --out " + dir) == 2);
  fs::remove_all(dir);
}

TEST_CASE("train on a tiny dataset writes checkpoint and the declared log columns") {
  std::string dir = tmp_dir("skilllab_cli_train");
  skilllab::write_text_file(
      dir + "/cfg.json",
      R"({"model": {"d_hidden": 32, "d_latent": 16, "d_embed": 8,
                    "n_heads": 2, "attn_tokens": 2},
          "train": {"steps": 20, "batch": 8, "selector_steps": 400,
                    "log_every": 10}})");
  REQUIRE(run("gen --task pair:L1,IDLE --episodes 3 --seed 0 --out " + dir) == 0);
  REQUIRE(run("train --arch mono --data " + dir + "/pair_L1_IDLE.jsonl" +
              " --config " + dir + "/cfg.json --seed 1 --out " + dir) == 0);
  CHECK(fs::exists(dir + "/ckpt.json"));
  CHECK(fs::exists(dir + "/ckpt.bin"));
  std::string log = skilllab::read_text_file(dir + "/log.csv");
  CHECK(log.rfind("step,L_FM_L,L_FM_R,L_coop,L_prior,L_sticky,L_sup,L_disc,"
                  "mean_gate,lr",
                  0) == 0);
  // checkpoint manifest carries the variant tag
  CHECK(skilllab::read_text_file(dir + "/ckpt.json").find("MONO") !=
        std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("train with a missing dataset exits 2") {
  std::string dir = tmp_dir("skilllab_cli_missing");
  CHECK(run("train --arch mono --data /nonexistent.jsonl --out " + dir) == 2);
  fs::remove_all(dir);
}

TEST_CASE("eval with a missing checkpoint exits 2") {
  std::string dir = tmp_dir("skilllab_cli_nockpt");
  CHECK(run("eval --suite recompose --ckpt " + dir + "/none --out " + dir) == 2);
  fs::remove_all(dir);
}

TEST_CASE("report merges eval outputs") {
  std::string dir = tmp_dir("skilllab_cli_report");
  skilllab::write_text_file(dir + "/r1.json",
                            R"({"suite":"coop","success":{"dual:D1":0.5}})");
  skilllab::write_text_file(dir + "/r2.json",
                            R"({"suite":"seen","success":{"pair:L1,IDLE":1.0}})");
  CHECK(run("report --in " + dir + "/r1.json," + dir + "/r2.json --out " + dir) ==
        0);
  std::string csv = skilllab::read_text_file(dir + "/report.csv");
  CHECK(csv.find("coop,dual:D1,success,0.5") != std::string::npos);
  CHECK(csv.find("seen,") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("SKILLLAB_SEED environment override applies when no flag is given") {
  std::string d1 = tmp_dir("skilllab_cli_env1");
  std::string d2 = tmp_dir("skilllab_cli_env2");
  std::string base = "gen --task pair:L1,IDLE --episodes 2 --out ";
  REQUIRE(std::system(("SKILLLAB_SEED=9 " + g_cli + " " + base + d1 +
                       " >/dev/null 2>&1")
                          .c_str()) == 0);
  REQUIRE(run(base + d2 + " --seed 9") == 0);
  CHECK(skilllab::read_text_file(d1 + "/pair_L1_IDLE.jsonl") ==
        skilllab::read_text_file(d2 + "/pair_L1_IDLE.jsonl"));
  fs::remove_all(d1);
  fs::remove_all(d2);
}

int main(int argc, char** argv) {
  if (argc > 1) g_cli = argv[1];
  if (g_cli.empty()) {
    std::fprintf(stderr, "usage: test_cli <path-to-skilllab-binary>\n");
    return 1;
  }
  doctest::Context ctx;
  return ctx.run();
}
