#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "nbnet/serialize.hpp"

#include "helpers.hpp"

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string write_json(const std::string& path, const json& j) {
    std::ofstream f(path);
    f << j.dump(2) << "\n";
    return path;
}

json read_json(const std::string& path) { return json::parse(tst::slurp(path)); }

}  // namespace

TEST_CASE("synthetic data, extractor, attack, and merged report chain together",
          "[cli]") {
    tst::TempDir tmp;
    std::string root = tmp.file("runs");

    tst::CliResult syn = tst::run_cli("synth-data --subjects 6 --samples 3 --size 16"
                                      " --run-id data --out-root " + root + " --seed 4");
    INFO(syn.err);
    REQUIRE(syn.code == 0);
    REQUIRE_THAT(syn.out, Catch::Matchers::ContainsSubstring("18 images"));
    std::string manifest = root + "/data/manifest.jsonl";
    REQUIRE(fs::exists(manifest));

    std::string ex_cfg = write_json(
        tmp.file("ex.json"),
        {{"data", {{"manifest", manifest}}},
         {"extractor",
          {{"input_size", 16}, {"output_dim", 8}, {"widths", {8, 16}},
           {"feature_stage", 1}, {"batches", 20}, {"triplets_per_batch", 8}}}});
    tst::CliResult ext = tst::run_cli("--config " + ex_cfg + " train-extractor --run-id ex"
                                      " --out-root " + root + " --seed 7");
    INFO(ext.err);
    REQUIRE(ext.code == 0);
    REQUIRE_THAT(ext.out, Catch::Matchers::ContainsSubstring("output dim 8"));
    std::string ckpt = root + "/ex/extractor.ckpt";
    REQUIRE(fs::exists(ckpt));

    std::string at_cfg = write_json(
        tmp.file("at.json"),
        {{"data", {{"manifest", manifest}}},
         {"extractor", {{"checkpoint", ckpt}}},
         {"eval",
          {{"model", "identity"}, {"attacks", {"type1", "original"}},
           {"far", {0.5}}, {"folds", 2}, {"identification", json::object()}}}});
    tst::CliResult atk = tst::run_cli("--config " + at_cfg + " attack --run-id atk"
                                      " --out-root " + root + " --seed 9");
    INFO(atk.err);
    REQUIRE(atk.code == 0);
    REQUIRE_THAT(atk.out, Catch::Matchers::ContainsSubstring("rank-1 identification: 100.00%"));

    std::string run = root + "/atk";
    REQUIRE(fs::exists(run + "/scores/type1_fold0.json"));
    REQUIRE(fs::exists(run + "/scores/type1_fold1.json"));
    REQUIRE(fs::exists(run + "/report/report.csv"));
    REQUIRE(fs::exists(run + "/report/roc.svg"));

    json results = read_json(run + "/report/results.json");
    REQUIRE(results.size() == 2);
    REQUIRE(results[0].at("model") == "identity");
    // replaying the originals makes every genuine score 1, so type1 is perfect
    for (auto& r : results)
        if (r.at("attack") == "type1")
            REQUIRE(r.at("far").at("0.5").at("reported").get<double>() == 100.0);

    json ident = read_json(run + "/identification.json");
    REQUIRE(ident.at("rank1_percent").get<double>() == 100.0);
    REQUIRE(ident.at("probe_count").get<int>() == 18);

    json rm = read_json(run + "/run_manifest.json");
    REQUIRE(rm.at("command") == "attack");
    REQUIRE(rm.at("seed").get<int>() == 9);
    REQUIRE(rm.at("inputs").contains(ckpt));
    REQUIRE(rm.at("outputs").contains("report/report.csv"));

    tst::CliResult rep = tst::run_cli("report --runs " + run + " --run-id merged"
                                      " --out-root " + root);
    INFO(rep.err);
    REQUIRE(rep.code == 0);
    REQUIRE_THAT(rep.out, Catch::Matchers::ContainsSubstring("2 result sets"));
    json merged = read_json(root + "/merged/report/results.json");
    REQUIRE(merged == results);
}

TEST_CASE("the parameter breakdown prints without touching the filesystem", "[cli]") {
    tst::TempDir tmp;
    std::string cfg = write_json(tmp.file("pp.json"), {{"nbnet", {{"arch", "dcnn"}}}});
    tst::CliResult r = tst::run_cli("--config " + cfg + " train-nbnet --print-param-count");
    INFO(r.err);
    REQUIRE(r.code == 0);
    REQUIRE_THAT(r.out, Catch::Matchers::ContainsSubstring("kernel weights: 4432304"));
    REQUIRE_THAT(r.out, Catch::Matchers::ContainsSubstring("batch-norm affine: 2022"));
}

TEST_CASE("desk training produces a model the reconstruct command can invert", "[cli]") {
    tst::TempDir tmp;
    std::string root = tmp.file("runs");
    std::string manifest = tst::make_dataset(tmp.file("data"), 5, 2, 16);
    std::string ckpt = tst::forge_extractor(tmp.file("x.ckpt"), 16, 8);

    std::string tr_cfg = write_json(
        tmp.file("tr.json"),
        {{"extractor", {{"checkpoint", ckpt}}},
         {"data", {{"manifest", manifest}}},
         {"nbnet", {{"arch", "nbnet_a"}, {"out_size", 16}}},
         {"train",
          {{"data_source", "raw"}, {"batch_size", 4}, {"phase1_batches", 10},
           {"phase2_batches", 0}, {"checkpoint_every", 5}}}});
    tst::CliResult tr = tst::run_cli("--config " + tr_cfg + " --profile desk train-nbnet"
                                     " --run-id nb --out-root " + root + " --seed 3");
    INFO(tr.err);
    REQUIRE(tr.code == 0);
    REQUIRE_THAT(tr.out, Catch::Matchers::ContainsSubstring("model checkpoint:"));
    std::string model = root + "/nb/model.ckpt";
    REQUIRE(fs::exists(model));
    REQUIRE(fs::exists(root + "/nb/phase1/train_log.jsonl"));

    std::string tpl = tmp.file("tpl.jsonl");
    {
        std::ofstream f(tpl);
        f << R"({"subject_id":"q0","sample_id":"a0","vector":[0.1,-0.2,0.3,0,0.5,-0.6,0.7,0.8]})"
          << "\n";
        f << R"({"subject_id":"q1","sample_id":"a0","vector":[1,0,0,0,0,0,0,0]})" << "\n";
    }
    tst::CliResult rc = tst::run_cli("reconstruct --model " + model + " --templates " + tpl +
                                     " --run-id inv --out-root " + root);
    INFO(rc.err);
    REQUIRE(rc.code == 0);
    REQUIRE_THAT(rc.out, Catch::Matchers::ContainsSubstring("reconstructed 2 templates"));
    REQUIRE(fs::exists(root + "/inv/panels/q0_a0.png"));
    REQUIRE(fs::exists(root + "/inv/contact_sheet.svg"));

    tst::CliResult rm = tst::run_cli("reconstruct --model " + model + " --extractor " + ckpt +
                                     " --manifest " + manifest + " --count 3 --run-id invm"
                                     " --out-root " + root);
    INFO(rm.err);
    REQUIRE(rm.code == 0);
    json scores = read_json(root + "/invm/scores.json");
    REQUIRE(scores.size() == 3);
    for (auto& row : scores) {
        double s = row.at("similarity").get<double>();
        REQUIRE(s >= -1.0);
        REQUIRE(s <= 1.0);
    }

    std::string bad = tmp.file("bad.jsonl");
    tst::spit(bad, R"({"subject_id":"q","sample_id":"a","vector":[1,2,3]})" "\n");
    tst::CliResult dim = tst::run_cli("reconstruct --model " + model + " --templates " + bad +
                                      " --run-id invb --out-root " + root);
    REQUIRE(dim.code == 2);
    REQUIRE_THAT(dim.err, Catch::Matchers::ContainsSubstring(
                              "template row 1 has dimension 3, model expects 8"));

    tst::CliResult both = tst::run_cli("reconstruct --model " + model + " --templates " + tpl +
                                       " --manifest " + manifest + " --run-id invc"
                                       " --out-root " + root);
    REQUIRE(both.code == 2);
    REQUIRE_THAT(both.err, Catch::Matchers::ContainsSubstring(
                               "exactly one of --manifest or --templates"));
}

TEST_CASE("config complaints are collected and refuse the run", "[cli]") {
    tst::TempDir tmp;
    std::string root = tmp.file("runs");

    std::string empty = write_json(tmp.file("empty.json"), json::object());
    tst::CliResult miss = tst::run_cli("--config " + empty + " attack --run-id a"
                                       " --out-root " + root);
    REQUIRE(miss.code == 2);
    REQUIRE_THAT(miss.err,
                 Catch::Matchers::ContainsSubstring("invalid configuration for attack"));
    REQUIRE_THAT(miss.err, Catch::Matchers::ContainsSubstring("missing key data.manifest"));
    REQUIRE_THAT(miss.err,
                 Catch::Matchers::ContainsSubstring("missing key extractor.checkpoint"));

    tst::CliResult one = tst::run_cli("synth-data --subjects 2 --samples 2 --size 8"
                                      " --run-id d --out-root " + root);
    REQUIRE(one.code == 0);
    tst::CliResult dup = tst::run_cli("synth-data --subjects 2 --samples 2 --size 8"
                                      " --run-id d --out-root " + root);
    REQUIRE(dup.code == 2);
    REQUIRE_THAT(dup.err, Catch::Matchers::ContainsSubstring("pass --overwrite"));
    tst::CliResult over = tst::run_cli("synth-data --subjects 2 --samples 2 --size 8"
                                       " --run-id d --out-root " + root + " --overwrite");
    REQUIRE(over.code == 0);

    std::string manifest = tst::make_dataset(tmp.file("data"), 3, 2, 16);
    std::string ckpt = tst::forge_extractor(tmp.file("x.ckpt"), 16, 8);
    std::string idle = write_json(
        tmp.file("idle.json"),
        {{"extractor", {{"checkpoint", ckpt}}},
         {"data", {{"manifest", manifest}}},
         {"nbnet", {{"arch", "dcnn"}, {"out_size", 16}}},
         {"train",
          {{"data_source", "raw"}, {"phase1_batches", 0}, {"phase2_batches", 0}}}});
    tst::CliResult none = tst::run_cli("--config " + idle + " --profile desk train-nbnet"
                                       " --run-id n --out-root " + root);
    REQUIRE(none.code == 2);
    REQUIRE_THAT(none.err, Catch::Matchers::ContainsSubstring("nothing to train"));

    tst::CliResult prof = tst::run_cli("synth-data --profile potato --run-id p"
                                       " --out-root " + root);
    REQUIRE(prof.code == 2);
    REQUIRE_THAT(prof.err,
                 Catch::Matchers::ContainsSubstring("profile must be canonical or desk"));

    tst::CliResult flag = tst::run_cli("synth-data --bogus 1 --out-root " + root);
    REQUIRE(flag.code == 2);

    tst::CliResult help = tst::run_cli("--help");
    REQUIRE(help.code == 0);
    REQUIRE_THAT(help.out, Catch::Matchers::ContainsSubstring("template inversion toolkit"));
}

TEST_CASE("unreadable artifacts exit with a distinct failure code", "[cli]") {
    tst::TempDir tmp;
    std::string root = tmp.file("runs");
    std::string manifest = tst::make_dataset(tmp.file("data"), 3, 2, 16);

    std::string junk = tmp.file("junk.ckpt");
    tst::spit(junk, "this is not a checkpoint");
    std::string cfg = write_json(
        tmp.file("tr.json"),
        {{"extractor", {{"checkpoint", junk}}},
         {"data", {{"manifest", manifest}}},
         {"nbnet", {{"arch", "dcnn"}, {"out_size", 16}}},
         {"train", {{"data_source", "raw"}, {"phase1_batches", 2}, {"phase2_batches", 0}}}});
    tst::CliResult bad = tst::run_cli("--config " + cfg + " --profile desk train-nbnet"
                                      " --run-id j --out-root " + root);
    REQUIRE(bad.code == 1);

    std::string v99 = tmp.file("v99.ckpt");
    {
        nbnet::CheckpointWriter w(v99, "NBXT", 99);
        w.finish();
    }
    std::string cfg2 = write_json(
        tmp.file("tr2.json"),
        {{"extractor", {{"checkpoint", v99}}},
         {"data", {{"manifest", manifest}}},
         {"nbnet", {{"arch", "dcnn"}, {"out_size", 16}}},
         {"train", {{"data_source", "raw"}, {"phase1_batches", 2}, {"phase2_batches", 0}}}});
    tst::CliResult ver = tst::run_cli("--config " + cfg2 + " --profile desk train-nbnet"
                                      " --run-id v --out-root " + root);
    REQUIRE(ver.code == 1);
    REQUIRE_THAT(ver.err, Catch::Matchers::ContainsSubstring("file version 99"));
}

TEST_CASE("an unreachable FAR names the attack and fold that failed", "[cli]") {
    tst::TempDir tmp;
    std::string root = tmp.file("runs");
    std::string manifest = tst::make_dataset(tmp.file("data"), 4, 2, 16);
    std::string ckpt = tst::forge_extractor(tmp.file("x.ckpt"), 16, 8);
    std::string cfg = write_json(
        tmp.file("at.json"),
        {{"data", {{"manifest", manifest}}},
         {"extractor", {{"checkpoint", ckpt}}},
         {"eval",
          {{"model", "identity"}, {"attacks", {"type1"}}, {"far", {0.001}},
           {"folds", 2}}}});
    tst::CliResult r = tst::run_cli("--config " + cfg + " attack --run-id a"
                                    " --out-root " + root);
    REQUIRE(r.code == 2);
    REQUIRE_THAT(r.err, Catch::Matchers::ContainsSubstring("attack type1, fold 0"));
    REQUIRE_THAT(r.err, Catch::Matchers::ContainsSubstring("no impostor-score threshold"));
}

TEST_CASE("output root and seed resolve flag over environment over config", "[cli]") {
    tst::TempDir tmp;
    std::string rootA = tmp.file("envroot");
    std::string rootB = tmp.file("flagroot");

    tst::CliResult env_only = tst::run_cli("synth-data --subjects 2 --samples 2 --size 8"
                                           " --run-id e",
                                           "NBNET_OUTPUT_ROOT=" + rootA + " ");
    REQUIRE(env_only.code == 0);
    REQUIRE(fs::exists(rootA + "/e/manifest.jsonl"));

    tst::CliResult flagged = tst::run_cli("synth-data --subjects 2 --samples 2 --size 8"
                                          " --run-id f --out-root " + rootB,
                                          "NBNET_OUTPUT_ROOT=" + rootA + " ");
    REQUIRE(flagged.code == 0);
    REQUIRE(fs::exists(rootB + "/f/manifest.jsonl"));
    REQUIRE(!fs::exists(rootA + "/f"));

    std::string cfg = write_json(tmp.file("seed.json"), {{"seed", 5}, {"run_id", "cfgrun"}});
    tst::CliResult from_cfg = tst::run_cli("--config " + cfg + " synth-data --subjects 2"
                                           " --samples 2 --size 8 --out-root " + rootB);
    REQUIRE(from_cfg.code == 0);
    REQUIRE(read_json(rootB + "/cfgrun/run_manifest.json").at("seed").get<int>() == 5);

    tst::CliResult overridden = tst::run_cli("--config " + cfg + " synth-data --subjects 2"
                                             " --samples 2 --size 8 --out-root " + rootB +
                                             " --run-id s9 --seed 9");
    REQUIRE(overridden.code == 0);
    REQUIRE(read_json(rootB + "/s9/run_manifest.json").at("seed").get<int>() == 9);

    tst::CliResult named = tst::run_cli("synth-data --subjects 2 --samples 2 --size 8"
                                        " --out-root " + rootB);
    REQUIRE(named.code == 0);
    REQUIRE(fs::exists(rootB + "/synth_data/manifest.jsonl"));
}
