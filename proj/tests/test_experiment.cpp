#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "corruptlab/cli.hpp"
#include "corruptlab/experiment.hpp"
#include "corruptlab/report.hpp"

using namespace corruptlab;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path scratch_dir() {
    auto p = fs::temp_directory_path() / ("corruptlab_exp_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

json toy_config_json(const std::string& out) {
    auto j = json::parse(R"({
      "name": "toy",
      "model": {"name": "micro", "num_layers": 2, "hidden": 16, "heads": 2, "ffn_multiplier": 2, "max_len": 12},
      "pretrain": {"corpus": {"synth": {"num_classes": 3, "keywords_per_class": 6, "examples_per_class": 40, "length": 6, "seed": 1}},
                   "vocab_size": 64, "epochs": 1, "batch_size": 16, "max_seq_len": 12},
      "datasets": [{"name": "d",
                    "train": {"synth": {"num_classes": 3, "keywords_per_class": 6, "examples_per_class": 8, "length": 6, "seed": 2}},
                    "test": {"synth": {"num_classes": 3, "keywords_per_class": 6, "examples_per_class": 8, "length": 6, "seed": 3}}}],
      "fractions": [0, 0.5, 1],
      "pooling": "mean",
      "learning_rates": [1e-3, 5e-3],
      "seeds": [0, 1],
      "epochs": 2,
      "batch_size": 8,
      "max_seq_len": 12,
      "projection": {"fractions": [0], "perplexity": 5, "iterations": 100}
    })");
    j["output_dir"] = out;
    return j;
}

ExperimentConfig toy_config(const std::string& out) { return toy_config_json(out).get<ExperimentConfig>(); }

json record(const std::string& dataset, double f, const std::string& dir, std::uint64_t seed, double f1, bool outlier = false) {
    return {{"dataset", dataset}, {"model", "m"},       {"num_layers", 12},       {"fraction", f},  {"direction", dir},
            {"seed", seed},       {"mode", "finetune"}, {"best_f1", f1},          {"outlier", outlier}};
}

int run_cli(std::vector<std::string> args, std::string* out_text = nullptr) {
    args.insert(args.begin(), "corruptlab");
    std::vector<const char*> argv;
    for (auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = cli_dispatch(static_cast<int>(argv.size()), argv.data(), out, err);
    if (out_text) *out_text = out.str() + err.str();
    return code;
}

}  // namespace

TEST(EnumerateRuns, MergesEndpoints) {
    auto cfg = toy_config("");
    cfg.seeds = {0};
    cfg.fractions = {0, 0.25};
    cfg.model.num_layers = 4;
    EXPECT_EQ(enumerate_runs(cfg).size(), 3u);
    cfg.fractions = {0, 0.25, 0.5, 0.75, 1};
    auto runs = enumerate_runs(cfg);
    EXPECT_EQ(runs.size(), 8u);
    EXPECT_EQ(runs.front().direction, Direction::None);
    EXPECT_EQ(runs.back().direction, Direction::Full);
    cfg.seeds = {0, 1, 2, 3, 4};
    EXPECT_EQ(enumerate_runs(cfg).size(), 40u);
}

TEST(ExperimentConfig, RejectsUnknownKeysAndBadFractions) {
    auto dir = scratch_dir();
    auto j = toy_config_json("");
    j["learning_rate"] = 1e-3;
    std::ofstream(dir / "bad.json") << j.dump();
    try {
        load_experiment_config((dir / "bad.json").string());
        FAIL();
    } catch (const ValidationError& e) {
        EXPECT_NE(std::string(e.what()).find("learning_rate"), std::string::npos) << e.what();
    }
    auto cfg = toy_config("");
    cfg.fractions = {0.3};
    EXPECT_THROW(cfg.validate(), ValidationError);
    cfg.fractions = {0.5};
    cfg.lr_scale = 0;
    EXPECT_THROW(cfg.validate(), ValidationError);
    fs::remove_all(dir);
}

TEST(ExperimentConfig, ShippedConfigsLoad) {
    for (const char* name : {"synthetic_tiny.json", "synthetic_tiny_probe.json", "quickstart.json"}) {
        auto cfg = load_experiment_config(std::string(CORRUPTLAB_SOURCE_DIR) + "/configs/" + name);
        EXPECT_NO_THROW(cfg.validate()) << name;
    }
}

TEST(ResultsStore, RejectsDuplicatesAndBadLines) {
    auto dir = scratch_dir();
    const auto path = (dir / "r.jsonl").string();
    {
        ResultsStore s(path);
        s.append({{"fingerprint", "aa"}, {"best_f1", 0.5}});
        EXPECT_THROW(s.append({{"fingerprint", "aa"}, {"best_f1", 0.6}}), ValidationError);
        s.append({{"fingerprint", "bb"}, {"best_f1", 0.7}});
    }
    ResultsStore again(path);
    ASSERT_EQ(again.records().size(), 2u);
    EXPECT_TRUE(again.contains("bb"));
    EXPECT_EQ(again.find("aa")->at("best_f1"), 0.5);

    std::ofstream(path, std::ios::app) << json{{"schema", results_schema}, {"fingerprint", "aa"}}.dump() << '\n';
    EXPECT_THROW(ResultsStore{path}, ValidationError);
    std::ofstream(path) << "{\"fingerprint\": \"x\"}\n";
    EXPECT_THROW(ResultsStore{path}, ValidationError);
    std::ofstream(path) << "{not json\n";
    EXPECT_THROW(ResultsStore{path}, ValidationError);
    fs::remove_all(dir);
}

TEST(Report, BoldsLargerOfPair) {
    std::vector<json> recs{record("sst", 0.5, "bottom", 0, 0.7691), record("sst", 0.5, "top", 0, 0.8092)};
    auto md = emit_report(recs, ReportFormat::Markdown);
    EXPECT_NE(md.find("| 76.91 | **80.92** |"), std::string::npos) << md;
    EXPECT_NE(md.find("50% (1-6)"), std::string::npos) << md;
    EXPECT_EQ(md.find("†"), std::string::npos);
}

TEST(Report, TiesAtDisplayPrecisionAreNotBold) {
    std::vector<json> recs{record("sst", 0.25, "bottom", 0, 0.80001), record("sst", 0.25, "top", 0, 0.80004)};
    auto md = emit_report(recs, ReportFormat::Markdown);
    EXPECT_EQ(md.find("**"), std::string::npos) << md;
}

TEST(Report, MeansOverSeedsAndMergedEndpoints) {
    std::vector<json> recs{record("sst", 0, "none", 0, 0.90), record("sst", 0, "none", 1, 0.92),
                           record("sst", 0.5, "bottom", 0, 0.5), record("sst", 0.5, "top", 0, 0.6),
                           record("sst", 1, "full", 0, 0.4)};
    auto md = emit_report(recs, ReportFormat::Markdown);
    EXPECT_NE(md.find("| 0% | 91.00 | |"), std::string::npos) << md;
    EXPECT_NE(md.find("| 100% (1-12) | 40.00 | |"), std::string::npos) << md;
    auto tables = aggregate_report(recs);
    ASSERT_EQ(tables.size(), 1u);
    EXPECT_EQ(tables[0].cell(0.0, 0, "merged")->seeds, 2u);
}

TEST(Report, OutlierMarker) {
    std::vector<json> recs{record("sst", 0.5, "bottom", 0, 0.3, true), record("sst", 0.5, "top", 0, 0.8)};
    auto md = emit_report(recs, ReportFormat::Markdown);
    EXPECT_NE(md.find("30.00†"), std::string::npos) << md;
    EXPECT_EQ(md.find("80.00†"), std::string::npos) << md;
    auto csv = emit_report(recs, ReportFormat::Csv);
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "mode,corruption,fraction,dataset,model,direction,f1_percent,seeds,outliers,bold");
    EXPECT_THROW(emit_report({}, ReportFormat::Markdown), ValidationError);
}

TEST(Matrix, ResumesAndReproduces) {
    auto dir = scratch_dir();
    auto cfg = toy_config((dir / "a").string());
    auto first = run_matrix(cfg);
    ASSERT_EQ(first.records.size(), 8u);
    EXPECT_EQ(first.executed, 8u);
    for (const auto& r : first.records) {
        EXPECT_EQ(r.at("sweep").size(), 2u);
        EXPECT_FALSE(r.at("aborted").get<bool>()) << r.at("outlier_reason");
    }
    EXPECT_TRUE(first.records.front().contains("projection"));
    EXPECT_TRUE(fs::exists(dir / "a" / "projections"));

    auto resumed = run_matrix(cfg);
    EXPECT_EQ(resumed.executed, 0u);
    EXPECT_EQ(resumed.records, first.records);

    auto fresh = run_matrix(toy_config((dir / "b").string()));
    ASSERT_EQ(fresh.records.size(), first.records.size());
    for (std::size_t i = 0; i < fresh.records.size(); ++i) EXPECT_EQ(record_metrics(fresh.records[i]), record_metrics(first.records[i])) << i;
    fs::remove_all(dir);
}

TEST(Matrix, UnresolvableFractionFailsBeforeTraining) {
    auto dir = scratch_dir();
    auto cfg = toy_config((dir / "a").string());
    cfg.fractions = {0.25};
    EXPECT_THROW(run_matrix(cfg), ValidationError);
    EXPECT_FALSE(fs::exists(dir / "a" / "results.jsonl"));
    fs::remove_all(dir);
}

TEST(Cli, ExitCodes) {
    EXPECT_EQ(run_cli({"bogus"}), exit_validation);
    EXPECT_EQ(run_cli({}), exit_validation);
    EXPECT_EQ(run_cli({"--help"}), exit_ok);
    EXPECT_EQ(run_cli({"verify", "--before", "a"}), exit_validation);
    EXPECT_EQ(run_cli({"corrupt", "--in", "/nonexistent.ckpt", "--fraction", "0.5", "--out", "/tmp/x.ckpt"}), exit_validation);
    EXPECT_EQ(run_cli({"report", "--results", "/nonexistent/results.jsonl"}), exit_validation);
}

TEST(Cli, CorruptThenVerify) {
    auto dir = scratch_dir();
    auto cfg = toy_config((dir / "m").string());
    const auto ck = obtain_pretrained(cfg);
    const auto in = (dir / "in.ckpt").string(), out = (dir / "out.ckpt").string();
    save_checkpoint(ck, in);
    std::string text;
    ASSERT_EQ(run_cli({"corrupt", "--in", in, "--fraction", "0.5", "--direction", "top", "--seed", "3", "--out", out}, &text), exit_ok) << text;
    EXPECT_EQ(run_cli({"verify", "--before", in, "--after", out, "--spec", out + ".manifest.json"}, &text), exit_ok) << text;
    // verifying the untouched checkpoint against the manifest must fail
    EXPECT_NE(run_cli({"verify", "--before", in, "--after", in, "--spec", out + ".manifest.json"}, &text), exit_ok) << text;
    EXPECT_EQ(run_cli({"corrupt", "--in", in, "--fraction", "0.25", "--out", out}, &text), exit_validation) << text;
    fs::remove_all(dir);
}

TEST(Pretrained, ExplicitCheckpointTakesVocabularyFromFile) {
    auto dir = scratch_dir();
    auto cfg = toy_config((dir / "m").string());
    const auto ck = obtain_pretrained(cfg);
    const auto path = (dir / "p.ckpt").string();
    save_checkpoint(ck, path);
    auto explicit_cfg = toy_config("");
    explicit_cfg.pretrain = json{{"checkpoint", path}};
    ASSERT_NE(explicit_cfg.model.vocab_size, ck.model.config().vocab_size);
    EXPECT_EQ(encoder_checksum(obtain_pretrained(explicit_cfg).model), encoder_checksum(ck.model));
    explicit_cfg.model.hidden = 32;
    try {
        obtain_pretrained(explicit_cfg);
        FAIL();
    } catch (const ValidationError& e) {
        EXPECT_NE(std::string(e.what()).find("embeddings."), std::string::npos) << e.what();
    }
    fs::remove_all(dir);
}
