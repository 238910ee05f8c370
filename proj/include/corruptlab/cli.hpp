// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. Exit codes: 0 success, 1 validation error (bad
// flags, config or inputs), 2 run failure.
#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "corruptlab/experiment.hpp"
#include "corruptlab/grad_suite.hpp"
#include "corruptlab/report.hpp"

namespace corruptlab {

inline constexpr int exit_ok = 0;
inline constexpr int exit_validation = 1;
inline constexpr int exit_failure = 2;

/// Output root: --out, else $CORRUPTLAB_OUT/<name>, else ./corruptlab-out/<name>.
inline std::string default_output_dir(const std::string& name) {
    const char* env = std::getenv("CORRUPTLAB_OUT");
    return (std::filesystem::path(env && *env ? env : "corruptlab-out") / name).string();
}

namespace detail {

struct CliState {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
};

inline ExperimentConfig load_config_or_default(const CliState& st) {
    ExperimentConfig cfg;
    if (!st.config.empty()) cfg = load_experiment_config(st.config);
    if (cfg.output_dir.empty()) cfg.output_dir = default_output_dir(cfg.name);
    cfg.output_dir = resolve_path(cfg.output_dir, cfg.base_dir);
    return cfg;
}

inline const DatasetConfig& pick_dataset(const ExperimentConfig& cfg, const std::string& name) {
    if (cfg.datasets.empty()) throw ValidationError("config lists no datasets");
    if (name.empty()) return cfg.datasets.front();
    for (const auto& d : cfg.datasets)
        if (d.name == name) return d;
    throw ValidationError("config has no dataset named '" + name + "'");
}

inline void write_or_print(const std::string& path, const std::string& text) {
    if (path.empty() || path == "-") {
        std::cout << text;
    } else {
        if (auto parent = std::filesystem::path(path).parent_path(); !parent.empty()) std::filesystem::create_directories(parent);
        write_text_file(path, text);
    }
}

inline nlohmann::json load_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open '" + path + "'");
    try {
        return nlohmann::json::parse(in, nullptr, true, true);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("'" + path + "' is not valid JSON: " + e.what());
    }
}

}  // namespace detail

/// Parses argv, runs one subcommand and returns the process exit code.
inline int cli_dispatch(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Parameter-corruption lab for small BERT-style encoders"};
    app.require_subcommand(1);
    detail::CliState st;
    auto common = [&](CLI::App* sub, bool with_config = true) {
        if (with_config) sub->add_option("--config", st.config, "experiment config (JSON)");
        sub->add_option("--seed", st.seed, "seed override");
        sub->add_option("--out", st.out, "output path or directory");
    };
    std::function<int()> action;

    // pretrain
    auto* pretrain = app.add_subcommand("pretrain", "MLM pre-training of a fresh encoder");
    common(pretrain);
    pretrain->callback([&] {
        action = [&] {
            auto cfg = detail::load_config_or_default(st);
            if (st.seed) cfg.pretrain["seed"] = *st.seed;
            cfg.pretrain.erase("checkpoint");
            if (!st.out.empty()) cfg.output_dir = std::filesystem::path(st.out).parent_path().string();
            auto ck = obtain_pretrained(cfg, &err);
            const auto path = st.out.empty() ? (std::filesystem::path(cfg.output_dir) / "pretrained.ckpt").string() : st.out;
            save_checkpoint(ck, path);
            out << path << '\n';
            return exit_ok;
        };
    });

    // corrupt
    std::string in_path, direction = "bottom", manifest_path;
    double fraction = 0.0;
    bool include_embeddings = false;
    auto* corrupt_cmd = app.add_subcommand("corrupt", "re-initialize a layer range of a checkpoint");
    common(corrupt_cmd, false);
    corrupt_cmd->add_option("--in", in_path, "input checkpoint")->required();
    corrupt_cmd->add_option("--fraction", fraction, "fraction of layers in [0, 1]")->required();
    corrupt_cmd->add_option("--direction", direction, "bottom|top|full|none");
    corrupt_cmd->add_option("--manifest", manifest_path, "manifest path (default <out>.manifest.json)");
    corrupt_cmd->add_flag("--include-embeddings", include_embeddings, "also corrupt the embedding block");
    corrupt_cmd->callback([&] {
        action = [&] {
            if (st.out.empty()) throw ValidationError("corrupt needs --out");
            auto ck = load_checkpoint(in_path);
            auto spec = CorruptionSpec::make(parse_direction(direction), fraction, st.seed.value_or(0));
            spec.include_embeddings = include_embeddings;
            spec.resolve(ck.model.config().num_layers);
            auto [model, manifest] = corrupt(ck.model, spec);
            ck.model = std::move(model);
            ck.metadata["corruption_fingerprint"] = spec.fingerprint();
            ck.metadata["corruption"] = spec;
            save_checkpoint(ck, st.out);
            const auto mpath = manifest_path.empty() ? st.out + ".manifest.json" : manifest_path;
            write_text_file(mpath, nlohmann::json(manifest).dump(2) + "\n");
            out << "corrupted layers " << layer_count_label(ck.model.config().num_layers, fraction) << " -> " << st.out << '\n'
                << "manifest " << mpath << '\n';
            return exit_ok;
        };
    });

    // verify
    std::string before_path, after_path, spec_path;
    auto* verify = app.add_subcommand("verify", "check a corruption against its manifest");
    verify->add_option("--before", before_path, "original checkpoint")->required();
    verify->add_option("--after", after_path, "corrupted checkpoint")->required();
    verify->add_option("--spec", spec_path, "corruption manifest written by `corrupt`")->required();
    verify->callback([&] {
        action = [&] {
            auto before = load_checkpoint(before_path);
            auto after = load_checkpoint(after_path, &before.model.config());
            auto manifest = detail::load_json_file(spec_path).get<CorruptionManifest>();
            auto report = verify_corruption(before.model, after.model, manifest.spec);
            out << (report.passed ? "PASS" : "FAIL: " + report.failure) << '\n';
            for (const auto& [kind, n] : report.corrupted_by_kind) out << "  " << kind << ": " << n << " tensors re-initialized\n";
            out << "  untouched tensors checked: " << report.untouched_checked << ", differing: " << report.untouched_diffs << '\n'
                << "  bound violations: " << report.bound_violations << ", exactness violations: " << report.exactness_violations << '\n';
            if (report.weight_values)
                out << fmt::format("  weights/bound: mean {:.4f}, variance {:.4f} (uniform: 0, 1/3) over {} values\n", report.normalized_mean,
                                   report.normalized_variance, report.weight_values);
            return report.passed ? exit_ok : exit_failure;
        };
    });

    // finetune / probe / sweep
    std::string checkpoint_path, dataset_name;
    std::optional<double> lr;
    auto add_train_opts = [&](CLI::App* sub) {
        common(sub);
        sub->add_option("--checkpoint", checkpoint_path, "checkpoint to train from (default: the config's pre-trained one)");
        sub->add_option("--dataset", dataset_name, "dataset name from the config (default: first)");
    };
    auto run_training_cmd = [&](std::optional<TrainMode> forced, bool sweep) {
        auto cfg = detail::load_config_or_default(st);
        if (forced) cfg.mode = *forced;
        const auto& dc = detail::pick_dataset(cfg, dataset_name);
        auto [train, test] = dc.load(cfg.base_dir);
        Checkpoint ck = checkpoint_path.empty() ? obtain_pretrained(cfg, &err) : load_checkpoint(checkpoint_path);
        const std::uint64_t seed = st.seed.value_or(cfg.seeds.front());
        auto tc = cfg.train_config(seed);
        std::vector<double> lrs = cfg.effective_learning_rates();
        if (lr) lrs = {*lr};
        if (!sweep) lrs.resize(1);
        auto result = lr_sweep(ck, train, test, tc, lrs);
        nlohmann::json j{{"dataset", dc.name}, {"mode", to_string(cfg.mode)}, {"seed", seed}, {"best_index", result.best}};
        j["runs"] = nlohmann::json::array();
        for (const auto& r : result.runs) j["runs"].push_back(run_result_json(r));
        if (cfg.mode == TrainMode::LinearProbe) j["encoder_checksum"] = hex64(encoder_checksum(ck.model));
        detail::write_or_print(st.out, j.dump(2) + "\n");
        const auto& best = result.best_run();
        err << fmt::format("best weighted F1 {:.4f} at epoch {} (lr {:g}){}\n", best.reported_f1(), best.best_epoch, best.learning_rate,
                           best.outlier ? " [outlier: " + best.outlier_reason + "]" : "");
        return best.aborted ? exit_failure : exit_ok;
    };
    auto* finetune_cmd = app.add_subcommand("finetune", "full fine-tuning");
    add_train_opts(finetune_cmd);
    finetune_cmd->add_option("--lr", lr, "learning rate (default: first of the config's list)");
    finetune_cmd->callback([&] { action = [&] { return run_training_cmd(TrainMode::FullFineTune, false); }; });
    auto* probe_cmd = app.add_subcommand("probe", "linear probe on a frozen encoder");
    add_train_opts(probe_cmd);
    probe_cmd->add_option("--lr", lr, "learning rate (default: first of the config's list)");
    probe_cmd->callback([&] { action = [&] { return run_training_cmd(TrainMode::LinearProbe, false); }; });
    auto* sweep_cmd = app.add_subcommand("sweep", "learning-rate sweep in the config's mode");
    add_train_opts(sweep_cmd);
    sweep_cmd->callback([&] { action = [&] { return run_training_cmd(std::nullopt, true); }; });

    // matrix
    std::optional<std::size_t> workers;
    auto* matrix = app.add_subcommand("matrix", "run the corruption matrix and write results + report");
    common(matrix);
    matrix->add_option("--workers", workers, "parallel runs");
    matrix->callback([&] {
        action = [&] {
            if (st.config.empty()) throw ValidationError("matrix needs --config");
            auto cfg = detail::load_config_or_default(st);
            if (!st.out.empty()) cfg.output_dir = st.out;
            if (st.seed) cfg.seeds = {*st.seed};
            if (workers) cfg.workers = *workers;
            auto outcome = run_matrix(cfg, &err);
            const auto md = emit_report(outcome.records, ReportFormat::Markdown);
            write_text_file((std::filesystem::path(cfg.output_dir) / "report.md").string(), md);
            write_text_file((std::filesystem::path(cfg.output_dir) / "report.csv").string(), emit_report(outcome.records, ReportFormat::Csv));
            out << md << "results: " << outcome.results_path << " (" << outcome.records.size() << " runs, " << outcome.executed
                << " executed)\n";
            return exit_ok;
        };
    });

    // project
    std::vector<std::string> checkpoints, titles;
    std::string pooling = "cls";
    double perplexity = 30.0;
    std::size_t iterations = 1000;
    auto* project = app.add_subcommand("project", "t-SNE projection of pooled features");
    common(project);
    project->add_option("--checkpoint", checkpoints, "one or more checkpoints (one panel each)")->required();
    project->add_option("--title", titles, "panel titles");
    project->add_option("--dataset", dataset_name, "dataset name from the config (default: first)");
    project->add_option("--pooling", pooling, "cls|mean");
    project->add_option("--perplexity", perplexity, "t-SNE perplexity");
    project->add_option("--iterations", iterations, "t-SNE iterations");
    project->callback([&] {
        action = [&] {
            if (st.config.empty()) throw ValidationError("project needs --config for the dataset");
            auto cfg = detail::load_config_or_default(st);
            const auto& dc = detail::pick_dataset(cfg, dataset_name);
            auto test = dc.load(cfg.base_dir).second;
            const auto dir = st.out.empty() ? (std::filesystem::path(cfg.output_dir) / "projections").string() : st.out;
            std::filesystem::create_directories(dir);
            std::vector<std::pair<std::string, Projection>> panels;
            for (std::size_t i = 0; i < checkpoints.size(); ++i) {
                auto ck = load_checkpoint(checkpoints[i]);
                TsneOptions opt;
                opt.perplexity = perplexity;
                opt.iterations = iterations;
                opt.seed = st.seed.value_or(0);
                auto proj = tsne(extract_features(ck, test, parse_pooling(pooling), {}, cfg.max_seq_len), opt);
                const std::string title = i < titles.size() ? titles[i] : std::filesystem::path(checkpoints[i]).stem().string();
                write_text_file((std::filesystem::path(dir) / (title + ".csv")).string(), projection_csv(proj, test.label_names));
                out << fmt::format("{}: silhouette {:.4f}, KL {:.4f} -> {:.4f}\n", title, silhouette(proj), proj.initial_kl, proj.final_kl);
                panels.emplace_back(title, std::move(proj));
            }
            const auto svg = (std::filesystem::path(dir) / "projection.svg").string();
            write_text_file(svg, projection_svg(panels, test.label_names));
            out << svg << '\n';
            return exit_ok;
        };
    });

    // report
    std::string results_path, format = "markdown";
    auto* report = app.add_subcommand("report", "render a results store as a table");
    common(report);
    report->add_option("--results", results_path, "results.jsonl (default: <config output_dir>/results.jsonl)");
    report->add_option("--format", format, "markdown|csv");
    report->callback([&] {
        action = [&] {
            std::string path = results_path;
            if (path.empty()) {
                if (st.config.empty()) throw ValidationError("report needs --results or --config");
                path = (std::filesystem::path(detail::load_config_or_default(st).output_dir) / "results.jsonl").string();
            }
            if (!std::filesystem::exists(path)) throw ValidationError("no results store at '" + path + "'");
            ResultsStore store(path);
            detail::write_or_print(st.out, emit_report(store.records(), parse_report_format(format)));
            return exit_ok;
        };
    });

    // gradcheck
    double tolerance = 1e-4;
    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every op and a 2-layer encoder");
    gradcheck->add_option("--seed", st.seed, "seed");
    gradcheck->add_option("--tolerance", tolerance, "max relative error");
    gradcheck->callback([&] {
        action = [&] {
            GradCheckOptions opt;
            opt.tolerance = tolerance;
            bool all = true;
            for (const auto& e : gradient_suite(st.seed.value_or(0), opt)) {
                out << fmt::format("{:<20} {:>10.3e} {}\n", e.name, e.report.max_rel_error(), e.report.passed ? "ok" : "FAIL " + e.report.failure);
                all &= e.report.passed;
            }
            return all ? exit_ok : exit_failure;
        };
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err) == 0 ? exit_ok : exit_validation;
    }
    try {
        return action ? action() : exit_validation;
    } catch (const ValidationError& e) {
        err << "error: " << e.what() << '\n';
        return exit_validation;
    } catch (const nlohmann::json::exception& e) {
        err << "error: malformed input: " << e.what() << '\n';
        return exit_validation;
    } catch (const std::exception& e) {
        err << "run failed: " << e.what() << '\n';
        return exit_failure;
    }
}

}  // namespace corruptlab
