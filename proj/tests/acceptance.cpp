// One PASS/FAIL line per acceptance criterion. Exit status is nonzero when
// any criterion fails.
//
//   corruptlab_acceptance [output_root]

#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <map>
#include <random>

#include <fmt/core.h>

#include "corruptlab/checkpoint.hpp"
#include "corruptlab/corruption.hpp"
#include "corruptlab/experiment.hpp"
#include "corruptlab/grad_suite.hpp"
#include "corruptlab/metrics.hpp"
#include "corruptlab/report.hpp"

using namespace corruptlab;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Verdict {
    bool pass = false;
    std::string detail;
};

std::string read_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

ExperimentConfig config_at(const std::string& name, const fs::path& out) {
    auto cfg = load_experiment_config(std::string(CORRUPTLAB_SOURCE_DIR) + "/configs/" + name);
    cfg.output_dir = out.string();
    return cfg;
}

// per-class tp/fp/fn by direct counting
double brute_weighted_f1(const std::vector<std::int32_t>& pred, const std::vector<std::int32_t>& gold, std::size_t C) {
    double total = 0.0;
    for (std::size_t k = 0; k < C; ++k) {
        const auto c = static_cast<std::int32_t>(k);
        double tp = 0, fp = 0, fn = 0;
        for (std::size_t i = 0; i < gold.size(); ++i) {
            if (pred[i] == c && gold[i] == c) tp += 1;
            if (pred[i] == c && gold[i] != c) fp += 1;
            if (pred[i] != c && gold[i] == c) fn += 1;
        }
        const double support = tp + fn;
        if (support == 0) continue;
        const double f1 = tp == 0 ? 0.0 : 2 * tp / (2 * tp + fp + fn);
        total += f1 * support;
    }
    return total / static_cast<double>(gold.size());
}

// (seed, fraction, direction) -> record
using Cells = std::map<std::tuple<std::uint64_t, double, std::string>, json>;

Cells index_records(const std::vector<json>& recs) {
    Cells out;
    for (const auto& r : recs) out[{r.at("seed").get<std::uint64_t>(), r.at("fraction").get<double>(), r.at("direction").get<std::string>()}] = r;
    return out;
}

double f1_of(const Cells& c, std::uint64_t seed, double f, const std::string& dir) { return c.at({seed, f, dir}).at("best_f1").get<double>(); }

std::string dir_at(double f, const std::string& partial) { return f == 0.0 ? "none" : f == 1.0 ? "full" : partial; }

}  // namespace

int main(int argc, char** argv) {
    const fs::path root = argc > 1 ? fs::path(argv[1]) : fs::path(CORRUPTLAB_BINARY_DIR) / "acceptance";
    fs::remove_all(root);
    fs::create_directories(root);
    std::ofstream log((root / "matrix.log").string());

    std::map<int, std::pair<std::string, Verdict>> results;
    auto record = [&](int id, const std::string& name, const std::function<Verdict()>& body) {
        Verdict v;
        try {
            v = body();
        } catch (const std::exception& e) {
            v = {false, std::string("threw: ") + e.what()};
        }
        results[id] = {name, v};
        std::cerr << fmt::format("[{}] {} {}\n", id, v.pass ? "pass" : "fail", v.detail);
    };

    // The main matrix: 5 seeds, 0/25/50/75/100 %, both directions.
    const auto cfg_a = config_at("synthetic_tiny.json", root / "matrix_a");
    std::optional<MatrixOutcome> matrix_a;
    std::string matrix_error;
    try {
        matrix_a = run_matrix(cfg_a, &log);
    } catch (const std::exception& e) {
        matrix_error = e.what();
    }
    auto need_matrix = [&] {
        if (!matrix_a) throw Error("main matrix failed: " + matrix_error);
        return index_records(matrix_a->records);
    };
    const std::vector<double> fractions{0.0, 0.25, 0.5, 0.75, 1.0};
    const auto& seeds = cfg_a.seeds;

    record(1, "corruption exactness (verify, every fraction and direction)", [&] {
        const auto ck = obtain_pretrained(cfg_a);
        const std::size_t L = ck.model.config().num_layers;
        std::size_t checked = 0;
        std::vector<std::pair<double, Direction>> cells{{0.0, Direction::None}, {1.0, Direction::Full}};
        for (double f : {0.25, 0.5, 0.75})
            for (auto d : {Direction::Bottom, Direction::Top}) cells.emplace_back(f, d);
        for (const auto& [f, d] : cells) {
            for (std::uint64_t seed : {0ull, 1ull}) {
                auto spec = CorruptionSpec::make(d, f, seed);
                spec.resolve(L);
                auto [out, manifest] = corrupt(ck.model, spec);
                auto rep = verify_corruption(ck.model, out, spec);
                if (!rep.passed) return Verdict{false, fmt::format("{} {:g}: {}", to_string(d), f, rep.failure)};
                ++checked;
            }
        }
        return Verdict{true, fmt::format("{} corruptions verified on the tiny checkpoint", checked)};
    });

    record(2, "layer-range labels for L = 12, 24, 6", [&] {
        const std::tuple<std::size_t, double, const char*> rows[] = {
            {12, .25, "(1-3)"}, {12, .5, "(1-6)"},  {12, .75, "(1-9)"},  {12, 1, "(1-12)"}, {24, .25, "(1-6)"},
            {24, .5, "(1-12)"}, {24, .75, "(1-18)"}, {24, 1, "(1-24)"}, {6, .5, "(1-3)"},   {6, 1, "(1-6)"},
        };
        for (const auto& [L, f, want] : rows) {
            const auto got = layer_count_label(L, f);
            if (got != want) return Verdict{false, fmt::format("L={} f={}: got {} want {}", L, f, got, want)};
        }
        return Verdict{true, "10/10 labels"};
    });

    record(3, "gradient check of every op and a 2-layer H=8 encoder at 1e-4", [&] {
        const auto suite = gradient_suite(0);
        double worst = 0.0;
        std::string worst_name;
        for (const auto& e : suite) {
            if (!e.report.passed) return Verdict{false, e.name + ": " + e.report.failure};
            if (e.report.max_rel_error() >= worst) worst = e.report.max_rel_error(), worst_name = e.name;
        }
        const bool has_encoder = std::any_of(suite.begin(), suite.end(), [](const auto& e) { return e.name.starts_with("encoder"); });
        if (!has_encoder) return Verdict{false, "suite has no encoder entry"};
        return Verdict{true, fmt::format("{} checks, worst {:.2e} ({})", suite.size(), worst, worst_name)};
    });

    record(4, "weighted F1 matches brute force within 1e-12", [&] {
        const std::vector<std::int32_t> p{0, 0, 0, 0}, y{0, 0, 1, 1};
        if (std::abs(weighted_f1(p, y, 2) - 1.0 / 3.0) > 1e-12) return Verdict{false, "1/3 example"};
        Rng rng(99);
        double worst = 0.0;
        for (int t = 0; t < 100; ++t) {
            const std::size_t C = std::uniform_int_distribution<std::size_t>(2, 8)(rng);
            const std::size_t N = std::uniform_int_distribution<std::size_t>(1, 200)(rng);
            std::uniform_int_distribution<std::int32_t> cls(0, static_cast<std::int32_t>(C) - 1);
            std::vector<std::int32_t> a(N), b(N);
            for (std::size_t i = 0; i < N; ++i) a[i] = cls(rng), b[i] = cls(rng);
            worst = std::max(worst, std::abs(weighted_f1(a, b, C) - brute_weighted_f1(a, b, C)));
        }
        return Verdict{worst <= 1e-12, fmt::format("100 instances + 1/3 example, max diff {:.1e}", worst)};
    });

    record(5, "uncorrupted fine-tune reaches best F1 >= 0.95 within 10 epochs", [&] {
        const auto cells = need_matrix();
        double lo = 1.0;
        std::size_t latest = 0;
        for (auto s : seeds) {
            const auto& r = cells.at({s, 0.0, "none"});
            lo = std::min(lo, r.at("best_f1").get<double>());
            latest = std::max(latest, r.at("best_epoch").get<std::size_t>());
        }
        return Verdict{lo >= 0.95 && latest <= 10 && cfg_a.epochs <= 10,
                       fmt::format("min over {} seeds {:.4f}, latest best epoch {}", seeds.size(), lo, latest)};
    });

    record(6, "bottom-corruption mean F1 non-increasing; F1(100%) < F1(0%) per seed", [&] {
        const auto cells = need_matrix();
        std::vector<double> means;
        for (double f : fractions) {
            double sum = 0.0;
            for (auto s : seeds) sum += f1_of(cells, s, f, dir_at(f, "bottom"));
            means.push_back(sum / static_cast<double>(seeds.size()));
        }
        bool ok = true;
        for (std::size_t i = 1; i < means.size(); ++i) ok &= means[i] <= means[i - 1] + 0.01;
        std::size_t dropped = 0;
        for (auto s : seeds) dropped += f1_of(cells, s, 1.0, "full") < f1_of(cells, s, 0.0, "none");
        ok &= dropped == seeds.size();
        return Verdict{ok, fmt::format("means {:.4f} {:.4f} {:.4f} {:.4f} {:.4f}; 100% below 0% in {}/{} seeds", means[0], means[1],
                                       means[2], means[3], means[4], dropped, seeds.size())};
    });

    record(7, "bottom <= top: means in >= 2 of 3 fractions, >= 4 of 5 seeds at 50%", [&] {
        const auto cells = need_matrix();
        std::size_t frac_ok = 0;
        std::string means;
        for (double f : {0.25, 0.5, 0.75}) {
            double b = 0, t = 0;
            for (auto s : seeds) b += f1_of(cells, s, f, "bottom"), t += f1_of(cells, s, f, "top");
            b /= static_cast<double>(seeds.size()), t /= static_cast<double>(seeds.size());
            frac_ok += b <= t;
            means += fmt::format(" {:g}%: {:.4f}/{:.4f}", f * 100, b, t);
        }
        std::size_t seed_ok = 0;
        for (auto s : seeds) seed_ok += f1_of(cells, s, 0.5, "bottom") <= f1_of(cells, s, 0.5, "top");
        return Verdict{frac_ok >= 2 && seed_ok >= 4,
                       fmt::format("fractions {}/3, seeds at 50% {}/{};{}", frac_ok, seed_ok, seeds.size(), means)};
    });

    record(8, "linear probe leaves the encoder unchanged; probe matrix reports", [&] {
        auto cfg = config_at("synthetic_tiny_probe.json", root / "matrix_probe");
        const auto ck = obtain_pretrained(cfg_a);
        const auto before = encoder_checksum(ck.model);
        const auto [train, test] = cfg.datasets.front().load(cfg.base_dir);
        auto tc = cfg.train_config(0);
        auto out = linear_probe_model(ck, train, test, tc);
        const bool frozen = encoder_checksum(ck.model) == before && encoder_checksum(out.model) == before;
        const auto outcome = run_matrix(cfg, &log);
        const auto md = emit_report(outcome.records, ReportFormat::Markdown);
        std::ofstream(root / "matrix_probe" / "report.md") << md;
        std::size_t aborted = 0;
        for (const auto& r : outcome.records) aborted += r.at("aborted").get<bool>();
        const bool rendered = md.find("| Corruption |") != std::string::npos && md.find("100%") != std::string::npos;
        return Verdict{frozen && rendered && aborted == 0 && outcome.records.size() == enumerate_runs(cfg).size(),
                       fmt::format("checksum {} ({}), {} probe runs, {} aborted, report {}", hex64(before), frozen ? "unchanged" : "CHANGED",
                                   outcome.records.size(), aborted, rendered ? "rendered" : "missing")};
    });

    record(9, "silhouette(0%) > silhouette(100%) in >= 4 of 5 seeds; KL decreases", [&] {
        const auto cells = need_matrix();
        std::size_t wins = 0, kl_ok = 0, projections = 0;
        std::string sil;
        for (auto s : seeds) {
            const auto& p0 = cells.at({s, 0.0, "none"}).at("projection");
            const auto& p1 = cells.at({s, 1.0, "full"}).at("projection");
            wins += p0.at("silhouette").get<double>() > p1.at("silhouette").get<double>();
            sil += fmt::format(" {:.3f}/{:.3f}", p0.at("silhouette").get<double>(), p1.at("silhouette").get<double>());
            for (const auto* p : {&p0, &p1}) {
                ++projections;
                kl_ok += p->at("final_kl").get<double>() < p->at("initial_kl").get<double>();
            }
        }
        return Verdict{wins >= 4 && kl_ok == projections,
                       fmt::format("{}/{} seeds, KL down in {}/{} projections; 0%/100%:{}", wins, seeds.size(), kl_ok, projections, sil)};
    });

    record(10, "lr=10 run flagged and marked; healthy run not flagged", [&] {
        need_matrix();
        auto make = [&](const std::string& dir, double lr) {
            auto cfg = config_at("synthetic_tiny.json", root / dir);
            cfg.pretrain = json{{"checkpoint", (fs::path(cfg_a.output_dir) / "pretrained.ckpt").string()}};
            cfg.fractions = {0.0};
            cfg.seeds = {0};
            cfg.learning_rates = {lr};
            cfg.lr_scale = 1.0;
            cfg.projection.enabled = false;
            return run_matrix(cfg, &log).records;
        };
        const auto hot = make("lr10", 10.0);
        const auto calm = make("lr_healthy", cfg_a.effective_learning_rates().front());
        const bool hot_flagged = hot.at(0).at("outlier").get<bool>();
        const bool hot_marked = emit_report(hot, ReportFormat::Markdown).find(outlier_marker) != std::string::npos;
        const bool calm_clear = !calm.at(0).at("outlier").get<bool>() &&
                                emit_report(calm, ReportFormat::Markdown).find(outlier_marker) == std::string::npos;
        return Verdict{hot_flagged && hot_marked && calm_clear,
                       fmt::format("lr=10: F1 {:.4f} flagged={} ({}); healthy: F1 {:.4f} flagged={}", hot.at(0).at("best_f1").get<double>(),
                                   hot_flagged, hot.at(0).at("outlier_reason").get<std::string>(), calm.at(0).at("best_f1").get<double>(),
                                   calm.at(0).at("outlier").get<bool>())};
    });

    record(11, "rerun reproduces every metric bit-for-bit", [&] {
        need_matrix();
        const auto cfg_b = config_at("synthetic_tiny.json", root / "matrix_b");
        const auto b = run_matrix(cfg_b, &log);
        if (b.records.size() != matrix_a->records.size()) return Verdict{false, "record counts differ"};
        std::size_t same = 0;
        for (std::size_t i = 0; i < b.records.size(); ++i) same += record_metrics(b.records[i]) == record_metrics(matrix_a->records[i]);
        const bool ckpt_same = read_bytes(root / "matrix_a" / "pretrained.ckpt") == read_bytes(root / "matrix_b" / "pretrained.ckpt");
        std::size_t csv_same = 0, csvs = 0;
        for (const auto& e : fs::directory_iterator(root / "matrix_a" / "projections")) {
            if (e.path().extension() != ".csv") continue;
            ++csvs;
            csv_same += read_bytes(e.path()) == read_bytes(root / "matrix_b" / "projections" / e.path().filename());
        }
        return Verdict{same == b.records.size() && ckpt_same && csv_same == csvs && csvs > 0,
                       fmt::format("{}/{} records identical, pre-trained checkpoint {}, {}/{} projection files identical", same,
                                   b.records.size(), ckpt_same ? "identical" : "differs", csv_same, csvs)};
    });

    if (matrix_a) std::ofstream(root / "matrix_a" / "report.md") << emit_report(matrix_a->records, ReportFormat::Markdown);

    std::size_t failed = 0;
    std::string summary;
    for (const auto& [id, entry] : results) {
        const auto& [name, v] = entry;
        failed += !v.pass;
        summary += fmt::format("{} [{:>2}] {}: {}\n", v.pass ? "PASS" : "FAIL", id, name, v.detail);
    }
    summary += fmt::format("{}/{} criteria passed\n", results.size() - failed, results.size());
    std::cout << summary;
    std::ofstream(root / "summary.txt") << summary;
    return failed == 0 ? 0 : 1;
}
