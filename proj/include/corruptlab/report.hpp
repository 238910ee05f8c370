// SPDX-License-Identifier: Apache-2.0
//
// Corruption tables from result records, and projection figures.
#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <fmt/format.h>
#include <json.hpp>

#include "corruptlab/corruption.hpp"
#include "corruptlab/projection.hpp"

namespace corruptlab {

enum class ReportFormat { Markdown, Csv };

inline ReportFormat parse_report_format(std::string_view s) {
    if (s == "markdown" || s == "md") return ReportFormat::Markdown;
    if (s == "csv") return ReportFormat::Csv;
    throw ValidationError("unknown report format '" + std::string(s) + "' (markdown|csv)");
}

inline constexpr const char* outlier_marker = "†";

struct ReportCell {
    double mean_f1 = 0.0;  // mean over seeds of the reported F1, in [0, 1]
    std::size_t seeds = 0;
    std::size_t outliers = 0;
    bool bold = false;
};

/// Aggregated view of the records: one table per training mode, one row per
/// corruption fraction, one column group per (dataset, model).
struct ReportTable {
    std::string mode;
    std::vector<double> fractions;
    std::vector<std::pair<std::string, std::string>> groups;  // (dataset, model)
    std::map<std::string, std::size_t> layers_by_model;
    // (fraction, group index, direction) -> cell; direction is "merged" for 0% and 100%
    std::map<std::tuple<double, std::size_t, std::string>, ReportCell> cells;
    bool has_directions = false;

    const ReportCell* cell(double f, std::size_t g, const std::string& dir) const {
        auto it = cells.find({f, g, dir});
        return it == cells.end() ? nullptr : &it->second;
    }

    std::string row_label(double f) const {
        std::string label = fmt::format("{:g}%", f * 100.0);
        if (f == 0.0) return label;
        std::vector<std::string> ranges;
        for (const auto& [model, L] : layers_by_model) {
            auto r = layer_count_label(L, f);
            if (std::find(ranges.begin(), ranges.end(), r) == ranges.end()) ranges.push_back(r);
        }
        std::string joined;
        for (const auto& r : ranges) joined += (joined.empty() ? "" : " ") + r;
        return label + " " + joined;
    }
};

inline std::vector<ReportTable> aggregate_report(const std::vector<nlohmann::json>& records) {
    if (records.empty()) throw ValidationError("no result records to report");
    std::map<std::string, ReportTable> tables;
    struct Acc {
        double sum = 0.0;
        std::size_t n = 0, outliers = 0;
    };
    std::map<std::string, std::map<std::tuple<double, std::size_t, std::string>, Acc>> acc;
    for (const auto& r : records) {
        const auto mode = r.value("mode", std::string("finetune"));
        auto& t = tables[mode];
        t.mode = mode;
        const std::pair<std::string, std::string> group{r.at("dataset").get<std::string>(), r.at("model").get<std::string>()};
        auto git = std::find(t.groups.begin(), t.groups.end(), group);
        const std::size_t g = static_cast<std::size_t>(git - t.groups.begin());
        if (git == t.groups.end()) t.groups.push_back(group);
        t.layers_by_model[group.second] = r.at("num_layers").get<std::size_t>();
        const double f = r.at("fraction").get<double>();
        if (std::find(t.fractions.begin(), t.fractions.end(), f) == t.fractions.end()) t.fractions.push_back(f);
        std::string dir = "merged";
        if (f > 0.0 && f < 1.0) {
            dir = r.at("direction").get<std::string>();
            t.has_directions = true;
        }
        auto& a = acc[mode][{f, g, dir}];
        a.sum += r.at("best_f1").get<double>();
        ++a.n;
        if (r.value("outlier", false)) ++a.outliers;
    }
    std::vector<ReportTable> out;
    for (auto& [mode, t] : tables) {
        std::sort(t.fractions.begin(), t.fractions.end());
        for (const auto& [key, a] : acc[mode]) t.cells[key] = {a.sum / static_cast<double>(a.n), a.n, a.outliers, false};
        for (double f : t.fractions)
            for (std::size_t g = 0; g < t.groups.size(); ++g) {
                auto b = t.cells.find({f, g, "bottom"});
                auto p = t.cells.find({f, g, "top"});
                if (b == t.cells.end() || p == t.cells.end()) continue;
                const double vb = std::round(b->second.mean_f1 * 1e4), vt = std::round(p->second.mean_f1 * 1e4);
                if (vb > vt) b->second.bold = true;
                if (vt > vb) p->second.bold = true;
            }
        out.push_back(std::move(t));
    }
    return out;
}

namespace detail {

inline std::string render_cell(const ReportCell* c, bool markdown) {
    if (!c) return "";
    std::string v = fmt::format("{:.2f}", c->mean_f1 * 100.0);
    if (markdown && c->bold) v = "**" + v + "**";
    if (c->outliers) v += outlier_marker;
    return v;
}

inline std::string group_name(const ReportTable& t, std::size_t g) {
    std::set<std::string> models;
    for (const auto& [d, m] : t.groups) models.insert(m);
    return models.size() > 1 ? t.groups[g].first + " " + t.groups[g].second : t.groups[g].first;
}

inline std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
    return out + "\"";
}

}  // namespace detail

/// Markdown: rows are corruption levels, Bottom/Top column pairs per dataset,
/// 0% and 100% merged across the pair, the larger of each pair in bold and
/// outlier cells marked. CSV: one line per cell.
inline std::string emit_report(const std::vector<nlohmann::json>& records, ReportFormat format) {
    const auto tables = aggregate_report(records);
    std::ostringstream os;
    if (format == ReportFormat::Csv) {
        os << "mode,corruption,fraction,dataset,model,direction,f1_percent,seeds,outliers,bold\n";
        for (const auto& t : tables)
            for (double f : t.fractions)
                for (std::size_t g = 0; g < t.groups.size(); ++g)
                    for (const char* dir : {"merged", "bottom", "top"}) {
                        const auto* c = t.cell(f, g, dir);
                        if (!c) continue;
                        os << t.mode << ',' << detail::csv_field(t.row_label(f)) << ',' << f << ',' << detail::csv_field(t.groups[g].first)
                           << ',' << detail::csv_field(t.groups[g].second) << ',' << dir << ',' << fmt::format("{:.2f}", c->mean_f1 * 100.0)
                           << ',' << c->seeds << ',' << c->outliers << ',' << (c->bold ? 1 : 0) << '\n';
                    }
        return os.str();
    }
    bool any_outlier = false;
    for (const auto& t : tables) {
        if (tables.size() > 1) os << "### " << t.mode << "\n\n";
        os << "| Corruption |";
        for (std::size_t g = 0; g < t.groups.size(); ++g) {
            if (t.has_directions) {
                os << ' ' << detail::group_name(t, g) << " Bottom | " << detail::group_name(t, g) << " Top |";
            } else {
                os << ' ' << detail::group_name(t, g) << " |";
            }
        }
        os << "\n|---|";
        for (std::size_t g = 0; g < t.groups.size(); ++g) os << (t.has_directions ? "---:|---:|" : "---:|");
        os << '\n';
        for (double f : t.fractions) {
            os << "| " << t.row_label(f) << " |";
            for (std::size_t g = 0; g < t.groups.size(); ++g) {
                if (const auto* m = t.cell(f, g, "merged")) {
                    any_outlier |= m->outliers > 0;
                    os << ' ' << detail::render_cell(m, true) << " |" << (t.has_directions ? " |" : "");
                } else {
                    for (const char* dir : {"bottom", "top"}) {
                        const auto* c = t.cell(f, g, dir);
                        any_outlier |= c && c->outliers > 0;
                        os << ' ' << detail::render_cell(c, true) << " |";
                    }
                }
            }
            os << '\n';
        }
        os << '\n';
    }
    os << "Weighted F1 (%), mean over seeds. Bold: higher of the Bottom/Top pair.";
    if (any_outlier) os << ' ' << outlier_marker << ": at least one outlier run (near majority-class level or diverged).";
    os << '\n';
    return os.str();
}

/// Reads back an x,y,label projection export.
inline Projection load_projection_csv(const std::string& path, const std::vector<std::string>& label_names = {}) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open projection '" + path + "'");
    Projection p;
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string x, y, label;
        std::getline(ls, x, ',');
        std::getline(ls, y, ',');
        std::getline(ls, label);
        p.points.push_back(std::stod(x));
        p.points.push_back(std::stod(y));
        auto it = std::find(label_names.begin(), label_names.end(), label);
        p.labels.push_back(it != label_names.end() ? static_cast<std::int32_t>(it - label_names.begin()) : std::stoi(label));
    }
    return p;
}

/// One multi-panel figure per (dataset, seed) from the projected records,
/// panels ordered by corruption level. Returns the written paths.
inline std::vector<std::string> write_projection_figures(const std::vector<nlohmann::json>& records, const std::string& output_dir) {
    std::map<std::pair<std::string, std::uint64_t>, std::vector<const nlohmann::json*>> groups;
    for (const auto& r : records)
        if (r.contains("projection")) groups[{r.at("dataset").get<std::string>(), r.at("seed").get<std::uint64_t>()}].push_back(&r);
    std::vector<std::string> written;
    for (auto& [key, recs] : groups) {
        std::sort(recs.begin(), recs.end(), [](const auto* a, const auto* b) {
            return std::pair(a->at("fraction").template get<double>(), a->at("direction").template get<std::string>()) <
                   std::pair(b->at("fraction").template get<double>(), b->at("direction").template get<std::string>());
        });
        auto csv_of = [&](const nlohmann::json* r) {
            return (std::filesystem::path(output_dir) / r->at("projection").at("csv").get<std::string>()).string();
        };
        std::set<std::string> names;
        for (const auto* r : recs) {
            std::ifstream in(csv_of(r));
            std::string line;
            std::getline(in, line);
            while (std::getline(in, line))
                if (!line.empty()) names.insert(line.substr(line.rfind(',') + 1));
        }
        const std::vector<std::string> labels(names.begin(), names.end());
        std::vector<std::pair<std::string, Projection>> panels;
        for (const auto* r : recs) {
            const double f = r->at("fraction").get<double>();
            std::string title = fmt::format("{:g}%", f * 100.0);
            if (f > 0.0 && f < 1.0) title += " " + r->at("direction").get<std::string>();
            title += fmt::format(" (silhouette {:.3f})", r->at("projection").at("silhouette").get<double>());
            panels.emplace_back(std::move(title), load_projection_csv(csv_of(r), labels));
        }
        const auto path = (std::filesystem::path(output_dir) / "projections" / fmt::format("{}_s{}.svg", key.first, key.second)).string();
        write_text_file(path, projection_svg(panels, labels));
        written.push_back(path);
    }
    return written;
}

}  // namespace corruptlab
