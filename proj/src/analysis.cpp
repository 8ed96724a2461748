#include "retmask/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "retmask/hash.hpp"

namespace retmask {

using nlohmann::json;

ConcentrationSummary concentration(const RetrievalScoreTable& table, std::vector<int> k_list,
                                   std::vector<double> tau_presets) {
    if (table.scores.empty()) throw Error("concentration: empty score table");
    const int n = static_cast<int>(table.scores.size());

    ConcentrationSummary out;
    // sort descending, ties by (layer, head) which is the flat index order
    std::vector<int> idx(table.scores.size());
    for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
        return table.scores[static_cast<std::size_t>(a)] > table.scores[static_cast<std::size_t>(b)];
    });
    for (int i : idx) out.sorted_scores.push_back(table.scores[static_cast<std::size_t>(i)]);

    double total = 0.0;
    for (double s : out.sorted_scores) total += s;

    for (int k : k_list) {
        int kk = k;
        if (kk > n) {
            out.warnings.push_back("top-k " + std::to_string(k) + " clamped to head count " +
                                   std::to_string(n));
            kk = n;
        }
        if (kk < 0) kk = 0;
        double mass = 0.0;
        for (int i = 0; i < kk; ++i) mass += out.sorted_scores[static_cast<std::size_t>(i)];
        out.k_list.push_back(kk);
        out.topk_mass.push_back(total > 0.0 ? mass / total : 0.0);
    }

    // Gini over the score vector; zero mass defines a uniform (gini 0) vector
    if (total > 0.0) {
        // sorted ascending form: G = (2*sum(i*x_i)/(n*sum x)) - (n+1)/n with i from 1
        double weighted = 0.0;
        for (int i = 0; i < n; ++i) {
            const double x = out.sorted_scores[static_cast<std::size_t>(n - 1 - i)];  // ascending
            weighted += static_cast<double>(i + 1) * x;
        }
        out.gini = 2.0 * weighted / (static_cast<double>(n) * total) -
                   (static_cast<double>(n) + 1.0) / static_cast<double>(n);
    }

    out.tau_presets = tau_presets;
    for (double tau : tau_presets) {
        int count = 0;
        for (double s : table.scores) count += s >= tau ? 1 : 0;
        out.heads_above_tau.push_back(count);
    }
    return out;
}

DeltaReport delta_report(const RetrievalScoreTable& before, const RetrievalScoreTable& after,
                         const HeadMask& mask) {
    if (before.n_layers != after.n_layers || before.n_heads != after.n_heads)
        throw Error("delta_report: table topology mismatch (" + std::to_string(before.n_layers) +
                    "x" + std::to_string(before.n_heads) + " vs " + std::to_string(after.n_layers) +
                    "x" + std::to_string(after.n_heads) + ")");
    if (before.test_set_hash != after.test_set_hash)
        throw Error("delta_report: score tables were computed on different test sets");

    DeltaReport rep;
    rep.test_set_hash = before.test_set_hash;
    double masked_sum = 0.0, comp_sum = 0.0, before_sum = 0.0, after_sum = 0.0;
    int comp_count = 0;
    for (int l = 0; l < before.n_layers; ++l) {
        for (int h = 0; h < before.n_heads; ++h) {
            DeltaRow row;
            row.head = {l, h};
            row.before = before.score(l, h);
            row.after = after.score(l, h);
            row.delta = row.after - row.before;
            row.masked = mask.contains({l, h});
            before_sum += row.before;
            after_sum += row.after;
            if (row.masked) {
                masked_sum += row.delta;
                ++rep.masked_count;
            } else {
                comp_sum += row.delta;
                ++comp_count;
            }
            rep.rows.push_back(row);
        }
    }
    const int n = before.n_layers * before.n_heads;
    rep.masked_mean_delta = rep.masked_count > 0 ? masked_sum / rep.masked_count : 0.0;
    rep.complement_mean_delta = comp_count > 0 ? comp_sum / comp_count : 0.0;
    rep.overall_before_mean = before_sum / n;
    rep.overall_after_mean = after_sum / n;
    return rep;
}

NiahEval eval_niah(const ModelParams& params, const HeadMask& mask,
                   const std::vector<NeedleInstance>& tests, const DecodeConfig& cfg) {
    if (tests.empty()) throw Error("eval_niah: empty test set (refusing to report an accuracy)");
    NiahEval out;
    out.test_set_hash = niah_set_hash(tests);
    int correct = 0;
    for (const auto& inst : tests) {
        NiahVerdict v;
        v.id = inst.id;
        try {
            DecodeResult res = decode(params, assemble_prompt(inst), cfg, mask);
            v.correct = score_answer(inst, res.tokens);
            v.reason = v.correct ? "ok" : "wrong-answer";
        } catch (const Error&) {
            v.correct = false;
            v.reason = "decode-overflow";
        }
        correct += v.correct ? 1 : 0;
        out.verdicts.push_back(std::move(v));
    }
    out.accuracy = static_cast<double>(correct) / static_cast<double>(tests.size());
    return out;
}

void save_niah_eval(const NiahEval& eval, const std::string& variant,
                    const std::filesystem::path& csv_path) {
    std::ofstream f(csv_path, std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + csv_path.string());
    f << "variant,id,correct,reason\n";
    for (const auto& v : eval.verdicts) {
        f << variant << "," << v.id << "," << (v.correct ? 1 : 0) << "," << v.reason << "\n";
    }
}

void save_delta_report(const DeltaReport& report, const std::filesystem::path& csv_path) {
    std::ofstream f(csv_path, std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + csv_path.string());
    f << "layer,head,before,after,delta,masked\n";
    char buf[160];
    for (const auto& r : report.rows) {
        std::snprintf(buf, sizeof(buf), "%d,%d,%.17g,%.17g,%.17g,%d\n", r.head.layer, r.head.head,
                      r.before, r.after, r.delta, r.masked ? 1 : 0);
        f << buf;
    }
}

DeltaReport load_delta_report(const std::filesystem::path& csv_path) {
    std::ifstream f(csv_path);
    if (!f) throw IoError("cannot open: " + csv_path.string());
    DeltaReport rep;
    std::string line;
    std::getline(f, line);
    double masked_sum = 0.0, comp_sum = 0.0;
    int comp_count = 0;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string cell;
        DeltaRow r;
        std::getline(ss, cell, ',');
        r.head.layer = std::stoi(cell);
        std::getline(ss, cell, ',');
        r.head.head = std::stoi(cell);
        std::getline(ss, cell, ',');
        r.before = std::stod(cell);
        std::getline(ss, cell, ',');
        r.after = std::stod(cell);
        std::getline(ss, cell, ',');
        r.delta = std::stod(cell);
        std::getline(ss, cell, ',');
        r.masked = cell == "1";
        if (r.masked) {
            masked_sum += r.delta;
            ++rep.masked_count;
        } else {
            comp_sum += r.delta;
            ++comp_count;
        }
        rep.rows.push_back(r);
    }
    rep.masked_mean_delta = rep.masked_count > 0 ? masked_sum / rep.masked_count : 0.0;
    rep.complement_mean_delta = comp_count > 0 ? comp_sum / comp_count : 0.0;
    return rep;
}

// ----------------------------- rendering -----------------------------

namespace {

std::string fmt(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

constexpr int kW = 640;
constexpr int kH = 400;
constexpr int kPad = 48;

double x_px(double frac) { return kPad + frac * (kW - 2 * kPad); }
double y_px(double frac) { return kH - kPad - frac * (kH - 2 * kPad); }

void svg_header(std::ostringstream& os, const std::string& title) {
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH
       << "\" viewBox=\"0 0 " << kW << " " << kH << "\">\n";
    os << "<rect width=\"" << kW << "\" height=\"" << kH << "\" fill=\"white\"/>\n";
    os << "<text x=\"" << kW / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"monospace\" "
          "font-size=\"14\">"
       << title << "</text>\n";
    // axes
    os << "<line x1=\"" << kPad << "\" y1=\"" << kH - kPad << "\" x2=\"" << kW - kPad << "\" y2=\""
       << kH - kPad << "\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << kPad << "\" y1=\"" << kPad << "\" x2=\"" << kPad << "\" y2=\""
       << kH - kPad << "\" stroke=\"black\"/>\n";
}

}  // namespace

std::string render_distribution_svg(const std::vector<double>& sorted_scores) {
    std::ostringstream os;
    svg_header(os, "retrieval score distribution (sorted)");
    const int n = static_cast<int>(sorted_scores.size());
    double maxs = 1e-12;
    for (double s : sorted_scores) maxs = std::max(maxs, s);
    os << "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"";
    for (int i = 0; i < n; ++i) {
        const double fx = n > 1 ? static_cast<double>(i) / (n - 1) : 0.5;
        os << fmt(x_px(fx)) << "," << fmt(y_px(sorted_scores[static_cast<std::size_t>(i)] / maxs));
        if (i + 1 < n) os << " ";
    }
    os << "\"/>\n";
    for (int i = 0; i < n; ++i) {
        const double fx = n > 1 ? static_cast<double>(i) / (n - 1) : 0.5;
        os << "<circle cx=\"" << fmt(x_px(fx)) << "\" cy=\""
           << fmt(y_px(sorted_scores[static_cast<std::size_t>(i)] / maxs))
           << "\" r=\"3\" fill=\"steelblue\"/>\n";
    }
    os << "<text x=\"" << kW / 2 << "\" y=\"" << kH - 12
       << "\" text-anchor=\"middle\" font-family=\"monospace\" font-size=\"12\">head rank (n="
       << n << ")</text>\n";
    os << "<text x=\"14\" y=\"" << kPad - 8 << "\" font-family=\"monospace\" font-size=\"12\">max="
       << fmt(maxs) << "</text>\n";
    os << "</svg>\n";
    return os.str();
}

std::string render_delta_svg(const std::vector<DeltaRow>& rows) {
    std::ostringstream os;
    svg_header(os, "retrieval score before vs after (masked highlighted)");
    double maxv = 1e-12;
    for (const auto& r : rows) maxv = std::max({maxv, r.before, r.after});
    // y = x reference
    os << "<line x1=\"" << fmt(x_px(0.0)) << "\" y1=\"" << fmt(y_px(0.0)) << "\" x2=\""
       << fmt(x_px(1.0)) << "\" y2=\"" << fmt(y_px(1.0))
       << "\" stroke=\"gray\" stroke-dasharray=\"4 3\"/>\n";
    for (const auto& r : rows) {
        os << "<circle cx=\"" << fmt(x_px(r.before / maxv)) << "\" cy=\"" << fmt(y_px(r.after / maxv))
           << "\" r=\"4\" fill=\"" << (r.masked ? "crimson" : "steelblue") << "\" fill-opacity=\"0.8\"/>\n";
    }
    os << "<text x=\"" << kW / 2 << "\" y=\"" << kH - 12
       << "\" text-anchor=\"middle\" font-family=\"monospace\" font-size=\"12\">score before "
          "(max="
       << fmt(maxv) << ")</text>\n";
    os << "<text x=\"14\" y=\"" << kPad - 8
       << "\" font-family=\"monospace\" font-size=\"12\">score after</text>\n";
    os << "</svg>\n";
    return os.str();
}

void render_report(const ReportInputs& inputs, const std::filesystem::path& out_dir) {
    std::filesystem::create_directories(out_dir);

    save_score_table(inputs.scores_before, out_dir / "scores.csv", out_dir / "scores_meta.json");

    const bool have_after = inputs.scores_after.n_tests > 0;
    DeltaReport deltas;
    if (have_after) {
        deltas = delta_report(inputs.scores_before, inputs.scores_after, inputs.mask);
        save_delta_report(deltas, out_dir / "deltas.csv");
    }

    {
        std::ofstream f(out_dir / "niah.csv", std::ios::trunc);
        if (!f) throw IoError("cannot open for writing: " + (out_dir / "niah.csv").string());
        f << "variant,accuracy\n";
        char buf[96];
        for (const auto& [variant, acc] : inputs.niah_accuracies) {
            std::snprintf(buf, sizeof(buf), "%s,%.17g\n", variant.c_str(), acc);
            f << buf;
        }
    }

    ConcentrationSummary conc = concentration(inputs.scores_before, inputs.top_k);

    // manifest first; SVGs are rendered from manifest content only
    json manifest;
    manifest["sorted_scores"] = conc.sorted_scores;
    manifest["top_k"] = conc.k_list;
    manifest["topk_mass"] = conc.topk_mass;
    manifest["gini"] = conc.gini;
    manifest["tau_presets"] = conc.tau_presets;
    manifest["heads_above_tau"] = conc.heads_above_tau;
    manifest["warnings"] = conc.warnings;
    json niah = json::object();
    for (const auto& [variant, acc] : inputs.niah_accuracies) niah[variant] = acc;
    manifest["niah_accuracy"] = niah;
    json delta_rows = json::array();
    if (have_after) {
        for (const auto& r : deltas.rows) {
            delta_rows.push_back({{"layer", r.head.layer},
                                  {"head", r.head.head},
                                  {"before", r.before},
                                  {"after", r.after},
                                  {"delta", r.delta},
                                  {"masked", r.masked}});
        }
        manifest["masked_mean_delta"] = deltas.masked_mean_delta;
        manifest["complement_mean_delta"] = deltas.complement_mean_delta;
        manifest["overall_before_mean"] = deltas.overall_before_mean;
        manifest["overall_after_mean"] = deltas.overall_after_mean;
    }
    manifest["delta_rows"] = delta_rows;
    manifest["test_set_hash"] = hex64(inputs.scores_before.test_set_hash);
    {
        std::ofstream f(out_dir / "manifest.json", std::ios::trunc);
        f << manifest.dump(2) << "\n";
    }

    {
        std::vector<double> sorted = manifest.at("sorted_scores").get<std::vector<double>>();
        std::ofstream f(out_dir / "score_distribution.svg", std::ios::trunc);
        f << render_distribution_svg(sorted);
    }
    if (have_after) {
        std::vector<DeltaRow> rows;
        for (const auto& jr : manifest.at("delta_rows")) {
            DeltaRow r;
            r.head = {jr.at("layer").get<int>(), jr.at("head").get<int>()};
            r.before = jr.at("before").get<double>();
            r.after = jr.at("after").get<double>();
            r.delta = jr.at("delta").get<double>();
            r.masked = jr.at("masked").get<bool>();
            rows.push_back(r);
        }
        std::ofstream f(out_dir / "score_deltas.svg", std::ios::trunc);
        f << render_delta_svg(rows);
    }
}

}  // namespace retmask
