#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "retmask/common.hpp"
#include "retmask/detect.hpp"
#include "retmask/model.hpp"
#include "retmask/tasks.hpp"

namespace retmask {

// Scalar summaries of how concentrated the retrieval-score mass is.
struct ConcentrationSummary {
    std::vector<double> sorted_scores;  // descending; ties broken by (layer, head)
    std::vector<int> k_list;            // after clamping to the head count
    std::vector<double> topk_mass;      // fraction of total mass in the top k
    double gini = 0.0;
    std::vector<double> tau_presets;
    std::vector<int> heads_above_tau;
    std::vector<std::string> warnings;
};

ConcentrationSummary concentration(const RetrievalScoreTable& table, std::vector<int> k_list,
                                   std::vector<double> tau_presets = {0.1, 0.05});

struct DeltaRow {
    HeadId head;
    double before = 0.0;
    double after = 0.0;
    double delta = 0.0;
    bool masked = false;
};

struct DeltaReport {
    std::vector<DeltaRow> rows;  // every head exactly once, (layer, head) order
    double masked_mean_delta = 0.0;
    double complement_mean_delta = 0.0;
    double overall_before_mean = 0.0;
    double overall_after_mean = 0.0;
    int masked_count = 0;
    std::uint64_t test_set_hash = 0;  // echoed from the tables for comparability
};

DeltaReport delta_report(const RetrievalScoreTable& before, const RetrievalScoreTable& after,
                         const HeadMask& mask);

struct NiahVerdict {
    int id = 0;
    bool correct = false;
    std::string reason;  // "ok", "wrong-answer", "decode-overflow"
};

struct NiahEval {
    double accuracy = 0.0;
    std::vector<NiahVerdict> verdicts;
    std::uint64_t test_set_hash = 0;
};

// Greedy decode + exact-match oracle; per-instance verdicts retained.
// Decode overflow counts as incorrect with its reason recorded.
NiahEval eval_niah(const ModelParams& params, const HeadMask& mask,
                   const std::vector<NeedleInstance>& tests, const DecodeConfig& cfg);

void save_niah_eval(const NiahEval& eval, const std::string& variant,
                    const std::filesystem::path& csv_path);

void save_delta_report(const DeltaReport& report, const std::filesystem::path& csv_path);
DeltaReport load_delta_report(const std::filesystem::path& csv_path);

// Report bundle: CSV tables, an SVG score-distribution plot, a before/after
// scatter, and a manifest holding every number the SVGs show. Rendering is a
// pure function of the manifest.
struct ReportInputs {
    RetrievalScoreTable scores_before;
    RetrievalScoreTable scores_after;   // n_tests == 0 when absent
    HeadMask mask;
    std::vector<std::pair<std::string, double>> niah_accuracies;  // variant -> accuracy
    std::vector<int> top_k;
};

void render_report(const ReportInputs& inputs, const std::filesystem::path& out_dir);

// Exposed for tests: deterministic SVG renderers driven by manifest data only.
std::string render_distribution_svg(const std::vector<double>& sorted_scores);
std::string render_delta_svg(const std::vector<DeltaRow>& rows);

}  // namespace retmask
