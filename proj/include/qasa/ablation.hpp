#pragma once

// Ablation sweeps at toy scale: selection-component toggles, gate toggles,
// novelty threshold and K_max. Each variant is a set of config overrides
// applied to a shared base config, trained over several seeds.

#include "qasa/train.hpp"

#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace qasa {

enum class AblationAxis { Components, Gates, Mu, Kmax };

std::string to_string(AblationAxis a);
AblationAxis ablation_axis_from_string(const std::string& s);

struct AblationVariant {
    std::string name;
    std::vector<std::pair<std::string, std::string>> deltas;  // TrainConfig keys
};

struct AblationPlan {
    AblationAxis axis = AblationAxis::Components;
    TrainConfig base;
    std::vector<AblationVariant> variants;
    int replicates = 3;
    std::string data_dir;       // training set
    std::string eval_data_dir;  // held-out set; empty: use the training set
    bool ignore_background = false;

    /// Checks non-empty variants and that every delta applies cleanly.
    void validate() const;
    TrainConfig variant_config(const AblationVariant& v, int replicate) const;

    /// Plan file: top-level axis/replicates/data keys, a [base] section of
    /// TrainConfig keys, then one [variant <name>] section per variant.
    static AblationPlan parse(const std::string& text);
    static AblationPlan load(const std::string& path);
};

/// The paper's rows for one axis. `n_max` sizes the K_max sweep.
std::vector<AblationVariant> standard_variants(AblationAxis axis, int n_max);

struct ReplicateResult {
    int seed = 0;
    bool ok = false;
    std::string error;
    double mboi = 0.0;
    double mboc = 0.0;
    double miou = 0.0;
    double k_correlation = 0.0;
    double mean_inferred_k = 0.0;
    double final_loss = 0.0;
};

struct MeanSd {
    double mean = 0.0;
    double sd = 0.0;  // sample standard deviation; 0 for one replicate
};

MeanSd mean_sd(const std::vector<double>& xs);

struct VariantSummary {
    std::string name;
    std::vector<ReplicateResult> replicates;
    bool failed = false;  // no replicate finished
    MeanSd mboi, mboc, miou, k_correlation;
};

struct TrendFlag {
    std::string description;
    bool holds = false;
};

struct AblationTable {
    AblationAxis axis = AblationAxis::Components;
    std::vector<VariantSummary> variants;
    std::vector<TrendFlag> trends;

    const VariantSummary* find(const std::string& name) const;
};

/// Directional checks for the axis, evaluated on replicate means.
std::vector<TrendFlag> trend_flags(AblationAxis axis, const std::vector<VariantSummary>& variants);

VariantSummary summarize_variant(std::string name, std::vector<ReplicateResult> reps);

using ReplicateRunner = std::function<ReplicateResult(const TrainConfig& cfg, const std::string& variant, int replicate)>;

/// Trains and evaluates every variant x replicate in memory. A throwing
/// replicate is recorded as failed and the sweep continues.
AblationTable run_ablation(const AblationPlan& plan, const std::vector<SceneSample>& train,
                           const std::vector<SceneSample>& eval, const std::string& out_dir = "",
                           std::function<void(const std::string&)> progress = {});

/// Same orchestration with a caller-supplied runner (used by tests).
AblationTable run_ablation_with(const AblationPlan& plan, const ReplicateRunner& runner);

std::string format_ablation_table(const AblationTable& t);

}  // namespace qasa
