#pragma once

// Inference-time hard partitioning and segmentation metrics: mean best
// overlap (instance and class level), Hungarian-matched mIoU, and
// adaptive-K statistics.

#include "qasa/scene.hpp"
#include "qasa/selection.hpp"

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace qasa {

struct PartitionMap {
    std::vector<int> winners;           // grid_h * grid_w
    int grid_h = 0;
    int grid_w = 0;
    std::vector<int> upsampled_labels;  // image_h * image_w
    int image_h = 0;
    int image_w = 0;
    std::vector<int> active_slot_ids;   // ascending
    int inferred_k = 0;
};

/// Per-token argmax (lowest index wins ties), nearest-neighbour upsampled.
PartitionMap hard_partition(const AttentionMap& a, int grid_h, int grid_w, int image_h, int image_w);

enum class OverlapLevel { Instance, Class };

struct EvalOptions {
    bool ignore_background = false;
};

/// IoU between every predicted segment (rows, ascending label) and every GT
/// mask (columns: background first unless ignored, then instances 1..n).
struct IouTable {
    std::vector<int> pred_ids;
    std::vector<int> gt_ids;  // 0 = background
    std::vector<std::vector<double>> iou;
};

IouTable iou_table(const std::vector<int>& pred, const SceneSample& gt, const EvalOptions& opt);

/// Undefined (nullopt) when there are no GT masks to score.
std::optional<double> mbo(const std::vector<int>& pred, const SceneSample& gt, OverlapLevel level,
                          const EvalOptions& opt = {});

/// Maximum-weight one-to-one assignment on a rectangular score matrix.
/// Returns, for every row, the matched column or -1.
std::vector<int> hungarian_max(const std::vector<std::vector<double>>& score);

std::optional<double> miou_hungarian(const std::vector<int>& pred, const SceneSample& gt, const EvalOptions& opt = {});

/// Spearman rank correlation with average ranks for ties; 0 when either
/// side is constant.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

struct SampleMetrics {
    int inferred_k = 0;
    int gt_count = 0;
    double mboi = 0.0;
    double mboc = 0.0;
    double miou = 0.0;
};

struct MetricsReport {
    double mboi = 0.0;
    double mboc = 0.0;
    double miou = 0.0;
    double k_correlation = 0.0;
    double mean_inferred_k = 0.0;
    std::vector<SampleMetrics> per_sample;
    std::map<int, int> k_histogram;
    int skipped = 0;
};

MetricsReport evaluate_partitions(const std::vector<PartitionMap>& partitions, const std::vector<SceneSample>& samples,
                                  const EvalOptions& opt = {});

std::string format_report(const MetricsReport& r);

/// Side-by-side image | GT | prediction panel as binary PPM.
void write_overlay_ppm(const std::string& path, const SceneSample& sample, const PartitionMap& partition);

}  // namespace qasa
