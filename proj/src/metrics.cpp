#include "qasa/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

namespace qasa {

PartitionMap hard_partition(const AttentionMap& a, int grid_h, int grid_w, int image_h, int image_w) {
    if (a.rows() != static_cast<ad::Index>(grid_h) * grid_w) {
        throw std::invalid_argument("hard_partition: token count does not match grid");
    }
    if (image_h % grid_h != 0 || image_w % grid_w != 0) {
        throw std::invalid_argument("hard_partition: image size is not a multiple of the grid");
    }
    PartitionMap p;
    p.grid_h = grid_h;
    p.grid_w = grid_w;
    p.image_h = image_h;
    p.image_w = image_w;
    p.winners = compute_winners(a);
    std::set<int> active(p.winners.begin(), p.winners.end());
    p.active_slot_ids.assign(active.begin(), active.end());
    p.inferred_k = static_cast<int>(active.size());

    const int sy = image_h / grid_h;
    const int sx = image_w / grid_w;
    p.upsampled_labels.resize(static_cast<std::size_t>(image_h) * image_w);
    for (int y = 0; y < image_h; ++y) {
        for (int x = 0; x < image_w; ++x) {
            p.upsampled_labels[static_cast<std::size_t>(y) * image_w + x] =
                p.winners[static_cast<std::size_t>((y / sy) * grid_w + x / sx)];
        }
    }
    return p;
}

IouTable iou_table(const std::vector<int>& pred, const SceneSample& gt, const EvalOptions& opt) {
    if (pred.size() != gt.instance_labels.size()) throw std::invalid_argument("prediction and GT sizes differ");
    IouTable t;
    std::set<int> pred_set(pred.begin(), pred.end());
    t.pred_ids.assign(pred_set.begin(), pred_set.end());
    for (int g = opt.ignore_background ? 1 : 0; g <= gt.object_count; ++g) t.gt_ids.push_back(g);

    std::map<int, std::size_t> pred_index;
    for (std::size_t i = 0; i < t.pred_ids.size(); ++i) pred_index[t.pred_ids[i]] = i;
    const std::size_t np = t.pred_ids.size();
    const std::size_t ng = static_cast<std::size_t>(gt.object_count) + 1;
    std::vector<double> inter(np * ng, 0.0), area_p(np, 0.0), area_g(ng, 0.0);
    for (std::size_t px = 0; px < pred.size(); ++px) {
        const std::size_t pi = pred_index[pred[px]];
        const std::size_t gi = gt.instance_labels[px];
        inter[pi * ng + gi] += 1.0;
        area_p[pi] += 1.0;
        area_g[gi] += 1.0;
    }
    t.iou.assign(np, std::vector<double>(t.gt_ids.size(), 0.0));
    for (std::size_t i = 0; i < np; ++i) {
        for (std::size_t j = 0; j < t.gt_ids.size(); ++j) {
            const auto g = static_cast<std::size_t>(t.gt_ids[j]);
            const double uni = area_p[i] + area_g[g] - inter[i * ng + g];
            t.iou[i][j] = uni > 0.0 ? inter[i * ng + g] / uni : 0.0;
        }
    }
    return t;
}

std::optional<double> mbo(const std::vector<int>& pred, const SceneSample& gt, OverlapLevel level,
                          const EvalOptions& opt) {
    const IouTable t = iou_table(pred, gt, opt);
    if (t.gt_ids.empty()) return std::nullopt;
    std::vector<double> best(t.gt_ids.size(), 0.0);
    for (std::size_t j = 0; j < t.gt_ids.size(); ++j) {
        for (std::size_t i = 0; i < t.pred_ids.size(); ++i) best[j] = std::max(best[j], t.iou[i][j]);
    }
    if (level == OverlapLevel::Instance) {
        return std::accumulate(best.begin(), best.end(), 0.0) / static_cast<double>(best.size());
    }
    // Class level: background is its own class (-1).
    std::map<int, std::pair<double, int>> per_class;
    for (std::size_t j = 0; j < t.gt_ids.size(); ++j) {
        const int g = t.gt_ids[j];
        const int cls = g == 0 ? -1 : gt.class_ids[static_cast<std::size_t>(g - 1)];
        auto& acc = per_class[cls];
        acc.first += best[j];
        acc.second += 1;
    }
    double total = 0.0;
    for (const auto& [cls, acc] : per_class) total += acc.first / acc.second;
    return total / static_cast<double>(per_class.size());
}

std::vector<int> hungarian_max(const std::vector<std::vector<double>>& score) {
    const std::size_t rows = score.size();
    if (rows == 0) return {};
    const std::size_t cols = score.front().size();
    const std::size_t n = std::max(rows, cols);
    // Square cost matrix (minimization); dummy entries have zero score.
    double max_score = 0.0;
    for (const auto& r : score) {
        if (r.size() != cols) throw std::invalid_argument("hungarian_max: ragged score matrix");
        for (double v : r) max_score = std::max(max_score, v);
    }
    std::vector<std::vector<double>> cost(n + 1, std::vector<double>(n + 1, max_score));
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) cost[i + 1][j + 1] = max_score - score[i][j];
    }

    // Shortest augmenting path formulation with potentials, 1-indexed.
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
    std::vector<std::size_t> match_col(n + 1, 0), way(n + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        match_col[0] = i;
        std::size_t j0 = 0;
        std::vector<double> minv(n + 1, inf);
        std::vector<char> used(n + 1, 0);
        do {
            used[j0] = 1;
            const std::size_t i0 = match_col[j0];
            double delta = inf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const double cur = cost[i0][j] - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[match_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (match_col[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            match_col[j0] = match_col[j1];
            j0 = j1;
        } while (j0 != 0);
    }

    std::vector<int> row_to_col(rows, -1);
    for (std::size_t j = 1; j <= n; ++j) {
        const std::size_t i = match_col[j];
        if (i >= 1 && i <= rows && j <= cols) row_to_col[i - 1] = static_cast<int>(j - 1);
    }
    return row_to_col;
}

std::optional<double> miou_hungarian(const std::vector<int>& pred, const SceneSample& gt, const EvalOptions& opt) {
    const IouTable t = iou_table(pred, gt, opt);
    if (t.gt_ids.empty()) return std::nullopt;
    // Rows are GT masks so unmatched GT (more GT than predictions) score 0.
    std::vector<std::vector<double>> gt_rows(t.gt_ids.size(), std::vector<double>(t.pred_ids.size(), 0.0));
    for (std::size_t i = 0; i < t.pred_ids.size(); ++i) {
        for (std::size_t j = 0; j < t.gt_ids.size(); ++j) gt_rows[j][i] = t.iou[i][j];
    }
    const auto assign = hungarian_max(gt_rows);
    double total = 0.0;
    for (std::size_t j = 0; j < assign.size(); ++j) {
        if (assign[j] >= 0) total += gt_rows[j][static_cast<std::size_t>(assign[j])];
    }
    return total / static_cast<double>(t.gt_ids.size());
}

namespace {

std::vector<double> average_ranks(const std::vector<double>& x) {
    std::vector<std::size_t> idx(x.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
    std::vector<double> rank(x.size());
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
        const double r = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) rank[idx[k]] = r;
        i = j + 1;
    }
    return rank;
}

}  // namespace

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size()) throw std::invalid_argument("spearman: length mismatch");
    if (x.size() < 2) return 0.0;
    const auto rx = average_ranks(x);
    const auto ry = average_ranks(y);
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
    const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) return 0.0;
    return sxy / std::sqrt(sxx * syy);
}

MetricsReport evaluate_partitions(const std::vector<PartitionMap>& partitions, const std::vector<SceneSample>& samples,
                                  const EvalOptions& opt) {
    if (partitions.size() != samples.size()) throw std::invalid_argument("partition/sample count mismatch");
    MetricsReport r;
    std::vector<double> ks, counts;
    for (std::size_t s = 0; s < samples.size(); ++s) {
        const auto& gt = samples[s];
        const auto& p = partitions[s];
        if (gt.object_count == 0) {
            ++r.skipped;
            continue;
        }
        auto i = mbo(p.upsampled_labels, gt, OverlapLevel::Instance, opt);
        auto c = mbo(p.upsampled_labels, gt, OverlapLevel::Class, opt);
        auto m = miou_hungarian(p.upsampled_labels, gt, opt);
        if (!i || !c || !m) {
            ++r.skipped;
            continue;
        }
        r.per_sample.push_back({p.inferred_k, gt.object_count, *i, *c, *m});
        ks.push_back(p.inferred_k);
        counts.push_back(gt.object_count);
        ++r.k_histogram[p.inferred_k];
    }
    if (!r.per_sample.empty()) {
        const double n = static_cast<double>(r.per_sample.size());
        for (const auto& s : r.per_sample) {
            r.mboi += s.mboi / n;
            r.mboc += s.mboc / n;
            r.miou += s.miou / n;
            r.mean_inferred_k += s.inferred_k / n;
        }
        r.k_correlation = spearman(ks, counts);
    }
    return r;
}

std::string format_report(const MetricsReport& r) {
    std::ostringstream out;
    out.precision(6);
    out << std::fixed;
    for (std::size_t i = 0; i < r.per_sample.size(); ++i) {
        const auto& s = r.per_sample[i];
        out << "sample=" << i << " inferred_k=" << s.inferred_k << " gt_count=" << s.gt_count << " mboi=" << s.mboi
            << " mboc=" << s.mboc << " miou=" << s.miou << "\n";
    }
    out << "[summary]\n";
    out << "samples=" << r.per_sample.size() << "\n";
    out << "skipped=" << r.skipped << "\n";
    out << "mboi=" << r.mboi << "\n";
    out << "mboc=" << r.mboc << "\n";
    out << "miou=" << r.miou << "\n";
    out << "k_correlation=" << r.k_correlation << "\n";
    out << "mean_inferred_k=" << r.mean_inferred_k << "\n";
    out << "k_histogram=";
    bool first = true;
    for (const auto& [k, c] : r.k_histogram) {
        out << (first ? "" : ",") << k << ":" << c;
        first = false;
    }
    out << "\n";
    return out.str();
}

namespace {

std::array<unsigned char, 3> label_colour(int label) {
    if (label < 0) return {0, 0, 0};
    // Golden-ratio hue walk, fixed saturation/value.
    const double h = std::fmod(0.13 + label * 0.618033988749895, 1.0) * 6.0;
    const double s = 0.75, v = 0.95;
    const int sector = static_cast<int>(h);
    const double f = h - sector;
    const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
    double r = v, g = t, b = p;
    switch (sector) {
        case 1: r = q; g = v; b = p; break;
        case 2: r = p; g = v; b = t; break;
        case 3: r = p; g = q; b = v; break;
        case 4: r = t; g = p; b = v; break;
        case 5: r = v; g = p; b = q; break;
        default: break;
    }
    return {static_cast<unsigned char>(r * 255), static_cast<unsigned char>(g * 255), static_cast<unsigned char>(b * 255)};
}

}  // namespace

void write_overlay_ppm(const std::string& path, const SceneSample& sample, const PartitionMap& partition) {
    const int h = sample.height;
    const int w = sample.width;
    if (partition.image_h != h || partition.image_w != w) throw std::invalid_argument("overlay: size mismatch");
    constexpr int kGap = 2;
    const int total_w = 3 * w + 2 * kGap;
    std::vector<unsigned char> px(static_cast<std::size_t>(total_w) * h * 3, 255);
    auto put = [&](int x, int y, std::array<unsigned char, 3> c) {
        auto* d = &px[(static_cast<std::size_t>(y) * total_w + x) * 3];
        d[0] = c[0];
        d[1] = c[1];
        d[2] = c[2];
    };
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            std::array<unsigned char, 3> c{};
            for (int k = 0; k < 3; ++k) {
                c[k] = static_cast<unsigned char>(std::lround(std::clamp(sample.pixel(y, x, k), 0.0f, 1.0f) * 255));
            }
            put(x, y, c);
            const int g = sample.label(y, x);
            put(w + kGap + x, y, g == 0 ? std::array<unsigned char, 3>{30, 30, 30} : label_colour(g));
            put(2 * (w + kGap) + x, y, label_colour(partition.upsampled_labels[static_cast<std::size_t>(y) * w + x] + 17));
        }
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write '" + path + "'");
    out << "P6\n" << total_w << " " << h << "\n255\n";
    out.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
}

}  // namespace qasa
