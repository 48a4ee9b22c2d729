#include "doctest.h"
#include "test_util.hpp"

#include "qasa/metrics.hpp"

#include <map>
#include <set>

using qasa::EvalOptions;
using qasa::OverlapLevel;
using qasa::SceneSample;

namespace {

SceneSample make_gt(int h, int w, const std::vector<int>& labels, std::vector<int> classes) {
    SceneSample s;
    s.height = h;
    s.width = w;
    s.image.assign(static_cast<std::size_t>(h) * w * 3, 0.0f);
    s.instance_labels.assign(labels.begin(), labels.end());
    s.object_count = static_cast<int>(classes.size());
    s.class_ids = std::move(classes);
    return s;
}

qasa::PartitionMap partition_of(const std::vector<int>& labels, int h, int w) {
    const int k = *std::max_element(labels.begin(), labels.end()) + 1;
    qasa::AttentionMap a = qasa::AttentionMap::Zero(h * w, k);
    for (int t = 0; t < h * w; ++t) a(t, labels[t]) = 1.0;
    return qasa::hard_partition(a, h, w, h, w);
}

// Random GT with every label 0..n present, and a random prediction.
SceneSample random_gt(int side, int n, std::mt19937_64& rng) {
    std::uniform_int_distribution<int> lab(0, n), cls(0, 2);
    std::vector<int> l(side * side);
    for (auto& v : l) v = lab(rng);
    for (int i = 0; i <= n; ++i) l[i] = i;
    std::shuffle(l.begin(), l.end(), rng);
    std::vector<int> c(n);
    for (auto& v : c) v = cls(rng);
    return make_gt(side, side, l, c);
}

std::vector<int> random_pred(int size, int k, std::mt19937_64& rng) {
    std::uniform_int_distribution<int> lab(0, k - 1);
    std::vector<int> p(size);
    for (auto& v : p) v = lab(rng);
    return p;
}

std::vector<int> as_int(const std::vector<std::uint16_t>& v) { return {v.begin(), v.end()}; }

}  // namespace

TEST_CASE("hard partition examples") {
    qasa::AttentionMap a = qasa::AttentionMap::Zero(4, 5);
    a(0, 1) = a(1, 3) = a(2, 3) = a(3, 4) = 1.0;
    auto p = qasa::hard_partition(a, 2, 2, 2, 2);
    CHECK(p.inferred_k == 3);
    CHECK(p.active_slot_ids == std::vector<int>{1, 3, 4});

    qasa::AttentionMap u = qasa::AttentionMap::Constant(4, 3, 1.0 / 3.0);
    auto q = qasa::hard_partition(u, 2, 2, 2, 2);
    CHECK(q.inferred_k == 1);
    CHECK(q.active_slot_ids == std::vector<int>{0});

    qasa::AttentionMap b = qasa::AttentionMap::Zero(4, 4);
    for (int t = 0; t < 4; ++t) b(t, t) = 1.0;
    auto r = qasa::hard_partition(b, 2, 2, 4, 4);
    const std::vector<int> want{0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 3, 3, 2, 2, 3, 3};
    CHECK(r.upsampled_labels == want);
}

TEST_CASE("perfect prediction scores 1 on every metric") {
    std::mt19937_64 rng(1);
    for (int rep = 0; rep < 20; ++rep) {
        auto gt = random_gt(8, 1 + rep % 5, rng);
        auto pred = as_int(gt.instance_labels);
        for (bool ignore : {false, true}) {
            EvalOptions o{ignore};
            CHECK(*qasa::mbo(pred, gt, OverlapLevel::Instance, o) == doctest::Approx(1.0));
            CHECK(*qasa::mbo(pred, gt, OverlapLevel::Class, o) == doctest::Approx(1.0));
            CHECK(*qasa::miou_hungarian(pred, gt, o) == doctest::Approx(1.0));
        }
    }
}

TEST_CASE("single full-image mask against a quarter-image object") {
    std::vector<int> labels(16, 0);
    labels[0] = labels[1] = labels[4] = labels[5] = 1;
    auto gt = make_gt(4, 4, labels, {0});
    std::vector<int> pred(16, 7);
    CHECK(*qasa::mbo(pred, gt, OverlapLevel::Instance, EvalOptions{true}) == doctest::Approx(0.25));
    // with background as a mask: (0.25 + 0.75) / 2
    CHECK(*qasa::mbo(pred, gt, OverlapLevel::Instance, EvalOptions{false}) == doctest::Approx(0.5));
}

TEST_CASE("many-to-one best overlap scores each object independently") {
    // Objects 1 and 2 both sit inside predicted segment 5.
    std::vector<int> labels{1, 1, 2, 0, 0, 0};
    std::vector<int> pred{5, 5, 5, 6, 6, 6};
    auto gt = make_gt(2, 3, labels, {0, 1});
    EvalOptions o{true};
    CHECK(*qasa::mbo(pred, gt, OverlapLevel::Instance, o) == doctest::Approx((2.0 / 3.0 + 1.0 / 3.0) / 2.0));
    // Hungarian can only give segment 5 to one of them.
    CHECK(*qasa::miou_hungarian(pred, gt, o) == doctest::Approx((2.0 / 3.0) / 2.0));
}

TEST_CASE("class level averages within a class first") {
    // Two class-0 objects (best IoU 1 and 0.5) and one class-1 object (IoU 1).
    std::vector<int> labels{1, 2, 2, 3};
    std::vector<int> pred{0, 1, 2, 3};
    auto gt = make_gt(1, 4, labels, {0, 0, 1});
    EvalOptions o{true};
    CHECK(*qasa::mbo(pred, gt, OverlapLevel::Instance, o) == doctest::Approx((1.0 + 0.5 + 1.0) / 3.0));
    CHECK(*qasa::mbo(pred, gt, OverlapLevel::Class, o) == doctest::Approx((0.75 + 1.0) / 2.0));
}

TEST_CASE("one predicted mask against two objects caps mIoU at one half") {
    std::vector<int> labels{1, 1, 2, 2};
    auto gt = make_gt(2, 2, labels, {0, 0});
    std::vector<int> pred{3, 3, 3, 3};
    CHECK(*qasa::miou_hungarian(pred, gt, EvalOptions{true}) <= 0.5);
}

TEST_CASE("Hungarian matches exhaustive search") {
    std::mt19937_64 rng(2);
    std::uniform_int_distribution<int> dim(1, 5);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    int mismatches = 0;
    for (int rep = 0; rep < 500; ++rep) {
        const int r = dim(rng), c = dim(rng);
        oracle::Grid s(r, std::vector<double>(c));
        for (auto& row : s) {
            for (auto& v : row) v = u(rng) < 0.2 ? 0.0 : u(rng);
        }
        auto assign = qasa::hungarian_max(s);
        std::set<int> used;
        double total = 0.0;
        for (int i = 0; i < r; ++i) {
            if (assign[i] < 0) continue;
            CHECK(used.insert(assign[i]).second);
            total += s[i][assign[i]];
        }
        mismatches += std::abs(total - oracle::best_assignment(s)) > 1e-12;
    }
    CHECK(mismatches == 0);
}

TEST_CASE("miou_hungarian equals the pixel-count exhaustive oracle") {
    std::mt19937_64 rng(3);
    for (int rep = 0; rep < 200; ++rep) {
        const int n = 1 + rep % 4;
        auto gt = random_gt(6, n, rng);
        auto pred = random_pred(36, 1 + rep % 5, rng);
        const auto g = as_int(gt.instance_labels);
        std::set<int> pids(pred.begin(), pred.end());
        oracle::Grid s;
        for (int gl = 0; gl <= n; ++gl) {
            std::vector<double> row;
            for (int p : pids) row.push_back(oracle::iou(pred, p, g, gl));
            s.push_back(row);
        }
        const double want = oracle::best_assignment(s) / (n + 1);
        CHECK(std::abs(*qasa::miou_hungarian(pred, gt) - want) < 1e-12);
    }
}

TEST_CASE("mBOi is never below Hungarian mIoU") {
    std::mt19937_64 rng(4);
    for (int rep = 0; rep < 200; ++rep) {
        auto gt = random_gt(8, 1 + rep % 6, rng);
        auto pred = random_pred(64, 1 + rep % 8, rng);
        for (bool ignore : {false, true}) {
            EvalOptions o{ignore};
            CHECK(*qasa::mbo(pred, gt, OverlapLevel::Instance, o) >= *qasa::miou_hungarian(pred, gt, o) - 1e-15);
        }
    }
}

TEST_CASE("metrics ignore label ids") {
    std::mt19937_64 rng(5);
    for (int rep = 0; rep < 50; ++rep) {
        const int n = 2 + rep % 4;
        auto gt = random_gt(8, n, rng);
        auto pred = random_pred(64, 5, rng);
        std::vector<int> relabel{40, 3, 17, 8, 1};
        std::vector<int> pred2(pred.size());
        for (std::size_t i = 0; i < pred.size(); ++i) pred2[i] = relabel[pred[i]];

        std::vector<int> inst(n);
        std::iota(inst.begin(), inst.end(), 1);
        std::shuffle(inst.begin(), inst.end(), rng);
        auto gt2 = gt;
        for (auto& l : gt2.instance_labels) {
            if (l) l = static_cast<std::uint16_t>(inst[l - 1]);
        }
        for (int i = 0; i < n; ++i) gt2.class_ids[inst[i] - 1] = gt.class_ids[i];

        for (auto level : {OverlapLevel::Instance, OverlapLevel::Class}) {
            const double base = *qasa::mbo(pred, gt, level);
            CHECK(*qasa::mbo(pred2, gt, level) == doctest::Approx(base).epsilon(1e-12));
            CHECK(*qasa::mbo(pred, gt2, level) == doctest::Approx(base).epsilon(1e-12));
        }
        const double m = *qasa::miou_hungarian(pred, gt);
        CHECK(*qasa::miou_hungarian(pred2, gt) == doctest::Approx(m).epsilon(1e-12));
        CHECK(*qasa::miou_hungarian(pred, gt2) == doctest::Approx(m).epsilon(1e-12));
    }
}

TEST_CASE("spearman with ties") {
    CHECK(qasa::spearman({1, 2, 3, 4}, {10, 20, 30, 40}) == doctest::Approx(1.0));
    CHECK(qasa::spearman({1, 2, 3, 4}, {4, 3, 2, 1}) == doctest::Approx(-1.0));
    CHECK(qasa::spearman({1, 1, 1}, {1, 2, 3}) == 0.0);
    // ranks x = (1.5, 1.5, 3, 4), y = (1, 2, 3, 4): Pearson of the ranks
    CHECK(qasa::spearman({5, 5, 7, 9}, {1, 2, 3, 4}) == doctest::Approx(0.9486832980505138));
}

TEST_CASE("dataset evaluation") {
    std::mt19937_64 rng(6);
    std::vector<SceneSample> samples;
    for (int i = 0; i < 30; ++i) samples.push_back(random_gt(8, 1 + i % 5, rng));

    std::vector<qasa::PartitionMap> perfect;
    for (const auto& s : samples) perfect.push_back(partition_of(as_int(s.instance_labels), 8, 8));
    auto r = qasa::evaluate_partitions(perfect, samples);
    CHECK(r.mboi == doctest::Approx(1.0));
    CHECK(r.mboc == doctest::Approx(1.0));
    CHECK(r.miou == doctest::Approx(1.0));
    CHECK(r.k_correlation == doctest::Approx(1.0));
    CHECK(qasa::format_report(r) == qasa::format_report(qasa::evaluate_partitions(perfect, samples)));

    std::vector<qasa::PartitionMap> constant;
    double fraction = 0.0;
    int objects = 0;
    for (const auto& s : samples) {
        constant.push_back(partition_of(std::vector<int>(64, 0), 8, 8));
        double per = 0.0;
        for (int l = 1; l <= s.object_count; ++l) {
            per += std::count(s.instance_labels.begin(), s.instance_labels.end(), l) / 64.0;
        }
        fraction += per / s.object_count;
        objects += s.object_count;
    }
    auto c = qasa::evaluate_partitions(constant, samples, EvalOptions{true});
    CHECK(c.mboi == doctest::Approx(fraction / samples.size()));
    CHECK(c.mean_inferred_k == doctest::Approx(1.0));
    CHECK(c.k_histogram.at(1) == 30);
    CHECK(objects > 0);

    auto empty = make_gt(8, 8, std::vector<int>(64, 0), {});
    samples.push_back(empty);
    perfect.push_back(partition_of(std::vector<int>(64, 0), 8, 8));
    auto with_empty = qasa::evaluate_partitions(perfect, samples);
    CHECK(with_empty.skipped == 1);
    CHECK(with_empty.per_sample.size() == 30);
}
