#include "doctest.h"
#include "test_util.hpp"

#include "qasa/selection.hpp"

#include <filesystem>

using qasa::AttentionMap;
using qasa::SelectionConfig;
using testutil::to_matrix;

namespace {

const oracle::Grid kThreeByTwo = {{0.7, 0.3}, {0.4, 0.6}, {0.2, 0.8}};
const oracle::Grid kWorked = {{0.45, 0.45, 0.05, 0.05},
                              {0.45, 0.45, 0.05, 0.05},
                              {0.05, 0.05, 0.85, 0.05},
                              {0.05, 0.05, 0.05, 0.85}};

SelectionConfig cfg(double tau, double rho, double mu) {
    SelectionConfig c;
    c.tau = tau;
    c.rho = rho;
    c.mu = mu;
    return c;
}

}  // namespace

TEST_CASE("winners take the argmax with lowest-index ties") {
    CHECK(qasa::compute_winners(to_matrix({{0.2, 0.5, 0.3}})) == std::vector<int>{1});
    CHECK(qasa::compute_winners(to_matrix({{0.5, 0.5}})) == std::vector<int>{0});
    CHECK(qasa::compute_winners(to_matrix(kThreeByTwo)) == std::vector<int>{0, 1, 1});
}

TEST_CASE("quality on the 3x2 matrix") {
    auto q = qasa::compute_quality(to_matrix(kThreeByTwo));
    CHECK(q.quality[0] == doctest::Approx(0.7 / 1.3).epsilon(1e-7));
    CHECK(q.quality[1] == doctest::Approx(1.4 / 1.7).epsilon(1e-7));
    CHECK(q.total_mass[0] + q.total_mass[1] == doctest::Approx(3.0));
}

TEST_CASE("quality of hard and uniform assignments") {
    auto hard = qasa::compute_quality(to_matrix({{1, 0, 0}, {0, 1, 0}, {0, 1, 0}}));
    CHECK(hard.quality[0] == doctest::Approx(1.0).epsilon(1e-7));
    CHECK(hard.quality[1] == doctest::Approx(1.0).epsilon(1e-7));
    CHECK(hard.quality[2] == 0.0);

    oracle::Grid u(5, std::vector<double>(4, 0.25));
    auto q = qasa::compute_quality(to_matrix(u));
    CHECK(q.quality[0] == doctest::Approx(1.0).epsilon(1e-7));
    for (int i = 1; i < 4; ++i) CHECK(q.quality[i] == 0.0);
}

TEST_CASE("coverage cases") {
    const auto a = to_matrix(kThreeByTwo);
    CHECK(qasa::coverage(a, {0, 1}, 0.5).rate == 1.0);
    CHECK(qasa::coverage(a, {}, 0.5).rate == 0.0);
    auto c = qasa::coverage(a, {1}, 0.5);
    CHECK(c.covered == std::vector<std::uint8_t>{0, 1, 1});
    CHECK(c.rate == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("novelty cases") {
    const auto a = to_matrix(kWorked);
    CHECK(qasa::novelty(a, 1, std::vector<int>{}, 0.5) == doctest::Approx(1.0));
    // S = {0, 2} covers tokens 0, 1, 2; slot 3 has 0.15 of its 1.0 there.
    CHECK(qasa::novelty(a, 3, std::vector<int>{0, 2}, 0.5) == doctest::Approx(0.85).epsilon(1e-7));
    // slot 1's mass sits on tokens covered by slot 0
    const auto b = to_matrix({{0.5, 0.5}, {0.5, 0.5}, {1.0, 0.0}});
    CHECK(qasa::novelty(b, 1, std::vector<int>{0}, 0.5) == doctest::Approx(0.0).epsilon(1e-7));
}

TEST_CASE("worked example selects slots 1, 3, 4") {
    const auto a = to_matrix(kWorked);
    auto q = qasa::compute_quality(a);
    const std::vector<double> expect{0.9, 0.0, 0.85, 0.85};
    for (int i = 0; i < 4; ++i) CHECK(std::abs(q.quality[i] - expect[i]) < 1e-7);
    CHECK(qasa::quality_order(q.quality) == std::vector<int>{0, 2, 3, 1});

    auto m = qasa::select_slots(a, cfg(0.5, 0.8, 0.3));
    CHECK(m.mask == std::vector<std::uint8_t>{1, 0, 1, 1});
    REQUIRE(m.trace.size() == 3);
    CHECK(m.trace[0].coverage_after == 0.0);
    CHECK(m.trace[1].coverage_after == 0.75);
    CHECK(m.trace[2].coverage_after == 1.0);
    CHECK(!m.forced_nonempty);
}

TEST_CASE("one-hot attention with rho = 1 keeps every slot") {
    auto m = qasa::select_slots(to_matrix({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {0, 0, 1}}), cfg(0.7, 1.0, 0.3));
    CHECK(m.mask == std::vector<std::uint8_t>{1, 1, 1});
}

TEST_CASE("tiny rho stops after the best slot once it covers anything") {
    std::mt19937_64 rng(5);
    int checked = 0;
    for (int rep = 0; rep < 200; ++rep) {
        auto g = oracle::random_stochastic(8, 5, rng, true);
        auto a = to_matrix(g);
        auto q = qasa::compute_quality(a);
        const int top = qasa::quality_order(q.quality)[0];
        std::vector<int> only(5, 0);
        only[top] = 1;
        if (oracle::coverage_rate(g, only, 0.5) == 0.0) continue;
        auto m = qasa::select_slots(a, cfg(0.5, 1e-9, 0.3));
        CHECK(m.size() == 1);
        CHECK(m.active[0] == top);
        ++checked;
    }
    CHECK(checked > 100);
}

TEST_CASE("select_slots matches a literal Algorithm 1 transcription") {
    std::mt19937_64 rng(2024);
    std::uniform_int_distribution<int> nd(1, 12), kd(1, 6);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    int mismatches = 0;
    for (int rep = 0; rep < 1000; ++rep) {
        const int n = nd(rng), k = kd(rng);
        auto g = oracle::random_stochastic(n, k, rng, rep % 2 == 1);
        const double tau = 0.05 + 0.95 * u(rng), rho = 0.05 + 0.95 * u(rng), mu = 0.9 * u(rng);
        auto ref = oracle::algorithm1(g, tau, rho, mu);
        auto got = qasa::select_slots(to_matrix(g), cfg(tau, rho, mu));
        bool same = got.trace.size() == ref.trace.size();
        for (int i = 0; i < k; ++i) same = same && int(got.mask[i]) == ref.mask[i];
        for (std::size_t s = 0; same && s < ref.trace.size(); ++s) {
            same = got.trace[s].slot == ref.trace[s].slot && got.trace[s].accepted == ref.trace[s].accepted &&
                   std::abs(got.trace[s].quality - ref.trace[s].quality) < 1e-12 &&
                   std::abs(got.trace[s].novelty - ref.trace[s].novelty) < 1e-12 &&
                   std::abs(got.trace[s].coverage_after - ref.trace[s].coverage) < 1e-12;
        }
        mismatches += !same;
    }
    CHECK(mismatches == 0);
}

TEST_CASE("quality bounds and zero exactly for non-winners") {
    std::mt19937_64 rng(9);
    for (int rep = 0; rep < 300; ++rep) {
        auto g = oracle::random_stochastic(1 + rep % 12, 1 + rep % 6, rng, rep % 3 == 0);
        auto q = qasa::compute_quality(to_matrix(g));
        std::vector<int> wins(g[0].size(), 0);
        for (auto& row : g) wins[oracle::argmax_lowest(row)]++;
        for (std::size_t i = 0; i < q.quality.size(); ++i) {
            CHECK(q.quality[i] >= 0.0);
            CHECK(q.quality[i] <= 1.0);
            CHECK((q.quality[i] == 0.0) == (wins[i] == 0));
            CHECK(q.winner_mass[i] <= q.total_mass[i]);
        }
    }
}

TEST_CASE("coverage is monotone in the selected set") {
    std::mt19937_64 rng(10);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int rep = 0; rep < 300; ++rep) {
        const int k = 2 + rep % 5;
        auto a = to_matrix(oracle::random_stochastic(10, k, rng));
        std::vector<int> s;
        for (int i = 0; i < k; ++i) {
            if (u(rng) < 0.5) s.push_back(i);
        }
        const double tau = u(rng);
        const double base = qasa::coverage(a, s, tau).rate;
        for (int i = 0; i < k; ++i) {
            auto t = s;
            t.push_back(i);
            CHECK(qasa::coverage(a, t, tau).rate >= base);
        }
    }
}

TEST_CASE("permuting slots permutes quality and the selected set") {
    std::mt19937_64 rng(12);
    int checked = 0;
    for (int rep = 0; rep < 300; ++rep) {
        const int k = 2 + rep % 5;
        auto g = oracle::random_stochastic(10, k, rng);
        std::vector<int> perm(k);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        oracle::Grid h = g;
        for (std::size_t t = 0; t < g.size(); ++t) {
            for (int i = 0; i < k; ++i) h[t][perm[i]] = g[t][i];
        }
        auto qa = qasa::compute_quality(to_matrix(g));
        auto qb = qasa::compute_quality(to_matrix(h));
        for (int i = 0; i < k; ++i) CHECK(qb.quality[perm[i]] == doctest::Approx(qa.quality[i]).epsilon(1e-12));
        // Only meaningful when no two slots tie in quality.
        auto sorted = qa.quality;
        std::sort(sorted.begin(), sorted.end());
        if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) continue;
        auto ma = qasa::select_slots(to_matrix(g), cfg(0.5, 0.8, 0.3));
        auto mb = qasa::select_slots(to_matrix(h), cfg(0.5, 0.8, 0.3));
        for (int i = 0; i < k; ++i) CHECK(ma.mask[i] == mb.mask[perm[i]]);
        ++checked;
    }
    CHECK(checked > 100);
}

TEST_CASE("selection is deterministic") {
    std::mt19937_64 rng(13);
    auto a = to_matrix(oracle::random_stochastic(12, 6, rng));
    CHECK(qasa::format_selection(qasa::select_slots(a, cfg(0.5, 0.8, 0.3))) ==
          qasa::format_selection(qasa::select_slots(a, cfg(0.5, 0.8, 0.3))));
}

TEST_CASE("component toggles are visible in the trace") {
    const auto a = to_matrix(kWorked);
    SelectionConfig c = cfg(0.5, 0.8, 0.3);

    c.use_coverage = false;
    auto all = qasa::select_slots(a, c);
    CHECK(all.mask == std::vector<std::uint8_t>{1, 1, 1, 1});

    c = cfg(0.4, 0.8, 0.3);
    c.use_quality = false;
    auto idx = qasa::select_slots(a, c);
    REQUIRE(!idx.trace.empty());
    for (std::size_t s = 0; s < idx.trace.size(); ++s) CHECK(idx.trace[s].slot == static_cast<int>(s));
    // at tau 0.4 slot 0 covers tokens 0-1, where slot 1 has 90% of its mass
    CHECK(!idx.trace[1].accepted);

    c.use_novelty = false;
    auto no_nov = qasa::select_slots(a, c);
    CHECK(no_nov.trace[1].accepted);

    c = cfg(0.5, 0.8, 0.3);
    c.use_novelty = false;
    c.mu = 0.9;
    SelectionConfig zero = cfg(0.5, 0.8, 0.0);
    CHECK(qasa::format_selection(qasa::select_slots(a, c)) == qasa::format_selection(qasa::select_slots(a, zero)));
}

TEST_CASE("config validation") {
    CHECK_THROWS(cfg(0.0, 0.8, 0.3).validate());
    CHECK_THROWS(cfg(0.5, 1.5, 0.3).validate());
    CHECK_THROWS(cfg(0.5, 0.8, 1.0).validate());
    CHECK_NOTHROW(cfg(1.0, 1.0, 0.0).validate());
    CHECK_THROWS(qasa::validate_attention(to_matrix({{0.5, 0.6}})));
}

TEST_CASE("attention matrix files round trip in both formats") {
    std::mt19937_64 rng(14);
    auto a = to_matrix(oracle::random_stochastic(7, 3, rng));
    const auto dir = std::filesystem::temp_directory_path();
    const auto txt = (dir / "qasa_attn_test.txt").string();
    const auto raw = (dir / "qasa_attn_test.bin").string();
    qasa::write_attention_matrix_text(txt, a);
    qasa::write_attention_matrix_raw(raw, a);
    CHECK(qasa::read_attention_matrix(txt) == a);
    CHECK(qasa::read_attention_matrix(raw) == a);
    std::filesystem::remove(txt);
    std::filesystem::remove(raw);
}
