#include "qasa/selection.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace qasa {

void validate_attention(const AttentionMap& a, double tol) {
    if (a.rows() == 0 || a.cols() == 0) throw std::invalid_argument("attention map is empty");
    for (ad::Index t = 0; t < a.rows(); ++t) {
        double s = 0.0;
        for (ad::Index i = 0; i < a.cols(); ++i) {
            const double v = a(t, i);
            if (!std::isfinite(v) || v < 0.0 || v > 1.0) {
                throw std::invalid_argument("attention entry out of [0,1] at token " + std::to_string(t));
            }
            s += v;
        }
        if (std::abs(s - 1.0) > tol) {
            throw std::invalid_argument("attention row " + std::to_string(t) + " sums to " + std::to_string(s));
        }
    }
}

void SelectionConfig::validate() const {
    if (!(tau > 0.0 && tau <= 1.0)) throw std::invalid_argument("tau must lie in (0,1]");
    if (!(rho > 0.0 && rho <= 1.0)) throw std::invalid_argument("rho must lie in (0,1]");
    if (!(mu >= 0.0 && mu < 1.0)) throw std::invalid_argument("mu must lie in [0,1)");
    if (!(epsilon > 0.0)) throw std::invalid_argument("epsilon must be positive");
}

SelectionMask SelectionMask::all(int k_max) {
    SelectionMask m;
    m.mask.assign(static_cast<std::size_t>(k_max), 1);
    m.active.resize(static_cast<std::size_t>(k_max));
    std::iota(m.active.begin(), m.active.end(), 0);
    return m;
}

std::vector<int> compute_winners(const AttentionMap& a) {
    std::vector<int> w(static_cast<std::size_t>(a.rows()), 0);
    for (ad::Index t = 0; t < a.rows(); ++t) {
        int best = 0;
        for (ad::Index i = 1; i < a.cols(); ++i) {
            if (a(t, i) > a(t, best)) best = static_cast<int>(i);
        }
        w[static_cast<std::size_t>(t)] = best;
    }
    return w;
}

QualityScores compute_quality(const AttentionMap& a, double epsilon) {
    QualityScores q;
    const auto k = static_cast<std::size_t>(a.cols());
    q.winners = compute_winners(a);
    q.winner_mass.assign(k, 0.0);
    q.total_mass.assign(k, 0.0);
    q.quality.assign(k, 0.0);
    for (ad::Index t = 0; t < a.rows(); ++t) {
        const int w = q.winners[static_cast<std::size_t>(t)];
        q.winner_mass[static_cast<std::size_t>(w)] += a(t, w);
        for (ad::Index i = 0; i < a.cols(); ++i) q.total_mass[static_cast<std::size_t>(i)] += a(t, i);
    }
    for (std::size_t i = 0; i < k; ++i) q.quality[i] = q.winner_mass[i] / (q.total_mass[i] + epsilon);
    return q;
}

CoverageResult coverage(const AttentionMap& a, const std::vector<int>& slots, double tau) {
    CoverageResult r;
    r.covered.assign(static_cast<std::size_t>(a.rows()), 0);
    if (a.rows() == 0) return r;
    std::size_t hits = 0;
    for (ad::Index t = 0; t < a.rows(); ++t) {
        double mass = 0.0;
        for (int i : slots) mass += a(t, i);
        if (mass >= tau) {
            r.covered[static_cast<std::size_t>(t)] = 1;
            ++hits;
        }
    }
    r.rate = static_cast<double>(hits) / static_cast<double>(a.rows());
    return r;
}

double novelty(const AttentionMap& a, int slot, const std::vector<std::uint8_t>& covered, double epsilon) {
    double on_covered = 0.0;
    double total = 0.0;
    for (ad::Index t = 0; t < a.rows(); ++t) {
        const double v = a(t, slot);
        total += v;
        if (covered[static_cast<std::size_t>(t)]) on_covered += v;
    }
    return 1.0 - on_covered / (total + epsilon);
}

double novelty(const AttentionMap& a, int slot, const std::vector<int>& selected, double tau, double epsilon) {
    return novelty(a, slot, coverage(a, selected, tau).covered, epsilon);
}

std::vector<int> quality_order(const std::vector<double>& quality) {
    std::vector<int> order(quality.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int x, int y) { return quality[static_cast<std::size_t>(x)] > quality[static_cast<std::size_t>(y)]; });
    return order;
}

SelectionMask select_slots(const AttentionMap& a, const SelectionConfig& cfg) {
    const int k = static_cast<int>(a.cols());
    const QualityScores q = compute_quality(a, cfg.epsilon);

    if (!cfg.use_coverage) {
        SelectionMask m = SelectionMask::all(k);
        for (int i = 0; i < k; ++i) {
            m.trace.push_back({i, q.quality[static_cast<std::size_t>(i)], 1.0, 1.0, true});
        }
        return m;
    }

    std::vector<int> order;
    if (cfg.use_quality) {
        order = quality_order(q.quality);
    } else {
        order.resize(static_cast<std::size_t>(k));
        std::iota(order.begin(), order.end(), 0);
    }
    const double mu = cfg.use_novelty ? cfg.mu : 0.0;

    SelectionMask m;
    m.mask.assign(static_cast<std::size_t>(k), 0);
    std::vector<int> selected;
    CoverageResult cov = coverage(a, selected, cfg.tau);

    for (int slot : order) {
        const double nov = novelty(a, slot, cov.covered, cfg.epsilon);
        SelectionStep step{slot, q.quality[static_cast<std::size_t>(slot)], nov, cov.rate, false};
        if (nov < mu) {
            m.trace.push_back(step);
            continue;
        }
        selected.push_back(slot);
        m.mask[static_cast<std::size_t>(slot)] = 1;
        cov = coverage(a, selected, cfg.tau);
        step.accepted = true;
        step.coverage_after = cov.rate;
        m.trace.push_back(step);
        if (cov.rate >= cfg.rho) break;
    }

    if (selected.empty()) {
        const int best = quality_order(q.quality).front();
        m.mask[static_cast<std::size_t>(best)] = 1;
        m.forced_nonempty = true;
    }
    for (int i = 0; i < k; ++i) {
        if (m.mask[static_cast<std::size_t>(i)]) m.active.push_back(i);
    }
    return m;
}

std::string format_selection(const SelectionMask& m) {
    std::ostringstream out;
    out.precision(17);
    out << "mask=";
    for (std::size_t i = 0; i < m.mask.size(); ++i) out << (i ? "," : "") << int(m.mask[i]);
    out << "\nselected=";
    for (std::size_t i = 0; i < m.active.size(); ++i) out << (i ? "," : "") << m.active[i];
    out << "\nforced=" << (m.forced_nonempty ? 1 : 0) << "\n";
    for (const auto& s : m.trace) {
        out << "step slot=" << s.slot << " quality=" << s.quality << " novelty=" << s.novelty
            << " coverage=" << s.coverage_after << " action=" << (s.accepted ? "accept" : "skip") << "\n";
    }
    return out.str();
}

namespace {

constexpr char kRawMagic[4] = {'Q', 'A', 'T', 'N'};

std::uint32_t read_u32le(const unsigned char* p) {
    return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 | std::uint32_t(p[3]) << 24;
}

}  // namespace

AttentionMap read_attention_matrix(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open attention file '" + path + "'");
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() >= 12 && std::memcmp(bytes.data(), kRawMagic, 4) == 0) {
        const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
        const std::uint32_t n = read_u32le(p + 4);
        const std::uint32_t k = read_u32le(p + 8);
        if (bytes.size() != 12 + std::size_t(n) * k * 8) throw std::runtime_error("raw attention block has wrong size");
        AttentionMap a(n, k);
        for (std::size_t j = 0; j < std::size_t(n) * k; ++j) {
            std::uint64_t u = 0;
            for (int b = 7; b >= 0; --b) u = (u << 8) | p[12 + j * 8 + static_cast<std::size_t>(b)];
            double v;
            std::memcpy(&v, &u, 8);
            a(static_cast<ad::Index>(j / k), static_cast<ad::Index>(j % k)) = v;
        }
        return a;
    }
    std::istringstream text(bytes);
    long n = 0, k = 0;
    if (!(text >> n >> k) || n <= 0 || k <= 0) throw std::runtime_error("attention file: expected 'N K' header");
    AttentionMap a(n, k);
    for (long t = 0; t < n; ++t) {
        for (long i = 0; i < k; ++i) {
            if (!(text >> a(t, i))) throw std::runtime_error("attention file: too few entries");
        }
    }
    std::string extra;
    if (text >> extra) throw std::runtime_error("attention file: trailing data");
    return a;
}

void write_attention_matrix_text(const std::string& path, const AttentionMap& a) {
    std::ofstream out(path);
    out.precision(17);
    out << a.rows() << " " << a.cols() << "\n";
    for (ad::Index t = 0; t < a.rows(); ++t) {
        for (ad::Index i = 0; i < a.cols(); ++i) out << (i ? " " : "") << a(t, i);
        out << "\n";
    }
    if (!out) throw std::runtime_error("cannot write '" + path + "'");
}

void write_attention_matrix_raw(const std::string& path, const AttentionMap& a) {
    std::string bytes(kRawMagic, 4);
    auto put_u32 = [&](std::uint32_t v) {
        for (int b = 0; b < 4; ++b) bytes.push_back(static_cast<char>((v >> (8 * b)) & 0xFF));
    };
    put_u32(static_cast<std::uint32_t>(a.rows()));
    put_u32(static_cast<std::uint32_t>(a.cols()));
    for (ad::Index t = 0; t < a.rows(); ++t) {
        for (ad::Index i = 0; i < a.cols(); ++i) {
            const double v = a(t, i);
            std::uint64_t u;
            std::memcpy(&u, &v, 8);
            for (int b = 0; b < 8; ++b) bytes.push_back(static_cast<char>((u >> (8 * b)) & 0xFF));
        }
    }
    std::ofstream out(path, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("cannot write '" + path + "'");
}

}  // namespace qasa
