#include "qasa/ablation.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace qasa {

namespace {

// Two mean mBOi values closer than this count as "about equal".
constexpr double kApproxEqualMbo = 0.02;
// K_max sweep: allowed (max - min) / max of the variant means.
constexpr double kKmaxRelativeSpread = 0.15;

std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
}

}  // namespace

std::string to_string(AblationAxis a) {
    switch (a) {
        case AblationAxis::Components: return "components";
        case AblationAxis::Gates: return "gates";
        case AblationAxis::Mu: return "mu";
        case AblationAxis::Kmax: return "kmax";
    }
    return "?";
}

AblationAxis ablation_axis_from_string(const std::string& s) {
    const std::string v = lower(s);
    if (v == "components") return AblationAxis::Components;
    if (v == "gates") return AblationAxis::Gates;
    if (v == "mu") return AblationAxis::Mu;
    if (v == "kmax") return AblationAxis::Kmax;
    throw std::invalid_argument("unknown ablation axis '" + s + "'");
}

TrainConfig AblationPlan::variant_config(const AblationVariant& v, int replicate) const {
    TrainConfig c = base;
    for (const auto& [k, val] : v.deltas) c.set(k, val);
    c.seed = base.seed + static_cast<std::uint64_t>(replicate);
    return c;
}

void AblationPlan::validate() const {
    if (variants.empty()) throw std::invalid_argument("ablation plan has no variants");
    if (replicates < 1) throw std::invalid_argument("replicates must be >= 1");
    for (const auto& v : variants) {
        try {
            variant_config(v, 0).validate();
        } catch (const std::exception& e) {
            throw std::invalid_argument("variant '" + v.name + "': " + e.what());
        }
    }
}

AblationPlan AblationPlan::parse(const std::string& text) {
    AblationPlan plan;
    bool explicit_variants = false;
    int n_max = -1;
    for (const auto& sec : parse_kv(text)) {
        if (sec.name.empty()) {
            for (const auto& [k, v] : sec.entries) {
                if (k == "axis") plan.axis = ablation_axis_from_string(v);
                else if (k == "replicates") plan.replicates = static_cast<int>(parse_int(k, v));
                else if (k == "data") plan.data_dir = v;
                else if (k == "eval_data") plan.eval_data_dir = v;
                else if (k == "ignore_background") plan.ignore_background = parse_bool(k, v);
                else if (k == "n_max") n_max = static_cast<int>(parse_int(k, v));
                else throw std::invalid_argument("unknown plan key '" + k + "'");
            }
        } else if (sec.name == "base") {
            for (const auto& [k, v] : sec.entries) plan.base.set(k, v);
        } else if (sec.name.rfind("variant", 0) == 0) {
            AblationVariant var;
            var.name = trim(std::string_view(sec.name).substr(7));
            if (var.name.empty()) throw std::invalid_argument("variant section needs a name");
            var.deltas = sec.entries;
            plan.variants.push_back(std::move(var));
            explicit_variants = true;
        } else {
            throw std::invalid_argument("unknown plan section [" + sec.name + "]");
        }
    }
    if (!explicit_variants) {
        if (n_max < 0) n_max = plan.base.model.k_max - 1;
        plan.variants = standard_variants(plan.axis, n_max);
    }
    plan.validate();
    return plan;
}

AblationPlan AblationPlan::load(const std::string& path) { return parse(read_text_file(path)); }

std::vector<AblationVariant> standard_variants(AblationAxis axis, int n_max) {
    switch (axis) {
        case AblationAxis::Components:
            return {
                {"all-off", {{"use_coverage", "false"}, {"use_quality", "false"}, {"use_novelty", "false"}}},
                {"coverage", {{"use_quality", "false"}, {"use_novelty", "false"}}},
                {"coverage+quality", {{"use_novelty", "false"}}},
                {"full", {}},
            };
        case AblationAxis::Gates:
            return {
                {"no-gate", {{"use_g1", "false"}, {"use_g2", "false"}}},
                {"g2-only", {{"use_g1", "false"}}},
                {"g1-only", {{"use_g2", "false"}}},
                {"g1+g2", {}},
            };
        case AblationAxis::Mu: {
            std::vector<AblationVariant> out;
            for (const char* mu : {"0", "0.1", "0.2", "0.3", "0.4", "0.5"}) {
                out.push_back({std::string("mu=") + mu, {{"mu", mu}}});
            }
            return out;
        }
        case AblationAxis::Kmax: {
            std::vector<AblationVariant> out;
            for (int m : {1, 2, 4}) {
                const std::string k = std::to_string(m * (n_max + 1));
                out.push_back({"k_max=" + k, {{"k_max", k}}});
            }
            return out;
        }
    }
    return {};
}

MeanSd mean_sd(const std::vector<double>& xs) {
    MeanSd r;
    if (xs.empty()) return r;
    for (double x : xs) r.mean += x;
    r.mean /= static_cast<double>(xs.size());
    if (xs.size() > 1) {
        double ss = 0.0;
        for (double x : xs) ss += (x - r.mean) * (x - r.mean);
        r.sd = std::sqrt(ss / static_cast<double>(xs.size() - 1));
    }
    return r;
}

VariantSummary summarize_variant(std::string name, std::vector<ReplicateResult> reps) {
    VariantSummary s;
    s.name = std::move(name);
    std::vector<double> a, b, c, d;
    for (const auto& r : reps) {
        if (!r.ok) continue;
        a.push_back(r.mboi);
        b.push_back(r.mboc);
        c.push_back(r.miou);
        d.push_back(r.k_correlation);
    }
    s.failed = a.empty();
    s.mboi = mean_sd(a);
    s.mboc = mean_sd(b);
    s.miou = mean_sd(c);
    s.k_correlation = mean_sd(d);
    s.replicates = std::move(reps);
    return s;
}

const VariantSummary* AblationTable::find(const std::string& name) const {
    for (const auto& v : variants) {
        if (v.name == name) return &v;
    }
    return nullptr;
}

std::vector<TrendFlag> trend_flags(AblationAxis axis, const std::vector<VariantSummary>& variants) {
    auto get = [&](const std::string& n) -> const VariantSummary* {
        for (const auto& v : variants) {
            if (v.name == n && !v.failed) return &v;
        }
        return nullptr;
    };
    std::vector<TrendFlag> out;
    auto greater = [&](const std::string& a, const std::string& b, bool strict) {
        const auto* x = get(a);
        const auto* y = get(b);
        if (!x || !y) return;
        out.push_back({"mBOi(" + a + ") " + (strict ? ">" : ">=") + " mBOi(" + b + ")",
                       strict ? x->mboi.mean > y->mboi.mean : x->mboi.mean >= y->mboi.mean});
    };
    switch (axis) {
        case AblationAxis::Components:
            greater("full", "all-off", true);
            greater("coverage+quality", "coverage", true);
            greater("full", "coverage+quality", false);
            break;
        case AblationAxis::Gates: {
            greater("g1+g2", "g1-only", false);
            greater("g1-only", "g2-only", true);
            const auto* g2 = get("g2-only");
            const auto* none = get("no-gate");
            if (g2 && none) {
                std::ostringstream d;
                d << "|mBOi(g2-only) - mBOi(no-gate)| <= " << kApproxEqualMbo;
                out.push_back({d.str(), std::abs(g2->mboi.mean - none->mboi.mean) <= kApproxEqualMbo});
            }
            break;
        }
        case AblationAxis::Mu: {
            const auto* zero = get("mu=0");
            if (!zero) break;
            double best = -1.0;
            for (const auto& v : variants) {
                if (!v.failed && v.name != "mu=0") best = std::max(best, v.mboi.mean);
            }
            if (best >= 0.0) out.push_back({"max over mu>0 of mBOi > mBOi(mu=0)", best > zero->mboi.mean});
            break;
        }
        case AblationAxis::Kmax: {
            double lo = 1e300, hi = -1e300;
            int n = 0;
            for (const auto& v : variants) {
                if (v.failed) continue;
                lo = std::min(lo, v.mboi.mean);
                hi = std::max(hi, v.mboi.mean);
                ++n;
            }
            if (n >= 2 && hi > 0.0) {
                std::ostringstream d;
                d << "(max - min) / max of mBOi over K_max < " << kKmaxRelativeSpread;
                out.push_back({d.str(), (hi - lo) / hi < kKmaxRelativeSpread});
            }
            break;
        }
    }
    return out;
}

AblationTable run_ablation_with(const AblationPlan& plan, const ReplicateRunner& runner) {
    plan.validate();
    AblationTable t;
    t.axis = plan.axis;
    for (const auto& v : plan.variants) {
        std::vector<ReplicateResult> reps;
        for (int r = 0; r < plan.replicates; ++r) {
            const TrainConfig cfg = plan.variant_config(v, r);
            ReplicateResult res;
            try {
                res = runner(cfg, v.name, r);
                res.ok = true;
            } catch (const std::exception& e) {
                res.ok = false;
                res.error = e.what();
            }
            res.seed = static_cast<int>(cfg.seed);
            reps.push_back(std::move(res));
        }
        t.variants.push_back(summarize_variant(v.name, std::move(reps)));
    }
    t.trends = trend_flags(plan.axis, t.variants);
    return t;
}

AblationTable run_ablation(const AblationPlan& plan, const std::vector<SceneSample>& train,
                           const std::vector<SceneSample>& eval, const std::string& out_dir,
                           std::function<void(const std::string&)> progress) {
    namespace fs = std::filesystem;
    const std::vector<SceneSample>& eval_set = eval.empty() ? train : eval;
    EvalOptions eopt;
    eopt.ignore_background = plan.ignore_background;
    auto runner = [&](const TrainConfig& cfg, const std::string& name, int r) {
        if (progress) progress("variant " + name + " replicate " + std::to_string(r) + " seed " + std::to_string(cfg.seed));
        std::vector<EpochLog> log;
        FitOptions fopt;
        FitResult fr;
        Trainer trainer(cfg, 1);
        if (!out_dir.empty()) {
            std::string safe = name;
            for (char& c : safe) {
                if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '.' && c != '=') c = '_';
            }
            fopt.out_dir = (fs::path(out_dir) / (safe + "_r" + std::to_string(r))).string();
            fopt.resume = false;
        }
        fr = fit(train, cfg, fopt, &trainer);
        MetricsReport m = evaluate_model(trainer.model(), eval_set, cfg.eval_seed, eopt);
        ReplicateResult res;
        res.mboi = m.mboi;
        res.mboc = m.mboc;
        res.miou = m.miou;
        res.k_correlation = m.k_correlation;
        res.mean_inferred_k = m.mean_inferred_k;
        res.final_loss = fr.log.empty() ? 0.0 : fr.log.back().loss;
        if (!fopt.out_dir.empty()) write_text_file_atomic((fs::path(fopt.out_dir) / "report.txt").string(), format_report(m));
        return res;
    };
    return run_ablation_with(plan, runner);
}

std::string format_ablation_table(const AblationTable& t) {
    std::ostringstream out;
    out << "axis=" << to_string(t.axis) << "\n";
    out << std::left << std::setw(20) << "variant" << std::setw(20) << "mBOi" << std::setw(20) << "mBOc"
        << std::setw(20) << "mIoU" << std::setw(20) << "K_corr" << "runs\n";
    out << std::fixed << std::setprecision(4);
    auto cell = [&](const MeanSd& m) {
        std::ostringstream c;
        c << std::fixed << std::setprecision(4) << m.mean << " +- " << m.sd;
        out << std::setw(20) << c.str();
    };
    for (const auto& v : t.variants) {
        out << std::setw(20) << v.name;
        if (v.failed) {
            out << "FAILED";
        } else {
            cell(v.mboi);
            cell(v.mboc);
            cell(v.miou);
            cell(v.k_correlation);
        }
        int ok = 0;
        for (const auto& r : v.replicates) ok += r.ok ? 1 : 0;
        out << ok << "/" << v.replicates.size() << "\n";
        for (const auto& r : v.replicates) {
            if (!r.ok) out << "  seed " << r.seed << " failed: " << r.error << "\n";
        }
    }
    for (const auto& f : t.trends) out << "trend " << (f.holds ? "holds " : "fails ") << f.description << "\n";
    return out.str();
}

}  // namespace qasa
