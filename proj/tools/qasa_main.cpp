// qasa command-line front end: generate | select | train | eval | ablate

#include "qasa/ablation.hpp"
#include "qasa/metrics.hpp"
#include "qasa/scene.hpp"
#include "qasa/selection.hpp"
#include "qasa/train.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

namespace fs = std::filesystem;

namespace {

int cmd_generate(const std::string& spec_path, std::uint64_t count, const std::string& out,
                 std::optional<std::uint64_t> seed, std::uint64_t start) {
    qasa::SceneSpec spec = qasa::SceneSpec::load(spec_path);
    if (seed) spec.rng_seed = *seed;
    const auto m = qasa::write_dataset(spec, count, out, start);
    std::cout << "wrote " << m.count << " scenes to " << out << " checksum=" << m.checksum << "\n";
    return 0;
}

int cmd_select(const std::string& attn, const qasa::SelectionConfig& cfg) {
    const qasa::AttentionMap a = qasa::read_attention_matrix(attn);
    qasa::validate_attention(a);
    std::cout << qasa::format_selection(qasa::select_slots(a, cfg));
    return 0;
}

int cmd_train(const std::string& config, const std::string& data, const std::string& out,
              const std::vector<std::string>& overrides, bool fresh) {
    qasa::TrainConfig cfg = qasa::TrainConfig::load(config);
    for (const auto& o : overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value, got '" + o + "'");
        cfg.set(qasa::trim(o.substr(0, eq)), qasa::trim(o.substr(eq + 1)));
    }
    qasa::Dataset ds = qasa::read_dataset(data);
    if (ds.manifest.spec.image_size != cfg.model.image_size) {
        throw std::invalid_argument("dataset image_size " + std::to_string(ds.manifest.spec.image_size) +
                                    " does not match model image_size " + std::to_string(cfg.model.image_size));
    }
    if (cfg.model.k_max < ds.manifest.spec.count_max + 1) {
        throw std::invalid_argument("k_max must be >= count_max + 1 of the dataset (" +
                                    std::to_string(ds.manifest.spec.count_max + 1) + ")");
    }
    qasa::FitOptions opt;
    opt.out_dir = out;
    opt.dataset_checksum = ds.manifest.checksum;
    opt.resume = !fresh;
    opt.on_epoch = [](const qasa::EpochLog& row) { std::cout << qasa::format_epoch_log(row) << std::endl; };
    const auto r = qasa::fit(ds.samples, cfg, opt);
    std::cout << "checkpoint " << r.checkpoint_path << "\n";
    return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data, const std::string& out, bool ignore_background,
             int overlays, std::optional<std::uint64_t> eval_seed) {
    qasa::LoadedModel lm = qasa::load_model(ckpt);
    qasa::Dataset ds = qasa::read_dataset(data);
    if (ds.manifest.spec.image_size != lm.config.model.image_size) {
        throw std::invalid_argument("dataset image_size does not match the checkpoint");
    }
    const std::uint64_t seed = eval_seed.value_or(lm.config.eval_seed);
    const auto parts = qasa::infer_partitions(lm.model, ds.samples, seed);
    qasa::EvalOptions opt;
    opt.ignore_background = ignore_background;
    const auto report = qasa::evaluate_partitions(parts, ds.samples, opt);

    fs::create_directories(out);
    std::string text = qasa::format_report(report);
    text += "ignore_background=" + std::string(ignore_background ? "true" : "false") + "\n";
    text += "dataset_checksum=" + ds.manifest.checksum + "\n";
    text += "train_checksum=" + lm.dataset_checksum + "\n";
    qasa::write_text_file_atomic((fs::path(out) / "report.txt").string(), text);
    const int n = std::min<int>(overlays, static_cast<int>(ds.samples.size()));
    if (n > 0) fs::create_directories(fs::path(out) / "overlays");
    for (int i = 0; i < n; ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "overlay_%04d.ppm", i);
        qasa::write_overlay_ppm((fs::path(out) / "overlays" / name).string(), ds.samples[static_cast<std::size_t>(i)],
                                parts[static_cast<std::size_t>(i)]);
    }
    std::cout << "mBOi=" << report.mboi << " mBOc=" << report.mboc << " mIoU=" << report.miou
              << " K_corr=" << report.k_correlation << " mean_K=" << report.mean_inferred_k << "\n";
    return 0;
}

int cmd_ablate(const std::string& plan_path, const std::string& out) {
    qasa::AblationPlan plan = qasa::AblationPlan::load(plan_path);
    if (plan.data_dir.empty()) throw std::invalid_argument("plan needs data=<dataset dir>");
    const fs::path base = fs::path(plan_path).parent_path();
    auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? p : (base / p).string(); };
    qasa::Dataset train = qasa::read_dataset(resolve(plan.data_dir));
    qasa::Dataset eval;
    if (!plan.eval_data_dir.empty()) eval = qasa::read_dataset(resolve(plan.eval_data_dir));
    fs::create_directories(out);
    const auto table = qasa::run_ablation(plan, train.samples, eval.samples, out,
                                          [](const std::string& msg) { std::cout << msg << std::endl; });
    const std::string text = qasa::format_ablation_table(table);
    qasa::write_text_file_atomic((fs::path(out) / "ablation.txt").string(), text);
    std::cout << text;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"QASA: quality-guided adaptive slot attention"};
    app.require_subcommand(1);

    std::string spec_path, out, attn, config, data, ckpt, plan;
    std::uint64_t count = 0, start = 0;
    std::optional<std::uint64_t> seed, eval_seed;
    auto* gen = app.add_subcommand("generate", "render a synthetic scene dataset");
    gen->add_option("--spec", spec_path, "scene spec file")->required()->check(CLI::ExistingFile);
    gen->add_option("--count", count, "number of scenes")->required();
    gen->add_option("--out", out, "output directory")->required();
    gen->add_option("--seed", seed, "overrides the spec seed");
    gen->add_option("--start", start, "first scene index");

    qasa::SelectionConfig scfg;
    bool no_coverage = false, no_quality = false, no_novelty = false;
    auto* sel = app.add_subcommand("select", "run slot selection on an attention matrix");
    sel->add_option("--attn", attn, "matrix file (text or QATN raw block)")->required()->check(CLI::ExistingFile);
    sel->add_option("--tau", scfg.tau)->capture_default_str();
    sel->add_option("--rho", scfg.rho)->capture_default_str();
    sel->add_option("--mu", scfg.mu)->capture_default_str();
    sel->add_flag("--no-coverage", no_coverage);
    sel->add_flag("--no-quality", no_quality);
    sel->add_flag("--no-novelty", no_novelty);

    std::vector<std::string> overrides;
    bool fresh = false;
    auto* tr = app.add_subcommand("train", "train a model");
    tr->add_option("--config", config)->required()->check(CLI::ExistingFile);
    tr->add_option("--data", data)->required();
    tr->add_option("--out", out)->required();
    tr->add_option("--set", overrides, "key=value config override (repeatable)");
    tr->add_flag("--fresh", fresh, "ignore an existing checkpoint in --out");

    bool ignore_background = false;
    int overlays = 8;
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
    ev->add_option("--ckpt", ckpt)->required()->check(CLI::ExistingFile);
    ev->add_option("--data", data)->required();
    ev->add_option("--out", out)->required();
    ev->add_flag("--ignore-background", ignore_background);
    ev->add_option("--overlays", overlays, "number of overlay panels to write")->capture_default_str();
    ev->add_option("--eval-seed", eval_seed);

    auto* ab = app.add_subcommand("ablate", "run an ablation plan");
    ab->add_option("--plan", plan)->required()->check(CLI::ExistingFile);
    ab->add_option("--out", out)->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen) return cmd_generate(spec_path, count, out, seed, start);
        if (*sel) {
            scfg.use_coverage = !no_coverage;
            scfg.use_quality = !no_quality;
            scfg.use_novelty = !no_novelty;
            scfg.validate();
            return cmd_select(attn, scfg);
        }
        if (*tr) return cmd_train(config, data, out, overrides, fresh);
        if (*ev) return cmd_eval(ckpt, data, out, ignore_background, overlays, eval_seed);
        if (*ab) return cmd_ablate(plan, out);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
