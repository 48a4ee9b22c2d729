#include "qasa/train.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace qasa {

namespace {

std::uint64_t mix_seed(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

std::string fmt(double v) {
    std::ostringstream s;
    s.precision(9);
    s << v;
    return s.str();
}

}  // namespace

void TrainConfig::validate() const {
    model.validate();
    if (epochs < 0) throw std::invalid_argument("epochs must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be positive");
    if (effective_warmup_gate() > epochs) throw std::invalid_argument("warmup_gate must not exceed epochs");
    if (val_count < 0) throw std::invalid_argument("val_count must be >= 0");
    selection.validate();
    gate.validate();
}

KvSection TrainConfig::to_kv() const {
    KvSection kv = model_config_to_kv(model);
    kv.set("epochs", std::to_string(epochs));
    kv.set("batch_size", std::to_string(batch_size));
    kv.set("learning_rate", format_double(learning_rate));
    kv.set("lr_warmup_fraction", format_double(lr_warmup_fraction));
    kv.set("grad_clip", format_double(grad_clip));
    kv.set("warmup_gate", std::to_string(warmup_gate));
    kv.set("gating", gating ? "true" : "false");
    kv.set("tau", format_double(selection.tau));
    kv.set("rho", format_double(selection.rho));
    kv.set("mu", format_double(selection.mu));
    kv.set("selection_epsilon", format_double(selection.epsilon));
    kv.set("use_coverage", selection.use_coverage ? "true" : "false");
    kv.set("use_quality", selection.use_quality ? "true" : "false");
    kv.set("use_novelty", selection.use_novelty ? "true" : "false");
    kv.set("epsilon1", format_double(gate.epsilon1));
    kv.set("epsilon2", format_double(gate.epsilon2));
    kv.set("neg_const", format_double(gate.neg_const));
    kv.set("use_g1", gate.use_g1 ? "true" : "false");
    kv.set("use_g2", gate.use_g2 ? "true" : "false");
    kv.set("seed", std::to_string(seed));
    kv.set("val_count", std::to_string(val_count));
    kv.set("val_every", std::to_string(val_every));
    kv.set("eval_seed", std::to_string(eval_seed));
    return kv;
}

void TrainConfig::set(const std::string& key, const std::string& value) {
    auto as_int = [&] { return static_cast<int>(parse_int(key, value)); };
    auto as_double = [&] { return parse_double(key, value); };
    auto as_bool = [&] { return parse_bool(key, value); };
    if (key == "image_size") model.image_size = as_int();
    else if (key == "patch_size") model.patch_size = as_int();
    else if (key == "feature_dim") model.feature_dim = as_int();
    else if (key == "slot_dim") model.slot_dim = as_int();
    else if (key == "k_max") model.k_max = as_int();
    else if (key == "slot_iters") model.slot_iters = as_int();
    else if (key == "encoder_hidden") model.encoder_hidden = as_int();
    else if (key == "slot_mlp_hidden") model.slot_mlp_hidden = as_int();
    else if (key == "decoder") model.decoder = decoder_kind_from_string(value);
    else if (key == "dec_layers") model.dec_layers = as_int();
    else if (key == "dec_heads") model.dec_heads = as_int();
    else if (key == "dec_dim") model.dec_dim = as_int();
    else if (key == "dec_hidden") model.dec_hidden = as_int();
    else if (key == "target_mode") model.target_mode = target_mode_from_string(value);
    else if (key == "position") model.position = position_embedding_from_string(value);
    else if (key == "epochs") epochs = as_int();
    else if (key == "batch_size") batch_size = as_int();
    else if (key == "learning_rate") learning_rate = as_double();
    else if (key == "lr_warmup_fraction") lr_warmup_fraction = as_double();
    else if (key == "grad_clip") grad_clip = as_double();
    else if (key == "warmup_gate") warmup_gate = as_int();
    else if (key == "gating") gating = as_bool();
    else if (key == "tau") selection.tau = as_double();
    else if (key == "rho") selection.rho = as_double();
    else if (key == "mu") selection.mu = as_double();
    else if (key == "selection_epsilon") selection.epsilon = as_double();
    else if (key == "use_coverage") selection.use_coverage = as_bool();
    else if (key == "use_quality") selection.use_quality = as_bool();
    else if (key == "use_novelty") selection.use_novelty = as_bool();
    else if (key == "epsilon1") gate.epsilon1 = as_double();
    else if (key == "epsilon2") gate.epsilon2 = as_double();
    else if (key == "neg_const") gate.neg_const = as_double();
    else if (key == "use_g1") gate.use_g1 = as_bool();
    else if (key == "use_g2") gate.use_g2 = as_bool();
    else if (key == "seed") seed = static_cast<std::uint64_t>(parse_int(key, value));
    else if (key == "val_count") val_count = as_int();
    else if (key == "val_every") val_every = as_int();
    else if (key == "eval_seed") eval_seed = static_cast<std::uint64_t>(parse_int(key, value));
    else throw std::invalid_argument("unknown training config key '" + key + "'");
}

TrainConfig TrainConfig::from_kv(const KvSection& kv) {
    TrainConfig c;
    for (const auto& [k, v] : kv.entries) c.set(k, v);
    return c;
}

TrainConfig TrainConfig::load(const std::string& path) {
    return from_kv(parse_kv_flat(read_text_file(path)));
}

Var reconstruction_loss(const Matrix& target, const Reconstruction& rec) {
    if (target.rows() != rec.y_hat.rows() || target.cols() != rec.y_hat.cols()) {
        throw std::invalid_argument("reconstruction_loss: target is " + std::to_string(target.rows()) + "x" +
                                    std::to_string(target.cols()) + ", prediction is " +
                                    std::to_string(rec.y_hat.rows()) + "x" + std::to_string(rec.y_hat.cols()));
    }
    return ad::mse(rec.y_hat, ad::constant(target));
}

std::string format_epoch_log(const EpochLog& row) {
    std::ostringstream out;
    out << "epoch=" << row.epoch << " loss=" << fmt(row.loss) << " mean_slots=" << fmt(row.mean_slots)
        << " mean_quality=" << fmt(row.mean_quality) << " coverage=" << fmt(row.mean_coverage)
        << " lr=" << fmt(row.learning_rate);
    if (row.validation) {
        out << " val_mboi=" << fmt(row.validation->mboi) << " val_mboc=" << fmt(row.validation->mboc)
            << " val_miou=" << fmt(row.validation->miou) << " val_kcorr=" << fmt(row.validation->k_correlation)
            << " val_mean_k=" << fmt(row.validation->mean_inferred_k);
    }
    return out.str();
}

Trainer::Trainer(const TrainConfig& cfg, std::int64_t total_steps)
    : cfg_(cfg),
      model_(cfg.model, mix_seed(cfg.seed)),
      params_(model_.parameters()),
      optimizer_(params_, nn::AdamConfig{cfg.learning_rate}),
      rng_(mix_seed(cfg.seed ^ 0xA5A5A5A5ULL)),
      total_steps_(total_steps) {
    cfg_.validate();
}

StepDiagnostics Trainer::train_step(const std::vector<const SceneSample*>& batch, int epoch, std::int64_t batch_id) {
    if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
    StepDiagnostics d;
    const bool gates_active = cfg_.gating && epoch >= cfg_.effective_warmup_gate();
    d.gates_active = gates_active;
    const double inv_b = 1.0 / static_cast<double>(batch.size());

    try {
        for (const SceneSample* sample : batch) {
            if (sample->height != cfg_.model.image_size || sample->width != cfg_.model.image_size) {
                throw std::invalid_argument("train_step: sample size does not match model image_size");
            }
            Matrix noise = model_.draw_slot_noise(rng_);
            GroupingOutput g = model_.group(sample->image, noise);

            DecodeGating gating;
            gating.enabled = cfg_.gating;
            gating.gate = cfg_.gate;
            // Selection reads attention values only; no gradient flows through it.
            const AttentionMap& a = g.attention.value();
            if (gates_active) {
                SelectionMask m = select_slots(a, cfg_.selection);
                const QualityScores q = compute_quality(a, cfg_.selection.epsilon);
                double qsum = 0.0;
                for (int i : m.active) qsum += q.quality[static_cast<std::size_t>(i)];
                d.mean_quality += inv_b * qsum / static_cast<double>(m.active.size());
                d.mean_coverage += inv_b * coverage(a, m.active, cfg_.selection.tau).rate;
                d.selected_counts.push_back(static_cast<int>(m.active.size()));
                gating.mask = std::move(m.mask);
            } else {
                const QualityScores q = compute_quality(a, cfg_.selection.epsilon);
                d.mean_quality += inv_b * std::accumulate(q.quality.begin(), q.quality.end(), 0.0) / cfg_.model.k_max;
                d.mean_coverage += inv_b;
                d.selected_counts.push_back(cfg_.model.k_max);
                gating.mask.assign(static_cast<std::size_t>(cfg_.model.k_max), 1);
            }

            Reconstruction rec = model_.decode(g.slots, gating);
            Var loss = reconstruction_loss(g.target, rec);
            if (!std::isfinite(loss.scalar())) {
                throw std::runtime_error("non-finite loss in batch " + std::to_string(batch_id));
            }
            d.loss += inv_b * loss.scalar();
            ad::backward(ad::scale(loss, inv_b));
        }
    } catch (const std::runtime_error& e) {
        nn::zero_grad(params_);
        const std::string msg = e.what();
        if (msg.find("batch") != std::string::npos) throw;
        throw std::runtime_error("batch " + std::to_string(batch_id) + ": " + msg);
    }

    d.grad_norm = nn::global_grad_norm(params_);
    if (!std::isfinite(d.grad_norm)) {
        throw std::runtime_error("non-finite gradient in batch " + std::to_string(batch_id));
    }
    if (cfg_.grad_clip > 0.0) nn::clip_grad_norm(params_, cfg_.grad_clip);
    const auto warm = static_cast<std::int64_t>(std::llround(cfg_.lr_warmup_fraction * static_cast<double>(total_steps_)));
    d.learning_rate = nn::warmup_cosine(cfg_.learning_rate, optimizer_.steps_taken(), warm, total_steps_);
    optimizer_.step(d.learning_rate);
    nn::zero_grad(params_);
    return d;
}

Checkpoint Trainer::to_checkpoint(int epochs_done, const std::string& dataset_checksum) {
    Checkpoint ck;
    for (const auto& [k, v] : cfg_.to_kv().entries) ck.meta.set("config." + k, v);
    ck.meta.set("dataset_checksum", dataset_checksum);
    ck.meta.set("epochs_done", std::to_string(epochs_done));
    ck.meta.set("optimizer_steps", std::to_string(optimizer_.steps_taken()));
    std::ostringstream rng_state;
    rng_state << rng_;
    ck.meta.set("rng_state", rng_state.str());
    store_parameters(ck, params_);
    store_parameters(ck, model_.frozen_parameters());
    for (std::size_t i = 0; i < params_.size(); ++i) {
        ck.tensors.emplace_back("adam.m." + params_[i].name, optimizer_.first_moments()[i]);
        ck.tensors.emplace_back("adam.v." + params_[i].name, optimizer_.second_moments()[i]);
    }
    return ck;
}

int Trainer::restore(const Checkpoint& ck) {
    restore_parameters(ck, params_);
    nn::ParamList frozen = model_.frozen_parameters();
    restore_parameters(ck, frozen);
    for (std::size_t i = 0; i < params_.size(); ++i) {
        const Matrix* m = ck.find("adam.m." + params_[i].name);
        const Matrix* v = ck.find("adam.v." + params_[i].name);
        if (!m || !v) throw std::runtime_error("checkpoint lacks optimizer state for '" + params_[i].name + "'");
        optimizer_.first_moments()[i] = *m;
        optimizer_.second_moments()[i] = *v;
    }
    optimizer_.set_steps_taken(parse_int("optimizer_steps", ck.meta.get("optimizer_steps")));
    std::istringstream rng_state(ck.meta.get("rng_state"));
    rng_state >> rng_;
    return static_cast<int>(parse_int("epochs_done", ck.meta.get("epochs_done")));
}

namespace {

TrainConfig config_from_checkpoint(const Checkpoint& ck) {
    KvSection kv;
    for (const auto& [k, v] : ck.meta.entries) {
        if (k.rfind("config.", 0) == 0) kv.set(k.substr(7), v);
    }
    return TrainConfig::from_kv(kv);
}

}  // namespace

FitResult fit(const std::vector<SceneSample>& samples, const TrainConfig& cfg, const FitOptions& opt,
              Trainer* trainer_out) {
    cfg.validate();
    if (static_cast<std::size_t>(cfg.val_count) >= samples.size() && cfg.epochs > 0) {
        throw std::invalid_argument("fit: validation split leaves no training samples");
    }
    int max_count = 0;
    for (const auto& s : samples) max_count = std::max(max_count, s.object_count);
    if (cfg.model.k_max < max_count + 1) {
        throw std::invalid_argument("k_max must be at least the largest object count plus one (" +
                                    std::to_string(max_count + 1) + ")");
    }

    const std::size_t n_train = samples.size() - static_cast<std::size_t>(std::min<std::size_t>(cfg.val_count, samples.size()));
    std::vector<SceneSample> val(samples.begin() + static_cast<std::ptrdiff_t>(n_train), samples.end());
    const std::int64_t steps_per_epoch =
        static_cast<std::int64_t>((n_train + static_cast<std::size_t>(cfg.batch_size) - 1) / static_cast<std::size_t>(cfg.batch_size));
    Trainer trainer(cfg, std::max<std::int64_t>(1, steps_per_epoch * cfg.epochs));

    namespace fs = std::filesystem;
    FitResult result;
    std::string log_path;
    int start_epoch = 0;
    if (!opt.out_dir.empty()) {
        fs::create_directories(opt.out_dir);
        result.checkpoint_path = (fs::path(opt.out_dir) / "checkpoint.qasa").string();
        log_path = (fs::path(opt.out_dir) / "train_log.txt").string();
        if (opt.resume && fs::exists(result.checkpoint_path)) {
            Checkpoint ck = Checkpoint::load(result.checkpoint_path);
            if (config_from_checkpoint(ck).to_kv().entries != cfg.to_kv().entries) {
                throw std::runtime_error("cannot resume: checkpoint was written with a different configuration");
            }
            start_epoch = trainer.restore(ck);
            // Keep only log rows for completed epochs.
            std::ifstream in(log_path);
            std::string line, kept;
            int rows = 0;
            while (rows < start_epoch && std::getline(in, line)) {
                kept += line + "\n";
                ++rows;
            }
            write_text_file_atomic(log_path, kept);
        } else {
            write_text_file_atomic(log_path, "");
            trainer.to_checkpoint(0, opt.dataset_checksum).save(result.checkpoint_path);
        }
    }

    std::vector<std::size_t> order(n_train);
    int epochs_run = 0;
    for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
        if (opt.stop_after_epochs && epochs_run >= *opt.stop_after_epochs) break;
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), trainer.rng());

        EpochLog row;
        row.epoch = epoch;
        std::size_t images = 0;
        std::int64_t batch_id = 0;
        for (std::size_t start = 0; start < n_train; start += static_cast<std::size_t>(cfg.batch_size), ++batch_id) {
            std::vector<const SceneSample*> batch;
            for (std::size_t j = start; j < std::min(n_train, start + static_cast<std::size_t>(cfg.batch_size)); ++j) {
                batch.push_back(&samples[order[j]]);
            }
            StepDiagnostics d = trainer.train_step(batch, epoch, batch_id);
            const double w = static_cast<double>(batch.size());
            row.loss += d.loss * w;
            row.mean_quality += d.mean_quality * w;
            row.mean_coverage += d.mean_coverage * w;
            for (int c : d.selected_counts) row.mean_slots += c;
            row.learning_rate = d.learning_rate;
            images += batch.size();
        }
        if (images > 0) {
            row.loss /= static_cast<double>(images);
            row.mean_quality /= static_cast<double>(images);
            row.mean_coverage /= static_cast<double>(images);
            row.mean_slots /= static_cast<double>(images);
        }
        if (!val.empty() && cfg.val_every > 0 && ((epoch + 1) % cfg.val_every == 0 || epoch + 1 == cfg.epochs)) {
            row.validation = evaluate_model(trainer.model(), val, cfg.eval_seed);
        }
        if (opt.on_epoch) opt.on_epoch(row);
        result.log.push_back(row);
        ++epochs_run;

        if (!opt.out_dir.empty()) {
            std::ofstream(log_path, std::ios::app) << format_epoch_log(row) << "\n";
            trainer.to_checkpoint(epoch + 1, opt.dataset_checksum).save(result.checkpoint_path);
        }
    }
    if (trainer_out) *trainer_out = std::move(trainer);
    return result;
}

Trainer fit_in_memory(const std::vector<SceneSample>& samples, const TrainConfig& cfg, std::vector<EpochLog>* log) {
    Trainer trainer(cfg, 1);
    FitOptions opt;
    FitResult r = fit(samples, cfg, opt, &trainer);
    if (log) *log = std::move(r.log);
    return trainer;
}

LoadedModel load_model(const std::string& checkpoint_path) {
    Checkpoint ck = Checkpoint::load(checkpoint_path);
    LoadedModel lm;
    lm.config = config_from_checkpoint(ck);
    lm.dataset_checksum = ck.meta.get("dataset_checksum");
    lm.model = SlotModel(lm.config.model, 0);
    nn::ParamList params = lm.model.parameters();
    restore_parameters(ck, params);
    nn::ParamList frozen = lm.model.frozen_parameters();
    restore_parameters(ck, frozen);
    return lm;
}

std::vector<PartitionMap> infer_partitions(const SlotModel& model, const std::vector<SceneSample>& samples,
                                           std::uint64_t eval_seed) {
    const ModelConfig& c = model.config();
    std::vector<PartitionMap> out;
    out.reserve(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        nn::Rng rng(mix_seed(eval_seed ^ mix_seed(i)));
        GroupingOutput g = model.group(samples[i].image, model.draw_slot_noise(rng));
        out.push_back(hard_partition(g.attention.value(), c.grid_side(), c.grid_side(), samples[i].height,
                                     samples[i].width));
    }
    return out;
}

MetricsReport evaluate_model(const SlotModel& model, const std::vector<SceneSample>& samples, std::uint64_t eval_seed,
                             const EvalOptions& opt) {
    return evaluate_partitions(infer_partitions(model, samples, eval_seed), samples, opt);
}

}  // namespace qasa
