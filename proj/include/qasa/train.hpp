#pragma once

// Training loop: encode -> slot attention -> select -> gated decode ->
// reconstruction loss, with the gate warm-up schedule; plus model
// evaluation against ground-truth scenes.

#include "qasa/metrics.hpp"
#include "qasa/model.hpp"
#include "qasa/nn.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace qasa {

struct TrainConfig {
    ModelConfig model;
    int epochs = 100;
    int batch_size = 64;
    double learning_rate = 4e-4;
    double lr_warmup_fraction = 0.05;  // of total optimizer steps
    double grad_clip = 1.0;
    /// Epochs with M forced to all-ones. Negative: 10% of epochs.
    int warmup_gate = -1;
    /// false trains the ungated baseline: no selection, plain decoder.
    bool gating = true;
    SelectionConfig selection;
    GateConfig gate;
    std::uint64_t seed = 0;
    int val_count = 0;    // trailing samples held out for validation
    int val_every = 10;   // epochs between validation snapshots
    std::uint64_t eval_seed = 1234;

    int effective_warmup_gate() const { return warmup_gate >= 0 ? warmup_gate : epochs / 10; }
    void validate() const;

    KvSection to_kv() const;
    /// Starts from defaults; throws on unknown keys.
    static TrainConfig from_kv(const KvSection& kv);
    static TrainConfig load(const std::string& path);
    /// Applies one key=value override (same keys as the config file).
    void set(const std::string& key, const std::string& value);
};

/// Mean squared error over all N * d_y entries.
Var reconstruction_loss(const Matrix& target, const Reconstruction& rec);

struct StepDiagnostics {
    double loss = 0.0;
    std::vector<int> selected_counts;  // |S| per image
    double mean_quality = 0.0;         // mean Q over selected slots, averaged over images
    double mean_coverage = 0.0;        // coverage of S at stop, averaged over images
    double grad_norm = 0.0;
    double learning_rate = 0.0;
    bool gates_active = false;
};

struct EpochLog {
    int epoch = 0;
    double loss = 0.0;
    double mean_slots = 0.0;
    double mean_quality = 0.0;
    double mean_coverage = 0.0;
    double learning_rate = 0.0;
    std::optional<MetricsReport> validation;
};

std::string format_epoch_log(const EpochLog& row);

class Trainer {
public:
    Trainer(const TrainConfig& cfg, std::int64_t total_steps);

    /// One optimizer step. Throws std::runtime_error naming `batch_id` if
    /// the loss is not finite.
    StepDiagnostics train_step(const std::vector<const SceneSample*>& batch, int epoch, std::int64_t batch_id);

    const SlotModel& model() const { return model_; }
    const TrainConfig& config() const { return cfg_; }
    nn::Rng& rng() { return rng_; }
    std::int64_t steps_taken() const { return optimizer_.steps_taken(); }

    Checkpoint to_checkpoint(int epochs_done, const std::string& dataset_checksum);
    /// Restores parameters, optimizer moments and RNG; returns epochs done.
    int restore(const Checkpoint& ckpt);

private:
    TrainConfig cfg_;
    SlotModel model_;
    nn::ParamList params_;
    nn::Adam optimizer_;
    nn::Rng rng_;
    std::int64_t total_steps_;
};

struct FitResult {
    std::string checkpoint_path;
    std::vector<EpochLog> log;
};

struct FitOptions {
    std::string out_dir;              // empty: keep everything in memory
    std::string dataset_checksum;
    bool resume = true;
    /// Stop (as if interrupted) after this many epochs in this call.
    std::optional<int> stop_after_epochs;
    std::function<void(const EpochLog&)> on_epoch;
};

/// Trains on `samples` minus the trailing `cfg.val_count`, which serve as
/// the validation split. Writes checkpoint.qasa and train_log.txt to
/// out_dir after every epoch.
FitResult fit(const std::vector<SceneSample>& samples, const TrainConfig& cfg, const FitOptions& opt,
              Trainer* trainer_out = nullptr);

/// Trains and returns the live trainer, for in-process evaluation.
Trainer fit_in_memory(const std::vector<SceneSample>& samples, const TrainConfig& cfg,
                      std::vector<EpochLog>* log = nullptr);

struct LoadedModel {
    TrainConfig config;
    SlotModel model;
    std::string dataset_checksum;
};

LoadedModel load_model(const std::string& checkpoint_path);

/// Hard partitions from A^slot for every sample (slot noise seeded per index).
std::vector<PartitionMap> infer_partitions(const SlotModel& model, const std::vector<SceneSample>& samples,
                                           std::uint64_t eval_seed);

MetricsReport evaluate_model(const SlotModel& model, const std::vector<SceneSample>& samples, std::uint64_t eval_seed,
                             const EvalOptions& opt = {});

}  // namespace qasa
