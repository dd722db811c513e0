#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "speckle/dataset.hpp"
#include "speckle/loss.hpp"
#include "speckle/metrics.hpp"
#include "speckle/nn.hpp"
#include "speckle/optics.hpp"

namespace speckle {

enum class Architecture { fcn, ocn };

std::string architecture_name(Architecture arch);
Architecture parse_architecture(const std::string& name);
NetworkSpec build_architecture(Architecture arch, int crop_size);

// Balance sign per architecture: sharpen the all-convolutional net,
// smooth the fully-connected one.
LossConfig default_loss_config(Architecture arch);

struct FinetuneConfig {
    std::string dataset_path;
    int sample_count = 300;
    int trainable_last_k = 2;
};

struct RunConfig {
    Architecture architecture = Architecture::fcn;
    OpticalConfig optical;
    LossConfig loss;
    int epochs = 20;
    int batch_size = 32;
    double learning_rate = 1e-2;
    double momentum = 0.9;
    std::uint64_t seed = 1;
    std::string train_dataset_path;
    std::string eval_dataset_path;
    std::optional<FinetuneConfig> finetune;
    int threads = 1;
};

// Line-oriented key=value config format ('#' comments). Unknown keys are
// rejected. Missing keys keep their defaults; balance_lambda defaults to
// the architecture-specific sign.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);
std::string serialize_run_config(const RunConfig& cfg);

struct LossCurvePoint {
    std::int64_t step = 0;
    double mse = 0.0;
    double balance = 0.0;
    double l2 = 0.0;
    double total = 0.0;
};

struct RunReport {
    std::vector<LossCurvePoint> curve;
    std::vector<std::pair<std::string, QualityReport>> quality;  // (dataset, report)
    double wall_seconds = 0.0;  // stdout only; never persisted
    RunConfig config;
    std::string model_label;
};

struct TrainResult {
    NetworkSpec spec;
    TrainState state;
    RunReport report;
};

// Batched eval-mode inference over records; outputs are scaled to
// [0,255] before the metrics.
QualityReport evaluate_records(const TrainState& state, const NetworkSpec& spec,
                               std::span<const SpeckleRecord> records);

// Index of the first held-out record (last 10%, fixed by index).
// Datasets with fewer than 10 records are evaluated in full.
std::size_t holdout_begin(std::size_t record_count);

// Full-network SGD training on the train split of the dataset at
// cfg.train_dataset_path; loss curve logged every step. Deterministic
// for a fixed (seed, config, thread count). Non-finite losses abort with
// the last end-of-epoch state restored.
TrainResult train(const RunConfig& cfg);

// Eval-mode inference only; refuses datasets generated under a different
// diffuser seed or optical config.
QualityReport vanilla_transfer(const TrainState& state, const NetworkSpec& spec,
                               const SpeckleDataset& eval_ds, const Digest& expected_config,
                               std::uint64_t expected_seed);

// Freezes everything but the last cfg.finetune->trainable_last_k
// parameterized layers and trains on the first sample_count records of
// the fine-tune dataset at a tenth of the configured learning rate.
TrainResult finetune(const TrainState& pretrained, const RunConfig& cfg);

struct StudyCell {
    std::string model;
    std::string train_dataset;
    std::string finetune_dataset;
    QualityReport quality;
};

// 2x2 grid: trains one model per config, then fine-tunes each on both
// fine-tune datasets, evaluating on the fine-tune domain's held-out part.
std::vector<StudyCell> dataset_selection_study(const RunConfig& cfg_a, const RunConfig& cfg_b);

std::string loss_curve_csv(const RunReport& report);
std::string quality_report_csv(const RunReport& report);
std::string study_csv(const std::vector<StudyCell>& cells);

// First `count` held-out reconstructions next to their ground truth as
// PGM files (recon_###.pgm / truth_###.pgm).
void export_reconstructions(const TrainState& state, const NetworkSpec& spec,
                            std::span<const SpeckleRecord> records,
                            const std::filesystem::path& out_dir, int count);

}  // namespace speckle
