#include "speckle/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "speckle/io.hpp"
#include "speckle/rng.hpp"

namespace speckle {

namespace {

constexpr int kEvalBatch = 64;
constexpr double kFinetuneLrFactor = 0.1;

std::string fmt(double v) {
    std::ostringstream out;
    out.precision(17);
    out << v;
    return out.str();
}

Tensor records_to_input(std::span<const SpeckleRecord> records, std::span<const std::size_t> idx,
                        int crop) {
    Tensor t({static_cast<int>(idx.size()), 1, crop, crop});
    const std::size_t pixels = static_cast<std::size_t>(crop) * crop;
    for (std::size_t k = 0; k < idx.size(); ++k) {
        const auto& intensity = records[idx[k]].speckle.intensity;
        for (std::size_t p = 0; p < pixels; ++p) {
            t.data[k * pixels + p] = static_cast<double>(intensity[p]);
        }
    }
    return t;
}

Tensor records_to_target(std::span<const SpeckleRecord> records, std::span<const std::size_t> idx,
                         int crop) {
    Tensor t({static_cast<int>(idx.size()), 1, crop, crop});
    const std::size_t pixels = static_cast<std::size_t>(crop) * crop;
    for (std::size_t k = 0; k < idx.size(); ++k) {
        const auto& pix = records[idx[k]].target.pixels;
        for (std::size_t p = 0; p < pixels; ++p) {
            t.data[k * pixels + p] = pix[p] / 255.0;
        }
    }
    return t;
}

void check_dataset_provenance(const SpeckleDataset& ds, const Digest& expected_config,
                              std::uint64_t expected_seed, const std::string& what) {
    if (ds.config_digest != expected_config || ds.screen_seed != expected_seed) {
        throw std::runtime_error(
            "diffuser/config mismatch for " + what + ": dataset digest " + hex(ds.config_digest) +
            " (seed " + std::to_string(ds.screen_seed) + ") vs expected " + hex(expected_config) +
            " (seed " + std::to_string(expected_seed) + ")");
    }
}

// Shared by train() and finetune(): in-place SGD over full batches of the
// given indices, reshuffled per epoch.
std::vector<LossCurvePoint> run_sgd(TrainState& state, const NetworkSpec& spec,
                                    std::span<const SpeckleRecord> records,
                                    std::vector<std::size_t> indices, const RunConfig& cfg,
                                    double learning_rate) {
    const int crop = spec.input_shape[1];
    const int bs = cfg.batch_size;
    if (bs < 2) throw std::invalid_argument("train: batch_size must be >= 2");
    if (indices.size() < static_cast<std::size_t>(bs)) {
        throw std::invalid_argument("train: fewer training samples than one batch");
    }
    if (cfg.epochs < 0) throw std::invalid_argument("train: negative epoch count");

    std::vector<LossCurvePoint> curve;
    Rng shuffle_rng(cfg.seed);
    // Last finite end-of-epoch parameters, for divergence recovery.
    std::vector<LayerParams> checkpoint = state.params;
    std::uint64_t checkpoint_step = state.step;

    const std::size_t steps_per_epoch = indices.size() / bs;
    curve.reserve(steps_per_epoch * cfg.epochs);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(indices);
        for (std::size_t sb = 0; sb < steps_per_epoch; ++sb) {
            std::span<const std::size_t> batch_idx(indices.data() + sb * bs, bs);
            const Tensor input = records_to_input(records, batch_idx, crop);
            const Tensor target = records_to_target(records, batch_idx, crop);
            ForwardCache cache;
            const Tensor output = forward(state, spec, input, Mode::train, &cache);
            const TotalLoss losses = total_loss(output, target, state, spec, cfg.loss);
            if (!std::isfinite(losses.total)) {
                state.params = checkpoint;
                state.step = checkpoint_step;
                throw std::runtime_error("train: divergence at step " +
                                         std::to_string(checkpoint_step + sb + 1) +
                                         "; last end-of-epoch checkpoint restored");
            }
            GradSet grads = backward(state, spec, cache, losses.grad_output);
            add_l2_gradients(grads, state, spec, cfg.loss.l2_sigma);
            sgd_step(state, spec, grads, learning_rate, cfg.momentum);
            curve.push_back({static_cast<std::int64_t>(state.step), losses.mse, losses.balance,
                             losses.l2, losses.total});
        }
        checkpoint = state.params;
        checkpoint_step = state.step;
    }
    return curve;
}

std::vector<std::size_t> front_indices(std::size_t n) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    return idx;
}

}  // namespace

std::string architecture_name(Architecture arch) {
    return arch == Architecture::fcn ? "fcn" : "ocn";
}

Architecture parse_architecture(const std::string& name) {
    if (name == "fcn") return Architecture::fcn;
    if (name == "ocn") return Architecture::ocn;
    throw std::invalid_argument("unknown architecture: " + name);
}

NetworkSpec build_architecture(Architecture arch, int crop_size) {
    return arch == Architecture::fcn ? build_lismu_fcn(crop_size) : build_lismu_ocn(crop_size);
}

LossConfig default_loss_config(Architecture arch) {
    LossConfig cfg;
    cfg.balance_lambda = arch == Architecture::fcn ? -1e-3 : 1e-3;
    cfg.l2_sigma = 1e-4;
    return cfg;
}

RunConfig parse_run_config(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        auto issp = [](unsigned char c) { return std::isspace(c); };
        while (!line.empty() && issp(line.back())) line.pop_back();
        std::size_t start = 0;
        while (start < line.size() && issp(line[start])) ++start;
        line.erase(0, start);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw std::invalid_argument("config line " + std::to_string(lineno) +
                                        ": expected key=value");
        }
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }

    RunConfig cfg;
    auto take = [&](const std::string& key) -> std::optional<std::string> {
        auto it = kv.find(key);
        if (it == kv.end()) return std::nullopt;
        std::string v = it->second;
        kv.erase(it);
        return v;
    };
    auto take_f64 = [&](const std::string& key, double& out) {
        if (auto v = take(key)) out = std::stod(*v);
    };
    auto take_int = [&](const std::string& key, int& out) {
        if (auto v = take(key)) out = std::stoi(*v);
    };
    auto take_u64 = [&](const std::string& key, std::uint64_t& out) {
        if (auto v = take(key)) out = std::stoull(*v);
    };
    auto take_bool = [&](const std::string& key, bool& out) {
        if (auto v = take(key)) {
            if (*v != "0" && *v != "1") {
                throw std::invalid_argument("config key " + key + ": expected 0 or 1");
            }
            out = *v == "1";
        }
    };

    if (auto v = take("architecture")) cfg.architecture = parse_architecture(*v);
    cfg.loss = default_loss_config(cfg.architecture);

    take_int("epochs", cfg.epochs);
    take_int("batch_size", cfg.batch_size);
    take_f64("learning_rate", cfg.learning_rate);
    take_f64("momentum", cfg.momentum);
    take_u64("seed", cfg.seed);
    take_int("threads", cfg.threads);
    if (auto v = take("train_dataset")) cfg.train_dataset_path = *v;
    if (auto v = take("eval_dataset")) cfg.eval_dataset_path = *v;
    take_f64("balance_lambda", cfg.loss.balance_lambda);
    take_f64("l2_sigma", cfg.loss.l2_sigma);

    take_f64("optical.wavelength_m", cfg.optical.wavelength_m);
    take_f64("optical.delta_n", cfg.optical.delta_n);
    take_f64("optical.z1_m", cfg.optical.z1_m);
    take_f64("optical.z2_m", cfg.optical.z2_m);
    take_f64("optical.pixel_pitch_m", cfg.optical.pixel_pitch_m);
    take_int("optical.grid_size", cfg.optical.grid_size);
    take_int("optical.display_size", cfg.optical.display_size);
    take_int("optical.crop_size", cfg.optical.crop_size);
    take_bool("optical.literal_ordering", cfg.optical.literal_ordering);
    take_bool("optical.height_map_mode", cfg.optical.height_map_mode);

    if (auto ft_path = take("finetune.dataset")) {
        FinetuneConfig ft;
        ft.dataset_path = *ft_path;
        take_int("finetune.sample_count", ft.sample_count);
        take_int("finetune.trainable_last_k", ft.trainable_last_k);
        cfg.finetune = ft;
    }

    if (!kv.empty()) {
        throw std::invalid_argument("unknown config key: " + kv.begin()->first);
    }
    cfg.optical.validate();
    return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    return parse_run_config(std::string(bytes.begin(), bytes.end()));
}

std::string serialize_run_config(const RunConfig& cfg) {
    std::ostringstream out;
    out << "architecture=" << architecture_name(cfg.architecture) << "\n";
    out << "epochs=" << cfg.epochs << "\n";
    out << "batch_size=" << cfg.batch_size << "\n";
    out << "learning_rate=" << fmt(cfg.learning_rate) << "\n";
    out << "momentum=" << fmt(cfg.momentum) << "\n";
    out << "seed=" << cfg.seed << "\n";
    out << "threads=" << cfg.threads << "\n";
    if (!cfg.train_dataset_path.empty()) out << "train_dataset=" << cfg.train_dataset_path << "\n";
    if (!cfg.eval_dataset_path.empty()) out << "eval_dataset=" << cfg.eval_dataset_path << "\n";
    out << "balance_lambda=" << fmt(cfg.loss.balance_lambda) << "\n";
    out << "l2_sigma=" << fmt(cfg.loss.l2_sigma) << "\n";
    out << "optical.wavelength_m=" << fmt(cfg.optical.wavelength_m) << "\n";
    out << "optical.delta_n=" << fmt(cfg.optical.delta_n) << "\n";
    out << "optical.z1_m=" << fmt(cfg.optical.z1_m) << "\n";
    out << "optical.z2_m=" << fmt(cfg.optical.z2_m) << "\n";
    out << "optical.pixel_pitch_m=" << fmt(cfg.optical.pixel_pitch_m) << "\n";
    out << "optical.grid_size=" << cfg.optical.grid_size << "\n";
    out << "optical.display_size=" << cfg.optical.display_size << "\n";
    out << "optical.crop_size=" << cfg.optical.crop_size << "\n";
    out << "optical.literal_ordering=" << (cfg.optical.literal_ordering ? 1 : 0) << "\n";
    out << "optical.height_map_mode=" << (cfg.optical.height_map_mode ? 1 : 0) << "\n";
    if (cfg.finetune) {
        out << "finetune.dataset=" << cfg.finetune->dataset_path << "\n";
        out << "finetune.sample_count=" << cfg.finetune->sample_count << "\n";
        out << "finetune.trainable_last_k=" << cfg.finetune->trainable_last_k << "\n";
    }
    return out.str();
}

std::size_t holdout_begin(std::size_t record_count) {
    const std::size_t held = record_count / 10;
    return held == 0 ? 0 : record_count - held;
}

QualityReport evaluate_records(const TrainState& state, const NetworkSpec& spec,
                               std::span<const SpeckleRecord> records) {
    if (records.empty()) throw std::invalid_argument("evaluate_records: no records");
    const int crop = spec.input_shape[1];
    const std::size_t pixels = static_cast<std::size_t>(crop) * crop;
    std::vector<std::pair<MetricImage, MetricImage>> pairs;
    pairs.reserve(records.size());
    for (std::size_t begin = 0; begin < records.size(); begin += kEvalBatch) {
        const std::size_t count = std::min<std::size_t>(kEvalBatch, records.size() - begin);
        std::vector<std::size_t> idx(count);
        std::iota(idx.begin(), idx.end(), begin);
        const Tensor input = records_to_input(records, idx, crop);
        const Tensor output = eval_forward(state, spec, input);
        for (std::size_t k = 0; k < count; ++k) {
            std::vector<double> recon(pixels);
            for (std::size_t p = 0; p < pixels; ++p) {
                recon[p] = output.data[k * pixels + p] * 255.0;
            }
            pairs.emplace_back(metric_image(records[begin + k].target),
                               metric_image(crop, crop, std::move(recon)));
        }
    }
    return evaluate_set(pairs);
}

TrainResult train(const RunConfig& cfg) {
    const auto t0 = std::chrono::steady_clock::now();
    cfg.optical.validate();
    if (cfg.train_dataset_path.empty()) throw std::invalid_argument("train: no train_dataset");
    const SpeckleDataset ds = read_lsmd(cfg.train_dataset_path);
    if (ds.records.empty()) throw std::invalid_argument("train: empty train dataset");
    if (ds.config_digest != config_digest(cfg.optical)) {
        throw std::runtime_error("train: dataset was generated under a different optical config");
    }
    if (ds.crop_size != cfg.optical.crop_size) {
        throw std::runtime_error("train: dataset crop size does not match config");
    }

    TrainResult result;
    result.spec = build_architecture(cfg.architecture, ds.crop_size);
    result.state = init_state(result.spec, cfg.seed);
    result.report.config = cfg;
    result.report.model_label = architecture_name(cfg.architecture);

    const std::size_t hb = holdout_begin(ds.records.size());
    const std::size_t train_count = hb == 0 ? ds.records.size() : hb;
    result.report.curve = run_sgd(result.state, result.spec, ds.records,
                                  front_indices(train_count), cfg, cfg.learning_rate);

    if (!cfg.eval_dataset_path.empty()) {
        const SpeckleDataset eval_ds = read_lsmd(cfg.eval_dataset_path);
        const QualityReport q = vanilla_transfer(result.state, result.spec, eval_ds,
                                                 ds.config_digest, ds.screen_seed);
        result.report.quality.emplace_back(eval_ds.source_name, q);
    }

    result.report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return result;
}

QualityReport vanilla_transfer(const TrainState& state, const NetworkSpec& spec,
                               const SpeckleDataset& eval_ds, const Digest& expected_config,
                               std::uint64_t expected_seed) {
    check_dataset_provenance(eval_ds, expected_config, expected_seed, eval_ds.source_name);
    if (eval_ds.records.empty()) throw std::invalid_argument("vanilla_transfer: empty dataset");
    const std::size_t begin = holdout_begin(eval_ds.records.size());
    return evaluate_records(state, spec,
                            std::span<const SpeckleRecord>(eval_ds.records).subspan(begin));
}

TrainResult finetune(const TrainState& pretrained, const RunConfig& cfg) {
    const auto t0 = std::chrono::steady_clock::now();
    if (!cfg.finetune) throw std::invalid_argument("finetune: no finetune config");
    if (cfg.train_dataset_path.empty()) {
        throw std::invalid_argument("finetune: train_dataset (provenance) required");
    }
    const LsmdHeader origin = read_lsmd_header(cfg.train_dataset_path);
    if (origin.config_digest != config_digest(cfg.optical)) {
        throw std::runtime_error("finetune: optical config does not match the training dataset");
    }
    const SpeckleDataset ft_ds = read_lsmd(cfg.finetune->dataset_path);
    check_dataset_provenance(ft_ds, origin.config_digest, origin.screen_seed, ft_ds.source_name);

    TrainResult result;
    result.spec = freeze_all_but_last_k(build_architecture(cfg.architecture, ft_ds.crop_size),
                                        cfg.finetune->trainable_last_k);
    result.state = pretrained;
    // Fresh momentum, as if the state had been reloaded from disk.
    for (auto& p : result.state.params) {
        for (Tensor* v : {&p.vel_weight, &p.vel_bias, &p.vel_gamma, &p.vel_beta}) {
            std::fill(v->data.begin(), v->data.end(), 0.0);
        }
    }
    result.report.config = cfg;
    result.report.model_label = architecture_name(cfg.architecture) + "-ft";

    const std::size_t hb = holdout_begin(ft_ds.records.size());
    const std::size_t pool = hb == 0 ? ft_ds.records.size() : hb;
    const std::size_t sample_count = static_cast<std::size_t>(cfg.finetune->sample_count);
    if (sample_count < 1 || sample_count > pool) {
        throw std::invalid_argument("finetune: sample_count exceeds the fine-tune pool (" +
                                    std::to_string(pool) + ")");
    }
    result.report.curve = run_sgd(result.state, result.spec, ft_ds.records,
                                  front_indices(sample_count), cfg,
                                  cfg.learning_rate * kFinetuneLrFactor);

    if (!cfg.eval_dataset_path.empty()) {
        const SpeckleDataset eval_ds = read_lsmd(cfg.eval_dataset_path);
        const QualityReport q = vanilla_transfer(result.state, result.spec, eval_ds,
                                                 origin.config_digest, origin.screen_seed);
        result.report.quality.emplace_back(eval_ds.source_name, q);
    }

    result.report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return result;
}

std::vector<StudyCell> dataset_selection_study(const RunConfig& cfg_a, const RunConfig& cfg_b) {
    if (!cfg_a.finetune || !cfg_b.finetune) {
        throw std::invalid_argument("study: both configs need a finetune dataset");
    }
    std::vector<StudyCell> cells;
    for (const RunConfig& base : {cfg_a, cfg_b}) {
        const TrainResult trained = train(base);
        const std::string train_name =
            std::filesystem::path(base.train_dataset_path).stem().string();
        // Fine-tune the trained model on each config's fine-tune dataset.
        for (const RunConfig& other : {cfg_a, cfg_b}) {
            RunConfig ft_cfg = base;
            ft_cfg.finetune = other.finetune;
            ft_cfg.eval_dataset_path = other.finetune->dataset_path;
            const TrainResult tuned = finetune(trained.state, ft_cfg);
            StudyCell cell;
            cell.model = architecture_name(base.architecture);
            cell.train_dataset = train_name;
            cell.finetune_dataset =
                std::filesystem::path(other.finetune->dataset_path).stem().string();
            cell.quality = tuned.report.quality.at(0).second;
            cells.push_back(std::move(cell));
        }
    }
    return cells;
}

std::string loss_curve_csv(const RunReport& report) {
    std::ostringstream out;
    out.precision(17);
    out << "step,mse_loss,balance_loss,l2_loss,total\n";
    for (const auto& p : report.curve) {
        out << p.step << "," << p.mse << "," << p.balance << "," << p.l2 << "," << p.total << "\n";
    }
    return out.str();
}

std::string quality_report_csv(const RunReport& report) {
    std::string out = quality_csv_header();
    for (const auto& [dataset, q] : report.quality) {
        out += quality_csv_row(dataset, report.model_label, q);
    }
    return out;
}

std::string study_csv(const std::vector<StudyCell>& cells) {
    std::string out = quality_csv_header();
    for (const auto& cell : cells) {
        out += quality_csv_row(cell.finetune_dataset, cell.model + ":train=" + cell.train_dataset,
                               cell.quality);
    }
    return out;
}

void export_reconstructions(const TrainState& state, const NetworkSpec& spec,
                            std::span<const SpeckleRecord> records,
                            const std::filesystem::path& out_dir, int count) {
    const int crop = spec.input_shape[1];
    const std::size_t pixels = static_cast<std::size_t>(crop) * crop;
    const std::size_t n = std::min<std::size_t>(count, records.size());
    for (std::size_t i = 0; i < n; ++i) {
        const Tensor input = records_to_input(records, std::vector<std::size_t>{i}, crop);
        const Tensor output = eval_forward(state, spec, input);
        GrayImage recon(crop, crop);
        for (std::size_t p = 0; p < pixels; ++p) {
            recon.pixels[p] = static_cast<std::uint8_t>(
                std::clamp(std::floor(output.data[p] * 255.0 + 0.5), 0.0, 255.0));
        }
        char name[32];
        std::snprintf(name, sizeof(name), "recon_%03zu.pgm", i);
        save_pgm(recon, out_dir / name);
        std::snprintf(name, sizeof(name), "truth_%03zu.pgm", i);
        save_pgm(records[i].target, out_dir / name);
    }
}

}  // namespace speckle
