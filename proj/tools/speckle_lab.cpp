// Command-line front end: diffuser generation, speckle simulation,
// training, evaluation, fine-tuning, the dataset-selection study, and
// gray-distribution analysis.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "speckle/dataset.hpp"
#include "speckle/digest.hpp"
#include "speckle/image.hpp"
#include "speckle/io.hpp"
#include "speckle/metrics.hpp"
#include "speckle/nn.hpp"
#include "speckle/optics.hpp"
#include "speckle/pipeline.hpp"

namespace fs = std::filesystem;
using namespace speckle;

namespace {

int env_threads_default() {
    if (const char* env = std::getenv("SPECKLE_LAB_THREADS")) {
        try {
            const int v = std::stoi(env);
            if (v >= 1) return v;
        } catch (...) {
        }
    }
    return 0;  // unset
}

int resolve_threads(std::optional<int> flag, int config_threads) {
    if (flag) return std::max(1, *flag);
    const int env = env_threads_default();
    if (env >= 1) return env;
    return std::max(1, config_threads);
}

std::vector<GrayImage> load_targets(const std::string& src, const std::string& format) {
    if (format == "idx") return load_idx(src);
    if (format == "cifar") return load_cifar10_bin(src);
    if (format == "pgm-dir") {
        std::vector<fs::path> files;
        for (const auto& entry : fs::directory_iterator(src)) {
            if (entry.is_regular_file() && entry.path().extension() == ".pgm") {
                files.push_back(entry.path());
            }
        }
        std::sort(files.begin(), files.end());
        if (files.empty()) throw std::runtime_error("no .pgm files in " + src);
        std::vector<GrayImage> images;
        images.reserve(files.size());
        for (const auto& f : files) images.push_back(load_pgm(f));
        return images;
    }
    throw std::runtime_error("unknown target format: " + format);
}

// Manifest: a config echo block followed by one "sha256  name" line per
// output file, sha256sum-compatible. No timestamps, so reruns are
// byte-identical.
class Manifest {
public:
    Manifest(std::string command, int threads) {
        echo_ << "command=" << command << "\n";
        echo_ << "threads=" << threads << "\n";
    }
    void echo(const std::string& block) { echo_ << block; }
    void echo_kv(const std::string& key, const std::string& value) {
        echo_ << key << "=" << value << "\n";
    }
    void add_file(const fs::path& out_dir, const std::string& name) {
        files_.push_back({hex(sha256_file(out_dir / name)), name});
    }
    void write(const fs::path& out_dir) const {
        std::ostringstream out;
        out << echo_.str();
        for (const auto& [digest, name] : files_) out << digest << "  " << name << "\n";
        atomic_write(out_dir / "manifest.txt", out.str());
    }

private:
    std::ostringstream echo_;
    std::vector<std::pair<std::string, std::string>> files_;
};

void print_quality(const RunReport& report) {
    for (const auto& [dataset, q] : report.quality) {
        std::cout << dataset << ": avg_gray_diff=" << q.avg_gray_diff << " psnr_db=" << q.psnr_db
                  << " ssim=" << q.ssim << " n=" << q.sample_count << "\n";
    }
}

void write_run_outputs(const fs::path& out, const TrainResult& result, Manifest& manifest,
                       bool save_model) {
    fs::create_directories(out);
    if (save_model) {
        save_weights(result.state, result.spec, out / "weights.lsmw");
        manifest.add_file(out, "weights.lsmw");
    }
    atomic_write(out / "loss_curve.csv", loss_curve_csv(result.report));
    manifest.add_file(out, "loss_curve.csv");
    atomic_write(out / "quality.csv", quality_report_csv(result.report));
    manifest.add_file(out, "quality.csv");
    atomic_write(out / "config.cfg", serialize_run_config(result.report.config));
    manifest.add_file(out, "config.cfg");

    const std::string& eval_path = result.report.config.eval_dataset_path;
    if (!eval_path.empty()) {
        const SpeckleDataset eval_ds = read_lsmd(eval_path);
        const auto begin = holdout_begin(eval_ds.records.size());
        fs::create_directories(out / "recon");
        const int count = 8;
        export_reconstructions(result.state, result.spec,
                               std::span<const SpeckleRecord>(eval_ds.records).subspan(begin),
                               out / "recon", count);
        const auto n = std::min<std::size_t>(count, eval_ds.records.size() - begin);
        for (std::size_t i = 0; i < n; ++i) {
            char name[32];
            std::snprintf(name, sizeof(name), "recon/recon_%03zu.pgm", i);
            manifest.add_file(out, name);
            std::snprintf(name, sizeof(name), "recon/truth_%03zu.pgm", i);
            manifest.add_file(out, name);
        }
    }
}

struct GenDiffuserArgs {
    std::uint64_t seed = 0;
    int grid = 800;
    bool height_map = false;
    std::string out;
};

int run_gen_diffuser(const GenDiffuserArgs& a) {
    OpticalConfig cfg;
    cfg.grid_size = a.grid;
    cfg.display_size = std::min(cfg.display_size, a.grid);
    cfg.crop_size = std::min(cfg.crop_size, cfg.display_size);
    cfg.height_map_mode = a.height_map;
    const DiffuserScreen screen = make_diffuser(cfg, a.seed);
    write_lsds(screen, a.out);
    std::cout << "diffuser grid=" << a.grid << " seed=" << a.seed << " -> " << a.out << "\n";
    return 0;
}

struct SimulateArgs {
    std::string targets, format, diffuser, config, out;
    std::size_t limit = 0;
    std::optional<int> threads;
};

int run_simulate(const SimulateArgs& a) {
    RunConfig run_cfg;
    if (!a.config.empty()) run_cfg = load_run_config(a.config);
    const OpticalConfig& cfg = run_cfg.optical;
    const DiffuserScreen screen = read_lsds(a.diffuser);
    if (screen.grid_size != cfg.grid_size) {
        throw std::runtime_error("diffuser grid " + std::to_string(screen.grid_size) +
                                 " does not match optical.grid_size " +
                                 std::to_string(cfg.grid_size));
    }
    std::vector<GrayImage> raw = load_targets(a.targets, a.format);
    if (a.limit > 0 && raw.size() > a.limit) raw.resize(a.limit);
    std::vector<GrayImage> targets;
    targets.reserve(raw.size());
    for (const auto& img : raw) targets.push_back(to_target(img, cfg.crop_size));

    const int threads = resolve_threads(a.threads, run_cfg.threads);
    SpeckleDataset ds = generate_dataset(targets, screen, cfg, threads);
    ds.source_name = fs::path(a.targets).stem().string();
    write_lsmd(ds, a.out);
    std::cout << "records=" << ds.records.size() << " digest=" << hex(ds.config_digest) << " -> "
              << a.out << "\n";
    return 0;
}

struct TrainArgs {
    std::string config, out;
    std::optional<int> threads;
};

int run_train(const TrainArgs& a) {
    RunConfig cfg = load_run_config(a.config);
    cfg.threads = resolve_threads(a.threads, cfg.threads);
    const TrainResult result = train(cfg);
    Manifest manifest("train", cfg.threads);
    manifest.echo(serialize_run_config(cfg));
    write_run_outputs(a.out, result, manifest, true);
    manifest.write(a.out);
    std::cout << "trained " << result.report.model_label << " for "
              << result.report.curve.size() << " steps in " << result.report.wall_seconds
              << " s\n";
    if (!result.report.curve.empty()) {
        std::cout << "final total loss " << result.report.curve.back().total << "\n";
    }
    print_quality(result.report);
    return 0;
}

struct EvalArgs {
    std::string weights, config, dataset, out;
};

int run_eval(const EvalArgs& a) {
    const RunConfig cfg = load_run_config(a.config);
    if (cfg.train_dataset_path.empty()) {
        throw std::runtime_error("eval: config must name train_dataset for provenance");
    }
    const LsmdHeader origin = read_lsmd_header(cfg.train_dataset_path);
    const SpeckleDataset eval_ds = read_lsmd(a.dataset);
    const NetworkSpec spec = build_architecture(cfg.architecture, eval_ds.crop_size);
    const TrainState state = load_weights(spec, a.weights);
    const QualityReport q =
        vanilla_transfer(state, spec, eval_ds, origin.config_digest, origin.screen_seed);

    fs::create_directories(a.out);
    Manifest manifest("eval", 1);
    manifest.echo(serialize_run_config(cfg));
    manifest.echo_kv("eval.dataset", a.dataset);
    std::string csv = quality_csv_header();
    csv += quality_csv_row(eval_ds.source_name, architecture_name(cfg.architecture), q);
    atomic_write(fs::path(a.out) / "quality.csv", csv);
    manifest.add_file(a.out, "quality.csv");
    fs::create_directories(fs::path(a.out) / "recon");
    const auto begin = holdout_begin(eval_ds.records.size());
    export_reconstructions(state, spec,
                           std::span<const SpeckleRecord>(eval_ds.records).subspan(begin),
                           fs::path(a.out) / "recon", 8);
    const auto n = std::min<std::size_t>(8, eval_ds.records.size() - begin);
    for (std::size_t i = 0; i < n; ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "recon/recon_%03zu.pgm", i);
        manifest.add_file(a.out, name);
        std::snprintf(name, sizeof(name), "recon/truth_%03zu.pgm", i);
        manifest.add_file(a.out, name);
    }
    manifest.write(a.out);
    std::cout << eval_ds.source_name << ": avg_gray_diff=" << q.avg_gray_diff
              << " psnr_db=" << q.psnr_db << " ssim=" << q.ssim << " n=" << q.sample_count << "\n";
    return 0;
}

struct FinetuneArgs {
    std::string weights, config, out;
    std::optional<int> threads;
};

int run_finetune(const FinetuneArgs& a) {
    RunConfig cfg = load_run_config(a.config);
    cfg.threads = resolve_threads(a.threads, cfg.threads);
    if (!cfg.finetune) throw std::runtime_error("finetune: config has no finetune.dataset");
    const LsmdHeader ft_header = read_lsmd_header(cfg.finetune->dataset_path);
    const NetworkSpec spec = build_architecture(cfg.architecture, ft_header.crop_size);
    const TrainState pretrained = load_weights(spec, a.weights);
    const TrainResult result = finetune(pretrained, cfg);
    Manifest manifest("finetune", cfg.threads);
    manifest.echo(serialize_run_config(cfg));
    write_run_outputs(a.out, result, manifest, true);
    manifest.write(a.out);
    std::cout << "fine-tuned " << result.report.model_label << " for "
              << result.report.curve.size() << " steps in " << result.report.wall_seconds
              << " s\n";
    print_quality(result.report);
    return 0;
}

struct StudyArgs {
    std::string config_a, config_b, out;
};

int run_study(const StudyArgs& a) {
    const RunConfig cfg_a = load_run_config(a.config_a);
    const RunConfig cfg_b = load_run_config(a.config_b);
    const auto cells = dataset_selection_study(cfg_a, cfg_b);
    fs::create_directories(a.out);
    Manifest manifest("study", 1);
    manifest.echo_kv("config_a", a.config_a);
    manifest.echo_kv("config_b", a.config_b);
    atomic_write(fs::path(a.out) / "study.csv", study_csv(cells));
    manifest.add_file(a.out, "study.csv");
    manifest.write(a.out);
    for (const auto& cell : cells) {
        std::cout << "train=" << cell.train_dataset << " finetune=" << cell.finetune_dataset
                  << ": psnr_db=" << cell.quality.psnr_db << " ssim=" << cell.quality.ssim << "\n";
    }
    return 0;
}

struct AnalyzeArgs {
    std::string targets, format, out;
    std::size_t limit = 0;
};

int run_analyze(const AnalyzeArgs& a) {
    std::vector<GrayImage> images = load_targets(a.targets, a.format);
    if (a.limit > 0 && images.size() > a.limit) images.resize(a.limit);
    const DistributionReport report = analyze_distribution(images);
    fs::create_directories(a.out);
    Manifest manifest("analyze", 1);
    manifest.echo_kv("targets", a.targets);
    manifest.echo_kv("format", a.format);
    manifest.echo_kv("samples", std::to_string(images.size()));
    atomic_write(fs::path(a.out) / "gray_histogram.csv", histogram_csv(report));
    manifest.add_file(a.out, "gray_histogram.csv");
    atomic_write(fs::path(a.out) / "mean_variance.csv", mean_variance_csv(report));
    manifest.add_file(a.out, "mean_variance.csv");
    manifest.write(a.out);
    std::cout << "samples=" << images.size()
              << " entropy_bits=" << histogram_entropy(report.gray_histogram) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Lensless-imaging speckle simulation and reconstruction toolkit"};
    app.require_subcommand(1);

    auto even_grid = CLI::Validator(
        [](std::string& s) -> std::string {
            try {
                const long v = std::stol(s);
                if (v < 2 || v % 2 != 0) return "grid must be even and >= 2";
            } catch (...) {
                return "grid must be an integer";
            }
            return "";
        },
        "EVEN_GRID");

    GenDiffuserArgs gen_args;
    CLI::App* gen = app.add_subcommand("gen-diffuser", "Generate a random diffuser screen");
    gen->add_option("--seed", gen_args.seed, "RNG seed")->default_val(0);
    gen->add_option("--grid", gen_args.grid, "Grid size (even)")
        ->default_val(800)
        ->check(even_grid);
    gen->add_flag("--height-map", gen_args.height_map, "Sample a surface height map");
    gen->add_option("--out", gen_args.out, "Output LSDS file")->required();

    SimulateArgs sim_args;
    CLI::App* sim = app.add_subcommand("simulate", "Run the speckle forward model over targets");
    sim->add_option("--targets", sim_args.targets, "Target source (file or directory)")->required();
    sim->add_option("--format", sim_args.format, "Target format")
        ->required()
        ->check(CLI::IsMember({"idx", "cifar", "pgm-dir"}));
    sim->add_option("--diffuser", sim_args.diffuser, "LSDS diffuser file")->required();
    sim->add_option("--config", sim_args.config, "Run config file (optical.* keys)");
    sim->add_option("--out", sim_args.out, "Output LSMD dataset")->required();
    sim->add_option("--limit", sim_args.limit, "Use at most N targets (0 = all)");
    std::optional<int> sim_threads;
    sim->add_option("--threads", sim_threads, "Worker threads");

    TrainArgs train_args;
    CLI::App* train_cmd = app.add_subcommand("train", "Train a reconstruction model");
    train_cmd->add_option("--config", train_args.config, "Run config file")->required();
    train_cmd->add_option("--out", train_args.out, "Output directory")->required();
    std::optional<int> train_threads;
    train_cmd->add_option("--threads", train_threads, "Worker threads");

    EvalArgs eval_args;
    CLI::App* eval_cmd = app.add_subcommand("eval", "Evaluate weights on a dataset");
    eval_cmd->add_option("--weights", eval_args.weights, "LSMW weight file")->required();
    eval_cmd->add_option("--config", eval_args.config, "Run config file")->required();
    eval_cmd->add_option("--dataset", eval_args.dataset, "LSMD dataset to evaluate")->required();
    eval_cmd->add_option("--out", eval_args.out, "Output directory")->required();

    FinetuneArgs ft_args;
    CLI::App* ft_cmd = app.add_subcommand("finetune", "Fine-tune the last layers on a new dataset");
    ft_cmd->add_option("--weights", ft_args.weights, "Pre-trained LSMW weight file")->required();
    ft_cmd->add_option("--config", ft_args.config, "Run config file with finetune.* keys")
        ->required();
    ft_cmd->add_option("--out", ft_args.out, "Output directory")->required();
    std::optional<int> ft_threads;
    ft_cmd->add_option("--threads", ft_threads, "Worker threads");

    StudyArgs study_args;
    CLI::App* study_cmd =
        app.add_subcommand("study", "Train/fine-tune dataset-selection grid (2x2)");
    study_cmd->add_option("--config-a", study_args.config_a, "First run config")->required();
    study_cmd->add_option("--config-b", study_args.config_b, "Second run config")->required();
    study_cmd->add_option("--out", study_args.out, "Output directory")->required();

    AnalyzeArgs an_args;
    CLI::App* an_cmd = app.add_subcommand("analyze", "Gray-value distribution analysis");
    an_cmd->add_option("--targets", an_args.targets, "Target source (file or directory)")
        ->required();
    an_cmd->add_option("--format", an_args.format, "Target format")
        ->required()
        ->check(CLI::IsMember({"idx", "cifar", "pgm-dir"}));
    an_cmd->add_option("--out", an_args.out, "Output directory")->required();
    an_cmd->add_option("--limit", an_args.limit, "Use at most N targets (0 = all)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n";
        std::cerr << "run with --help for usage\n";
        return 2;
    }

    try {
        if (gen->parsed()) return run_gen_diffuser(gen_args);
        if (sim->parsed()) {
            sim_args.threads = sim_threads;
            return run_simulate(sim_args);
        }
        if (train_cmd->parsed()) {
            train_args.threads = train_threads;
            return run_train(train_args);
        }
        if (eval_cmd->parsed()) return run_eval(eval_args);
        if (ft_cmd->parsed()) {
            ft_args.threads = ft_threads;
            return run_finetune(ft_args);
        }
        if (study_cmd->parsed()) return run_study(study_args);
        if (an_cmd->parsed()) return run_analyze(an_args);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
