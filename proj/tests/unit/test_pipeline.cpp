#include <doctest.h>

#include <filesystem>

#include "speckle/io.hpp"
#include "speckle/pipeline.hpp"
#include "synthetic.hpp"

using namespace speckle;
namespace fs = std::filesystem;

namespace {

struct TestWorld {
    fs::path dir;
    OpticalConfig optical;
    DiffuserScreen screen;

    explicit TestWorld(const std::string& name) {
        dir = fs::temp_directory_path() / name;
        fs::create_directories(dir);
        optical.grid_size = 64;
        optical.display_size = 45;
        optical.crop_size = 32;
        screen = make_diffuser(optical, 42);
    }
    ~TestWorld() { fs::remove_all(dir); }

    fs::path make_dataset(const std::string& name, const std::vector<GrayImage>& raw) {
        std::vector<GrayImage> targets;
        for (const auto& img : raw) targets.push_back(to_target(img, optical.crop_size));
        SpeckleDataset ds = generate_dataset(targets, screen, optical);
        ds.source_name = name;
        const fs::path path = dir / (name + ".lsmd");
        write_lsmd(ds, path);
        return path;
    }

    RunConfig base_config(Architecture arch) const {
        RunConfig cfg;
        cfg.architecture = arch;
        cfg.optical = optical;
        cfg.loss = default_loss_config(arch);
        cfg.epochs = 2;
        cfg.batch_size = 4;
        cfg.learning_rate = 1e-3;
        cfg.momentum = 0.9;
        cfg.seed = 5;
        return cfg;
    }
};

}  // namespace

TEST_CASE("run config round-trips and validates") {
    RunConfig cfg;
    cfg.architecture = Architecture::ocn;
    cfg.loss = default_loss_config(cfg.architecture);
    cfg.epochs = 7;
    cfg.batch_size = 16;
    cfg.learning_rate = 2.5e-3;
    cfg.seed = 99;
    cfg.train_dataset_path = "a.lsmd";
    cfg.eval_dataset_path = "b.lsmd";
    cfg.optical.grid_size = 256;
    cfg.optical.display_size = 45;
    FinetuneConfig ft;
    ft.dataset_path = "c.lsmd";
    ft.sample_count = 123;
    cfg.finetune = ft;

    const RunConfig back = parse_run_config(serialize_run_config(cfg));
    CHECK(back.architecture == cfg.architecture);
    CHECK(back.epochs == cfg.epochs);
    CHECK(back.batch_size == cfg.batch_size);
    CHECK(back.learning_rate == cfg.learning_rate);
    CHECK(back.seed == cfg.seed);
    CHECK(back.train_dataset_path == cfg.train_dataset_path);
    CHECK(back.optical == cfg.optical);
    REQUIRE(back.finetune.has_value());
    CHECK(back.finetune->dataset_path == "c.lsmd");
    CHECK(back.finetune->sample_count == 123);

    CHECK_THROWS_WITH_AS(parse_run_config("no_such_key=1\n"), doctest::Contains("unknown config"),
                         std::invalid_argument);
    CHECK_THROWS_AS(parse_run_config("architecture=resnet\n"), std::invalid_argument);
}

TEST_CASE("architecture picks the default balance sign") {
    const RunConfig fcn = parse_run_config("architecture=fcn\n");
    CHECK(fcn.loss.balance_lambda == doctest::Approx(-1e-3));
    const RunConfig ocn = parse_run_config("architecture=ocn\n");
    CHECK(ocn.loss.balance_lambda == doctest::Approx(1e-3));
    const RunConfig forced = parse_run_config("architecture=ocn\nbalance_lambda=-0.5\n");
    CHECK(forced.loss.balance_lambda == doctest::Approx(-0.5));
}

TEST_CASE("holdout split is the last tenth by index") {
    CHECK(holdout_begin(100) == 90);
    CHECK(holdout_begin(10) == 9);
    CHECK(holdout_begin(9) == 0);
    CHECK(holdout_begin(2000) == 1800);
}

TEST_CASE("training is deterministic and logs every step") {
    TestWorld world("speckle_pipe_det");
    const auto ds_path =
        world.make_dataset("train", testsupport::make_cifar_like(40, 1));
    RunConfig cfg = world.base_config(Architecture::fcn);
    cfg.train_dataset_path = ds_path.string();
    cfg.eval_dataset_path = ds_path.string();

    const TrainResult a = train(cfg);
    const TrainResult b = train(cfg);
    // 36 train records, batch 4 -> 9 steps/epoch, 2 epochs
    REQUIRE(a.report.curve.size() == 18);
    for (std::size_t i = 0; i < a.report.curve.size(); ++i) {
        CHECK(a.report.curve[i].step == static_cast<std::int64_t>(i + 1));
        CHECK(a.report.curve[i].total == b.report.curve[i].total);
    }
    REQUIRE(a.report.quality.size() == 1);
    CHECK(a.report.quality[0].second.sample_count == 4);

    const fs::path wa = world.dir / "a.lsmw", wb = world.dir / "b.lsmw";
    save_weights(a.state, a.spec, wa);
    save_weights(b.state, b.spec, wb);
    CHECK(read_file(wa) == read_file(wb));
}

TEST_CASE("a small dataset is overfit within 200 steps") {
    TestWorld world("speckle_pipe_overfit");
    const auto ds_path = world.make_dataset("tiny", testsupport::make_cifar_like(8, 2));
    RunConfig cfg = world.base_config(Architecture::fcn);
    cfg.train_dataset_path = ds_path.string();
    cfg.epochs = 200;  // 8 records, batch 8 -> one step per epoch
    cfg.batch_size = 8;
    cfg.learning_rate = 2e-4;
    cfg.loss.balance_lambda = 0.0;
    cfg.loss.l2_sigma = 0.0;

    const TrainResult r = train(cfg);
    REQUIRE(r.report.curve.size() == 200);
    CHECK(r.report.curve.back().mse <= 0.1 * r.report.curve.front().mse);
}

TEST_CASE("evaluating on the training split beats the held-out split") {
    TestWorld world("speckle_pipe_gap");
    const auto ds_path = world.make_dataset("gap", testsupport::make_cifar_like(60, 3));
    RunConfig cfg = world.base_config(Architecture::fcn);
    cfg.train_dataset_path = ds_path.string();
    cfg.epochs = 30;
    cfg.learning_rate = 3e-4;
    cfg.batch_size = 8;

    const TrainResult r = train(cfg);
    const SpeckleDataset ds = read_lsmd(ds_path);
    const std::size_t hb = holdout_begin(ds.records.size());
    const auto train_q = evaluate_records(
        r.state, r.spec, std::span<const SpeckleRecord>(ds.records).first(hb));
    const auto held_q = evaluate_records(
        r.state, r.spec, std::span<const SpeckleRecord>(ds.records).subspan(hb));
    CHECK(train_q.psnr_db >= held_q.psnr_db);
}

TEST_CASE("vanilla transfer refuses mismatched provenance") {
    TestWorld world("speckle_pipe_digest");
    const auto ds_path = world.make_dataset("train", testsupport::make_cifar_like(20, 4));
    RunConfig cfg = world.base_config(Architecture::fcn);
    cfg.train_dataset_path = ds_path.string();
    cfg.epochs = 1;
    const TrainResult r = train(cfg);

    // same targets, different diffuser seed
    const auto other_screen = make_diffuser(world.optical, 43);
    std::vector<GrayImage> targets;
    for (const auto& img : testsupport::make_mnist_like(20, 5)) {
        targets.push_back(to_target(img, 32));
    }
    SpeckleDataset foreign = generate_dataset(targets, other_screen, world.optical);
    foreign.source_name = "foreign";
    const SpeckleDataset own = read_lsmd(ds_path);
    CHECK_THROWS_WITH_AS(
        vanilla_transfer(r.state, r.spec, foreign, own.config_digest, own.screen_seed),
        doctest::Contains("diffuser/config mismatch"), std::runtime_error);
}

TEST_CASE("finetune trains only the tail and 0 epochs equals vanilla transfer") {
    TestWorld world("speckle_pipe_ft");
    const auto train_path = world.make_dataset("train", testsupport::make_cifar_like(24, 6));
    const auto ft_path = world.make_dataset("target", testsupport::make_mnist_like(24, 7));

    RunConfig cfg = world.base_config(Architecture::fcn);
    cfg.train_dataset_path = train_path.string();
    cfg.epochs = 2;
    const TrainResult pre = train(cfg);

    RunConfig ft_cfg = cfg;
    FinetuneConfig ft;
    ft.dataset_path = ft_path.string();
    ft.sample_count = 20;
    ft_cfg.finetune = ft;
    ft_cfg.eval_dataset_path = ft_path.string();
    ft_cfg.epochs = 3;

    const TrainResult tuned = finetune(pre.state, ft_cfg);
    for (std::size_t i = 0; i < tuned.spec.layers.size(); ++i) {
        if (tuned.spec.layers[i].trainable) continue;
        CHECK(tuned.state.params[i].weight.data == pre.state.params[i].weight.data);
        CHECK(tuned.state.params[i].gamma.data == pre.state.params[i].gamma.data);
        CHECK(tuned.state.params[i].running_mean.data == pre.state.params[i].running_mean.data);
    }

    ft_cfg.epochs = 0;
    const TrainResult null_ft = finetune(pre.state, ft_cfg);
    const SpeckleDataset ft_ds = read_lsmd(ft_path);
    const SpeckleDataset train_ds = read_lsmd(train_path);
    const QualityReport vanilla = vanilla_transfer(pre.state, pre.spec, ft_ds,
                                                   train_ds.config_digest, train_ds.screen_seed);
    REQUIRE(null_ft.report.quality.size() == 1);
    CHECK(null_ft.report.quality[0].second.psnr_db == vanilla.psnr_db);
    CHECK(null_ft.report.quality[0].second.ssim == vanilla.ssim);
    CHECK(null_ft.report.curve.empty());
}

TEST_CASE("the dataset-selection study emits the full 2x2 grid") {
    TestWorld world("speckle_pipe_study");
    const auto a_train = world.make_dataset("alpha", testsupport::make_cifar_like(24, 8));
    const auto a_ft = world.make_dataset("alpha_ft", testsupport::make_cifar_like(24, 9));
    const auto b_train = world.make_dataset("beta", testsupport::make_mnist_like(24, 10));
    const auto b_ft = world.make_dataset("beta_ft", testsupport::make_mnist_like(24, 11));

    RunConfig cfg_a = world.base_config(Architecture::ocn);
    cfg_a.epochs = 1;
    cfg_a.train_dataset_path = a_train.string();
    FinetuneConfig fta;
    fta.dataset_path = b_ft.string();
    fta.sample_count = 16;
    cfg_a.finetune = fta;

    RunConfig cfg_b = cfg_a;
    cfg_b.train_dataset_path = b_train.string();
    FinetuneConfig ftb;
    ftb.dataset_path = a_ft.string();
    ftb.sample_count = 16;
    cfg_b.finetune = ftb;

    const auto cells = dataset_selection_study(cfg_a, cfg_b);
    REQUIRE(cells.size() == 4);
    for (const auto& cell : cells) {
        CHECK(cell.quality.sample_count > 0);
        CHECK(cell.quality.ssim <= 1.0);
    }
    CHECK(cells[0].train_dataset == "alpha");
    CHECK(cells[1].train_dataset == "alpha");
    CHECK(cells[2].train_dataset == "beta");
    CHECK(cells[3].train_dataset == "beta");
    const auto csv = study_csv(cells);
    CHECK(csv.find("ocn:train=alpha") != std::string::npos);
    CHECK(csv.find("ocn:train=beta") != std::string::npos);
}

TEST_CASE("reconstruction export writes paired pgm files") {
    TestWorld world("speckle_pipe_recon");
    const auto ds_path = world.make_dataset("recon", testsupport::make_cifar_like(12, 12));
    RunConfig cfg = world.base_config(Architecture::fcn);
    cfg.train_dataset_path = ds_path.string();
    cfg.epochs = 1;
    const TrainResult r = train(cfg);
    const SpeckleDataset ds = read_lsmd(ds_path);
    const fs::path out = world.dir / "recon_out";
    fs::create_directories(out);
    export_reconstructions(r.state, r.spec, ds.records, out, 3);
    for (int i = 0; i < 3; ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "recon_%03d.pgm", i);
        const GrayImage recon = load_pgm(out / name);
        CHECK(recon.height == 32);
        std::snprintf(name, sizeof(name), "truth_%03d.pgm", i);
        CHECK(load_pgm(out / name) == ds.records[i].target);
    }
}
