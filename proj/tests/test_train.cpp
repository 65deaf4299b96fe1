#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "iseg/optim.hpp"
#include "iseg/train.hpp"

using namespace iseg;
namespace fs = std::filesystem;

namespace {

// Tiny dataset shared by the training tests: 4 scenes x 2 rigs at 16x16 with 4 classes.
const fs::path& tiny_data() {
    static const fs::path dir = [] {
        const fs::path d = fs::temp_directory_path() / ("iseg_train_tiny_" + std::to_string(::getpid()));
        fs::remove_all(d);
        generate_dataset(4, 2, d, 21, {4, 16, 16});
        return d;
    }();
    return dir;
}

TrainConfig tiny_config(const std::string& experiment, std::size_t epochs = 2) {
    return TrainConfig::from_text("experiment=" + experiment + "\nepochs=" + std::to_string(epochs) +
                                  "\nresolution=16x16\nfeatures=4,8\nbatch_size=2\nlr=1.0\n");
}

fs::path out_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("iseg_train_out_" + std::to_string(::getpid()) + "_" + name);
    fs::remove_all(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

}  // namespace

TEST(Adadelta, HandStep) {
    std::vector<double> theta{1.0}, grad{1.0}, eg{0.0}, ed{0.0};
    adadelta_step<double>(theta, grad, eg, ed, AdadeltaConfig{0.01, 0.95, 1e-6, 0.0});
    EXPECT_NEAR(theta[0], 1.0 - 0.01 * std::sqrt(1e-6) / std::sqrt(0.05 + 1e-6), 1e-15);
    EXPECT_NEAR(eg[0], 0.05, 1e-15);
    const double d = std::sqrt(1e-6) / std::sqrt(0.05 + 1e-6);
    EXPECT_NEAR(ed[0], 0.05 * d * d, 1e-18);
}

TEST(Adadelta, DecoupledWeightDecay) {
    std::vector<double> theta{2.0}, grad{0.0}, eg{0.0}, ed{0.0};
    adadelta_step<double>(theta, grad, eg, ed, AdadeltaConfig{0.5, 0.95, 1e-6, 0.1});
    EXPECT_DOUBLE_EQ(theta[0], 2.0 - 0.5 * 0.1 * 2.0);
    std::vector<double> short_grad;
    EXPECT_THROW(adadelta_step<double>(theta, short_grad, eg, ed, AdadeltaConfig{}), ShapeError);
}

TEST(TrainConfig, Defaults) {
    TrainConfig c;
    EXPECT_DOUBLE_EQ(c.optimizer.lr, 0.01);
    EXPECT_DOUBLE_EQ(c.optimizer.rho, 0.95);
    EXPECT_DOUBLE_EQ(c.optimizer.eps, 1e-6);
    EXPECT_DOUBLE_EQ(c.optimizer.weight_decay, 1e-9);
    EXPECT_DOUBLE_EQ(c.loss.w, 2.0);
    EXPECT_DOUBLE_EQ(c.loss.effective_intrinsic_weight(), 200.0);
    EXPECT_THROW(c.validate(), ConfigError);  // epochs has no default
}

TEST(TrainConfig, ParseAndCanonicalRoundTrip) {
    const auto c = TrainConfig::from_text(
        "# comment\nexperiment = joint\nepochs=3\nw=0.5\nresolution=32x48\nfeatures=4, 8\n"
        "trainable_heads=segmentation\ntrain_encoder=false\nclass_weighting=none\nalpha_gradient=through\n");
    EXPECT_EQ(c.experiment, Experiment::joint);
    EXPECT_EQ(*c.epochs, 3u);
    EXPECT_DOUBLE_EQ(c.loss.w, 0.5);
    EXPECT_EQ(c.height, 32u);
    EXPECT_EQ(c.width, 48u);
    EXPECT_EQ(c.features, (std::vector<std::size_t>{4, 8}));
    EXPECT_EQ(c.trainable_heads, std::vector<Head>{Head::segmentation});
    EXPECT_FALSE(c.train_encoder);
    EXPECT_EQ(c.class_weighting, ClassWeighting::none);
    EXPECT_EQ(c.alpha_gradient, AlphaGradient::through);
    EXPECT_NO_THROW(c.validate());
    const auto back = TrainConfig::from_text(c.canonical_text());
    EXPECT_EQ(back.canonical_text(), c.canonical_text());
    EXPECT_EQ(back.hash(), c.hash());
}

TEST(TrainConfig, HashTracksEveryKey) {
    const auto base = tiny_config("joint");
    auto changed = base;
    changed.set("gamma_s", "0.5");
    EXPECT_NE(changed.hash(), base.hash());
    changed = base;
    changed.set("seed", "2");
    EXPECT_NE(changed.hash(), base.hash());
    EXPECT_EQ(tiny_config("joint").hash(), base.hash());
}

TEST(TrainConfig, Errors) {
    TrainConfig c;
    EXPECT_THROW(c.set("learning_rate", "1"), ConfigError);
    EXPECT_THROW(c.set("experiment", "triple"), ConfigError);
    EXPECT_THROW(c.set("epochs", "-1"), ConfigError);
    EXPECT_THROW(c.set("mirror_links", "maybe"), ConfigError);
    EXPECT_THROW(c.set("resolution", "96"), ConfigError);
    EXPECT_THROW(TrainConfig::from_text("epochs"), ConfigError);
    auto bad = tiny_config("single_segmentation");
    bad.set("trainable_heads", "shading");
    EXPECT_THROW(bad.validate(), ConfigError);
    bad = tiny_config("single_segmentation");
    bad.set("resolution", "18x16");
    EXPECT_THROW(bad.validate(), ConfigError);
    bad = tiny_config("single_segmentation");
    bad.set("batch_size", "1");
    EXPECT_THROW(bad.validate(), ConfigError);
    try {
        c.set("experiment", "triple");
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("single_intrinsics"), std::string::npos);
    }
}

TEST(TrainConfig, ExperimentWiring) {
    EXPECT_EQ(tiny_config("single_intrinsics").heads(), (std::vector<Head>{Head::reflectance, Head::shading}));
    EXPECT_EQ(tiny_config("cascade_albedo_to_seg").input_mode(), InputMode::albedo);
    EXPECT_EQ(tiny_config("cascade_seg_to_intrinsics").input_mode(), InputMode::rgb_labels);
    EXPECT_EQ(tiny_config("cascade_seg_to_intrinsics").network_spec(4).input_channels(), 4u);
    EXPECT_EQ(tiny_config("joint").heads().size(), 3u);
}

TEST(RunExperiment, ZeroEpochsStillEvaluates) {
    const auto dir = out_dir("zero");
    const auto rec = run_experiment(tiny_config("single_segmentation", 0), tiny_data(), dir);
    EXPECT_TRUE(rec.epochs.empty());
    EXPECT_TRUE(rec.report.segmentation);
    EXPECT_TRUE(fs::exists(dir / "checkpoint.isnn"));
}

TEST(RunExperiment, JointTermsDecomposeAndFilesExist) {
    auto cfg = tiny_config("joint");
    cfg.eval_every_epoch = true;
    const auto dir = out_dir("joint");
    std::size_t calls = 0;
    const auto rec = run_experiment(cfg, tiny_data(), dir, {[&](std::size_t, const EpochRecord&) { ++calls; }});
    EXPECT_EQ(calls, 2u);
    ASSERT_EQ(rec.epochs.size(), 2u);
    for (const auto& e : rec.epochs) {
        EXPECT_DOUBLE_EQ(e.get("total"), e.get("weighted_ce") + e.get("weighted_intrinsic"));
        EXPECT_NEAR(e.get("weighted_intrinsic"), 200.0 * e.get("intrinsic"), 1e-6 * e.get("weighted_intrinsic"));
        EXPECT_GE(e.get("test_miou"), 0.0);
    }
    for (const char* f : {"config.txt", "checkpoint.isnn", "run_record.kv", "run_record.txt", "eval_report.kv",
                          "eval_report.txt", "confusion.csv"}) {
        EXPECT_TRUE(fs::exists(dir / f)) << f;
    }
    const auto traces = read_traces(dir / "run_record.kv");
    ASSERT_EQ(traces.size(), rec.term_names().size());
    EXPECT_EQ(traces[0].first, "total");
    EXPECT_EQ(traces[0].second, rec.trace("total"));
    const auto net = load_checkpoint(dir / "checkpoint.isnn");
    EXPECT_EQ(net.spec(), cfg.network_spec(4));
    EXPECT_EQ(TrainConfig::from_file(dir / "config.txt").hash(), cfg.hash());
}

TEST(RunExperiment, DeterministicAcrossRuns) {
    const auto cfg = tiny_config("single_intrinsics");
    const auto a = out_dir("det_a"), b = out_dir("det_b");
    const auto ra = run_experiment(cfg, tiny_data(), a);
    const auto rb = run_experiment(cfg, tiny_data(), b);
    EXPECT_EQ(ra.trace("total"), rb.trace("total"));
    EXPECT_EQ(slurp(a / "checkpoint.isnn"), slurp(b / "checkpoint.isnn"));
    EXPECT_EQ(slurp(a / "eval_report.kv"), slurp(b / "eval_report.kv"));
}

TEST(RunExperiment, FrozenEncoderLeavesEncoderUntouched) {
    auto cfg = tiny_config("single_segmentation");
    const auto first = out_dir("frozen_init");
    run_experiment(tiny_config("single_segmentation", 0), tiny_data(), first);
    cfg.init_checkpoint = (first / "checkpoint.isnn").string();
    cfg.train_encoder = false;
    const auto second = out_dir("frozen");
    run_experiment(cfg, tiny_data(), second);
    const auto before = load_checkpoint(first / "checkpoint.isnn"), after = load_checkpoint(second / "checkpoint.isnn");
    const auto pb = before.parameters(), pa = after.parameters();
    bool decoder_moved = false;
    for (std::size_t i = 0; i < pb.size(); ++i) {
        if (pb[i].group == Group::encoder) {
            EXPECT_EQ(pb[i].var.value(), pa[i].var.value()) << pb[i].name;
        } else {
            decoder_moved = decoder_moved || !(pb[i].var.value() == pa[i].var.value());
        }
    }
    EXPECT_TRUE(decoder_moved);
}

TEST(RunExperiment, CascadesRun) {
    const auto albedo_dir = out_dir("cascade_src");
    run_experiment(tiny_config("single_intrinsics", 1), tiny_data(), albedo_dir);
    auto cfg = tiny_config("cascade_albedo_to_seg", 1);
    cfg.albedo_checkpoint = (albedo_dir / "checkpoint.isnn").string();
    EXPECT_TRUE(run_experiment(cfg, tiny_data(), out_dir("cascade_a")).report.segmentation);
    const auto rec = run_experiment(tiny_config("cascade_seg_to_intrinsics", 1), tiny_data(), out_dir("cascade_b"));
    EXPECT_TRUE(rec.report.albedo);
    EXPECT_EQ(rec.term_names(), (std::vector<std::string>{"total", "albedo", "shading"}));

    auto wrong = tiny_config("cascade_albedo_to_seg", 1);
    wrong.albedo_checkpoint = (out_dir("zero_seg") / "missing.isnn").string();
    EXPECT_THROW(run_experiment(wrong, tiny_data(), out_dir("cascade_c")), IoError);
}

TEST(RunExperiment, Incompatibilities) {
    auto cfg = tiny_config("single_segmentation");
    cfg.set("resolution", "32x32");
    EXPECT_THROW(run_experiment(cfg, tiny_data(), out_dir("incompat")), CompatibilityError);

    const auto seg_dir = out_dir("mismatch_src");
    run_experiment(tiny_config("single_segmentation", 0), tiny_data(), seg_dir);
    auto init = tiny_config("joint", 1);
    init.init_checkpoint = (seg_dir / "checkpoint.isnn").string();
    EXPECT_THROW(run_experiment(init, tiny_data(), out_dir("mismatch")), CheckpointMismatchError);
}

TEST(SweepW, WritesTable) {
    auto base = tiny_config("joint", 1);
    const auto dir = out_dir("sweep");
    const auto rows = sweep_w({0.5, 2.0}, base, tiny_data(), dir);
    ASSERT_EQ(rows.size(), 2u);
    EXPECT_TRUE(fs::exists(dir / "w_0.5" / "checkpoint.isnn"));
    EXPECT_TRUE(fs::exists(dir / "w_2" / "checkpoint.isnn"));
    const std::string csv = slurp(dir / "sweep_w.csv");
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "w,Global,mIoU,Alb.MSE,Alb.LMSE,Alb.DSSIM,Shad.MSE,Shad.LMSE,Shad.DSSIM");
}
