#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "actionpp/pipeline.hpp"

using namespace actionpp;

namespace {

    TrainConfig tiny_config() {
        TrainConfig c;
        c.seed = 5;
        c.data.image_size = 32;
        c.data.train_count = 16;
        c.data.validation_count = 4;
        c.data.label_ratio = 0.25;
        c.data.seed = 77;
        c.network.base_width = 4;
        c.network.depth = 2;
        c.network.latent_dim = 8;
        c.network.local_grid = 2;
        c.pretrain.iterations = 6;
        c.pretrain.mined_views = 3;
        c.finetune.iterations = 6;
        c.finetune.anco_pixels_per_class = 8;
        c.finetune.aaco_pixels_per_class = 4;
        c.finetune.queries_per_class = 8;
        c.finetune.confidence_threshold = 0.3;
        c.eval.interval = 3;
        c.eval.alignment_images = 2;
        c.eval.alignment_pairs = 1;
        c.eval.alignment_pixels = 16;
        c.eval.nn_pixels_per_class = 8;
        return c;
    }

    std::filesystem::path scratch(const std::string& name) {
        auto dir = std::filesystem::temp_directory_path() / "actionpp_test_pipeline" / name;
        std::filesystem::remove_all(dir);
        return dir;
    }

    const RunResult& pretrained() {
        static const RunResult r = run_pretrain(tiny_config());
        return r;
    }

    ClassCenters tiny_centers() { return centers_for(tiny_config()); }

    std::size_t count_lines(const std::filesystem::path& p) {
        std::ifstream in(p);
        std::size_t n = 0;
        for (std::string line; std::getline(in, line);) ++n;
        return n;
    }

} // namespace

TEST(Pipeline, ZeroIterationsReturnsInitialization) {
    auto cfg = tiny_config();
    cfg.pretrain.iterations = 0;
    auto r = run_pretrain(cfg);
    EXPECT_TRUE(r.log.empty());
    const auto init = StudentTeacher::from_config(cfg.network_config(), cfg.ema_decay);
    for (const auto& [name, t] : init.student.params()) {
        EXPECT_EQ(r.checkpoint.tensor("student/" + name), t) << name;
        EXPECT_EQ(r.checkpoint.tensor("teacher/" + name), t) << name;
    }
    EXPECT_EQ(r.checkpoint.meta["iteration"], 0);
}

TEST(Pipeline, PretrainIsDeterministic) {
    const auto again = run_pretrain(tiny_config());
    EXPECT_EQ(encode_checkpoint(again.checkpoint), encode_checkpoint(pretrained().checkpoint));
}

TEST(Pipeline, PretrainResumeIsBitwiseEqual) {
    const auto cfg = tiny_config();
    const auto dir = scratch("pre_resume");
    RunOptions first{dir, 2};
    auto half = run_pretrain(cfg, first);
    EXPECT_EQ(half.checkpoint.meta["iteration"], 2);
    const auto reloaded = load_checkpoint(dir / "pretrain.acpp");
    auto rest = run_pretrain(cfg, RunOptions{dir}, reloaded);
    EXPECT_EQ(encode_checkpoint(rest.checkpoint), encode_checkpoint(pretrained().checkpoint));
    EXPECT_EQ(count_lines(dir / "metrics.csv"), 1u + 6u);
}

TEST(Pipeline, FinetuneDeterministicAndResumable) {
    const auto cfg = tiny_config();
    const auto centers = tiny_centers();
    const auto full = run_finetune(cfg, pretrained().checkpoint, centers);
    const auto twice = run_finetune(cfg, pretrained().checkpoint, centers);
    EXPECT_EQ(encode_checkpoint(full.checkpoint), encode_checkpoint(twice.checkpoint));

    const auto dir = scratch("fine_resume");
    run_finetune(cfg, pretrained().checkpoint, centers, RunOptions{dir, 4});
    const auto rest = run_finetune(cfg, pretrained().checkpoint, centers, RunOptions{dir},
                                   load_checkpoint(dir / "finetune.acpp"));
    EXPECT_EQ(encode_checkpoint(rest.checkpoint), encode_checkpoint(full.checkpoint));
    ASSERT_EQ(full.log.size(), 6u);
    EXPECT_EQ(rest.log.back().csv_row(), full.log.back().csv_row());
}

TEST(Pipeline, ResumeRejectsChangedConfig) {
    auto cfg = tiny_config();
    cfg.optimizer.learning_rate = 0.02;
    EXPECT_THROW(run_pretrain(cfg, {}, pretrained().checkpoint), ConfigError);
    EXPECT_THROW(run_finetune(tiny_config(), pretrained().checkpoint, tiny_centers(), {}, pretrained().checkpoint),
                 ConfigError);
}

TEST(Pipeline, FinetuneLearningRateOverride) {
    const auto base = run_finetune(tiny_config(), pretrained().checkpoint, tiny_centers());
    auto same = tiny_config();
    same.finetune.learning_rate = same.optimizer.learning_rate;
    EXPECT_EQ(run_finetune(same, pretrained().checkpoint, tiny_centers()).checkpoint.tensors, base.checkpoint.tensors);
    auto slower = tiny_config();
    slower.finetune.learning_rate = 1e-3;
    EXPECT_NE(run_finetune(slower, pretrained().checkpoint, tiny_centers()).checkpoint.tensors, base.checkpoint.tensors);
    slower.finetune.learning_rate = -1.0;
    EXPECT_THROW(slower.validate(), ConfigError);
}

TEST(Pipeline, LoggedComponentsAddUpToTotal) {
    const auto fine = run_finetune(tiny_config(), pretrained().checkpoint, tiny_centers());
    for (const auto* log : {&pretrained().log, &fine.log}) {
        for (const auto& r : *log) {
            EXPECT_NEAR(r.component_sum(), r.total, 1e-9) << r.stage << " " << r.iteration;
            EXPECT_TRUE(std::isfinite(r.total));
        }
    }
    bool any_aaco = false;
    for (const auto& r : fine.log) any_aaco = any_aaco || r.aaco_active == 1;
    EXPECT_TRUE(any_aaco);
}

TEST(Pipeline, LoggedTemperaturesFollowSchedules) {
    auto cfg = tiny_config();
    cfg.finetune.tau_sa.kind = ScheduleKind::Step;
    cfg.finetune.tau_an.kind = ScheduleKind::Oscillating;
    const auto pre = run_pretrain(cfg);
    const auto fine = run_finetune(cfg, pre.checkpoint, tiny_centers());
    const auto ts = cfg.pretrain.tau_s.schedule(cfg.pretrain.iterations, cfg.seed);
    for (const auto& r : pre.log) {
        EXPECT_EQ(r.tau_s, ts.at(r.iteration));
        EXPECT_EQ(r.tau_t, cfg.pretrain.tau_s.tau_plus);
    }
    const auto an = cfg.finetune.tau_an.schedule(cfg.finetune.iterations, cfg.seed);
    const auto sa = cfg.finetune.tau_sa.schedule(cfg.finetune.iterations, cfg.seed);
    for (const auto& r : fine.log) {
        EXPECT_EQ(r.tau_an, an.at(r.iteration));
        EXPECT_EQ(r.tau_sa, sa.at(r.iteration));
    }
}

TEST(Pipeline, ValidationRunsOnSchedule) {
    const auto& log = pretrained().log;
    ASSERT_EQ(log.size(), 6u);
    for (const auto& r : log) {
        const bool due = (r.iteration + 1) % 3 == 0;
        EXPECT_EQ(!std::isnan(r.val_mean_dsc), due) << r.iteration;
    }
}

TEST(Pipeline, UntrainedNetworkScoresBelowHalfDsc) {
    auto cfg = tiny_config();
    cfg.pretrain.iterations = 0;
    auto r = run_pretrain(cfg);
    const auto report = evaluate_checkpoint(r.checkpoint, cfg);
    EXPECT_LT(report.mean_dsc, 0.5);
    EXPECT_FALSE(report.nn_error.has_value());
}

TEST(Pipeline, EvaluateFinetunedCheckpoint) {
    const auto cfg = tiny_config();
    const auto fine = run_finetune(cfg, pretrained().checkpoint, tiny_centers());
    const auto report = evaluate_checkpoint(fine.checkpoint, cfg);
    EXPECT_EQ(report.iteration, 6);
    EXPECT_EQ(report.dsc.size(), 4u);
    EXPECT_TRUE(report.divergence.has_value());
    EXPECT_THROW(evaluate_checkpoint(fine.checkpoint, cfg, "test"), DataError);
    EXPECT_EQ(evaluate_checkpoint(fine.checkpoint, cfg).to_json(), report.to_json());
}

TEST(Pipeline, SupervisedLossDropsDuringPretraining) {
    auto cfg = tiny_config();
    cfg.pretrain.iterations = 120;
    cfg.eval.interval = 0;
    const auto r = run_pretrain(cfg);
    double early = 0.0, late = 0.0;
    for (int i = 0; i < 10; ++i) {
        early += r.log[static_cast<std::size_t>(i)].sup;
        late += r.log[r.log.size() - 1 - static_cast<std::size_t>(i)].sup;
    }
    EXPECT_LT(late, early);
}

TEST(Dataset, SaveLoadRoundTrip) {
    const auto cfg = tiny_config();
    const auto dir = scratch("dataset");
    const auto ds = generate_training_data(cfg.data);
    save_dataset(dir, ds, cfg.data);
    const auto back = load_dataset(dir);
    EXPECT_EQ(back.samples, ds.samples);
    EXPECT_EQ(back.split.labeled, ds.split.labeled);
    EXPECT_EQ(back.split.validation, ds.split.validation);

    auto from_disk = cfg;
    from_disk.data.path = dir.string();
    auto a = run_pretrain(from_disk);
    EXPECT_EQ(a.checkpoint.tensors, pretrained().checkpoint.tensors);
}

TEST(Dataset, CorruptManifestIsRejected) {
    const auto dir = scratch("bad_dataset");
    const auto cfg = tiny_config();
    save_dataset(dir, generate_training_data(cfg.data), cfg.data);
    write_file(dir / "manifest.json", "{\"config\": {}}");
    EXPECT_THROW(load_dataset(dir), DataError);
}
