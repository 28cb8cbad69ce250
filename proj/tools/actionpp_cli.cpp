#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "actionpp/actionpp.hpp"

namespace fs = std::filesystem;
using namespace actionpp;

namespace {

    struct Common {
        std::string config;
        std::optional<std::uint64_t> seed;
        std::string out;
    };

    void add_common(CLI::App* cmd, Common& c, bool need_out) {
        cmd->add_option("--config", c.config, "JSON config file (defaults are used when omitted)")->check(CLI::ExistingFile);
        cmd->add_option("--seed", c.seed, "override the config's seed");
        auto* out = cmd->add_option("--out", c.out, "output directory");
        if (need_out) out->required();
    }

    TrainConfig resolve(const Common& c) {
        TrainConfig cfg = c.config.empty() ? TrainConfig{} : load_config(c.config);
        if (c.seed) cfg.seed = *c.seed;
        cfg.validate();
        return cfg;
    }

    void write_config_snapshot(const fs::path& dir, const TrainConfig& cfg) {
        write_file(dir / "config.json", to_json(cfg).dump(2) + "\n");
    }

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Semi-supervised contrastive segmentation on a synthetic long-tailed toy set"};
    app.require_subcommand(1);

    // centers -------------------------------------------------------------
    Common centers_opt;
    int centers_k = 4, centers_d = 128;
    UniformityConfig unif;
    auto* centers = app.add_subcommand("centers", "precompute uniform class centers on the sphere");
    add_common(centers, centers_opt, true);
    centers->add_option("--classes", centers_k, "number of classes K")->check(CLI::Range(2, kMaxClasses));
    centers->add_option("--dim", centers_d, "latent dimension d")->check(CLI::PositiveNumber);
    centers->add_option("--tau", unif.tau, "uniformity temperature")->check(CLI::PositiveNumber);
    centers->add_option("--max-iters", unif.max_iters, "iteration cap");

    // gen-data ------------------------------------------------------------
    Common data_opt;
    auto* gen = app.add_subcommand("gen-data", "write the synthetic dataset and its split");
    add_common(gen, data_opt, true);

    // pretrain / finetune -------------------------------------------------
    Common pre_opt, fine_opt;
    std::string pre_resume, fine_resume, fine_pretrained, fine_centers;
    std::int64_t pre_stop = -1, fine_stop = -1;
    bool quiet = false;
    auto* pre = app.add_subcommand("pretrain", "global/local instance discrimination pretraining");
    add_common(pre, pre_opt, true);
    pre->add_option("--resume", pre_resume, "continue from a pretrain checkpoint")->check(CLI::ExistingFile);
    pre->add_option("--stop-at", pre_stop, "stop after this many iterations (the run can be resumed)");
    pre->add_flag("--quiet", quiet, "no progress on stderr");

    auto* fine = app.add_subcommand("finetune", "contrastive fine-tuning with adaptive center allocation");
    add_common(fine, fine_opt, true);
    fine->add_option("--pretrained", fine_pretrained, "pretrain checkpoint")->required()->check(CLI::ExistingFile);
    fine->add_option("--centers", fine_centers, "centers file from `centers` (else computed from the config)")
        ->check(CLI::ExistingFile);
    fine->add_option("--resume", fine_resume, "continue from a finetune checkpoint")->check(CLI::ExistingFile);
    fine->add_option("--stop-at", fine_stop, "stop after this many iterations (the run can be resumed)");
    fine->add_flag("--quiet", quiet, "no progress on stderr");

    // eval ----------------------------------------------------------------
    Common eval_opt;
    std::string eval_ckpt, eval_split = "validation";
    auto* eval = app.add_subcommand("eval", "metrics report for a training checkpoint");
    add_common(eval, eval_opt, false);
    eval->add_option("--checkpoint", eval_ckpt, "checkpoint to evaluate")->required()->check(CLI::ExistingFile);
    eval->add_option("--split", eval_split, "validation | labeled | unlabeled")
        ->check(CLI::IsMember({"validation", "labeled", "unlabeled"}));

    // gradcheck -----------------------------------------------------------
    Common grad_opt;
    GradcheckOptions gopt;
    double grad_bound = 1e-5;
    auto* grad = app.add_subcommand("gradcheck", "finite-difference audit of every loss gradient");
    add_common(grad, grad_opt, false);
    grad->add_option("--instances", gopt.instances, "random instances per loss")->check(CLI::PositiveNumber);
    grad->add_option("--step", gopt.step, "central difference step")->check(CLI::PositiveNumber);
    grad->add_option("--bound", grad_bound, "maximum allowed relative error");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*centers) {
            TrainConfig cfg = resolve(centers_opt);
            unif.seed = cfg.seed;
            const auto c = precompute_centers(centers_k, centers_d, unif);
            const fs::path dir = centers_opt.out;
            save_checkpoint(dir / "centers.acpp", centers_checkpoint(c));
            nlohmann::json side = {{"K", c.num_classes},
                                   {"d", c.dim},
                                   {"tau", c.tau},
                                   {"final_loss", c.final_loss},
                                   {"final_grad_norm", c.final_grad_norm},
                                   {"iterations", c.iterations},
                                   {"max_pairwise_inner_product", c.max_pairwise_inner_product()},
                                   {"simplex_inner_product", -1.0 / (c.num_classes - 1)}};
            write_file(dir / "centers.json", side.dump(2) + "\n");
            std::cout << side.dump(2) << "\n";
        } else if (*gen) {
            TrainConfig cfg = resolve(data_opt);
            if (data_opt.seed) cfg.data.seed = *data_opt.seed;
            const auto ds = generate_training_data(cfg.data);
            save_dataset(data_opt.out, ds, cfg.data);
            std::cout << read_file(fs::path(data_opt.out) / "manifest.json");
        } else if (*pre) {
            const TrainConfig cfg = resolve(pre_opt);
            std::optional<Checkpoint> resume;
            if (!pre_resume.empty()) resume = load_checkpoint(pre_resume);
            write_config_snapshot(pre_opt.out, cfg);
            const auto r = run_pretrain(cfg, RunOptions{pre_opt.out, pre_stop, !quiet}, resume);
            std::cout << "pretrain: " << r.checkpoint.meta["iteration"] << " iterations, checkpoint "
                      << (fs::path(pre_opt.out) / "pretrain.acpp").string() << "\n";
        } else if (*fine) {
            TrainConfig cfg = resolve(fine_opt);
            if (!fine_centers.empty()) cfg.finetune.centers_path = fine_centers;
            std::optional<Checkpoint> resume;
            if (!fine_resume.empty()) resume = load_checkpoint(fine_resume);
            write_config_snapshot(fine_opt.out, cfg);
            const auto r = run_finetune(cfg, load_checkpoint(fine_pretrained), centers_for(cfg),
                                        RunOptions{fine_opt.out, fine_stop, !quiet}, resume);
            std::cout << "finetune: " << r.checkpoint.meta["iteration"] << " iterations, checkpoint "
                      << (fs::path(fine_opt.out) / "finetune.acpp").string() << "\n";
        } else if (*eval) {
            const TrainConfig cfg = resolve(eval_opt);
            const auto report = evaluate_checkpoint(load_checkpoint(eval_ckpt), cfg, eval_split);
            const std::string csv = MetricsReport::csv_header(cfg.data.num_classes) + "\n" + report.csv_row() + "\n";
            const std::string json = report.to_json().dump(2) + "\n";
            if (!eval_opt.out.empty()) {
                write_file(fs::path(eval_opt.out) / "metrics.csv", csv);
                write_file(fs::path(eval_opt.out) / "metrics.json", json);
            }
            std::cout << csv << json;
        } else if (*grad) {
            if (grad_opt.seed) gopt.seed = *grad_opt.seed;
            bool ok = true;
            nlohmann::json rows = nlohmann::json::array();
            for (const auto& r : run_gradcheck(gopt)) {
                const bool pass = r.max_relative_error < grad_bound;
                ok = ok && pass;
                std::printf("%-24s instances=%d max_rel_err=%.3e %s\n", r.loss.c_str(), r.instances, r.max_relative_error,
                            pass ? "ok" : "FAIL");
                rows.push_back({{"loss", r.loss}, {"instances", r.instances}, {"max_relative_error", r.max_relative_error}});
            }
            if (!grad_opt.out.empty()) write_file(fs::path(grad_opt.out) / "gradcheck.json", rows.dump(2) + "\n");
            return ok ? 0 : 1;
        }
    } catch (const NonFiniteLoss& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
