#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <string>

#include <json.hpp>

#include "centers.hpp"
#include "checkpoint.hpp"
#include "data.hpp"
#include "errors.hpp"
#include "model.hpp"
#include "schedule.hpp"

namespace actionpp {

    // Temperature bounds and shape; the horizon comes from the stage's
    // iteration count.
    struct ScheduleConfig {
        ScheduleKind kind = ScheduleKind::Cosine;
        double tau_minus = 0.1;
        double tau_plus = 1.0;
        double period_multiplier = 1.0;
        int step_count = 4;

        TemperatureSchedule schedule(std::int64_t total_iters, std::uint64_t seed) const {
            TemperatureSchedule s;
            s.kind = kind;
            s.tau_minus = tau_minus;
            s.tau_plus = tau_plus;
            s.total_iters = total_iters;
            s.period_multiplier = period_multiplier;
            s.step_count = step_count;
            s.seed = seed;
            s.validate();
            return s;
        }
    };

    struct DataConfig {
        int image_size = 64;
        int num_classes = 4;
        int train_count = 200;
        int validation_count = 40;
        double label_ratio = 0.1;
        double noise_sigma = 0.05;
        double sigma_aug = 0.02;
        std::uint64_t seed = 1234;
        std::string path;  // directory written by gen-data; empty -> generate in memory

        SceneConfig scene() const {
            SceneConfig s;
            s.image_size = image_size;
            s.num_classes = num_classes;
            s.noise_sigma = noise_sigma;
            s.seed = seed;
            return s;
        }
    };

    struct PretrainConfig {
        int iterations = 1000;
        int labeled_batch = 2;
        int unlabeled_batch = 2;
        int mined_views = 8;
        ScheduleConfig tau_s;
        bool schedule_teacher = false;  // teacher tau fixed at tau_s.tau_plus unless set
    };

    struct FinetuneConfig {
        int iterations = 2000;
        int labeled_batch = 2;
        int unlabeled_batch = 2;
        double learning_rate = 0.0;       // 0 -> optimizer.learning_rate
        ScheduleConfig tau_an;
        ScheduleConfig tau_sa;
        double lambda_a = 0.2;
        double w_aaco = 1.0;
        double eta = 0.1;
        int positives_per_anchor = 3;
        int queries_per_class = 64;
        int anco_pixels_per_class = 64;   // per unlabeled image, sampled among confident pixels
        int aaco_pixels_per_class = 16;   // per labeled image
        double confidence_threshold = 0.75;
        std::string centers_path;          // empty -> precompute with `uniformity`
        UniformityConfig uniformity;
    };

    struct EvalConfig {
        int interval = 100;                // 0 disables periodic validation
        int alignment_images = 8;
        int alignment_pairs = 4;
        int alignment_pixels = 256;
        int nn_pixels_per_class = 64;
    };

    struct TrainConfig {
        std::uint64_t seed = 0;
        DataConfig data;
        NetworkConfig network;
        SgdConfig optimizer;
        double ema_decay = 0.99;
        PretrainConfig pretrain;
        FinetuneConfig finetune;
        EvalConfig eval;

        NetworkConfig network_config() const {
            NetworkConfig n = network;
            n.in_channels = 1;
            n.num_classes = data.num_classes;
            n.seed = seed;
            return n;
        }

        SgdConfig finetune_optimizer() const {
            SgdConfig o = optimizer;
            if (finetune.learning_rate > 0.0) o.learning_rate = finetune.learning_rate;
            return o;
        }

        void validate() const {
            auto positive = [](double v, const char* what) {
                if (!(v > 0.0)) throw ConfigError(std::string(what) + " must be positive");
            };
            positive(optimizer.learning_rate, "optimizer.learning_rate");
            if (!(optimizer.momentum >= 0.0 && optimizer.momentum < 1.0)) throw ConfigError("optimizer.momentum must lie in [0, 1)");
            if (!(optimizer.weight_decay >= 0.0)) throw ConfigError("optimizer.weight_decay must be non-negative");
            if (!(finetune.learning_rate >= 0.0)) throw ConfigError("finetune.learning_rate must be >= 0");
            if (!(ema_decay >= 0.0 && ema_decay <= 1.0)) throw ConfigError("ema_decay must lie in [0, 1]");
            if (pretrain.iterations < 0 || finetune.iterations < 0) throw ConfigError("iteration counts must be >= 0");
            for (int b : {pretrain.labeled_batch, pretrain.unlabeled_batch, pretrain.mined_views, finetune.labeled_batch,
                          finetune.unlabeled_batch, finetune.queries_per_class, finetune.anco_pixels_per_class,
                          finetune.aaco_pixels_per_class, finetune.positives_per_anchor}) {
                if (b < 1) throw ConfigError("batch sizes and sampling caps must be >= 1");
            }
            if (pretrain.mined_views < 2) throw ConfigError("pretrain.mined_views must be >= 2");
            positive(finetune.eta, "finetune.eta");
            if (finetune.eta > 1.0) throw ConfigError("finetune.eta must be <= 1");
            if (!(finetune.lambda_a >= 0.0) || !(finetune.w_aaco >= 0.0)) throw ConfigError("loss weights must be >= 0");
            if (!(finetune.confidence_threshold >= 0.0 && finetune.confidence_threshold <= 1.0)) {
                throw ConfigError("finetune.confidence_threshold must lie in [0, 1]");
            }
            if (data.num_classes < 2) throw ConfigError("data.num_classes must be >= 2 for training");
            const int m = 1 << network.depth;
            if (data.image_size % m != 0 || data.image_size % network.local_grid != 0) {
                throw ConfigError("data.image_size must be divisible by 2^depth and by local_grid");
            }
            try {
                network_config().validate();
                data.scene().validate();
                (void)pretrain.tau_s.schedule(std::max(1, pretrain.iterations), seed);
                (void)finetune.tau_an.schedule(std::max(1, finetune.iterations), seed);
                (void)finetune.tau_sa.schedule(std::max(1, finetune.iterations), seed);
                finetune.uniformity.validate();
                (void)make_split(static_cast<std::size_t>(data.train_count), static_cast<std::size_t>(data.validation_count),
                                 data.label_ratio, data.seed);
            } catch (const ConfigError&) {
                throw;
            } catch (const Error& e) {
                throw ConfigError(e.what());
            }
        }
    };

    // ---------------------------------------------------------------------
    // JSON
    // ---------------------------------------------------------------------

    namespace detail {

        // Reads members of one JSON object and rejects any it did not read.
        class ObjectReader {
        public:
            ObjectReader(const nlohmann::json& j, std::string where) : j_(j), where_(std::move(where)) {
                if (!j_.is_object()) throw ConfigError(where_ + " must be a JSON object");
            }

            template <typename T>
            void read(const char* key, T& field) {
                seen_.insert(key);
                auto it = j_.find(key);
                if (it == j_.end()) return;
                try {
                    field = it->get<T>();
                } catch (const nlohmann::json::exception&) {
                    throw ConfigError(where_ + "." + key + " has the wrong type");
                }
            }

            const nlohmann::json* child(const char* key) {
                seen_.insert(key);
                auto it = j_.find(key);
                return it == j_.end() ? nullptr : &*it;
            }

            void finish() const {
                for (auto it = j_.begin(); it != j_.end(); ++it) {
                    if (!seen_.count(it.key())) throw ConfigError("unknown key " + where_ + "." + it.key());
                }
            }

            const std::string& where() const { return where_; }

        private:
            const nlohmann::json& j_;
            std::string where_;
            std::set<std::string> seen_;
        };

        inline void read_schedule(const nlohmann::json& j, const std::string& where, ScheduleConfig& s) {
            ObjectReader r(j, where);
            std::string kind = to_string(s.kind);
            r.read("kind", kind);
            try {
                s.kind = schedule_kind_from_string(kind);
            } catch (const Error& e) {
                throw ConfigError(where + ".kind: " + e.what());
            }
            r.read("tau_minus", s.tau_minus);
            r.read("tau_plus", s.tau_plus);
            r.read("period_multiplier", s.period_multiplier);
            r.read("step_count", s.step_count);
            r.finish();
        }

        inline nlohmann::json schedule_json(const ScheduleConfig& s) {
            return {{"kind", to_string(s.kind)},
                    {"tau_minus", s.tau_minus},
                    {"tau_plus", s.tau_plus},
                    {"period_multiplier", s.period_multiplier},
                    {"step_count", s.step_count}};
        }

    } // namespace detail

    inline nlohmann::json to_json(const TrainConfig& c) {
        nlohmann::json j;
        j["seed"] = c.seed;
        j["data"] = {{"image_size", c.data.image_size},
                     {"num_classes", c.data.num_classes},
                     {"train_count", c.data.train_count},
                     {"validation_count", c.data.validation_count},
                     {"label_ratio", c.data.label_ratio},
                     {"noise_sigma", c.data.noise_sigma},
                     {"sigma_aug", c.data.sigma_aug},
                     {"seed", c.data.seed},
                     {"path", c.data.path}};
        j["network"] = {{"base_width", c.network.base_width},
                        {"depth", c.network.depth},
                        {"latent_dim", c.network.latent_dim},
                        {"local_grid", c.network.local_grid}};
        j["optimizer"] = {{"learning_rate", c.optimizer.learning_rate},
                          {"momentum", c.optimizer.momentum},
                          {"weight_decay", c.optimizer.weight_decay}};
        j["ema_decay"] = c.ema_decay;
        j["pretrain"] = {{"iterations", c.pretrain.iterations},
                         {"labeled_batch", c.pretrain.labeled_batch},
                         {"unlabeled_batch", c.pretrain.unlabeled_batch},
                         {"mined_views", c.pretrain.mined_views},
                         {"tau_s", detail::schedule_json(c.pretrain.tau_s)},
                         {"schedule_teacher", c.pretrain.schedule_teacher}};
        const auto& f = c.finetune;
        j["finetune"] = {{"iterations", f.iterations},
                         {"labeled_batch", f.labeled_batch},
                         {"unlabeled_batch", f.unlabeled_batch},
                         {"learning_rate", f.learning_rate},
                         {"tau_an", detail::schedule_json(f.tau_an)},
                         {"tau_sa", detail::schedule_json(f.tau_sa)},
                         {"lambda_a", f.lambda_a},
                         {"w_aaco", f.w_aaco},
                         {"eta", f.eta},
                         {"positives_per_anchor", f.positives_per_anchor},
                         {"queries_per_class", f.queries_per_class},
                         {"anco_pixels_per_class", f.anco_pixels_per_class},
                         {"aaco_pixels_per_class", f.aaco_pixels_per_class},
                         {"confidence_threshold", f.confidence_threshold},
                         {"centers_path", f.centers_path},
                         {"uniformity",
                          {{"tau", f.uniformity.tau},
                           {"learning_rate", f.uniformity.learning_rate},
                           {"max_iters", f.uniformity.max_iters},
                           {"grad_tol", f.uniformity.grad_tol},
                           {"seed", f.uniformity.seed}}}};
        j["eval"] = {{"interval", c.eval.interval},
                     {"alignment_images", c.eval.alignment_images},
                     {"alignment_pairs", c.eval.alignment_pairs},
                     {"alignment_pixels", c.eval.alignment_pixels},
                     {"nn_pixels_per_class", c.eval.nn_pixels_per_class}};
        return j;
    }

    inline TrainConfig config_from_json(const nlohmann::json& j) {
        using detail::ObjectReader;
        TrainConfig c;
        ObjectReader top(j, "config");
        top.read("seed", c.seed);
        top.read("ema_decay", c.ema_decay);
        if (auto* d = top.child("data")) {
            ObjectReader r(*d, "data");
            r.read("image_size", c.data.image_size);
            r.read("num_classes", c.data.num_classes);
            r.read("train_count", c.data.train_count);
            r.read("validation_count", c.data.validation_count);
            r.read("label_ratio", c.data.label_ratio);
            r.read("noise_sigma", c.data.noise_sigma);
            r.read("sigma_aug", c.data.sigma_aug);
            r.read("seed", c.data.seed);
            r.read("path", c.data.path);
            r.finish();
        }
        if (auto* n = top.child("network")) {
            ObjectReader r(*n, "network");
            r.read("base_width", c.network.base_width);
            r.read("depth", c.network.depth);
            r.read("latent_dim", c.network.latent_dim);
            r.read("local_grid", c.network.local_grid);
            r.finish();
        }
        if (auto* o = top.child("optimizer")) {
            ObjectReader r(*o, "optimizer");
            r.read("learning_rate", c.optimizer.learning_rate);
            r.read("momentum", c.optimizer.momentum);
            r.read("weight_decay", c.optimizer.weight_decay);
            r.finish();
        }
        if (auto* p = top.child("pretrain")) {
            ObjectReader r(*p, "pretrain");
            r.read("iterations", c.pretrain.iterations);
            r.read("labeled_batch", c.pretrain.labeled_batch);
            r.read("unlabeled_batch", c.pretrain.unlabeled_batch);
            r.read("mined_views", c.pretrain.mined_views);
            r.read("schedule_teacher", c.pretrain.schedule_teacher);
            if (auto* s = r.child("tau_s")) detail::read_schedule(*s, "pretrain.tau_s", c.pretrain.tau_s);
            r.finish();
        }
        if (auto* fj = top.child("finetune")) {
            auto& f = c.finetune;
            ObjectReader r(*fj, "finetune");
            r.read("iterations", f.iterations);
            r.read("labeled_batch", f.labeled_batch);
            r.read("unlabeled_batch", f.unlabeled_batch);
            r.read("learning_rate", f.learning_rate);
            if (auto* s = r.child("tau_an")) detail::read_schedule(*s, "finetune.tau_an", f.tau_an);
            if (auto* s = r.child("tau_sa")) detail::read_schedule(*s, "finetune.tau_sa", f.tau_sa);
            r.read("lambda_a", f.lambda_a);
            r.read("w_aaco", f.w_aaco);
            r.read("eta", f.eta);
            r.read("positives_per_anchor", f.positives_per_anchor);
            r.read("queries_per_class", f.queries_per_class);
            r.read("anco_pixels_per_class", f.anco_pixels_per_class);
            r.read("aaco_pixels_per_class", f.aaco_pixels_per_class);
            r.read("confidence_threshold", f.confidence_threshold);
            r.read("centers_path", f.centers_path);
            if (auto* u = r.child("uniformity")) {
                ObjectReader ur(*u, "finetune.uniformity");
                ur.read("tau", f.uniformity.tau);
                ur.read("learning_rate", f.uniformity.learning_rate);
                ur.read("max_iters", f.uniformity.max_iters);
                ur.read("grad_tol", f.uniformity.grad_tol);
                ur.read("seed", f.uniformity.seed);
                ur.finish();
            }
            r.finish();
        }
        if (auto* e = top.child("eval")) {
            ObjectReader r(*e, "eval");
            r.read("interval", c.eval.interval);
            r.read("alignment_images", c.eval.alignment_images);
            r.read("alignment_pairs", c.eval.alignment_pairs);
            r.read("alignment_pixels", c.eval.alignment_pixels);
            r.read("nn_pixels_per_class", c.eval.nn_pixels_per_class);
            r.finish();
        }
        top.finish();
        c.validate();
        return c;
    }

    inline TrainConfig load_config(const std::filesystem::path& path) {
        const std::string text = read_file(path);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(text);
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(path.string() + ": " + e.what());
        }
        return config_from_json(j);
    }

} // namespace actionpp
