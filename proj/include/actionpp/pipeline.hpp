#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "centers.hpp"
#include "checkpoint.hpp"
#include "config.hpp"
#include "data.hpp"
#include "evaluation.hpp"
#include "losses.hpp"
#include "model.hpp"
#include "schedule.hpp"

namespace actionpp {

    // ---------------------------------------------------------------------
    // Dataset
    // ---------------------------------------------------------------------

    struct Dataset {
        int num_classes = 0;
        std::size_t image_size = 0;
        std::vector<SegmentationSample> samples;  // train (0..train_count-1) then validation
        DatasetSplit split;

        std::vector<SegmentationSample> gather(const std::vector<std::size_t>& ids) const {
            std::vector<SegmentationSample> out;
            out.reserve(ids.size());
            for (auto i : ids) out.push_back(samples.at(i));
            return out;
        }
    };

    inline Dataset generate_training_data(const DataConfig& cfg) {
        Dataset ds;
        ds.num_classes = cfg.num_classes;
        ds.image_size = static_cast<std::size_t>(cfg.image_size);
        ds.samples = generate_dataset(cfg.scene(), static_cast<std::size_t>(cfg.train_count + cfg.validation_count));
        ds.split = make_split(static_cast<std::size_t>(cfg.train_count), static_cast<std::size_t>(cfg.validation_count),
                              cfg.label_ratio, cfg.seed);
        return ds;
    }

    // images.acpp ("images": count x 1 x H x W), labels.acpp ("labels":
    // count x H x W) and manifest.json.
    inline void save_dataset(const std::filesystem::path& dir, const Dataset& ds, const DataConfig& cfg) {
        const std::size_t n = ds.image_size, count = ds.samples.size();
        Tensor images({count, 1, n, n}), labels({count, n, n});
        for (std::size_t i = 0; i < count; ++i) {
            const auto& s = ds.samples[i];
            std::copy(s.image.flat().begin(), s.image.flat().end(), images.data() + i * n * n);
            for (std::size_t p = 0; p < n * n; ++p) labels[i * n * n + p] = s.labels[p];
        }
        Checkpoint ic, lc;
        ic.tensors.emplace("images", std::move(images));
        lc.tensors.emplace("labels", std::move(labels));
        nlohmann::json meta = {{"kind", "dataset"}, {"count", count}};
        ic.meta = lc.meta = meta;
        save_checkpoint(dir / "images.acpp", ic);
        save_checkpoint(dir / "labels.acpp", lc);

        nlohmann::json manifest;
        DataConfig snapshot = cfg;
        snapshot.path.clear();
        TrainConfig wrapper;
        wrapper.data = snapshot;
        manifest["config"] = to_json(wrapper)["data"];
        manifest["split"] = {{"labeled", ds.split.labeled},
                             {"unlabeled", ds.split.unlabeled},
                             {"validation", ds.split.validation}};
        std::vector<std::size_t> train_ids(ds.split.labeled);
        train_ids.insert(train_ids.end(), ds.split.unlabeled.begin(), ds.split.unlabeled.end());
        manifest["measured_class_frequencies"] = class_frequencies(ds.gather(train_ids), ds.num_classes);
        manifest["target_class_frequencies"] = cfg.scene().resolved_profile();
        write_file(dir / "manifest.json", manifest.dump(2) + "\n");
    }

    inline Dataset load_dataset(const std::filesystem::path& dir) {
        Dataset ds;
        try {
            const auto manifest = nlohmann::json::parse(read_file(dir / "manifest.json"));
            ds.num_classes = manifest.at("config").at("num_classes").get<int>();
            ds.split.labeled = manifest.at("split").at("labeled").get<std::vector<std::size_t>>();
            ds.split.unlabeled = manifest.at("split").at("unlabeled").get<std::vector<std::size_t>>();
            ds.split.validation = manifest.at("split").at("validation").get<std::vector<std::size_t>>();
        } catch (const nlohmann::json::exception& e) {
            throw DataError(std::string("bad dataset manifest: ") + e.what());
        }
        const Tensor images = load_checkpoint(dir / "images.acpp").tensor("images");
        const Tensor labels = load_checkpoint(dir / "labels.acpp").tensor("labels");
        if (images.rank() != 4 || labels.rank() != 3 || images.dim(0) != labels.dim(0) || images.dim(2) != labels.dim(1)) {
            throw DataError("image and label tensors disagree");
        }
        const std::size_t count = images.dim(0), n = images.dim(2);
        ds.image_size = n;
        for (std::size_t i = 0; i < count; ++i) {
            SegmentationSample s;
            s.id = i;
            s.image = Tensor({1, n, n}, std::vector<double>(images.data() + i * n * n, images.data() + (i + 1) * n * n));
            s.labels.resize(n * n);
            for (std::size_t p = 0; p < n * n; ++p) {
                const double v = labels[i * n * n + p];
                if (v < 1 || v > ds.num_classes || v != std::floor(v)) throw DataError("label value out of range");
                s.labels[p] = static_cast<int>(v);
            }
            ds.samples.push_back(std::move(s));
        }
        for (const auto* part : {&ds.split.labeled, &ds.split.unlabeled, &ds.split.validation})
            for (auto i : *part)
                if (i >= count) throw DataError("split index " + std::to_string(i) + " out of range");
        return ds;
    }

    inline Dataset dataset_for(const TrainConfig& cfg) {
        Dataset ds = cfg.data.path.empty() ? generate_training_data(cfg.data) : load_dataset(cfg.data.path);
        if (ds.num_classes != cfg.data.num_classes || ds.image_size != static_cast<std::size_t>(cfg.data.image_size)) {
            throw DataError("dataset does not match data.num_classes / data.image_size");
        }
        if (ds.split.labeled.empty() || ds.split.unlabeled.empty() || ds.split.validation.empty()) {
            throw DataError("dataset split has an empty part");
        }
        return ds;
    }

    // ---------------------------------------------------------------------
    // Pixel tables
    // ---------------------------------------------------------------------

    namespace detail {

        inline Tensor stack(const std::vector<Tensor>& maps) {
            Shape shape{maps.size()};
            for (auto e : maps.front().shape()) shape.push_back(e);
            Tensor out(shape);
            const std::size_t stride = maps.front().numel();
            for (std::size_t b = 0; b < maps.size(); ++b) std::copy(maps[b].flat().begin(), maps[b].flat().end(), out.data() + b * stride);
            return out;
        }

        inline Tensor slice(const Tensor& batch, std::size_t b) {
            Shape shape(batch.shape().begin() + 1, batch.shape().end());
            const std::size_t stride = shape_numel(shape);
            return Tensor(shape, std::vector<double>(batch.data() + b * stride, batch.data() + (b + 1) * stride));
        }

        // rows[i] = reps[:, pixels[i]] for a d x H x W map.
        inline void gather_pixels(const Tensor& reps, std::span<const std::size_t> pixels, Tensor& rows, std::size_t first_row) {
            const std::size_t d = reps.dim(0), hw = reps.dim(1) * reps.dim(2);
            for (std::size_t i = 0; i < pixels.size(); ++i) {
                auto r = rows.row(first_row + i);
                for (std::size_t k = 0; k < d; ++k) r[k] = reps[k * hw + pixels[i]];
            }
        }

        inline void scatter_pixels(const Tensor& rows, std::size_t first_row, std::span<const std::size_t> pixels, double scale,
                                   Tensor& dreps) {
            const std::size_t d = dreps.dim(0), hw = dreps.dim(1) * dreps.dim(2);
            for (std::size_t i = 0; i < pixels.size(); ++i) {
                auto r = rows.row(first_row + i);
                for (std::size_t k = 0; k < d; ++k) dreps[k * hw + pixels[i]] += scale * r[k];
            }
        }

        inline Tensor pixel_table(const Tensor& reps) {
            const std::size_t d = reps.dim(0), hw = reps.dim(1) * reps.dim(2);
            Tensor rows({hw, d});
            for (std::size_t k = 0; k < d; ++k)
                for (std::size_t p = 0; p < hw; ++p) rows[p * d + k] = reps[k * hw + p];
            return rows;
        }

        inline std::vector<int> argmax_labels(const Tensor& logits) {
            const std::size_t k = logits.dim(0), hw = logits.dim(1) * logits.dim(2);
            std::vector<int> out(hw, 1);
            for (std::size_t p = 0; p < hw; ++p) {
                double best = logits[p];
                for (std::size_t c = 1; c < k; ++c)
                    if (logits[c * hw + p] > best) {
                        best = logits[c * hw + p];
                        out[p] = static_cast<int>(c) + 1;
                    }
            }
            return out;
        }

        // Up to `cap` pixels of each class (uniform, without replacement), in
        // ascending class order, pixels sorted within a class.
        inline std::vector<std::pair<int, std::vector<std::size_t>>> stratified_pixels(std::span<const int> labels,
                                                                                       std::span<const std::uint8_t> keep,
                                                                                       int num_classes, std::size_t cap,
                                                                                       Rng& rng) {
            std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(num_classes));
            for (std::size_t p = 0; p < labels.size(); ++p)
                if (keep.empty() || keep[p]) by_class[static_cast<std::size_t>(labels[p] - 1)].push_back(p);
            std::vector<std::pair<int, std::vector<std::size_t>>> out;
            for (int c = 1; c <= num_classes; ++c) {
                auto& pix = by_class[static_cast<std::size_t>(c - 1)];
                if (pix.empty()) continue;
                std::vector<std::size_t> chosen;
                if (pix.size() <= cap) {
                    chosen = pix;
                } else {
                    for (auto i : rng.sample_without_replacement(pix.size(), cap)) chosen.push_back(pix[i]);
                    std::sort(chosen.begin(), chosen.end());
                }
                out.emplace_back(c, std::move(chosen));
            }
            return out;
        }

    } // namespace detail

    // ---------------------------------------------------------------------
    // Validation
    // ---------------------------------------------------------------------

    struct ValidationMetrics {
        MetricsReport report;
        Tensor class_means;             // K x d, validation features
        std::optional<Assignment> assignment;
    };

    struct ValidationOptions {
        bool surface_distance = false;  // ASD is the slow part; off for periodic logging
        bool alignment = true;
        const ClassCenters* centers = nullptr;
        const Assignment* assignment = nullptr;  // null -> allocate from validation means
    };

    inline ValidationMetrics validate_network(const SegmentationNetwork& net, const Dataset& ds, const TrainConfig& cfg,
                                              const ValidationOptions& options) {
        const int k = ds.num_classes;
        const std::size_t n = ds.image_size, hw = n * n;
        const auto d = static_cast<std::size_t>(cfg.network.latent_dim);
        ValidationMetrics out;
        std::vector<std::vector<int>> preds, gts;
        std::vector<double> sums(static_cast<std::size_t>(k) * d, 0.0);
        std::vector<std::size_t> counts(static_cast<std::size_t>(k), 0);
        std::vector<std::vector<double>> nn_rows;
        std::vector<int> nn_labels;
        ForwardOptions fo{true, false, false};
        for (auto idx : ds.split.validation) {
            const auto& s = ds.samples[idx];
            const auto o = net.forward(s.image, fo);
            preds.push_back(detail::argmax_labels(o.logits));
            gts.push_back(s.labels);
            for (std::size_t p = 0; p < hw; ++p) {
                const auto c = static_cast<std::size_t>(s.labels[p] - 1);
                for (std::size_t j = 0; j < d; ++j) sums[c * d + j] += o.dense_reps[j * hw + p];
                ++counts[c];
            }
            if (options.centers) {
                Rng rng = Rng::derive(cfg.seed, {0x6e6e6576ULL, s.id});
                for (auto& [c, pix] : detail::stratified_pixels(s.labels, {}, k,
                                                                static_cast<std::size_t>(cfg.eval.nn_pixels_per_class), rng)) {
                    for (auto p : pix) {
                        std::vector<double> row(d);
                        for (std::size_t j = 0; j < d; ++j) row[j] = o.dense_reps[j * hw + p];
                        nn_rows.push_back(std::move(row));
                        nn_labels.push_back(c);
                    }
                }
            }
        }
        if (options.surface_distance) {
            out.report = segmentation_report(preds, gts, n, k);
        } else {
            // DSC only: same pooled counts, ASD left undefined.
            std::vector<double> inter(static_cast<std::size_t>(k), 0.0), sizes(static_cast<std::size_t>(k), 0.0);
            for (std::size_t i = 0; i < preds.size(); ++i)
                for (std::size_t p = 0; p < hw; ++p) {
                    sizes[static_cast<std::size_t>(preds[i][p] - 1)] += 1.0;
                    sizes[static_cast<std::size_t>(gts[i][p] - 1)] += 1.0;
                    if (preds[i][p] == gts[i][p]) inter[static_cast<std::size_t>(preds[i][p] - 1)] += 1.0;
                }
            for (int c = 0; c < k; ++c) {
                const auto ci = static_cast<std::size_t>(c);
                out.report.dsc.push_back(sizes[ci] == 0.0 ? 1.0 : 2.0 * inter[ci] / sizes[ci]);
                out.report.asd.push_back(std::nan(""));
                out.report.asd_missing.push_back(0);
                if (c > 0) out.report.mean_dsc += out.report.dsc.back();
            }
            out.report.mean_dsc /= static_cast<double>(k - 1);
            out.report.mean_asd = std::nan("");
        }

        out.class_means = Tensor({static_cast<std::size_t>(k), d});
        bool all_present = true;
        for (std::size_t c = 0; c < static_cast<std::size_t>(k); ++c) {
            if (counts[c] == 0) {
                all_present = false;
                continue;
            }
            auto row = out.class_means.row(c);
            std::copy(sums.begin() + static_cast<long>(c * d), sums.begin() + static_cast<long>((c + 1) * d), row.begin());
            normalize_in_place(row);
        }
        if (all_present) out.report.divergence = divergence_metric(out.class_means);

        if (options.centers && all_present) {
            Assignment pi;
            if (options.assignment) {
                pi = *options.assignment;
            } else {
                EmpiricalMeans m(k, static_cast<int>(d), 1.0);
                m.means = out.class_means;
                std::fill(m.initialized.begin(), m.initialized.end(), 1);
                pi = allocate_centers(*options.centers, m);
            }
            Tensor f({nn_rows.size(), d});
            for (std::size_t i = 0; i < nn_rows.size(); ++i) std::copy(nn_rows[i].begin(), nn_rows[i].end(), f.row(i).begin());
            Tensor ordered({static_cast<std::size_t>(k), d});
            std::copy(options.centers->centers.flat().begin(), options.centers->centers.flat().end(), ordered.data());
            const auto e = nn_classifier_error(f, nn_labels, ordered, pi);
            out.report.nn_error = e.equal_class;
            out.report.nn_error_pixel = e.pixel_weighted;
            out.assignment = pi;
        }

        if (options.alignment && cfg.eval.alignment_images > 0) {
            std::vector<SegmentationSample> subset;
            for (std::size_t i = 0; i < ds.split.validation.size() && subset.size() < static_cast<std::size_t>(cfg.eval.alignment_images); ++i) {
                subset.push_back(ds.samples[ds.split.validation[i]]);
            }
            AlignmentOptions ao;
            ao.pairs_per_image = cfg.eval.alignment_pairs;
            ao.pixels_per_class = static_cast<std::size_t>(cfg.eval.alignment_pixels);
            ao.sigma_aug = cfg.data.sigma_aug;
            ao.seed = cfg.seed;
            try {
                out.report.alignment = alignment_metric(
                    [&](const Tensor& image) { return net.forward(image, fo).dense_reps; }, subset, k, ao);
            } catch (const MissingClass&) {
            }
        }
        return out;
    }

    // ---------------------------------------------------------------------
    // Run log
    // ---------------------------------------------------------------------

    struct IterationRecord {
        std::int64_t iteration = 0;  // iteration index t that was just run (0-based)
        std::string stage;
        double total = 0.0;
        // Weighted contributions; they add up to total.
        double inst_global = NAN, inst_local = NAN, anco = NAN, unsup = NAN, sup = NAN, aaco = NAN;
        double tau_s = NAN, tau_t = NAN, tau_an = NAN, tau_sa = NAN;
        int aaco_active = -1;
        std::optional<std::uint64_t> perm_hash;
        double val_mean_dsc = NAN, val_dsc_tail = NAN, val_alignment = NAN, val_divergence = NAN, val_nn_error = NAN;

        double component_sum() const {
            double s = 0.0;
            for (double v : {inst_global, inst_local, anco, unsup, sup, aaco})
                if (!std::isnan(v)) s += v;
            return s;
        }

        static std::string csv_header() {
            return "iteration,stage,total,inst_global,inst_local,anco,unsup,sup,aaco,tau_s,tau_t,tau_an,tau_sa,"
                   "aaco_active,perm_hash,val_mean_dsc,val_dsc_tail,val_alignment_A,val_divergence_D,val_nn_error";
        }

        std::string csv_row() const {
            auto num = [](double v) {
                if (std::isnan(v)) return std::string();
                char buf[40];
                std::snprintf(buf, sizeof buf, "%.17g", v);
                return std::string(buf);
            };
            std::string r = std::to_string(iteration) + "," + stage + "," + num(total);
            for (double v : {inst_global, inst_local, anco, unsup, sup, aaco, tau_s, tau_t, tau_an, tau_sa}) r += "," + num(v);
            r += "," + (aaco_active < 0 ? std::string() : std::to_string(aaco_active));
            if (perm_hash) {
                char buf[20];
                std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(*perm_hash));
                r += "," + std::string(buf);
            } else {
                r += ",";
            }
            for (double v : {val_mean_dsc, val_dsc_tail, val_alignment, val_divergence, val_nn_error}) r += "," + num(v);
            return r;
        }
    };

    struct RunOptions {
        std::filesystem::path out_dir;   // empty -> nothing written
        std::int64_t stop_at = -1;       // stop after this many total iterations (split runs)
        bool verbose = false;
    };

    struct RunResult {
        Checkpoint checkpoint;
        std::vector<IterationRecord> log;
    };

    // ---------------------------------------------------------------------
    // Training state <-> checkpoint
    // ---------------------------------------------------------------------

    struct TrainingState {
        std::string stage;
        std::int64_t iteration = 0;  // iterations completed
        StudentTeacher nets;
        SgdOptimizer optimizer;
        Rng rng;
        ClassCenters centers;
        EmpiricalMeans means;
    };

    inline Checkpoint to_checkpoint(const TrainingState& st, const TrainConfig& cfg) {
        Checkpoint ck;
        for (const auto& [name, t] : st.nets.student.params()) ck.tensors.emplace("student/" + name, t);
        for (const auto& [name, t] : st.nets.teacher.params()) ck.tensors.emplace("teacher/" + name, t);
        const ParamStore velocity = st.optimizer.velocity().empty() ? zeros_like(st.nets.student.params()) : st.optimizer.velocity();
        for (const auto& [name, t] : velocity) ck.tensors.emplace("velocity/" + name, t);
        if (st.centers.num_classes > 0) {
            ck.tensors.emplace("centers", st.centers.centers);
            ck.tensors.emplace("means", st.means.means);
            std::vector<double> flags(st.means.initialized.begin(), st.means.initialized.end());
            ck.tensors.emplace("means_initialized", Tensor::vector(flags));
        }
        ck.meta["kind"] = "training_state";
        ck.meta["stage"] = st.stage;
        ck.meta["iteration"] = st.iteration;
        ck.meta["rng_state"] = st.rng.state();
        ck.meta["config"] = to_json(cfg);
        if (st.centers.num_classes > 0) {
            ck.meta["centers"] = {{"K", st.centers.num_classes},
                                  {"d", st.centers.dim},
                                  {"tau", st.centers.tau},
                                  {"final_loss", st.centers.final_loss},
                                  {"final_grad_norm", st.centers.final_grad_norm},
                                  {"iterations", st.centers.iterations}};
            ck.meta["eta"] = st.means.eta;
        }
        return ck;
    }

    namespace detail {

        inline ParamStore params_with_prefix(const Checkpoint& ck, const std::string& prefix, const ParamStore& layout) {
            ParamStore out;
            for (const auto& [name, t] : layout) {
                const Tensor& v = ck.tensor(prefix + name);
                if (v.shape() != t.shape()) throw ShapeMismatch("checkpoint tensor " + prefix + name + " has the wrong shape");
                out.emplace(name, v);
            }
            return out;
        }

        inline ClassCenters centers_from_checkpoint(const Checkpoint& ck) {
            ClassCenters c;
            c.centers = ck.tensor("centers");
            if (c.centers.rank() != 2) throw CorruptFile("centers tensor must be K x d");
            c.num_classes = static_cast<int>(c.centers.dim(0));
            c.dim = static_cast<int>(c.centers.dim(1));
            if (ck.meta.contains("centers")) {
                const auto& m = ck.meta["centers"];
                c.tau = m.value("tau", 1.0);
                c.final_loss = m.value("final_loss", 0.0);
                c.final_grad_norm = m.value("final_grad_norm", 0.0);
                c.iterations = m.value("iterations", 0);
            }
            return c;
        }

    } // namespace detail

    inline TrainingState state_from_checkpoint(const Checkpoint& ck, const TrainConfig& cfg) {
        if (ck.meta.value("kind", "") != "training_state") throw DataError("not a training checkpoint");
        if (ck.meta.at("config") != to_json(cfg)) throw ConfigError("config differs from the checkpoint's snapshot");
        TrainingState st;
        st.stage = ck.meta.at("stage").get<std::string>();
        st.iteration = ck.meta.at("iteration").get<std::int64_t>();
        st.rng.set_state(ck.meta.at("rng_state").get<std::uint64_t>());
        st.nets = StudentTeacher::from_config(cfg.network_config(), cfg.ema_decay);
        st.nets.student.params() = detail::params_with_prefix(ck, "student/", st.nets.student.params());
        st.nets.teacher.params() = detail::params_with_prefix(ck, "teacher/", st.nets.teacher.params());
        st.optimizer = SgdOptimizer(st.stage == "finetune" ? cfg.finetune_optimizer() : cfg.optimizer);
        st.optimizer.velocity() = detail::params_with_prefix(ck, "velocity/", st.nets.student.params());
        if (ck.tensors.count("centers")) {
            st.centers = detail::centers_from_checkpoint(ck);
            st.means = EmpiricalMeans(st.centers.num_classes, st.centers.dim, ck.meta.at("eta").get<double>());
            st.means.means = ck.tensor("means");
            const Tensor& flags = ck.tensor("means_initialized");
            for (std::size_t i = 0; i < st.means.initialized.size(); ++i) st.means.initialized[i] = flags[i] != 0.0;
        }
        return st;
    }

    // Centers file written by the `centers` subcommand.
    inline Checkpoint centers_checkpoint(const ClassCenters& c) {
        Checkpoint ck;
        ck.tensors.emplace("centers", c.centers);
        ck.meta["kind"] = "class_centers";
        ck.meta["centers"] = {{"K", c.num_classes},          {"d", c.dim},
                              {"tau", c.tau},                {"final_loss", c.final_loss},
                              {"final_grad_norm", c.final_grad_norm}, {"iterations", c.iterations}};
        return ck;
    }

    inline ClassCenters load_centers(const std::filesystem::path& path) {
        return detail::centers_from_checkpoint(load_checkpoint(path));
    }

    // ---------------------------------------------------------------------
    // Stages
    // ---------------------------------------------------------------------

    namespace detail {

        inline void check_finite(double v, std::int64_t t, const char* what) {
            if (!std::isfinite(v)) throw NonFiniteLoss(t, what);
        }

        inline void add_into(ParamStore& acc, const ParamStore& g) {
            for (auto& [name, t] : acc) t += g.at(name);
        }

        struct LogSink {
            std::ofstream csv;

            LogSink(const RunOptions& opt, bool resume) {
                if (opt.out_dir.empty()) return;
                std::filesystem::create_directories(opt.out_dir);
                const auto path = opt.out_dir / "metrics.csv";
                const bool fresh = !resume || !std::filesystem::exists(path);
                csv.open(path, fresh ? std::ios::trunc : std::ios::app);
                if (!csv) throw IoError("cannot open " + path.string());
                if (fresh) csv << IterationRecord::csv_header() << "\n";
            }

            void write(const IterationRecord& r) {
                if (csv.is_open()) csv << r.csv_row() << "\n";
            }
        };

        inline void finish_run(const RunOptions& opt, const Checkpoint& ck, const std::string& stage) {
            if (!opt.out_dir.empty()) save_checkpoint(opt.out_dir / (stage + ".acpp"), ck);
        }

        inline void fill_validation(IterationRecord& rec, const ValidationMetrics& vm) {
            rec.val_mean_dsc = vm.report.mean_dsc;
            rec.val_dsc_tail = vm.report.dsc.back();
            rec.val_alignment = vm.report.alignment.value_or(NAN);
            rec.val_divergence = vm.report.divergence.value_or(NAN);
            rec.val_nn_error = vm.report.nn_error.value_or(NAN);
        }

        inline bool eval_due(const TrainConfig& cfg, std::int64_t done, std::int64_t total) {
            if (cfg.eval.interval <= 0) return false;
            return done % cfg.eval.interval == 0 || done == total;
        }

    } // namespace detail

    inline TrainingState initial_pretrain_state(const TrainConfig& cfg) {
        TrainingState st;
        st.stage = "pretrain";
        st.nets = StudentTeacher::from_config(cfg.network_config(), cfg.ema_decay);
        st.optimizer = SgdOptimizer(cfg.optimizer);
        st.rng = Rng::derive(cfg.seed, {0x70726574ULL});
        return st;
    }

    // One pretraining iteration; returns the log record.
    inline IterationRecord pretrain_step(TrainingState& st, const TrainConfig& cfg, const Dataset& ds,
                                         const std::vector<SegmentationSample>& unlabeled_pool) {
        const std::int64_t t = st.iteration;
        const auto& pc = cfg.pretrain;
        const auto sched = pc.tau_s.schedule(std::max(1, pc.iterations), cfg.seed);
        const double tau_s = sched.at(t);
        const double tau_t = pc.schedule_teacher ? tau_s : pc.tau_s.tau_plus;
        const auto& student = st.nets.student;
        const auto& teacher = st.nets.teacher;
        ParamStore grads = zeros_like(student.params());

        // Supervised part on labeled images.
        std::vector<SegmentationSample> lab;
        std::vector<int> lab_labels;
        for (auto i : st.rng.sample_without_replacement(ds.split.labeled.size(), static_cast<std::size_t>(pc.labeled_batch))) {
            lab.push_back(augment(ds.samples[ds.split.labeled[i]], cfg.data.sigma_aug, st.rng).sample);
            lab_labels.insert(lab_labels.end(), lab.back().labels.begin(), lab.back().labels.end());
        }
        std::vector<ForwardCache> lab_cache(lab.size());
        std::vector<Tensor> lab_logits;
        for (std::size_t b = 0; b < lab.size(); ++b)
            lab_logits.push_back(student.forward(lab[b].image, {false, false, false}, &lab_cache[b]).logits);
        const LossValue sup = dice_ce_loss(detail::stack(lab_logits), lab_labels);
        const Tensor& dsup = sup.grad("logits");
        for (std::size_t b = 0; b < lab.size(); ++b) {
            HeadGrads hg;
            hg.logits = detail::slice(dsup, b);
            student.backward(lab_cache[b], hg, grads);
        }

        // Instance discrimination on augmented / mined views.
        std::vector<std::size_t> batch;
        for (auto i : st.rng.sample_without_replacement(unlabeled_pool.size(), static_cast<std::size_t>(pc.unlabeled_batch))) {
            batch.push_back(i);
        }
        const ViewBatch vb = make_view_batch(unlabeled_pool, batch, static_cast<std::size_t>(pc.mined_views), cfg.data.sigma_aug, st.rng);
        const auto d = static_cast<std::size_t>(cfg.network.latent_dim);
        const auto grid = static_cast<std::size_t>(cfg.network.local_grid);
        const std::size_t sites = grid * grid, nm = vb.x3.size();
        std::vector<HeadOutputs> mined;
        for (const auto& m : vb.x3) mined.push_back(teacher.forward(m.sample.image, {false, true, false}));

        double l_global = 0.0, l_local = 0.0;
        const double bscale = 1.0 / static_cast<double>(vb.x1.size());
        for (std::size_t b = 0; b < vb.x1.size(); ++b) {
            ForwardCache cache;
            const auto s_out = student.forward(vb.x1[b].sample.image, {false, true, true}, &cache);
            const auto t_out = teacher.forward(vb.x2[b].sample.image, {false, true, true});
            HeadGrads hg;

            Tensor v3({nm, d});
            for (std::size_t j = 0; j < nm; ++j) std::copy(mined[j].v_global.begin(), mined[j].v_global.end(), v3.row(j).begin());
            const auto lt = relational_distribution(t_out.w_global, v3, tau_t).log_probs;
            const auto lg = relational_instance_loss(s_out.w_global, v3, lt, tau_s);
            l_global += bscale * lg.value;
            hg.w_global = lg.grad("query").storage();
            for (double& g : hg.w_global) g *= bscale;

            // Local sites are matched in the source frame of each view.
            hg.w_local = Tensor(s_out.w_local.shape());
            const double lscale = bscale / static_cast<double>(sites);
            for (std::size_t s = 0; s < sites; ++s) {
                const auto site_in = [&](int e) {
                    auto [r, c] = dihedral_map(e, grid, s / grid, s % grid);
                    return r * grid + c;
                };
                Tensor v3l({nm, d});
                for (std::size_t j = 0; j < nm; ++j) {
                    auto src = mined[j].v_local.row(site_in(vb.x3[j].element));
                    std::copy(src.begin(), src.end(), v3l.row(j).begin());
                }
                const auto ltl = relational_distribution(t_out.w_local.row(site_in(vb.x2[b].element)), v3l, tau_t).log_probs;
                const std::size_t s1 = site_in(vb.x1[b].element);
                const auto ll = relational_instance_loss(s_out.w_local.row(s1), v3l, ltl, tau_s);
                l_local += lscale * ll.value;
                auto dst = hg.w_local.row(s1);
                const auto& gq = ll.grad("query");
                for (std::size_t k = 0; k < d; ++k) dst[k] += lscale * gq[k];
            }
            student.backward(cache, hg, grads);
        }

        IterationRecord rec;
        rec.iteration = t;
        rec.stage = "pretrain";
        rec.inst_global = l_global;
        rec.inst_local = l_local;
        rec.sup = sup.value;
        rec.total = l_global + l_local + sup.value;
        rec.tau_s = tau_s;
        rec.tau_t = tau_t;
        detail::check_finite(l_global, t, "inst_global");
        detail::check_finite(l_local, t, "inst_local");
        detail::check_finite(sup.value, t, "sup");

        st.optimizer.step(st.nets.student.params(), grads);
        ema_update(st.nets);
        ++st.iteration;
        return rec;
    }

    inline RunResult run_pretrain(const TrainConfig& cfg, const RunOptions& opt = {},
                                  const std::optional<Checkpoint>& resume = std::nullopt) {
        cfg.validate();
        const Dataset ds = dataset_for(cfg);
        const auto pool = ds.gather(ds.split.unlabeled);
        TrainingState st = resume ? state_from_checkpoint(*resume, cfg) : initial_pretrain_state(cfg);
        if (st.stage != "pretrain") throw ConfigError("resume checkpoint is not a pretraining state");
        detail::LogSink sink(opt, resume.has_value());
        RunResult result;
        const std::int64_t total = cfg.pretrain.iterations;
        const std::int64_t stop = opt.stop_at >= 0 ? std::min(opt.stop_at, total) : total;
        while (st.iteration < stop) {
            IterationRecord rec = pretrain_step(st, cfg, ds, pool);
            if (detail::eval_due(cfg, st.iteration, total)) {
                ValidationOptions vo;
                detail::fill_validation(rec, validate_network(st.nets.student, ds, cfg, vo));
            }
            if (opt.verbose && (rec.iteration % 50 == 0 || st.iteration == total)) {
                std::cerr << "pretrain " << rec.iteration << " total=" << rec.total << " sup=" << rec.sup << "\n";
            }
            sink.write(rec);
            result.log.push_back(std::move(rec));
        }
        result.checkpoint = to_checkpoint(st, cfg);
        detail::finish_run(opt, result.checkpoint, "pretrain");
        return result;
    }

    inline ClassCenters centers_for(const TrainConfig& cfg) {
        if (!cfg.finetune.centers_path.empty()) {
            ClassCenters c = load_centers(cfg.finetune.centers_path);
            if (c.num_classes != cfg.data.num_classes || c.dim != cfg.network.latent_dim) {
                throw ConfigError("centers file does not match K / latent_dim");
            }
            return c;
        }
        return precompute_centers(cfg.data.num_classes, cfg.network.latent_dim, cfg.finetune.uniformity);
    }

    inline TrainingState initial_finetune_state(const TrainConfig& cfg, const Checkpoint& pretrained, const ClassCenters& centers) {
        if (centers.num_classes != cfg.data.num_classes || centers.dim != cfg.network.latent_dim) {
            throw ConfigError("centers K/d do not match the config");
        }
        TrainingState st;
        st.stage = "finetune";
        st.nets = StudentTeacher::from_config(cfg.network_config(), cfg.ema_decay);
        st.nets.student.params() = detail::params_with_prefix(pretrained, "student/", st.nets.student.params());
        st.nets.teacher.params() = detail::params_with_prefix(pretrained, "teacher/", st.nets.teacher.params());
        st.optimizer = SgdOptimizer(cfg.finetune_optimizer());
        st.rng = Rng::derive(cfg.seed, {0x66696e65ULL});
        st.centers = centers;
        st.means = EmpiricalMeans(cfg.data.num_classes, cfg.network.latent_dim, cfg.finetune.eta);
        return st;
    }

    struct FinetuneStep {
        IterationRecord record;
        std::optional<Assignment> assignment;
    };

    inline FinetuneStep finetune_step(TrainingState& st, const TrainConfig& cfg, const Dataset& ds) {
        const std::int64_t t = st.iteration;
        const auto& fc = cfg.finetune;
        const int k = cfg.data.num_classes;
        const auto horizon = std::max(1, fc.iterations);
        const double tau_an = fc.tau_an.schedule(horizon, cfg.seed).at(t);
        const double tau_sa = fc.tau_sa.schedule(horizon, cfg.seed).at(t);
        const auto& student = st.nets.student;
        const auto& teacher = st.nets.teacher;
        const auto d = static_cast<std::size_t>(cfg.network.latent_dim);
        const std::size_t hw = ds.image_size * ds.image_size;
        ParamStore grads = zeros_like(student.params());
        FinetuneStep out;
        IterationRecord& rec = out.record;
        rec.iteration = t;
        rec.stage = "finetune";
        rec.tau_an = tau_an;
        rec.tau_sa = tau_sa;

        // Labeled images: supervision, class means, allocation, AACO.
        std::vector<SegmentationSample> lab;
        std::vector<int> lab_labels;
        for (auto i : st.rng.sample_without_replacement(ds.split.labeled.size(), static_cast<std::size_t>(fc.labeled_batch))) {
            lab.push_back(augment(ds.samples[ds.split.labeled[i]], cfg.data.sigma_aug, st.rng).sample);
            lab_labels.insert(lab_labels.end(), lab.back().labels.begin(), lab.back().labels.end());
        }
        std::vector<ForwardCache> lab_cache(lab.size());
        std::vector<HeadOutputs> lab_out;
        for (std::size_t b = 0; b < lab.size(); ++b) lab_out.push_back(student.forward(lab[b].image, {true, false, false}, &lab_cache[b]));
        std::vector<Tensor> logits;
        for (const auto& o : lab_out) logits.push_back(o.logits);
        const LossValue sup = dice_ce_loss(detail::stack(logits), lab_labels);
        std::vector<HeadGrads> lab_grads(lab.size());
        for (std::size_t b = 0; b < lab.size(); ++b) {
            lab_grads[b].logits = detail::slice(sup.grad("logits"), b);
            lab_grads[b].dense_reps = Tensor(lab_out[b].dense_reps.shape());
        }

        Tensor all_rows({lab.size() * hw, d});
        for (std::size_t b = 0; b < lab.size(); ++b) {
            const Tensor rows = detail::pixel_table(lab_out[b].dense_reps);
            std::copy(rows.flat().begin(), rows.flat().end(), all_rows.data() + b * hw * d);
        }
        st.means = update_empirical_means(std::move(st.means), all_rows, lab_labels);

        double aaco_value = 0.0;
        rec.aaco_active = 0;
        if (st.means.all_initialized()) {
            out.assignment = allocate_centers(st.centers, st.means);
            rec.perm_hash = out.assignment->hash();
            if (fc.w_aaco > 0.0) {
                AacoBatch ab;
                std::vector<std::pair<std::size_t, std::vector<std::size_t>>> picks;  // (image, pixels)
                std::vector<int> labels;
                std::vector<std::uint64_t> ids;
                for (std::size_t b = 0; b < lab.size(); ++b) {
                    std::vector<std::size_t> pix;
                    for (auto& [c, p] : detail::stratified_pixels(lab[b].labels, {}, k,
                                                                  static_cast<std::size_t>(fc.aaco_pixels_per_class), st.rng)) {
                        for (auto q : p) {
                            pix.push_back(q);
                            labels.push_back(c);
                            ids.push_back(lab[b].id * hw + q);
                        }
                    }
                    picks.emplace_back(b, std::move(pix));
                }
                ab.features = Tensor({labels.size(), d});
                std::size_t row = 0;
                for (auto& [b, pix] : picks) {
                    detail::gather_pixels(lab_out[b].dense_reps, pix, ab.features, row);
                    row += pix.size();
                }
                ab.labels = labels;
                ab.pixel_ids = ids;
                ab.class_centers = Tensor({static_cast<std::size_t>(k), d});
                for (int c = 0; c < k; ++c) {
                    auto src = st.centers.center(out.assignment->pi[static_cast<std::size_t>(c)]);
                    std::copy(src.begin(), src.end(), ab.class_centers.row(static_cast<std::size_t>(c)).begin());
                }
                ab.lambda_a = fc.lambda_a;
                ab.tau = tau_sa;
                ab.positives_per_anchor = static_cast<std::size_t>(fc.positives_per_anchor);
                ab.seed = cfg.seed;
                ab.iteration = static_cast<std::uint64_t>(t);
                const LossValue aaco = aaco_loss(ab);
                aaco_value = aaco.value;
                rec.aaco_active = 1;
                row = 0;
                for (auto& [b, pix] : picks) {
                    detail::scatter_pixels(aaco.grad("features"), row, pix, fc.w_aaco, lab_grads[b].dense_reps);
                    row += pix.size();
                }
            }
        }

        // Unlabeled images: teacher pseudo-labels drive AnCo and the CE term.
        std::vector<SegmentationSample> unl;
        for (auto i : st.rng.sample_without_replacement(ds.split.unlabeled.size(), static_cast<std::size_t>(fc.unlabeled_batch))) {
            unl.push_back(augment(ds.samples[ds.split.unlabeled[i]], cfg.data.sigma_aug, st.rng).sample);
        }
        std::vector<ForwardCache> unl_cache(unl.size());
        std::vector<HeadOutputs> unl_out;
        std::vector<Tensor> s_logits, t_probs;
        for (std::size_t b = 0; b < unl.size(); ++b) {
            unl_out.push_back(student.forward(unl[b].image, {true, false, false}, &unl_cache[b]));
            s_logits.push_back(unl_out.back().logits);
            t_probs.push_back(channel_softmax(teacher.forward(unl[b].image, {false, false, false}).logits));
        }
        const LossValue unsup = pseudo_label_ce_loss(detail::stack(s_logits), detail::stack(t_probs), fc.confidence_threshold);
        std::vector<HeadGrads> unl_grads(unl.size());
        for (std::size_t b = 0; b < unl.size(); ++b) {
            unl_grads[b].logits = detail::slice(unsup.grad("student_logits"), b);
            unl_grads[b].dense_reps = Tensor(unl_out[b].dense_reps.shape());
        }

        std::vector<std::pair<std::size_t, std::vector<std::size_t>>> anco_picks;
        std::vector<int> anco_labels;
        for (std::size_t b = 0; b < unl.size(); ++b) {
            const Tensor& tp = t_probs[b];
            std::vector<int> pseudo(hw, 1);
            std::vector<std::uint8_t> keep(hw, 0);
            for (std::size_t p = 0; p < hw; ++p) {
                double best = tp[p];
                for (int c = 1; c < k; ++c) {
                    const double v = tp[static_cast<std::size_t>(c) * hw + p];
                    if (v > best) {
                        best = v;
                        pseudo[p] = c + 1;
                    }
                }
                keep[p] = best >= fc.confidence_threshold;
            }
            std::vector<std::size_t> pix;
            for (auto& [c, p] : detail::stratified_pixels(pseudo, keep, k, static_cast<std::size_t>(fc.anco_pixels_per_class), st.rng)) {
                for (auto q : p) {
                    pix.push_back(q);
                    anco_labels.push_back(c);
                }
            }
            anco_picks.emplace_back(b, std::move(pix));
        }
        double anco_value = 0.0;
        if (!anco_labels.empty()) {
            Tensor reps({anco_labels.size(), d});
            std::size_t row = 0;
            for (auto& [b, pix] : anco_picks) {
                detail::gather_pixels(unl_out[b].dense_reps, pix, reps, row);
                row += pix.size();
            }
            const auto sets = select_query_key_sets(reps, anco_labels, static_cast<std::size_t>(fc.queries_per_class), st.rng);
            const double scale = 1.0 / static_cast<double>(std::max<std::size_t>(1, anco_query_count(sets)));
            const LossValue anco = anco_loss(sets, reps, tau_an);
            anco_value = scale * anco.value;
            row = 0;
            for (auto& [b, pix] : anco_picks) {
                detail::scatter_pixels(anco.grad("reps"), row, pix, scale, unl_grads[b].dense_reps);
                row += pix.size();
            }
        }

        for (std::size_t b = 0; b < lab.size(); ++b) student.backward(lab_cache[b], lab_grads[b], grads);
        for (std::size_t b = 0; b < unl.size(); ++b) student.backward(unl_cache[b], unl_grads[b], grads);

        rec.sup = sup.value;
        rec.unsup = unsup.value;
        rec.anco = anco_value;
        rec.aaco = fc.w_aaco * aaco_value;
        rec.total = rec.anco + rec.unsup + rec.sup + rec.aaco;
        detail::check_finite(rec.sup, t, "sup");
        detail::check_finite(rec.unsup, t, "unsup");
        detail::check_finite(rec.anco, t, "anco");
        detail::check_finite(rec.aaco, t, "aaco");

        st.optimizer.step(st.nets.student.params(), grads);
        ema_update(st.nets);
        ++st.iteration;
        return out;
    }

    struct FinetuneResult : RunResult {
        std::optional<Assignment> final_assignment;
    };

    inline FinetuneResult run_finetune(const TrainConfig& cfg, const Checkpoint& pretrained, const ClassCenters& centers,
                                       const RunOptions& opt = {}, const std::optional<Checkpoint>& resume = std::nullopt) {
        cfg.validate();
        const Dataset ds = dataset_for(cfg);
        TrainingState st = resume ? state_from_checkpoint(*resume, cfg) : initial_finetune_state(cfg, pretrained, centers);
        if (st.stage != "finetune") throw ConfigError("resume checkpoint is not a fine-tuning state");
        detail::LogSink sink(opt, resume.has_value());
        FinetuneResult result;
        const std::int64_t total = cfg.finetune.iterations;
        const std::int64_t stop = opt.stop_at >= 0 ? std::min(opt.stop_at, total) : total;
        while (st.iteration < stop) {
            FinetuneStep step = finetune_step(st, cfg, ds);
            if (step.assignment) result.final_assignment = step.assignment;
            if (detail::eval_due(cfg, st.iteration, total)) {
                ValidationOptions vo;
                vo.centers = &st.centers;
                vo.assignment = step.assignment ? &*step.assignment : nullptr;
                detail::fill_validation(step.record, validate_network(st.nets.student, ds, cfg, vo));
            }
            if (opt.verbose && (step.record.iteration % 50 == 0 || st.iteration == total)) {
                std::cerr << "finetune " << step.record.iteration << " total=" << step.record.total
                          << " aaco=" << step.record.aaco << " anco=" << step.record.anco << "\n";
            }
            sink.write(step.record);
            result.log.push_back(std::move(step.record));
        }
        result.checkpoint = to_checkpoint(st, cfg);
        detail::finish_run(opt, result.checkpoint, "finetune");
        return result;
    }

    // Full report for the student of a training checkpoint on one split
    // ("validation", "labeled" or "unlabeled").
    inline MetricsReport evaluate_checkpoint(const Checkpoint& ck, const TrainConfig& cfg, const std::string& split = "validation") {
        TrainingState st = state_from_checkpoint(ck, cfg);
        Dataset ds = dataset_for(cfg);
        if (split == "labeled") ds.split.validation = ds.split.labeled;
        else if (split == "unlabeled") ds.split.validation = ds.split.unlabeled;
        else if (split != "validation") throw DataError("unknown split " + split);
        ValidationOptions vo;
        vo.surface_distance = true;
        std::optional<Assignment> pi;
        if (st.centers.num_classes > 0) {
            vo.centers = &st.centers;
            if (st.means.all_initialized()) {
                pi = allocate_centers(st.centers, st.means);
                vo.assignment = &*pi;
            }
        }
        auto vm = validate_network(st.nets.student, ds, cfg, vo);
        vm.report.iteration = st.iteration;
        return vm.report;
    }

} // namespace actionpp
