#pragma once

#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "centers.hpp"
#include "data.hpp"
#include "errors.hpp"
#include "numerics.hpp"
#include "tensor.hpp"

namespace actionpp {

    inline double dice_score(std::span<const int> pred, std::span<const int> gt, int class_id) {
        if (pred.size() != gt.size()) throw ShapeMismatch("dice_score: label maps differ in size");
        std::size_t inter = 0, np = 0, ng = 0;
        for (std::size_t i = 0; i < pred.size(); ++i) {
            const bool p = pred[i] == class_id, g = gt[i] == class_id;
            np += p;
            ng += g;
            inter += p && g;
        }
        if (np + ng == 0) return 1.0;
        return 2.0 * static_cast<double>(inter) / static_cast<double>(np + ng);
    }

    // Mask pixels with at least one 4-neighbour outside the mask; the image
    // border counts as outside.
    inline std::vector<std::pair<int, int>> mask_boundary(std::span<const int> labels, std::size_t h, std::size_t w,
                                                          int class_id) {
        std::vector<std::pair<int, int>> out;
        auto in = [&](long r, long c) {
            return r >= 0 && c >= 0 && r < static_cast<long>(h) && c < static_cast<long>(w) &&
                   labels[static_cast<std::size_t>(r) * w + static_cast<std::size_t>(c)] == class_id;
        };
        for (long r = 0; r < static_cast<long>(h); ++r)
            for (long c = 0; c < static_cast<long>(w); ++c) {
                if (!in(r, c)) continue;
                if (!in(r - 1, c) || !in(r + 1, c) || !in(r, c - 1) || !in(r, c + 1)) {
                    out.emplace_back(static_cast<int>(r), static_cast<int>(c));
                }
            }
        return out;
    }

    // Symmetric mean of boundary-to-nearest-boundary distances, all pairs.
    inline double average_surface_distance(std::span<const int> pred, std::span<const int> gt, std::size_t h,
                                           std::size_t w, int class_id) {
        if (pred.size() != gt.size() || pred.size() != h * w) throw ShapeMismatch("ASD: label maps differ in size");
        const auto a = mask_boundary(pred, h, w, class_id);
        const auto b = mask_boundary(gt, h, w, class_id);
        if (a.empty() || b.empty()) throw EmptyMask("class " + std::to_string(class_id) + " is empty in one mask");
        auto directed = [](const auto& from, const auto& to) {
            double s = 0.0;
            for (auto [r, c] : from) {
                long best = std::numeric_limits<long>::max();
                for (auto [r2, c2] : to) {
                    const long dr = r - r2, dc = c - c2;
                    best = std::min(best, dr * dr + dc * dc);
                }
                s += std::sqrt(static_cast<double>(best));
            }
            return s;
        };
        return (directed(a, b) + directed(b, a)) / static_cast<double>(a.size() + b.size());
    }

    // ---------------------------------------------------------------------
    // Feature diagnostics
    // ---------------------------------------------------------------------

    // Dense representations of one image under two dihedral views. reps_* are
    // d x H x W in their own (augmented) frame; labels are in the source frame.
    struct AlignmentPair {
        Tensor reps_a, reps_b;
        int element_a = 0, element_b = 0;
        std::vector<int> labels;
    };

    struct AlignmentOptions {
        int pairs_per_image = 4;
        std::size_t pixels_per_class = 256;
        double sigma_aug = 0.0;
        std::uint64_t seed = 0;
    };

    // sqrt of the equal-class-weight mean of ||f(p; x) - f(p; x~)||^2, where
    // p is the same source pixel seen through both views.
    inline double positive_alignment(const std::vector<AlignmentPair>& pairs, int num_classes,
                                     std::size_t pixels_per_class, std::uint64_t seed) {
        std::vector<double> sum(static_cast<std::size_t>(num_classes), 0.0), count(sum.size(), 0.0);
        std::uint64_t index = 0;
        for (const auto& pair : pairs) {
            pair.reps_a.require_same_shape(pair.reps_b);
            const std::size_t d = pair.reps_a.dim(0), n = pair.reps_a.dim(1), hw = n * pair.reps_a.dim(2);
            if (pair.labels.size() != hw) throw ShapeMismatch("alignment labels do not match the feature map");
            Rng rng = Rng::derive(seed, {0x616c6eULL, index++});
            for (int c = 1; c <= num_classes; ++c) {
                std::vector<std::size_t> pix;
                for (std::size_t p = 0; p < hw; ++p)
                    if (pair.labels[p] == c) pix.push_back(p);
                std::vector<std::size_t> chosen;
                if (pix.size() <= pixels_per_class) {
                    chosen = pix;
                } else {
                    for (auto i : rng.sample_without_replacement(pix.size(), pixels_per_class)) chosen.push_back(pix[i]);
                }
                for (std::size_t p : chosen) {
                    auto [ra, ca] = dihedral_map(pair.element_a, n, p / n, p % n);
                    auto [rb, cb] = dihedral_map(pair.element_b, n, p / n, p % n);
                    double s = 0.0;
                    for (std::size_t k = 0; k < d; ++k) {
                        const double diff = pair.reps_a[k * hw + ra * n + ca] - pair.reps_b[k * hw + rb * n + cb];
                        s += diff * diff;
                    }
                    sum[static_cast<std::size_t>(c - 1)] += s;
                    count[static_cast<std::size_t>(c - 1)] += 1.0;
                }
            }
        }
        std::vector<int> missing;
        double mean = 0.0;
        for (int c = 1; c <= num_classes; ++c) {
            const auto i = static_cast<std::size_t>(c - 1);
            if (count[i] == 0.0) {
                missing.push_back(c);
                continue;
            }
            mean += sum[i] / count[i];
        }
        if (!missing.empty()) {
            std::string m;
            for (int c : missing) m += (m.empty() ? "" : ", ") + std::to_string(c);
            throw MissingClass("no pixels for class(es) " + m);
        }
        return std::sqrt(mean / num_classes);
    }

    using DenseFeatureFn = std::function<Tensor(const Tensor& image)>;

    inline double alignment_metric(const DenseFeatureFn& features, const std::vector<SegmentationSample>& samples,
                                   int num_classes, const AlignmentOptions& options) {
        if (options.pairs_per_image < 1) throw InvalidArgument("pairs_per_image must be positive");
        std::vector<AlignmentPair> pairs;
        for (const auto& s : samples) {
            for (int p = 0; p < options.pairs_per_image; ++p) {
                Rng rng = Rng::derive(options.seed, {0x61756770ULL, s.id, static_cast<std::uint64_t>(p)});
                AugmentedSample a = augment(s, options.sigma_aug, rng);
                AugmentedSample b = augment(s, options.sigma_aug, rng);
                pairs.push_back({features(a.sample.image), features(b.sample.image), a.element, b.element, s.labels});
            }
        }
        return positive_alignment(pairs, num_classes, options.pixels_per_class, options.seed);
    }

    // max_{c != c'} mean_c . mean_c'
    inline double divergence_metric(const Tensor& means) {
        if (means.rank() != 2 || means.dim(0) < 2) throw InvalidArgument("divergence needs K >= 2 class means");
        double best = -std::numeric_limits<double>::infinity();
        for (std::size_t a = 0; a < means.dim(0); ++a)
            for (std::size_t b = a + 1; b < means.dim(0); ++b) best = std::max(best, dot(means.row(a), means.row(b)));
        return best;
    }

    struct NnError {
        double equal_class = 0.0;     // mean of per-class error rates
        double pixel_weighted = 0.0;  // plain misclassification rate
    };

    // Nearest assigned center (ties to the smallest class id).
    inline int nn_classify(std::span<const double> feature, const Tensor& centers, const Assignment& assignment) {
        int best = 1;
        double best_d = std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < assignment.pi.size(); ++c) {
            const double dist = squared_distance(feature, centers.row(static_cast<std::size_t>(assignment.pi[c])));
            if (dist < best_d) {
                best_d = dist;
                best = static_cast<int>(c) + 1;
            }
        }
        return best;
    }

    inline NnError nn_classifier_error(const Tensor& features, std::span<const int> labels, const Tensor& centers,
                                       const Assignment& assignment) {
        if (features.rank() != 2 || features.dim(0) != labels.size()) throw ShapeMismatch("features and labels differ");
        const std::size_t k = assignment.pi.size();
        if (centers.rank() != 2 || centers.dim(0) != k || centers.dim(1) != features.dim(1)) {
            throw ShapeMismatch("centers do not match the assignment / feature dimension");
        }
        std::vector<double> wrong(k, 0.0), seen(k, 0.0);
        double total_wrong = 0.0;
        for (std::size_t i = 0; i < labels.size(); ++i) {
            const int y = labels[i];
            if (y < 1 || static_cast<std::size_t>(y) > k) throw InvalidArgument("label out of range");
            const bool miss = nn_classify(features.row(i), centers, assignment) != y;
            seen[static_cast<std::size_t>(y - 1)] += 1.0;
            wrong[static_cast<std::size_t>(y - 1)] += miss;
            total_wrong += miss;
        }
        std::vector<int> missing;
        NnError e;
        for (std::size_t c = 0; c < k; ++c) {
            if (seen[c] == 0.0) {
                missing.push_back(static_cast<int>(c) + 1);
                continue;
            }
            e.equal_class += wrong[c] / seen[c];
        }
        if (!missing.empty()) throw MissingClass("class " + std::to_string(missing.front()) + " absent from the evaluation set");
        e.equal_class /= static_cast<double>(k);
        e.pixel_weighted = total_wrong / static_cast<double>(labels.size());
        return e;
    }

    // ---------------------------------------------------------------------
    // Report
    // ---------------------------------------------------------------------

    struct MetricsReport {
        std::int64_t iteration = 0;
        std::vector<double> dsc;          // per class, counts pooled over the split
        std::vector<double> asd;          // per class, mean over images where both masks exist (NaN if none)
        std::vector<int> asd_missing;     // per class, images skipped for an empty mask
        double mean_dsc = 0.0;            // foreground classes 2..K
        double mean_asd = 0.0;            // foreground classes with a defined ASD
        std::optional<double> alignment;
        std::optional<double> divergence;
        std::optional<double> nn_error;
        std::optional<double> nn_error_pixel;

        static std::string csv_header(int num_classes) {
            std::string h = "iteration";
            for (int c = 1; c <= num_classes; ++c) h += ",dsc_" + std::to_string(c);
            for (int c = 1; c <= num_classes; ++c) h += ",asd_" + std::to_string(c);
            return h + ",mean_dsc,mean_asd,alignment_A,divergence_D,nn_error,nn_error_pixel";
        }

        std::string csv_row() const {
            auto num = [](double v) {
                if (std::isnan(v)) return std::string();
                char buf[64];
                std::snprintf(buf, sizeof buf, "%.17g", v);
                return std::string(buf);
            };
            auto opt = [&](const std::optional<double>& v) { return v ? num(*v) : std::string(); };
            std::string r = std::to_string(iteration);
            for (double v : dsc) r += "," + num(v);
            for (double v : asd) r += "," + num(v);
            r += "," + num(mean_dsc) + "," + num(mean_asd) + "," + opt(alignment) + "," + opt(divergence) + "," +
                 opt(nn_error) + "," + opt(nn_error_pixel);
            return r;
        }

        nlohmann::json to_json() const {
            nlohmann::json j;
            j["iteration"] = iteration;
            j["dsc"] = dsc;
            nlohmann::json asd_json = nlohmann::json::array();
            for (double v : asd) asd_json.push_back(std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v));
            j["asd"] = asd_json;
            j["asd_missing"] = asd_missing;
            j["mean_dsc"] = mean_dsc;
            j["mean_asd"] = mean_asd;
            auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
            j["alignment_A"] = opt(alignment);
            j["divergence_D"] = opt(divergence);
            j["nn_error"] = opt(nn_error);
            j["nn_error_pixel"] = opt(nn_error_pixel);
            return j;
        }
    };

    // DSC and ASD of predicted label maps against ground truth, n x n each.
    inline MetricsReport segmentation_report(const std::vector<std::vector<int>>& preds,
                                             const std::vector<std::vector<int>>& gts, std::size_t n, int num_classes) {
        if (preds.size() != gts.size() || preds.empty()) throw DataError("prediction and label sets differ or are empty");
        const auto k = static_cast<std::size_t>(num_classes);
        MetricsReport r;
        std::vector<double> inter(k, 0.0), sizes(k, 0.0), asd_sum(k, 0.0), asd_n(k, 0.0);
        r.asd_missing.assign(k, 0);
        for (std::size_t i = 0; i < preds.size(); ++i) {
            const auto& p = preds[i];
            const auto& g = gts[i];
            if (p.size() != n * n || g.size() != n * n) throw DataError("label map has the wrong size");
            for (std::size_t q = 0; q < p.size(); ++q) {
                sizes[static_cast<std::size_t>(p[q] - 1)] += 1.0;
                sizes[static_cast<std::size_t>(g[q] - 1)] += 1.0;
                if (p[q] == g[q]) inter[static_cast<std::size_t>(p[q] - 1)] += 1.0;
            }
            for (int c = 1; c <= num_classes; ++c) {
                try {
                    asd_sum[static_cast<std::size_t>(c - 1)] += average_surface_distance(p, g, n, n, c);
                    asd_n[static_cast<std::size_t>(c - 1)] += 1.0;
                } catch (const EmptyMask&) {
                    ++r.asd_missing[static_cast<std::size_t>(c - 1)];
                }
            }
        }
        double asd_total = 0.0;
        int asd_classes = 0;
        for (std::size_t c = 0; c < k; ++c) {
            r.dsc.push_back(sizes[c] == 0.0 ? 1.0 : 2.0 * inter[c] / sizes[c]);
            r.asd.push_back(asd_n[c] > 0.0 ? asd_sum[c] / asd_n[c] : std::nan(""));
            if (c == 0) continue;
            r.mean_dsc += r.dsc.back();
            if (asd_n[c] > 0.0) {
                asd_total += r.asd.back();
                ++asd_classes;
            }
        }
        if (num_classes > 1) r.mean_dsc /= static_cast<double>(num_classes - 1);
        else r.mean_dsc = r.dsc[0];
        r.mean_asd = asd_classes ? asd_total / asd_classes : std::nan("");
        return r;
    }

} // namespace actionpp
