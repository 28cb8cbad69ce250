#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "errors.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace actionpp {

    enum class ShapeFamily { Disk, Annulus, Ribbon };

    inline std::string to_string(ShapeFamily s) {
        switch (s) {
            case ShapeFamily::Disk: return "disk";
            case ShapeFamily::Annulus: return "annulus";
            case ShapeFamily::Ribbon: return "ribbon";
        }
        return "?";
    }

    struct SceneConfig {
        int image_size = 64;
        int num_classes = 4;
        std::vector<double> profile;         // empty -> default_profile(num_classes)
        std::vector<double> intensity_means; // empty -> default_intensities(num_classes)
        double noise_sigma = 0.05;
        double size_jitter = 0.15;           // relative, applied to each shape's target area
        std::uint64_t seed = 0;

        static std::vector<double> default_profile(int k) {
            if (k == 1) return {1.0};
            if (k == 4) return {0.90, 0.06, 0.03, 0.01};
            std::vector<double> p(static_cast<std::size_t>(k));
            p[0] = 0.9;
            double harmonic = 0.0;
            for (int j = 1; j < k; ++j) harmonic += 1.0 / j;
            for (int j = 1; j < k; ++j) p[static_cast<std::size_t>(j)] = 0.1 / (j * harmonic);
            return p;
        }

        static std::vector<double> default_intensities(int k) {
            if (k == 4) return {0.1, 0.6, 0.35, 0.45};
            std::vector<double> m(static_cast<std::size_t>(k));
            for (int c = 0; c < k; ++c) m[static_cast<std::size_t>(c)] = 0.1 + 0.8 * c / std::max(1, k - 1);
            return m;
        }

        std::vector<double> resolved_profile() const { return profile.empty() ? default_profile(num_classes) : profile; }
        std::vector<double> resolved_intensities() const {
            return intensity_means.empty() ? default_intensities(num_classes) : intensity_means;
        }

        static ShapeFamily family(int class_id) {
            static constexpr std::array<ShapeFamily, 3> cycle{ShapeFamily::Disk, ShapeFamily::Annulus, ShapeFamily::Ribbon};
            return cycle[static_cast<std::size_t>(class_id - 2) % 3];
        }

        void validate() const {
            if (image_size < 4) throw InvalidArgument("image_size must be at least 4");
            if (num_classes < 1) throw InvalidArgument("num_classes must be positive");
            const auto p = resolved_profile();
            if (p.size() != static_cast<std::size_t>(num_classes)) throw InvalidArgument("profile length differs from K");
            double s = 0.0;
            for (double v : p) {
                if (!(v >= 0.0)) throw InvalidArgument("profile entries must be non-negative");
                s += v;
            }
            if (std::abs(s - 1.0) > 1e-9) throw InvalidArgument("profile must sum to 1");
            if (resolved_intensities().size() != static_cast<std::size_t>(num_classes)) {
                throw InvalidArgument("intensity_means length differs from K");
            }
            if (!(noise_sigma >= 0.0) || !(size_jitter >= 0.0 && size_jitter < 1.0)) {
                throw InvalidArgument("noise_sigma and size_jitter out of range");
            }
        }
    };

    struct SegmentationSample {
        Tensor image;             // 1 x H x W
        std::vector<int> labels;  // H*W, row-major, 1..K
        std::uint64_t id = 0;

        std::size_t size() const { return image.dim(1); }
        friend bool operator==(const SegmentationSample&, const SegmentationSample&) = default;
    };

    namespace detail {

        struct Placed {
            double cy, cx, radius;
        };

        inline double segment_distance(double py, double px, double ay, double ax, double by, double bx) {
            const double dy = by - ay, dx = bx - ax;
            const double len2 = dy * dy + dx * dx;
            double t = len2 > 0.0 ? ((py - ay) * dy + (px - ax) * dx) / len2 : 0.0;
            t = std::clamp(t, 0.0, 1.0);
            const double qy = ay + t * dy - py, qx = ax + t * dx - px;
            return std::sqrt(qy * qy + qx * qx);
        }

        // Bounding radius of a shape with the given pixel area.
        inline double shape_extent(ShapeFamily f, double area) {
            switch (f) {
                case ShapeFamily::Disk: return std::sqrt(area / std::numbers::pi);
                case ShapeFamily::Annulus: return std::sqrt(area / (0.75 * std::numbers::pi));
                case ShapeFamily::Ribbon: return 0.5 * std::max(1.0, (area - std::numbers::pi) / 2.0) + 1.0;
            }
            return 0.0;
        }

    } // namespace detail

    inline SegmentationSample generate_sample(const SceneConfig& config, std::uint64_t id) {
        const auto n = static_cast<std::size_t>(config.image_size);
        const int k = config.num_classes;
        const auto profile = config.resolved_profile();
        const auto means = config.resolved_intensities();
        Rng rng = Rng::derive(config.seed, {0x64617461ULL, id});

        SegmentationSample s;
        s.id = id;
        s.labels.assign(n * n, 1);
        s.image = Tensor({1, n, n});

        std::vector<detail::Placed> placed;
        const double total = static_cast<double>(n * n);
        for (int c = 2; c <= k; ++c) {
            const double area =
                profile[static_cast<std::size_t>(c - 1)] * total * (1.0 + config.size_jitter * rng.uniform(-1.0, 1.0));
            if (area < 1.0) continue;
            const ShapeFamily fam = SceneConfig::family(c);
            const double extent = detail::shape_extent(fam, area);
            const double margin = extent + 1.0;
            if (2.0 * margin >= static_cast<double>(n)) {
                throw InfeasibleProfile("class " + std::to_string(c) + " does not fit in a " + std::to_string(n) +
                                        "-pixel image");
            }
            bool ok = false;
            double cy = 0, cx = 0;
            for (int attempt = 0; attempt < 2000 && !ok; ++attempt) {
                cy = rng.uniform(margin, static_cast<double>(n) - margin);
                cx = rng.uniform(margin, static_cast<double>(n) - margin);
                ok = std::all_of(placed.begin(), placed.end(), [&](const detail::Placed& p) {
                    return std::hypot(cy - p.cy, cx - p.cx) > p.radius + extent + 1.0;
                });
            }
            if (!ok) throw InfeasibleProfile("could not place class " + std::to_string(c) + " without overlap");
            placed.push_back({cy, cx, extent});

            const double angle = rng.uniform(0.0, std::numbers::pi);
            const double half_len = std::max(0.5, (area - std::numbers::pi) / 4.0);
            const double ay = cy - half_len * std::sin(angle), ax = cx - half_len * std::cos(angle);
            const double by = cy + half_len * std::sin(angle), bx = cx + half_len * std::cos(angle);
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t col = 0; col < n; ++col) {
                    const double py = static_cast<double>(r) + 0.5, px = static_cast<double>(col) + 0.5;
                    const double dist = std::hypot(py - cy, px - cx);
                    bool inside = false;
                    switch (fam) {
                        case ShapeFamily::Disk: inside = dist <= extent; break;
                        case ShapeFamily::Annulus: inside = dist <= extent && dist > 0.5 * extent; break;
                        case ShapeFamily::Ribbon: inside = detail::segment_distance(py, px, ay, ax, by, bx) <= 1.0; break;
                    }
                    if (inside) s.labels[r * n + col] = c;
                }
        }
        for (std::size_t p = 0; p < n * n; ++p) {
            s.image[p] = means[static_cast<std::size_t>(s.labels[p] - 1)] + config.noise_sigma * rng.normal();
        }
        return s;
    }

    inline std::vector<SegmentationSample> generate_dataset(const SceneConfig& config, std::size_t count,
                                                            std::uint64_t first_id = 0) {
        config.validate();
        if (count < 1) throw InvalidArgument("count must be at least 1");
        std::vector<SegmentationSample> out;
        out.reserve(count);
        for (std::size_t i = 0; i < count; ++i) out.push_back(generate_sample(config, first_id + i));
        return out;
    }

    inline std::vector<double> class_frequencies(const std::vector<SegmentationSample>& samples, int num_classes) {
        std::vector<double> f(static_cast<std::size_t>(num_classes), 0.0);
        double total = 0.0;
        for (const auto& s : samples) {
            for (int y : s.labels) f[static_cast<std::size_t>(y - 1)] += 1.0;
            total += static_cast<double>(s.labels.size());
        }
        for (double& v : f) v /= total;
        return f;
    }

    // Fraction of samples that contain each class at least once.
    inline std::vector<double> class_presence(const std::vector<SegmentationSample>& samples, int num_classes) {
        std::vector<double> f(static_cast<std::size_t>(num_classes), 0.0);
        for (const auto& s : samples) {
            std::vector<bool> seen(static_cast<std::size_t>(num_classes), false);
            for (int y : s.labels) seen[static_cast<std::size_t>(y - 1)] = true;
            for (std::size_t c = 0; c < seen.size(); ++c) f[c] += seen[c] ? 1.0 : 0.0;
        }
        for (double& v : f) v /= static_cast<double>(samples.size());
        return f;
    }

    // ---------------------------------------------------------------------
    // Dihedral augmentation
    // ---------------------------------------------------------------------

    // Element e of D4: optional horizontal flip (e >= 4) followed by e % 4
    // counter-clockwise quarter turns.
    inline constexpr int kDihedralOrder = 8;

    inline int dihedral_inverse(int e) { return e >= 4 ? e : (4 - e) % 4; }

    // Where the pixel at (r, c) lands after applying e to an n x n grid.
    inline std::pair<std::size_t, std::size_t> dihedral_map(int e, std::size_t n, std::size_t r, std::size_t c) {
        if (e >= 4) c = n - 1 - c;
        for (int t = 0; t < e % 4; ++t) {
            const std::size_t nr = n - 1 - c, nc = r;
            r = nr;
            c = nc;
        }
        return {r, c};
    }

    template <typename T>
    std::vector<T> dihedral_apply(int e, std::size_t n, std::span<const T> grid) {
        std::vector<T> out(grid.size());
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < n; ++c) {
                auto [rr, cc] = dihedral_map(e, n, r, c);
                out[rr * n + cc] = grid[r * n + c];
            }
        return out;
    }

    inline SegmentationSample apply_dihedral(const SegmentationSample& s, int e) {
        if (e < 0 || e >= kDihedralOrder) throw InvalidArgument("dihedral element must be in 0..7");
        const std::size_t n = s.size();
        if (s.image.dim(2) != n) throw ShapeMismatch("augmentation needs a square image");
        SegmentationSample out;
        out.id = s.id;
        out.labels = dihedral_apply<int>(e, n, s.labels);
        out.image = Tensor(s.image.shape(), dihedral_apply<double>(e, n, s.image.flat()));
        return out;
    }

    struct AugmentedSample {
        SegmentationSample sample;
        int element = 0;
    };

    inline AugmentedSample augment(const SegmentationSample& s, double sigma_aug, Rng& rng) {
        const int e = static_cast<int>(rng.below(kDihedralOrder));
        AugmentedSample out{apply_dihedral(s, e), e};
        if (sigma_aug > 0.0) {
            for (double& v : out.sample.image.flat()) v += sigma_aug * rng.normal();
        }
        return out;
    }

    struct ViewBatch {
        std::vector<AugmentedSample> x1, x2;  // two views of each batch sample
        std::vector<AugmentedSample> x3;      // N mined views
        std::vector<std::size_t> source;      // pool index behind x1[i] / x2[i]
        std::vector<std::size_t> mined;       // pool index behind x3[j]
    };

    inline ViewBatch make_view_batch(const std::vector<SegmentationSample>& pool, std::span<const std::size_t> batch,
                                     std::size_t num_mined, double sigma_aug, Rng& rng) {
        if (pool.size() < num_mined) {
            throw PoolTooSmall("pool has " + std::to_string(pool.size()) + " samples, " + std::to_string(num_mined) +
                               " mined views requested");
        }
        ViewBatch vb;
        for (std::size_t i : batch) {
            if (i >= pool.size()) throw OutOfRange("batch index " + std::to_string(i));
            vb.source.push_back(i);
            vb.x1.push_back(augment(pool[i], sigma_aug, rng));
            vb.x2.push_back(augment(pool[i], sigma_aug, rng));
        }
        vb.mined = rng.sample_without_replacement(pool.size(), num_mined);
        for (std::size_t j : vb.mined) vb.x3.push_back(augment(pool[j], sigma_aug, rng));
        return vb;
    }

    // ---------------------------------------------------------------------
    // Splits
    // ---------------------------------------------------------------------

    struct DatasetSplit {
        std::vector<std::size_t> labeled;
        std::vector<std::size_t> unlabeled;
        std::vector<std::size_t> validation;
    };

    // Indices 0..train_count-1 are training images, the rest validation. The
    // labeled subset is a seeded draw of round(ratio * train_count) images.
    inline DatasetSplit make_split(std::size_t train_count, std::size_t validation_count, double label_ratio,
                                   std::uint64_t seed) {
        if (!(label_ratio > 0.0 && label_ratio < 1.0)) throw InvalidArgument("label_ratio must lie in (0, 1)");
        const auto n_lab =
            std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(label_ratio * static_cast<double>(train_count))));
        if (n_lab >= train_count) throw InvalidArgument("label_ratio leaves no unlabeled images");
        Rng rng = Rng::derive(seed, {0x73706c74ULL});
        auto picks = rng.sample_without_replacement(train_count, n_lab);
        std::vector<bool> is_lab(train_count, false);
        for (auto p : picks) is_lab[p] = true;
        DatasetSplit split;
        for (std::size_t i = 0; i < train_count; ++i) (is_lab[i] ? split.labeled : split.unlabeled).push_back(i);
        for (std::size_t i = 0; i < validation_count; ++i) split.validation.push_back(train_count + i);
        return split;
    }

} // namespace actionpp
