#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "errors.hpp"
#include "numerics.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace actionpp {

    // Scalar objective plus the exact partial derivative w.r.t. each named
    // differentiable input. Gradient tensors always have the input's shape.
    struct LossValue {
        double value = 0.0;
        std::map<std::string, Tensor> grads;

        const Tensor& grad(const std::string& name) const {
            auto it = grads.find(name);
            if (it == grads.end()) throw InvalidArgument("no gradient named '" + name + "'");
            return it->second;
        }
    };

    // ---------------------------------------------------------------------
    // Instance discrimination
    // ---------------------------------------------------------------------

    struct SimilarityDistribution {
        std::vector<double> log_probs;
        double tau = 1.0;
    };

    // sim(w, v_n) / tau for every mined view embedding (rows of mined, N x d).
    inline std::vector<double> relational_logits(std::span<const double> query, const Tensor& mined, double tau) {
        if (!(tau > 0.0)) throw InvalidArgument("temperature must be positive");
        if (mined.rank() != 2 || mined.dim(1) != query.size()) throw ShapeMismatch("mined views must be N x d");
        std::vector<double> logits(mined.dim(0));
        for (std::size_t n = 0; n < logits.size(); ++n) logits[n] = cosine_similarity(query, mined.row(n)) / tau;
        return logits;
    }

    inline SimilarityDistribution relational_distribution(std::span<const double> query, const Tensor& mined,
                                                          double tau) {
        if (mined.rank() == 2 && mined.dim(0) < 2) throw InvalidArgument("relational distribution needs N >= 2");
        return {stable_log_softmax(relational_logits(query, mined, tau)), tau};
    }

    inline double kl_divergence(std::span<const double> log_p, std::span<const double> log_q) {
        if (log_p.size() != log_q.size()) throw ShapeMismatch("distributions differ in support size");
        double kl = 0.0;
        for (std::size_t i = 0; i < log_p.size(); ++i) kl += std::exp(log_p[i]) * (log_p[i] - log_q[i]);
        return std::max(kl, 0.0);
    }

    // KL(u_s || u_t) with u_s = softmax(student_logits). Gradient w.r.t. the
    // student logits only; the teacher side is a constant target:
    //   dKL/dz_k = p_k (log p_k - log q_k - KL).
    inline LossValue instance_discrimination_loss(std::span<const double> student_logits,
                                                  std::span<const double> teacher_log_probs) {
        if (student_logits.size() != teacher_log_probs.size()) {
            throw ShapeMismatch("student and teacher distributions differ in size");
        }
        const auto log_p = stable_log_softmax(student_logits);
        double kl = 0.0;
        for (std::size_t i = 0; i < log_p.size(); ++i) kl += std::exp(log_p[i]) * (log_p[i] - teacher_log_probs[i]);

        Tensor grad({log_p.size()});
        for (std::size_t i = 0; i < log_p.size(); ++i) {
            grad[i] = std::exp(log_p[i]) * (log_p[i] - teacher_log_probs[i] - kl);
        }
        LossValue out;
        out.value = kl;
        out.grads.emplace("student_logits", std::move(grad));
        return out;
    }

    // Instance discrimination composed with the relational softmax: the
    // gradient is carried back to the student query embedding w ("query").
    inline LossValue relational_instance_loss(std::span<const double> query, const Tensor& mined,
                                              std::span<const double> teacher_log_probs, double tau_student) {
        const auto logits = relational_logits(query, mined, tau_student);
        LossValue kl = instance_discrimination_loss(logits, teacher_log_probs);
        const Tensor& dlogits = kl.grad("student_logits");

        Tensor dquery({query.size()});
        std::vector<double> dcos(query.size());
        for (std::size_t n = 0; n < logits.size(); ++n) {
            cosine_similarity_grad(query, mined.row(n), dcos);
            const double s = dlogits[n] / tau_student;
            for (std::size_t i = 0; i < query.size(); ++i) dquery[i] += s * dcos[i];
        }
        LossValue out;
        out.value = kl.value;
        out.grads.emplace("query", std::move(dquery));
        return out;
    }

    // ---------------------------------------------------------------------
    // Anatomical contrast over dense representations
    // ---------------------------------------------------------------------

    // Row indices into the representation table that define one class's
    // queries, negative keys and positive key.
    struct ClassQueryKeys {
        int class_id = 0;
        std::vector<std::size_t> members;   // every row labelled class_id
        std::vector<std::size_t> queries;   // subset of members, at most the cap
        std::vector<std::size_t> negatives; // every row with a different label
        std::vector<double> positive_key;   // renormalized mean of members
    };

    struct QueryKeySets {
        std::vector<ClassQueryKeys> classes;  // ascending class id; absent classes omitted

        const ClassQueryKeys* find(int class_id) const {
            for (const auto& c : classes)
                if (c.class_id == class_id) return &c;
            return nullptr;
        }
    };

    inline std::vector<double> class_positive_key(const Tensor& reps, std::span<const std::size_t> members) {
        std::vector<double> mean(reps.dim(1), 0.0);
        for (std::size_t m : members) {
            auto r = reps.row(m);
            for (std::size_t j = 0; j < mean.size(); ++j) mean[j] += r[j];
        }
        normalize_in_place(mean);
        return mean;
    }

    inline QueryKeySets select_query_key_sets(const Tensor& reps, std::span<const int> labels,
                                              std::size_t queries_per_class, Rng& rng) {
        if (reps.rank() != 2 || reps.dim(0) != labels.size()) throw ShapeMismatch("reps must be n x d aligned with labels");
        std::map<int, std::vector<std::size_t>> by_class;
        for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);

        QueryKeySets sets;
        for (auto& [class_id, members] : by_class) {
            ClassQueryKeys entry;
            entry.class_id = class_id;
            entry.members = members;
            if (members.size() <= queries_per_class) {
                entry.queries = members;
            } else {
                for (std::size_t pick : rng.sample_without_replacement(members.size(), queries_per_class)) {
                    entry.queries.push_back(members[pick]);
                }
                std::sort(entry.queries.begin(), entry.queries.end());
            }
            for (std::size_t i = 0; i < labels.size(); ++i)
                if (labels[i] != class_id) entry.negatives.push_back(i);
            entry.positive_key = class_positive_key(reps, entry.members);
            sets.classes.push_back(std::move(entry));
        }
        return sets;
    }

    // sum_c sum_q -log( e^{q.r+/tau} / (e^{q.r+/tau} + sum_k e^{q.k/tau}) ).
    // The positive key is recomputed from reps so the gradient w.r.t. "reps"
    // covers queries, negative keys and (through the renormalized mean) the
    // class members.
    inline LossValue anco_loss(const QueryKeySets& sets, const Tensor& reps, double tau) {
        if (!(tau > 0.0)) throw InvalidArgument("tau_an must be positive");
        if (reps.rank() != 2) throw ShapeMismatch("reps must be n x d");
        const std::size_t d = reps.dim(1);
        Tensor grad(reps.shape());
        double total = 0.0;
        std::vector<double> scores;
        std::vector<double> dpos(d);

        for (const auto& cls : sets.classes) {
            std::vector<double> mean(d, 0.0);
            for (std::size_t m : cls.members) {
                auto r = reps.row(m);
                for (std::size_t j = 0; j < d; ++j) mean[j] += r[j];
            }
            const double mean_norm = l2_norm(mean);
            if (mean_norm < kZeroNormThreshold) throw DegenerateBatchMean("class " + std::to_string(cls.class_id));
            std::vector<double> pos(d);
            for (std::size_t j = 0; j < d; ++j) pos[j] = mean[j] / mean_norm;
            std::fill(dpos.begin(), dpos.end(), 0.0);

            for (std::size_t q : cls.queries) {
                auto rq = reps.row(q);
                scores.assign(1 + cls.negatives.size(), 0.0);
                scores[0] = dot(rq, pos) / tau;
                for (std::size_t k = 0; k < cls.negatives.size(); ++k) scores[k + 1] = dot(rq, reps.row(cls.negatives[k])) / tau;
                const double lse = log_sum_exp(scores);
                total += lse - scores[0];

                auto gq = grad.row(q);
                const double coef_pos = (std::exp(scores[0] - lse) - 1.0) / tau;
                for (std::size_t j = 0; j < d; ++j) {
                    gq[j] += coef_pos * pos[j];
                    dpos[j] += coef_pos * rq[j];
                }
                for (std::size_t k = 0; k < cls.negatives.size(); ++k) {
                    const double coef = std::exp(scores[k + 1] - lse) / tau;
                    auto rk = reps.row(cls.negatives[k]);
                    auto gk = grad.row(cls.negatives[k]);
                    for (std::size_t j = 0; j < d; ++j) {
                        gq[j] += coef * rk[j];
                        gk[j] += coef * rq[j];
                    }
                }
            }

            // r+ = m / ||m||  =>  dm = (dr+ - (dr+ . r+) r+) / ||m||
            const double radial = dot(dpos, pos);
            for (std::size_t j = 0; j < d; ++j) dpos[j] = (dpos[j] - radial * pos[j]) / mean_norm;
            for (std::size_t m : cls.members) {
                auto gm = grad.row(m);
                for (std::size_t j = 0; j < d; ++j) gm[j] += dpos[j];
            }
        }
        LossValue out;
        out.value = total;
        out.grads.emplace("reps", std::move(grad));
        return out;
    }

    inline std::size_t anco_query_count(const QueryKeySets& sets) {
        std::size_t n = 0;
        for (const auto& c : sets.classes) n += c.queries.size();
        return n;
    }

    // ---------------------------------------------------------------------
    // Supervised adaptive anatomical contrast
    // ---------------------------------------------------------------------

    struct AacoBatch {
        Tensor features;                        // n x d, unit rows
        std::vector<int> labels;                // 1-based
        std::vector<std::uint64_t> pixel_ids;   // unique per row
        Tensor class_centers;                   // K x d; row c-1 is the center allocated to class c
        double lambda_a = 0.2;
        double tau = 0.1;
        std::size_t positives_per_anchor = 3;
        std::uint64_t seed = 0;
        std::uint64_t iteration = 0;
    };

    // Positive sample rows for every anchor. Candidates are ordered by pixel
    // id and drawn from a substream keyed by (seed, iteration, anchor id), so
    // the draw does not depend on row order.
    inline std::vector<std::vector<std::size_t>> sample_positives(const AacoBatch& batch) {
        const std::size_t n = batch.labels.size();
        std::map<int, std::vector<std::size_t>> by_class;
        for (std::size_t i = 0; i < n; ++i) by_class[batch.labels[i]].push_back(i);
        for (auto& [c, rows] : by_class) {
            std::sort(rows.begin(), rows.end(),
                      [&](std::size_t a, std::size_t b) { return batch.pixel_ids[a] < batch.pixel_ids[b]; });
        }
        std::vector<std::vector<std::size_t>> out(n);
        std::vector<std::size_t> candidates;
        for (std::size_t i = 0; i < n; ++i) {
            candidates.clear();
            for (std::size_t r : by_class[batch.labels[i]])
                if (r != i) candidates.push_back(r);
            Rng rng = Rng::derive(batch.seed, {0x6161636fULL, batch.iteration, batch.pixel_ids[i]});
            for (std::size_t pick : rng.sample_without_replacement(candidates.size(), batch.positives_per_anchor)) {
                out[i].push_back(candidates[pick]);
            }
        }
        return out;
    }

    // (-1/n) sum_i [ sum_{p in P_i} log(e^{s_ip} / Z_i) + lambda_a log(e^{t_i} / Z_i) ]
    // with s_ij = phi_i.phi_j / tau, t_i = phi_i.nu_i / tau and
    // Z_i = sum_{j != i} e^{s_ij}. Centers are not in Z_i and get no gradient.
    inline LossValue aaco_loss(const AacoBatch& batch) {
        const std::size_t n = batch.labels.size();
        if (n < 2) throw BatchTooSmall("aaco_loss needs at least two pixels, got " + std::to_string(n));
        if (!(batch.tau > 0.0)) throw InvalidArgument("tau_sa must be positive");
        if (batch.features.rank() != 2 || batch.features.dim(0) != n || batch.pixel_ids.size() != n) {
            throw ShapeMismatch("aaco batch fields are not aligned");
        }
        const std::size_t d = batch.features.dim(1);
        const int k = static_cast<int>(batch.class_centers.dim(0));
        if (batch.class_centers.dim(1) != d) throw ShapeMismatch("centers and features differ in dimension");
        for (int y : batch.labels)
            if (y < 1 || y > k) throw InvalidArgument("label " + std::to_string(y) + " out of range");

        const auto positives = sample_positives(batch);
        const Tensor& phi = batch.features;
        const double inv_n = 1.0 / static_cast<double>(n);
        const double inv_tau = 1.0 / batch.tau;

        Tensor grad(phi.shape());
        std::vector<double> s(n);
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            auto pi = phi.row(i);
            for (std::size_t j = 0; j < n; ++j) s[j] = (j == i) ? 0.0 : dot(pi, phi.row(j)) * inv_tau;
            double m = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < n; ++j)
                if (j != i) m = std::max(m, s[j]);
            double z = 0.0;
            for (std::size_t j = 0; j < n; ++j)
                if (j != i) z += std::exp(s[j] - m);
            const double lse = m + std::log(z);

            auto nu = batch.class_centers.row(static_cast<std::size_t>(batch.labels[i] - 1));
            const double t = dot(pi, nu) * inv_tau;
            const auto& pos = positives[i];
            double term = batch.lambda_a * (t - lse);
            for (std::size_t p : pos) term += s[p] - lse;
            total -= term;

            // d/ds_ij of the anchor's contribution: (c_i softmax_ij - [j in P_i]) / n
            const double c = static_cast<double>(pos.size()) + batch.lambda_a;
            auto gi = grad.row(i);
            for (std::size_t j = 0; j < n; ++j) {
                if (j == i) continue;
                double g = c * std::exp(s[j] - lse);
                for (std::size_t p : pos)
                    if (p == j) g -= 1.0;
                g *= inv_n * inv_tau;
                if (g == 0.0) continue;
                auto pj = phi.row(j);
                auto gj = grad.row(j);
                for (std::size_t q = 0; q < d; ++q) {
                    gi[q] += g * pj[q];
                    gj[q] += g * pi[q];
                }
            }
            const double gt = -batch.lambda_a * inv_n * inv_tau;
            for (std::size_t q = 0; q < d; ++q) gi[q] += gt * nu[q];
        }
        LossValue out;
        out.value = total * inv_n;
        out.grads.emplace("features", std::move(grad));
        return out;
    }

    // ---------------------------------------------------------------------
    // Pixel-wise supervision
    // ---------------------------------------------------------------------

    inline constexpr double kDiceSmoothing = 1e-5;

    namespace detail {

        // logits: B x K x H x W (or K x H x W, treated as B = 1).
        struct PixelLayout {
            std::size_t batch, classes, pixels;
        };

        inline PixelLayout pixel_layout(const Tensor& logits) {
            if (logits.rank() == 3) return {1, logits.dim(0), logits.dim(1) * logits.dim(2)};
            if (logits.rank() == 4) return {logits.dim(0), logits.dim(1), logits.dim(2) * logits.dim(3)};
            throw ShapeMismatch("logits must be K x H x W or B x K x H x W");
        }

        // Per-pixel softmax over the class axis.
        inline Tensor channel_softmax(const Tensor& logits) {
            const auto lay = pixel_layout(logits);
            Tensor probs(logits.shape());
            std::vector<double> z(lay.classes);
            for (std::size_t b = 0; b < lay.batch; ++b) {
                const std::size_t base = b * lay.classes * lay.pixels;
                for (std::size_t p = 0; p < lay.pixels; ++p) {
                    for (std::size_t c = 0; c < lay.classes; ++c) z[c] = logits[base + c * lay.pixels + p];
                    const double lse = log_sum_exp(z);
                    for (std::size_t c = 0; c < lay.classes; ++c) probs[base + c * lay.pixels + p] = std::exp(z[c] - lse);
                }
            }
            return probs;
        }

        // dz = p * (dp - sum_c p_c dp_c), in place on dp.
        inline void softmax_backward(const Tensor& probs, Tensor& dprobs) {
            const auto lay = pixel_layout(probs);
            for (std::size_t b = 0; b < lay.batch; ++b) {
                const std::size_t base = b * lay.classes * lay.pixels;
                for (std::size_t p = 0; p < lay.pixels; ++p) {
                    double inner = 0.0;
                    for (std::size_t c = 0; c < lay.classes; ++c) {
                        const std::size_t idx = base + c * lay.pixels + p;
                        inner += probs[idx] * dprobs[idx];
                    }
                    for (std::size_t c = 0; c < lay.classes; ++c) {
                        const std::size_t idx = base + c * lay.pixels + p;
                        dprobs[idx] = probs[idx] * (dprobs[idx] - inner);
                    }
                }
            }
        }

    } // namespace detail

    inline Tensor channel_softmax(const Tensor& logits) { return detail::channel_softmax(logits); }

    struct DiceCeParts {
        double dice = 0.0;
        double ce = 0.0;
    };

    // 0.5 * soft Dice loss (classes present in labels, pooled over the batch)
    // + 0.5 * mean pixel cross-entropy. Gradient w.r.t. the logits.
    inline LossValue dice_ce_loss(const Tensor& logits, std::span<const int> labels, DiceCeParts* parts = nullptr) {
        const auto lay = detail::pixel_layout(logits);
        if (labels.size() != lay.batch * lay.pixels) throw ShapeMismatch("labels do not match logits");
        const Tensor probs = detail::channel_softmax(logits);
        const std::size_t k = lay.classes;
        const double npix = static_cast<double>(lay.batch * lay.pixels);

        std::vector<double> inter(k, 0.0), psum(k, 0.0), gsum(k, 0.0);
        double ce = 0.0;
        for (std::size_t b = 0; b < lay.batch; ++b) {
            const std::size_t base = b * k * lay.pixels;
            for (std::size_t p = 0; p < lay.pixels; ++p) {
                const int y = labels[b * lay.pixels + p];
                if (y < 1 || static_cast<std::size_t>(y) > k) throw InvalidArgument("label out of range");
                const auto yc = static_cast<std::size_t>(y - 1);
                for (std::size_t c = 0; c < k; ++c) psum[c] += probs[base + c * lay.pixels + p];
                inter[yc] += probs[base + yc * lay.pixels + p];
                gsum[yc] += 1.0;
                ce -= std::log(std::max(probs[base + yc * lay.pixels + p], 1e-300));
            }
        }
        ce /= npix;

        std::size_t present = 0;
        double dice_mean = 0.0;
        for (std::size_t c = 0; c < k; ++c) {
            if (gsum[c] == 0.0) continue;
            ++present;
            dice_mean += (2.0 * inter[c] + kDiceSmoothing) / (psum[c] + gsum[c] + kDiceSmoothing);
        }
        dice_mean /= static_cast<double>(present);
        const double dice_loss = 1.0 - dice_mean;

        Tensor dprobs(probs.shape());
        for (std::size_t c = 0; c < k; ++c) {
            if (gsum[c] == 0.0) continue;
            const double den = psum[c] + gsum[c] + kDiceSmoothing;
            const double num = 2.0 * inter[c] + kDiceSmoothing;
            const double w = -0.5 / static_cast<double>(present);
            for (std::size_t b = 0; b < lay.batch; ++b) {
                const std::size_t base = b * k * lay.pixels + c * lay.pixels;
                for (std::size_t p = 0; p < lay.pixels; ++p) {
                    const double g = (labels[b * lay.pixels + p] == static_cast<int>(c + 1)) ? 1.0 : 0.0;
                    dprobs[base + p] += w * (2.0 * g / den - num / (den * den));
                }
            }
        }
        detail::softmax_backward(probs, dprobs);
        // Cross-entropy goes straight to the logits: (p - onehot) / N.
        for (std::size_t b = 0; b < lay.batch; ++b) {
            const std::size_t base = b * k * lay.pixels;
            for (std::size_t p = 0; p < lay.pixels; ++p) {
                const int y = labels[b * lay.pixels + p];
                for (std::size_t c = 0; c < k; ++c) {
                    const std::size_t idx = base + c * lay.pixels + p;
                    const double onehot = (static_cast<int>(c + 1) == y) ? 1.0 : 0.0;
                    dprobs[idx] += 0.5 * (probs[idx] - onehot) / npix;
                }
            }
        }
        if (parts) *parts = {dice_loss, ce};
        LossValue out;
        out.value = 0.5 * dice_loss + 0.5 * ce;
        out.grads.emplace("logits", std::move(dprobs));
        return out;
    }

    // Hard pseudo-labels from the teacher (argmax, ties to the lowest class);
    // cross-entropy of the student on pixels where the teacher's max
    // probability reaches the threshold.
    inline LossValue pseudo_label_ce_loss(const Tensor& student_logits, const Tensor& teacher_probs,
                                          double confidence_threshold) {
        student_logits.require_same_shape(teacher_probs);
        if (!(confidence_threshold >= 0.0 && confidence_threshold <= 1.0)) {
            throw InvalidArgument("confidence threshold must lie in [0, 1]");
        }
        const auto lay = detail::pixel_layout(student_logits);
        const Tensor probs = detail::channel_softmax(student_logits);
        Tensor grad(student_logits.shape());

        std::size_t used = 0;
        double total = 0.0;
        std::vector<std::pair<std::size_t, std::size_t>> picks;  // (base+p, class)
        for (std::size_t b = 0; b < lay.batch; ++b) {
            const std::size_t base = b * lay.classes * lay.pixels;
            for (std::size_t p = 0; p < lay.pixels; ++p) {
                std::size_t best = 0;
                double best_p = teacher_probs[base + p];
                for (std::size_t c = 1; c < lay.classes; ++c) {
                    const double v = teacher_probs[base + c * lay.pixels + p];
                    if (v > best_p) {
                        best_p = v;
                        best = c;
                    }
                }
                if (best_p < confidence_threshold) continue;
                ++used;
                total -= std::log(std::max(probs[base + best * lay.pixels + p], 1e-300));
                picks.emplace_back(base + p, best);
            }
        }
        LossValue out;
        if (used == 0) {
            out.grads.emplace("student_logits", std::move(grad));
            return out;
        }
        const double inv = 1.0 / static_cast<double>(used);
        for (auto [pix, label] : picks) {
            for (std::size_t c = 0; c < lay.classes; ++c) {
                const std::size_t idx = pix + c * lay.pixels;
                grad[idx] = (probs[idx] - (c == label ? 1.0 : 0.0)) * inv;
            }
        }
        out.value = total * inv;
        out.grads.emplace("student_logits", std::move(grad));
        return out;
    }

} // namespace actionpp
