#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "errors.hpp"
#include "numerics.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace actionpp {

    // Named parameter (or gradient / velocity) tensors. std::map keeps the
    // iteration order stable, which the checkpoint format relies on.
    using ParamStore = std::map<std::string, Tensor>;

    inline ParamStore zeros_like(const ParamStore& params) {
        ParamStore out;
        for (const auto& [name, t] : params) out.emplace(name, Tensor(t.shape()));
        return out;
    }

    inline std::size_t parameter_count(const ParamStore& params) {
        std::size_t n = 0;
        for (const auto& [name, t] : params) n += t.numel();
        return n;
    }

    struct NetworkConfig {
        int in_channels = 1;
        int base_width = 16;   // w0; stage s has w0 * 2^s channels
        int depth = 3;         // L encoder stages; inputs must be divisible by 2^L
        int num_classes = 4;   // K
        int latent_dim = 128;  // d
        int local_grid = 4;    // local embeddings come from a local_grid x local_grid pooling
        std::uint64_t seed = 0;

        void validate() const {
            if (in_channels < 1 || base_width < 1 || depth < 1 || num_classes < 1 || latent_dim < 1 || local_grid < 1) {
                throw InvalidArgument("network config entries must be positive");
            }
            if (num_classes < 2) throw InvalidArgument("num_classes must be at least 2");
        }

        int width(int stage) const { return base_width << stage; }

        friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
    };

    struct ForwardOptions {
        bool dense_reps = true;   // representation head phi
        bool embeddings = true;   // global/local projector outputs v
        bool predictor = true;    // predictor outputs w (implies embeddings)
    };

    // Per-image outputs. Every embedding is unit-norm.
    struct HeadOutputs {
        Tensor logits;                 // K x H x W
        Tensor dense_reps;             // d x H x W, unit along the channel axis
        std::vector<double> v_global;  // d
        std::vector<double> w_global;  // d
        Tensor v_local;                // G^2 x d
        Tensor w_local;                // G^2 x d
    };

    // Upstream gradients w.r.t. HeadOutputs; empty members mean "no gradient".
    struct HeadGrads {
        Tensor logits;
        Tensor dense_reps;
        std::vector<double> v_global;
        std::vector<double> w_global;
        Tensor v_local;
        Tensor w_local;
    };

    namespace nn {

        using MatrixRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
        using MapRM = Eigen::Map<MatrixRM>;
        using ConstMapRM = Eigen::Map<const MatrixRM>;

        inline void tanh_in_place(Tensor& t) {
            for (double& v : t.flat()) v = std::tanh(v);
        }

        // dy * (1 - y^2), y the tanh output.
        inline void tanh_backward(const Tensor& y, Tensor& dy) {
            for (std::size_t i = 0; i < y.numel(); ++i) dy[i] *= 1.0 - y[i] * y[i];
        }

        // (C*k*k) x (H*W) patch matrix, zero padding k/2.
        inline MatrixRM im2col(const Tensor& x, int k) {
            const auto c = static_cast<long>(x.dim(0)), h = static_cast<long>(x.dim(1)), w = static_cast<long>(x.dim(2));
            const long pad = k / 2;
            MatrixRM cols = MatrixRM::Zero(c * k * k, h * w);
            for (long ci = 0; ci < c; ++ci)
                for (long ky = 0; ky < k; ++ky)
                    for (long kx = 0; kx < k; ++kx) {
                        double* dst = cols.data() + ((ci * k + ky) * k + kx) * h * w;
                        for (long y = 0; y < h; ++y) {
                            const long sy = y + ky - pad;
                            if (sy < 0 || sy >= h) continue;
                            const double* src = x.data() + (ci * h + sy) * w;
                            for (long xx = 0; xx < w; ++xx) {
                                const long sx = xx + kx - pad;
                                if (sx >= 0 && sx < w) dst[y * w + xx] = src[sx];
                            }
                        }
                    }
            return cols;
        }

        inline void col2im_add(const MatrixRM& cols, Tensor& dx, int k) {
            const auto c = static_cast<long>(dx.dim(0)), h = static_cast<long>(dx.dim(1)), w = static_cast<long>(dx.dim(2));
            const long pad = k / 2;
            for (long ci = 0; ci < c; ++ci)
                for (long ky = 0; ky < k; ++ky)
                    for (long kx = 0; kx < k; ++kx) {
                        const double* src = cols.data() + ((ci * k + ky) * k + kx) * h * w;
                        for (long y = 0; y < h; ++y) {
                            const long sy = y + ky - pad;
                            if (sy < 0 || sy >= h) continue;
                            double* dst = dx.data() + (ci * h + sy) * w;
                            for (long xx = 0; xx < w; ++xx) {
                                const long sx = xx + kx - pad;
                                if (sx >= 0 && sx < w) dst[sx] += src[y * w + xx];
                            }
                        }
                    }
        }

        // Same-padded k x k convolution; weight is cout x cin x k x k.
        inline Tensor conv_forward(const Tensor& weight, const Tensor& bias, const Tensor& x) {
            const auto cout = static_cast<long>(weight.dim(0));
            const int k = static_cast<int>(weight.dim(2));
            const long hw = static_cast<long>(x.dim(1) * x.dim(2));
            if (weight.dim(1) != x.dim(0)) throw ShapeMismatch("conv input channels");
            Tensor y({weight.dim(0), x.dim(1), x.dim(2)});
            ConstMapRM wm(weight.data(), cout, static_cast<long>(weight.numel()) / cout);
            MapRM ym(y.data(), cout, hw);
            if (k == 1) {
                ym.noalias() = wm * ConstMapRM(x.data(), static_cast<long>(x.dim(0)), hw);
            } else {
                ym.noalias() = wm * im2col(x, k);
            }
            for (long o = 0; o < cout; ++o) ym.row(o).array() += bias[static_cast<std::size_t>(o)];
            return y;
        }

        // Accumulates dW, db; returns dx (empty when want_dx is false).
        inline Tensor conv_backward(const Tensor& weight, const Tensor& x, const Tensor& dy, Tensor& dweight,
                                    Tensor& dbias, bool want_dx = true) {
            const auto cout = static_cast<long>(weight.dim(0));
            const int k = static_cast<int>(weight.dim(2));
            const long hw = static_cast<long>(x.dim(1) * x.dim(2));
            const long fan = static_cast<long>(weight.numel()) / cout;
            ConstMapRM wm(weight.data(), cout, fan);
            ConstMapRM dym(dy.data(), cout, hw);
            MapRM dwm(dweight.data(), cout, fan);
            for (long o = 0; o < cout; ++o) dbias[static_cast<std::size_t>(o)] += dym.row(o).sum();
            Tensor dx;
            if (k == 1) {
                ConstMapRM xm(x.data(), static_cast<long>(x.dim(0)), hw);
                dwm.noalias() += dym * xm.transpose();
                if (want_dx) {
                    dx = Tensor(x.shape());
                    MapRM(dx.data(), static_cast<long>(x.dim(0)), hw).noalias() = wm.transpose() * dym;
                }
            } else {
                const MatrixRM cols = im2col(x, k);
                dwm.noalias() += dym * cols.transpose();
                if (want_dx) {
                    const MatrixRM dcols = wm.transpose() * dym;
                    dx = Tensor(x.shape());
                    col2im_add(dcols, dx, k);
                }
            }
            return dx;
        }

        inline Tensor avg_pool2(const Tensor& x) {
            const std::size_t c = x.dim(0), h = x.dim(1) / 2, w = x.dim(2) / 2;
            Tensor y({c, h, w});
            for (std::size_t ci = 0; ci < c; ++ci)
                for (std::size_t i = 0; i < h; ++i)
                    for (std::size_t j = 0; j < w; ++j)
                        y.at(ci, i, j) = 0.25 * (x.at(ci, 2 * i, 2 * j) + x.at(ci, 2 * i + 1, 2 * j) +
                                                 x.at(ci, 2 * i, 2 * j + 1) + x.at(ci, 2 * i + 1, 2 * j + 1));
            return y;
        }

        inline Tensor avg_pool2_backward(const Tensor& dy) {
            const std::size_t c = dy.dim(0), h = dy.dim(1), w = dy.dim(2);
            Tensor dx({c, 2 * h, 2 * w});
            for (std::size_t ci = 0; ci < c; ++ci)
                for (std::size_t i = 0; i < 2 * h; ++i)
                    for (std::size_t j = 0; j < 2 * w; ++j) dx.at(ci, i, j) = 0.25 * dy.at(ci, i / 2, j / 2);
            return dx;
        }

        // Nearest-neighbour x2 upsampling of `low`, concatenated (channel axis)
        // in front of `skip`.
        inline Tensor upsample_concat(const Tensor& low, const Tensor& skip) {
            const std::size_t cl = low.dim(0), cs = skip.dim(0), h = skip.dim(1), w = skip.dim(2);
            Tensor y({cl + cs, h, w});
            for (std::size_t ci = 0; ci < cl; ++ci)
                for (std::size_t i = 0; i < h; ++i)
                    for (std::size_t j = 0; j < w; ++j) y.at(ci, i, j) = low.at(ci, i / 2, j / 2);
            std::copy(skip.data(), skip.data() + skip.numel(), y.data() + cl * h * w);
            return y;
        }

        inline void upsample_concat_backward(const Tensor& dy, std::size_t low_channels, Tensor& dlow, Tensor& dskip) {
            const std::size_t h = dy.dim(1), w = dy.dim(2);
            dlow = Tensor({low_channels, h / 2, w / 2});
            for (std::size_t ci = 0; ci < low_channels; ++ci)
                for (std::size_t i = 0; i < h; ++i)
                    for (std::size_t j = 0; j < w; ++j) dlow.at(ci, i / 2, j / 2) += dy.at(ci, i, j);
            dskip = Tensor({dy.dim(0) - low_channels, h, w});
            std::copy(dy.data() + low_channels * h * w, dy.data() + dy.numel(), dskip.data());
        }

        // Two-layer map x -> fc2(tanh(fc1 x)) -> unit sphere.
        struct MlpTrace {
            std::vector<double> input, hidden, pre_norm, output;
            double norm = 1.0;
        };

        inline std::vector<double> linear(const Tensor& weight, const Tensor& bias, std::span<const double> x) {
            const std::size_t out = weight.dim(0), in = weight.dim(1);
            if (x.size() != in) throw ShapeMismatch("linear input width");
            std::vector<double> y(out);
            for (std::size_t o = 0; o < out; ++o) {
                const double* wr = weight.data() + o * in;
                double s = bias[o];
                for (std::size_t i = 0; i < in; ++i) s += wr[i] * x[i];
                y[o] = s;
            }
            return y;
        }

        inline std::vector<double> linear_backward(const Tensor& weight, std::span<const double> x,
                                                   std::span<const double> dy, Tensor& dweight, Tensor& dbias) {
            const std::size_t out = weight.dim(0), in = weight.dim(1);
            std::vector<double> dx(in, 0.0);
            for (std::size_t o = 0; o < out; ++o) {
                const double g = dy[o];
                dbias[o] += g;
                if (g == 0.0) continue;
                const double* wr = weight.data() + o * in;
                double* dwr = dweight.data() + o * in;
                for (std::size_t i = 0; i < in; ++i) {
                    dwr[i] += g * x[i];
                    dx[i] += g * wr[i];
                }
            }
            return dx;
        }

        // dx for y = x / ||x||.
        inline std::vector<double> normalize_backward(std::span<const double> y, double norm, std::span<const double> dy) {
            const double radial = dot(dy, y);
            std::vector<double> dx(y.size());
            for (std::size_t i = 0; i < y.size(); ++i) dx[i] = (dy[i] - radial * y[i]) / norm;
            return dx;
        }

    } // namespace nn

    // Per-image activations kept for the backward pass.
    struct ForwardCache {
        ForwardOptions options;
        struct Stage {
            Tensor input, act1, act2;
        };
        std::vector<Stage> encoder;   // index s = 0..L-1
        Stage middle;
        std::vector<Stage> decoder;   // index s = 0..L-1 (decoder s runs at encoder s resolution)
        Tensor rep_hidden, rep_pre_norm;
        std::vector<double> rep_norms;
        std::vector<double> global_pool;
        nn::MlpTrace proj_global, pred_global;
        Tensor local_pool;            // G^2 x w0
        std::vector<nn::MlpTrace> proj_local, pred_local;
    };

    // Encoder-decoder with skip concatenation plus the segmentation,
    // representation, projector and predictor heads.
    //
    //   enc{s}.conv{1,2}   3x3, w0*2^s channels, tanh; avg-pool x2 between stages
    //   mid.conv{1,2}      3x3, w0*2^L channels, tanh
    //   dec{s}.conv{1,2}   3x3 on [upsample(prev), skip_s], w0*2^s channels, tanh
    //   seg                1x1, w0 -> K logits
    //   rep.fc{1,2}        1x1, w0 -> w0 (tanh) -> d, unit-normalized per pixel
    //   proj_global.fc*    on the global average of mid: w0*2^L -> d -> d, unit
    //   pred_global.fc*    d -> d -> d, unit
    //   proj_local.fc*     on G x G block means of the last decoder map: w0 -> d -> d, unit
    //   pred_local.fc*     d -> d -> d, unit
    class SegmentationNetwork {
    public:
        SegmentationNetwork() = default;

        explicit SegmentationNetwork(NetworkConfig config) : config_(config) {
            config_.validate();
            build();
        }

        const NetworkConfig& config() const noexcept { return config_; }
        ParamStore& params() noexcept { return params_; }
        const ParamStore& params() const noexcept { return params_; }

        const Tensor& param(const std::string& name) const {
            auto it = params_.find(name);
            if (it == params_.end()) throw InvalidArgument("unknown parameter " + name);
            return it->second;
        }

        void check_input(const Tensor& image) const {
            const std::size_t m = std::size_t{1} << config_.depth;
            if (image.rank() != 3 || image.dim(0) != static_cast<std::size_t>(config_.in_channels)) {
                throw ShapeMismatch("expected a " + std::to_string(config_.in_channels) + " x H x W image, got " +
                                    shape_string(image.shape()));
            }
            if (image.dim(1) % m != 0 || image.dim(2) % m != 0) {
                throw ShapeMismatch("image extents must be divisible by " + std::to_string(m));
            }
            if (image.dim(1) % static_cast<std::size_t>(config_.local_grid) != 0 ||
                image.dim(2) % static_cast<std::size_t>(config_.local_grid) != 0) {
                throw ShapeMismatch("image extents must be divisible by the local grid");
            }
        }

        HeadOutputs forward(const Tensor& image, const ForwardOptions& options = {},
                            ForwardCache* cache = nullptr) const {
            check_input(image);
            ForwardCache local;
            ForwardCache& c = cache ? *cache : local;
            c = ForwardCache{};
            c.options = options;
            const int depth = config_.depth;
            c.encoder.resize(static_cast<std::size_t>(depth));
            c.decoder.resize(static_cast<std::size_t>(depth));

            Tensor x = image;
            for (int s = 0; s < depth; ++s) {
                x = run_stage("enc" + std::to_string(s), std::move(x), c.encoder[static_cast<std::size_t>(s)]);
                x = nn::avg_pool2(x);
            }
            x = run_stage("mid", std::move(x), c.middle);
            for (int s = depth - 1; s >= 0; --s) {
                Tensor cat = nn::upsample_concat(x, c.encoder[static_cast<std::size_t>(s)].act2);
                x = run_stage("dec" + std::to_string(s), std::move(cat), c.decoder[static_cast<std::size_t>(s)]);
            }
            const Tensor& features = c.decoder[0].act2;

            HeadOutputs out;
            out.logits = nn::conv_forward(param("seg.weight"), param("seg.bias"), features);

            if (options.dense_reps) {
                c.rep_hidden = nn::conv_forward(param("rep.fc1.weight"), param("rep.fc1.bias"), features);
                nn::tanh_in_place(c.rep_hidden);
                c.rep_pre_norm = nn::conv_forward(param("rep.fc2.weight"), param("rep.fc2.bias"), c.rep_hidden);
                out.dense_reps = normalize_channels(c.rep_pre_norm, c.rep_norms);
            }

            if (options.embeddings || options.predictor) {
                const Tensor& mid = c.middle.act2;
                const std::size_t ch = mid.dim(0), hw = mid.dim(1) * mid.dim(2);
                c.global_pool.assign(ch, 0.0);
                for (std::size_t k = 0; k < ch; ++k) {
                    double s = 0.0;
                    for (std::size_t p = 0; p < hw; ++p) s += mid[k * hw + p];
                    c.global_pool[k] = s / static_cast<double>(hw);
                }
                out.v_global = mlp_forward("proj_global", c.global_pool, c.proj_global);

                c.local_pool = grid_pool(features);
                const std::size_t sites = c.local_pool.dim(0);
                const auto d = static_cast<std::size_t>(config_.latent_dim);
                out.v_local = Tensor({sites, d});
                c.proj_local.resize(sites);
                for (std::size_t g = 0; g < sites; ++g) {
                    auto v = mlp_forward("proj_local", c.local_pool.row(g), c.proj_local[g]);
                    std::copy(v.begin(), v.end(), out.v_local.row(g).begin());
                }
                if (options.predictor) {
                    out.w_global = mlp_forward("pred_global", out.v_global, c.pred_global);
                    out.w_local = Tensor({sites, d});
                    c.pred_local.resize(sites);
                    for (std::size_t g = 0; g < sites; ++g) {
                        auto w = mlp_forward("pred_local", out.v_local.row(g), c.pred_local[g]);
                        std::copy(w.begin(), w.end(), out.w_local.row(g).begin());
                    }
                }
            }
            return out;
        }

        // Accumulates parameter gradients into `grads` (same keys as params()).
        void backward(const ForwardCache& c, const HeadGrads& upstream, ParamStore& grads) const {
            const int depth = config_.depth;
            const Tensor& features = c.decoder[0].act2;
            Tensor dfeat(features.shape());

            if (!upstream.logits.empty()) {
                upstream.logits.require_same_shape(Tensor({static_cast<std::size_t>(config_.num_classes),
                                                           features.dim(1), features.dim(2)}));
                dfeat += nn::conv_backward(param("seg.weight"), features, upstream.logits, grads.at("seg.weight"),
                                           grads.at("seg.bias"));
            }
            if (!upstream.dense_reps.empty()) {
                if (!c.options.dense_reps) throw InvalidArgument("dense reps were not computed in forward");
                Tensor dpre = normalize_channels_backward(c.rep_pre_norm, c.rep_norms, upstream.dense_reps);
                Tensor dhidden = nn::conv_backward(param("rep.fc2.weight"), c.rep_hidden, dpre,
                                                   grads.at("rep.fc2.weight"), grads.at("rep.fc2.bias"));
                nn::tanh_backward(c.rep_hidden, dhidden);
                dfeat += nn::conv_backward(param("rep.fc1.weight"), features, dhidden, grads.at("rep.fc1.weight"),
                                           grads.at("rep.fc1.bias"));
            }

            const Tensor& mid = c.middle.act2;
            Tensor dmid(mid.shape());
            const bool has_global = !upstream.v_global.empty() || !upstream.w_global.empty();
            const bool has_local = !upstream.v_local.empty() || !upstream.w_local.empty();
            if (has_global) {
                std::vector<double> dv(static_cast<std::size_t>(config_.latent_dim), 0.0);
                if (!upstream.w_global.empty()) {
                    auto g = mlp_backward("pred_global", c.pred_global, upstream.w_global, grads);
                    for (std::size_t i = 0; i < dv.size(); ++i) dv[i] += g[i];
                }
                if (!upstream.v_global.empty())
                    for (std::size_t i = 0; i < dv.size(); ++i) dv[i] += upstream.v_global[i];
                auto dpool = mlp_backward("proj_global", c.proj_global, dv, grads);
                const std::size_t hw = mid.dim(1) * mid.dim(2);
                for (std::size_t k = 0; k < dpool.size(); ++k)
                    for (std::size_t p = 0; p < hw; ++p) dmid[k * hw + p] += dpool[k] / static_cast<double>(hw);
            }
            if (has_local) {
                const std::size_t sites = c.local_pool.dim(0);
                Tensor dpool(c.local_pool.shape());
                std::vector<double> dv(static_cast<std::size_t>(config_.latent_dim));
                for (std::size_t g = 0; g < sites; ++g) {
                    std::fill(dv.begin(), dv.end(), 0.0);
                    if (!upstream.w_local.empty()) {
                        auto dw = mlp_backward("pred_local", c.pred_local[g], upstream.w_local.row(g), grads);
                        for (std::size_t i = 0; i < dv.size(); ++i) dv[i] += dw[i];
                    }
                    if (!upstream.v_local.empty()) {
                        auto row = upstream.v_local.row(g);
                        for (std::size_t i = 0; i < dv.size(); ++i) dv[i] += row[i];
                    }
                    auto dp = mlp_backward("proj_local", c.proj_local[g], dv, grads);
                    std::copy(dp.begin(), dp.end(), dpool.row(g).begin());
                }
                dfeat += grid_pool_backward(dpool, features.shape());
            }

            std::vector<Tensor> skip_grads(static_cast<std::size_t>(depth));
            Tensor dx = std::move(dfeat);
            for (int s = 0; s < depth; ++s) {
                const auto& st = c.decoder[static_cast<std::size_t>(s)];
                Tensor dcat = stage_backward("dec" + std::to_string(s), st, std::move(dx), grads, true);
                const std::size_t low_channels = static_cast<std::size_t>(config_.width(s + 1));
                Tensor dlow, dskip;
                nn::upsample_concat_backward(dcat, low_channels, dlow, dskip);
                skip_grads[static_cast<std::size_t>(s)] = std::move(dskip);
                dx = std::move(dlow);
            }
            dx += dmid;
            dx = stage_backward("mid", c.middle, std::move(dx), grads, true);
            for (int s = depth - 1; s >= 0; --s) {
                Tensor dact = nn::avg_pool2_backward(dx);
                dact += skip_grads[static_cast<std::size_t>(s)];
                dx = stage_backward("enc" + std::to_string(s), c.encoder[static_cast<std::size_t>(s)], std::move(dact),
                                    grads, s > 0);
            }
        }

        ParamStore zero_grads() const { return zeros_like(params_); }

    private:
        void add_conv(const std::string& name, int cin, int cout, int k) {
            const auto co = static_cast<std::size_t>(cout), ci = static_cast<std::size_t>(cin), ks = static_cast<std::size_t>(k);
            Tensor w({co, ci, ks, ks});
            const double fan_in = static_cast<double>(cin * k * k);
            const double fan_out = static_cast<double>(cout * k * k);
            init_uniform(name + ".weight", w, std::sqrt(6.0 / (fan_in + fan_out)));
            params_.emplace(name + ".weight", std::move(w));
            params_.emplace(name + ".bias", Tensor({co}));
        }

        void add_linear(const std::string& name, int in, int out) {
            Tensor w({static_cast<std::size_t>(out), static_cast<std::size_t>(in)});
            init_uniform(name + ".weight", w, std::sqrt(6.0 / static_cast<double>(in + out)));
            params_.emplace(name + ".weight", std::move(w));
            params_.emplace(name + ".bias", Tensor({static_cast<std::size_t>(out)}));
        }

        // Each tensor draws from a substream keyed by its name, so adding a
        // parameter never shifts the initial values of the others.
        void init_uniform(const std::string& name, Tensor& t, double bound) const {
            std::uint64_t h = 0xcbf29ce484222325ULL;
            for (unsigned char ch : name) {
                h ^= ch;
                h *= 0x100000001b3ULL;
            }
            Rng rng = Rng::derive(config_.seed, {0x696e6974ULL, h});
            for (double& v : t.flat()) v = rng.uniform(-bound, bound);
        }

        void build() {
            const int depth = config_.depth;
            int cin = config_.in_channels;
            for (int s = 0; s < depth; ++s) {
                add_conv("enc" + std::to_string(s) + ".conv1", cin, config_.width(s), 3);
                add_conv("enc" + std::to_string(s) + ".conv2", config_.width(s), config_.width(s), 3);
                cin = config_.width(s);
            }
            add_conv("mid.conv1", cin, config_.width(depth), 3);
            add_conv("mid.conv2", config_.width(depth), config_.width(depth), 3);
            for (int s = depth - 1; s >= 0; --s) {
                add_conv("dec" + std::to_string(s) + ".conv1", config_.width(s + 1) + config_.width(s), config_.width(s), 3);
                add_conv("dec" + std::to_string(s) + ".conv2", config_.width(s), config_.width(s), 3);
            }
            const int w0 = config_.base_width, d = config_.latent_dim;
            add_conv("seg", w0, config_.num_classes, 1);
            add_conv("rep.fc1", w0, w0, 1);
            add_conv("rep.fc2", w0, d, 1);
            add_linear("proj_global.fc1", config_.width(depth), d);
            add_linear("proj_global.fc2", d, d);
            add_linear("pred_global.fc1", d, d);
            add_linear("pred_global.fc2", d, d);
            add_linear("proj_local.fc1", w0, d);
            add_linear("proj_local.fc2", d, d);
            add_linear("pred_local.fc1", d, d);
            add_linear("pred_local.fc2", d, d);
        }

        Tensor run_stage(const std::string& prefix, Tensor x, ForwardCache::Stage& st) const {
            st.input = std::move(x);
            st.act1 = nn::conv_forward(param(prefix + ".conv1.weight"), param(prefix + ".conv1.bias"), st.input);
            nn::tanh_in_place(st.act1);
            st.act2 = nn::conv_forward(param(prefix + ".conv2.weight"), param(prefix + ".conv2.bias"), st.act1);
            nn::tanh_in_place(st.act2);
            return st.act2;
        }

        Tensor stage_backward(const std::string& prefix, const ForwardCache::Stage& st, Tensor dact2, ParamStore& grads,
                              bool want_dx) const {
            nn::tanh_backward(st.act2, dact2);
            Tensor dact1 = nn::conv_backward(param(prefix + ".conv2.weight"), st.act1, dact2,
                                             grads.at(prefix + ".conv2.weight"), grads.at(prefix + ".conv2.bias"));
            nn::tanh_backward(st.act1, dact1);
            return nn::conv_backward(param(prefix + ".conv1.weight"), st.input, dact1, grads.at(prefix + ".conv1.weight"),
                                     grads.at(prefix + ".conv1.bias"), want_dx);
        }

        std::vector<double> mlp_forward(const std::string& prefix, std::span<const double> x, nn::MlpTrace& tr) const {
            tr.input.assign(x.begin(), x.end());
            tr.hidden = nn::linear(param(prefix + ".fc1.weight"), param(prefix + ".fc1.bias"), x);
            for (double& v : tr.hidden) v = std::tanh(v);
            tr.pre_norm = nn::linear(param(prefix + ".fc2.weight"), param(prefix + ".fc2.bias"), tr.hidden);
            tr.output = tr.pre_norm;
            tr.norm = normalize_in_place(tr.output);
            return tr.output;
        }

        std::vector<double> mlp_backward(const std::string& prefix, const nn::MlpTrace& tr, std::span<const double> dy,
                                         ParamStore& grads) const {
            auto dpre = nn::normalize_backward(tr.output, tr.norm, dy);
            auto dh = nn::linear_backward(param(prefix + ".fc2.weight"), tr.hidden, dpre, grads.at(prefix + ".fc2.weight"),
                                          grads.at(prefix + ".fc2.bias"));
            for (std::size_t i = 0; i < dh.size(); ++i) dh[i] *= 1.0 - tr.hidden[i] * tr.hidden[i];
            return nn::linear_backward(param(prefix + ".fc1.weight"), tr.input, dh, grads.at(prefix + ".fc1.weight"),
                                       grads.at(prefix + ".fc1.bias"));
        }

        static Tensor normalize_channels(const Tensor& pre, std::vector<double>& norms) {
            const std::size_t d = pre.dim(0), hw = pre.dim(1) * pre.dim(2);
            Tensor out(pre.shape());
            norms.assign(hw, 0.0);
            for (std::size_t k = 0; k < d; ++k)
                for (std::size_t p = 0; p < hw; ++p) norms[p] += pre[k * hw + p] * pre[k * hw + p];
            for (double& n : norms) {
                n = std::sqrt(n);
                if (n < kZeroNormThreshold) throw ZeroVector("dense representation collapsed to zero");
            }
            for (std::size_t k = 0; k < d; ++k)
                for (std::size_t p = 0; p < hw; ++p) out[k * hw + p] = pre[k * hw + p] / norms[p];
            return out;
        }

        static Tensor normalize_channels_backward(const Tensor& pre, const std::vector<double>& norms, const Tensor& dy) {
            const std::size_t d = pre.dim(0), hw = pre.dim(1) * pre.dim(2);
            dy.require_same_shape(pre);
            std::vector<double> radial(hw, 0.0);
            for (std::size_t k = 0; k < d; ++k)
                for (std::size_t p = 0; p < hw; ++p) radial[p] += dy[k * hw + p] * pre[k * hw + p] / norms[p];
            Tensor dx(pre.shape());
            for (std::size_t k = 0; k < d; ++k)
                for (std::size_t p = 0; p < hw; ++p) {
                    const double y = pre[k * hw + p] / norms[p];
                    dx[k * hw + p] = (dy[k * hw + p] - radial[p] * y) / norms[p];
                }
            return dx;
        }

        // G^2 x C block means, sites in row-major grid order.
        Tensor grid_pool(const Tensor& x) const {
            const auto g = static_cast<std::size_t>(config_.local_grid);
            const std::size_t c = x.dim(0), bh = x.dim(1) / g, bw = x.dim(2) / g;
            Tensor out({g * g, c});
            const double inv = 1.0 / static_cast<double>(bh * bw);
            for (std::size_t gy = 0; gy < g; ++gy)
                for (std::size_t gx = 0; gx < g; ++gx)
                    for (std::size_t ci = 0; ci < c; ++ci) {
                        double s = 0.0;
                        for (std::size_t i = 0; i < bh; ++i)
                            for (std::size_t j = 0; j < bw; ++j) s += x.at(ci, gy * bh + i, gx * bw + j);
                        out.at(gy * g + gx, ci) = s * inv;
                    }
            return out;
        }

        Tensor grid_pool_backward(const Tensor& dpool, const Shape& shape) const {
            const auto g = static_cast<std::size_t>(config_.local_grid);
            Tensor dx(shape);
            const std::size_t c = shape[0], bh = shape[1] / g, bw = shape[2] / g;
            const double inv = 1.0 / static_cast<double>(bh * bw);
            for (std::size_t gy = 0; gy < g; ++gy)
                for (std::size_t gx = 0; gx < g; ++gx)
                    for (std::size_t ci = 0; ci < c; ++ci) {
                        const double v = dpool.at(gy * g + gx, ci) * inv;
                        for (std::size_t i = 0; i < bh; ++i)
                            for (std::size_t j = 0; j < bw; ++j) dx.at(ci, gy * bh + i, gx * bw + j) += v;
                    }
            return dx;
        }

        NetworkConfig config_;
        ParamStore params_;
    };

    struct StudentTeacher {
        SegmentationNetwork student;
        SegmentationNetwork teacher;
        double ema_decay = 0.99;

        static StudentTeacher from_config(const NetworkConfig& config, double ema_decay) {
            StudentTeacher pair{SegmentationNetwork(config), SegmentationNetwork(config), ema_decay};
            return pair;
        }
    };

    inline void check_same_layout(const ParamStore& a, const ParamStore& b) {
        if (a.size() != b.size()) throw ShapeMismatch("parameter sets differ in size");
        for (auto ia = a.begin(), ib = b.begin(); ia != a.end(); ++ia, ++ib) {
            if (ia->first != ib->first) throw ShapeMismatch("parameter " + ia->first + " vs " + ib->first);
            ia->second.require_same_shape(ib->second);
        }
    }

    // teacher <- m * teacher + (1 - m) * student
    inline void ema_update(const ParamStore& student, ParamStore& teacher, double decay) {
        if (!(decay >= 0.0 && decay <= 1.0)) throw InvalidArgument("EMA decay must lie in [0, 1]");
        check_same_layout(student, teacher);
        if (decay == 1.0) return;
        for (auto& [name, t] : teacher) {
            const Tensor& s = student.at(name);
            for (std::size_t i = 0; i < t.numel(); ++i) t[i] = decay * t[i] + (1.0 - decay) * s[i];
        }
    }

    inline void ema_update(StudentTeacher& pair) { ema_update(pair.student.params(), pair.teacher.params(), pair.ema_decay); }

    struct SgdConfig {
        double learning_rate = 1e-2;
        double momentum = 0.9;
        double weight_decay = 1e-4;
    };

    // Classical momentum SGD, weight decay folded into the gradient:
    //   v <- mu v + (g + wd p);  p <- p - lr v
    class SgdOptimizer {
    public:
        SgdOptimizer() = default;
        explicit SgdOptimizer(SgdConfig config) : config_(config) {}

        const SgdConfig& config() const noexcept { return config_; }
        void set_learning_rate(double lr) { config_.learning_rate = lr; }
        ParamStore& velocity() noexcept { return velocity_; }
        const ParamStore& velocity() const noexcept { return velocity_; }

        void step(ParamStore& params, const ParamStore& grads) {
            check_same_layout(params, grads);
            for (const auto& [name, g] : grads) {
                if (!g.all_finite()) throw NonFiniteGradient("gradient of " + name);
            }
            if (velocity_.empty()) velocity_ = zeros_like(params);
            check_same_layout(params, velocity_);
            for (auto& [name, p] : params) {
                const Tensor& g = grads.at(name);
                Tensor& v = velocity_.at(name);
                for (std::size_t i = 0; i < p.numel(); ++i) {
                    v[i] = config_.momentum * v[i] + (g[i] + config_.weight_decay * p[i]);
                    p[i] -= config_.learning_rate * v[i];
                }
            }
        }

    private:
        SgdConfig config_;
        ParamStore velocity_;
    };

} // namespace actionpp
