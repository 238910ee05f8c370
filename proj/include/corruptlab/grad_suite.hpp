// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference checks of every differentiable op and of a small
// encoder, in double precision with dropout off.
#pragma once

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "corruptlab/grad_check.hpp"
#include "corruptlab/model.hpp"
#include "corruptlab/ops.hpp"
#include "corruptlab/rng.hpp"

namespace corruptlab {

struct GradSuiteEntry {
    std::string name;
    GradCheckReport report;
};

namespace detail {

struct SuiteBuilder {
    Rng rng;
    GradCheckOptions opts;
    std::vector<GradSuiteEntry> out;

    Tensor<double> random(Shape s, bool grad = true, double lo = -1.0, double hi = 1.0) {
        std::uniform_real_distribution<double> u(lo, hi);
        std::vector<double> v(shape_numel(s));
        for (auto& x : v) x = u(rng);
        return Tensor<double>(std::move(s), std::move(v), grad);
    }

    /// sum(f(inputs) ⊙ R) with a fixed random R, so every output element
    /// carries a distinct O(1) upstream gradient.
    void check(const std::string& name, std::vector<NamedTensor<double>> inputs,
               const std::function<Tensor<double>(std::vector<NamedTensor<double>>&)>& f) {
        auto probe = f(inputs);
        auto R = random(probe.shape(), false);
        auto build = [&] { return sum(f(inputs) * R); };
        out.push_back({name, grad_check(build, inputs, opts)});
    }

    void check_scalar(const std::string& name, std::vector<NamedTensor<double>> inputs,
                      const std::function<Tensor<double>(std::vector<NamedTensor<double>>&)>& f) {
        auto build = [&] { return f(inputs); };
        out.push_back({name, grad_check(build, inputs, opts)});
    }
};

inline Batch suite_batch() {
    // two rows, the second padded after position 4; segment ids exercise the pair path
    Batch b;
    b.size = 2;
    b.length = 6;
    b.ids = {2, 7, 9, 3, 11, 3, 2, 8, 6, 3, 0, 0};
    b.segments = {0, 0, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0};
    b.mask = {1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0};
    return b;
}

}  // namespace detail

/// Configuration of the encoder-level check: 2 layers, H=8.
inline ModelConfig grad_suite_model_config() {
    ModelConfig c;
    c.name = "gradcheck";
    c.num_layers = 2;
    c.hidden = 8;
    c.heads = 2;
    c.ffn_multiplier = 2;
    c.max_len = 8;
    c.vocab_size = 12;
    c.num_classes = 3;
    c.dropout = 0.0;
    return c;
}

inline std::vector<GradSuiteEntry> gradient_suite(std::uint64_t seed = 0, GradCheckOptions opts = {1e-3, 1e-4, Stencil::Central4}) {
    detail::SuiteBuilder s{Rng(derive_seed(seed, "gradient_suite")), opts, {}};
    using In = std::vector<NamedTensor<double>>;
    auto T = [&](const char* n, Shape sh, double lo = -1.0, double hi = 1.0) { return NamedTensor<double>{n, s.random(std::move(sh), true, lo, hi)}; };

    s.check("add", In{T("a", {3, 4}), T("b", {3, 4})}, [](In& p) { return p[0].tensor + p[1].tensor; });
    s.check("add_broadcast", In{T("a", {2, 3, 4}), T("b", {4})}, [](In& p) { return p[0].tensor + p[1].tensor; });
    s.check("sub", In{T("a", {3, 4}), T("b", {3, 4})}, [](In& p) { return p[0].tensor - p[1].tensor; });
    s.check("sub_broadcast", In{T("a", {2, 3, 4}), T("b", {3, 4})}, [](In& p) { return p[0].tensor - p[1].tensor; });
    s.check("mul", In{T("a", {3, 4}), T("b", {3, 4})}, [](In& p) { return p[0].tensor * p[1].tensor; });
    s.check("mul_broadcast", In{T("a", {2, 3, 4}), T("b", {1})}, [](In& p) { return p[0].tensor * p[1].tensor; });
    s.check("div", In{T("a", {3, 4}), T("b", {3, 4}, 0.5, 2.0)}, [](In& p) { return p[0].tensor / p[1].tensor; });
    s.check("div_broadcast", In{T("a", {2, 3, 4}), T("b", {4}, 0.5, 2.0)}, [](In& p) { return p[0].tensor / p[1].tensor; });
    s.check("scalar_ops", In{T("a", {3, 4})}, [](In& p) { return ((p[0].tensor + 0.5) * 3.0 - 1.0) / 2.0; });
    s.check_scalar("sum", In{T("a", {3, 4})}, [](In& p) { return sum(p[0].tensor * p[0].tensor); });
    s.check_scalar("mean", In{T("a", {3, 4})}, [](In& p) { return mean(p[0].tensor * p[0].tensor); });
    s.check("matmul", In{T("a", {3, 5}), T("b", {5, 4})}, [](In& p) { return matmul(p[0].tensor, p[1].tensor); });
    s.check("matmul_batched", In{T("a", {2, 3, 5}), T("b", {2, 5, 4})}, [](In& p) { return matmul(p[0].tensor, p[1].tensor); });
    s.check("matmul_shared_rhs", In{T("a", {2, 3, 5}), T("b", {5, 4})}, [](In& p) { return matmul(p[0].tensor, p[1].tensor); });
    s.check("linear", In{T("x", {2, 3, 5}), T("w", {4, 5}), T("b", {4})},
            [](In& p) { return linear(p[0].tensor, p[1].tensor, p[2].tensor); });
    s.check("linear_nobias", In{T("x", {3, 5}), T("w", {4, 5})}, [](In& p) { return linear(p[0].tensor, p[1].tensor); });
    s.check("transpose", In{T("a", {2, 3, 4})}, [](In& p) { return transpose(p[0].tensor); });
    s.check("reshape", In{T("a", {2, 3, 4})}, [](In& p) { return reshape(p[0].tensor, {6, 4}); });
    s.check("swap_axes12", In{T("a", {2, 3, 4, 5})}, [](In& p) { return swap_axes12(p[0].tensor); });
    s.check("softmax_last", In{T("a", {2, 3, 4}, -2.0, 2.0)}, [](In& p) { return softmax(p[0].tensor, 2); });
    s.check("softmax_inner", In{T("a", {2, 3, 4}, -2.0, 2.0)}, [](In& p) { return softmax(p[0].tensor, 1); });
    s.check("gelu", In{T("a", {3, 4}, -3.0, 3.0)}, [](In& p) { return gelu(p[0].tensor); });
    s.check("tanh", In{T("a", {3, 4}, -2.0, 2.0)}, [](In& p) { return tanh(p[0].tensor); });
    s.check("layer_norm", In{T("x", {2, 3, 6}, -2.0, 2.0), T("gamma", {6}, 0.5, 1.5), T("beta", {6})},
            [](In& p) { return layer_norm(p[0].tensor, p[1].tensor, p[2].tensor); });
    s.check("dropout_fixed_mask", In{T("a", {4, 5})}, [](In& p) {
        Rng r(17);  // same mask on every evaluation
        return dropout(p[0].tensor, 0.3, r);
    });
    s.check("embedding", In{T("table", {6, 4})}, [](In& p) {
        const std::int32_t ids[] = {1, 4, 1, 0, 5};
        return embedding(p[0].tensor, std::span<const std::int32_t>(ids));
    });
    s.check("mask_keys", In{T("scores", {1, 2, 3, 4})}, [](In& p) {
        const std::uint8_t valid[] = {1, 1, 0, 1};
        return softmax(mask_keys(p[0].tensor, std::span<const std::uint8_t>(valid)), 3);
    });
    s.check("weighted_pool", In{T("x", {2, 3, 4})}, [](In& p) {
        const double w[] = {1.0, 0.0, 0.0, 0.0, 0.5, 0.5};
        return weighted_pool(p[0].tensor, std::span<const double>(w));
    });
    s.check("gather_rows", In{T("x", {2, 3, 4})}, [](In& p) {
        const std::size_t rows[] = {4, 0, 4, 2};
        return gather_rows(p[0].tensor, std::span<const std::size_t>(rows));
    });
    s.check_scalar("cross_entropy", In{T("logits", {4, 5}, -2.0, 2.0)}, [](In& p) {
        const std::int32_t y[] = {0, 3, 4, 3};
        return cross_entropy(p[0].tensor, std::span<const std::int32_t>(y));
    });

    // Full encoder: classification through [CLS] plus a masked-token loss so
    // every parameter, including both heads, receives gradient.
    EncoderModel<double> model(grad_suite_model_config());
    Rng init(derive_seed(seed, "gradient_suite_model"));
    model.init_weights(init, 0.5);
    for (auto& p : model.params()) {
        if (p.name.ends_with(".bias")) {
            std::uniform_real_distribution<double> u(-0.2, 0.2);
            for (auto& v : p.tensor.data()) v = u(init);
        }
    }
    const Batch batch = detail::suite_batch();
    const std::int32_t cls_targets[] = {2, 0};
    const std::size_t mlm_positions[] = {1, 4, 8};
    const std::int32_t mlm_targets[] = {7, 11, 6};
    auto encoder_loss = [&](Pooling pooling) {
        return [&, pooling] {
            auto hidden = forward(model, batch);
            auto cls = cross_entropy(classify(model, pool(hidden, batch, pooling)), std::span<const std::int32_t>(cls_targets));
            auto mlm = cross_entropy(mlm_logits(model, hidden, std::span<const std::size_t>(mlm_positions)),
                                     std::span<const std::int32_t>(mlm_targets));
            return cls + mlm;
        };
    };
    s.out.push_back({"encoder_cls", grad_check(encoder_loss(Pooling::Cls), model.params(), opts)});
    s.out.push_back({"encoder_mean", grad_check(encoder_loss(Pooling::MeanNonCls), model.params(), opts)});
    return s.out;
}

}  // namespace corruptlab
