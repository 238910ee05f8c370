// SPDX-License-Identifier: Apache-2.0
//
// Differentiable operations over Tensor<T>. Matrix products are delegated to
// Eigen kernels; everything else is written as plain loops.
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "corruptlab/tensor.hpp"

namespace corruptlab {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using VecMap = Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>;

inline bool is_suffix(const Shape& small, const Shape& big) {
    if (small.size() > big.size()) return false;
    return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

inline Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
    if (a == b) return a;
    if (shape_numel(b) == 1 && b.size() <= a.size()) return a;
    if (shape_numel(a) == 1 && a.size() <= b.size()) return b;
    if (is_suffix(b, a)) return a;
    if (is_suffix(a, b)) return b;
    throw ShapeError(std::string("shape mismatch in ") + op + ": " + shape_str(a) + " vs " + shape_str(b));
}

template <typename T>
void require_finite(std::span<const T> xs, const char* op) {
    for (T x : xs) {
        if (!std::isfinite(x)) throw NonFiniteError(std::string("non-finite input to ") + op);
    }
}

}  // namespace detail

enum class BinaryOp { Add, Sub, Mul, Div };

/// Elementwise binary operation with scalar and trailing-dimension broadcast.
template <typename T>
Tensor<T> elementwise(BinaryOp kind, const Tensor<T>& a, const Tensor<T>& b) {
    static constexpr const char* names[] = {"add", "sub", "mul", "div"};
    const char* name = names[static_cast<int>(kind)];
    Shape out_shape = detail::broadcast_shape(name, a.shape(), b.shape());
    const std::size_t n = shape_numel(out_shape);
    const std::size_t na = a.numel();
    const std::size_t nb = b.numel();
    auto av = a.data();
    auto bv = b.data();
    std::vector<T> out(n);
    switch (kind) {
        case BinaryOp::Add:
            for (std::size_t i = 0; i < n; ++i) out[i] = av[i % na] + bv[i % nb];
            break;
        case BinaryOp::Sub:
            for (std::size_t i = 0; i < n; ++i) out[i] = av[i % na] - bv[i % nb];
            break;
        case BinaryOp::Mul:
            for (std::size_t i = 0; i < n; ++i) out[i] = av[i % na] * bv[i % nb];
            break;
        case BinaryOp::Div:
            for (std::size_t i = 0; i < n; ++i) out[i] = av[i % na] / bv[i % nb];
            break;
    }
    return detail::make_result<T>(name, std::move(out_shape), std::move(out), {a.node(), b.node()},
        [kind, n, na, nb](detail::Node<T>& self) {
            auto& pa = *self.parents[0];
            auto& pb = *self.parents[1];
            const auto& g = self.grad;
            if (pa.requires_grad) {
                auto& ga = pa.ensure_grad();
                for (std::size_t i = 0; i < n; ++i) {
                    T d = g[i];
                    if (kind == BinaryOp::Mul) d *= pb.value[i % nb];
                    else if (kind == BinaryOp::Div) d /= pb.value[i % nb];
                    ga[i % na] += d;
                }
            }
            if (pb.requires_grad) {
                auto& gb = pb.ensure_grad();
                for (std::size_t i = 0; i < n; ++i) {
                    T d = g[i];
                    switch (kind) {
                        case BinaryOp::Add: break;
                        case BinaryOp::Sub: d = -d; break;
                        case BinaryOp::Mul: d *= pa.value[i % na]; break;
                        case BinaryOp::Div: {
                            T bb = pb.value[i % nb];
                            d *= -pa.value[i % na] / (bb * bb);
                            break;
                        }
                    }
                    gb[i % nb] += d;
                }
            }
        });
}

template <typename T>
Tensor<T> elementwise(BinaryOp kind, const Tensor<T>& a, T b) {
    return elementwise(kind, a, Tensor<T>::scalar(b));
}

template <typename T> Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(BinaryOp::Add, a, b); }
template <typename T> Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(BinaryOp::Sub, a, b); }
template <typename T> Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(BinaryOp::Mul, a, b); }
template <typename T> Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(BinaryOp::Div, a, b); }
template <typename T> Tensor<T> operator+(const Tensor<T>& a, T b) { return elementwise(BinaryOp::Add, a, b); }
template <typename T> Tensor<T> operator-(const Tensor<T>& a, T b) { return elementwise(BinaryOp::Sub, a, b); }
template <typename T> Tensor<T> operator*(const Tensor<T>& a, T b) { return elementwise(BinaryOp::Mul, a, b); }
template <typename T> Tensor<T> operator/(const Tensor<T>& a, T b) { return elementwise(BinaryOp::Div, a, b); }

/// Sum of all elements, as a scalar.
template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    T acc{0};
    for (T v : x.data()) acc += v;
    return detail::make_result<T>("sum", Shape{}, {acc}, {x.node()}, [](detail::Node<T>& self) {
        auto& gx = self.parents[0]->ensure_grad();
        for (auto& v : gx) v += self.grad[0];
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
    return sum(x) * (T{1} / static_cast<T>(x.numel()));
}

/// Matrix product over the last two dimensions. Leading dimensions are batch
/// dimensions and must match, unless `b` is a plain matrix shared by all.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() < 2 || b.rank() < 2) {
        throw ShapeError("matmul needs rank >= 2 operands, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    const std::size_t m = a.shape()[a.rank() - 2];
    const std::size_t k = a.shape()[a.rank() - 1];
    const std::size_t kb = b.shape()[b.rank() - 2];
    const std::size_t n = b.shape()[b.rank() - 1];
    if (k != kb) {
        throw ShapeError("matmul inner dimension mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    Shape batch_a(a.shape().begin(), a.shape().end() - 2);
    Shape batch_b(b.shape().begin(), b.shape().end() - 2);
    const bool shared_b = batch_b.empty();
    if (!shared_b && batch_a != batch_b) {
        throw ShapeError("matmul batch dimension mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    const std::size_t batches = shape_numel(batch_a);
    Shape out_shape = batch_a;
    out_shape.push_back(m);
    out_shape.push_back(n);
    std::vector<T> out(batches * m * n);
    using detail::ConstMatMap;
    using detail::MatMap;
    if (shared_b) {
        MatMap<T>(out.data(), batches * m, n).noalias() =
            ConstMatMap<T>(a.data().data(), batches * m, k) * ConstMatMap<T>(b.data().data(), k, n);
    } else {
        for (std::size_t s = 0; s < batches; ++s) {
            MatMap<T>(out.data() + s * m * n, m, n).noalias() =
                ConstMatMap<T>(a.data().data() + s * m * k, m, k) * ConstMatMap<T>(b.data().data() + s * k * n, k, n);
        }
    }
    return detail::make_result<T>("matmul", std::move(out_shape), std::move(out), {a.node(), b.node()},
        [=](detail::Node<T>& self) {
            auto& pa = *self.parents[0];
            auto& pb = *self.parents[1];
            const T* g = self.grad.data();
            if (shared_b) {
                ConstMatMap<T> G(g, batches * m, n);
                if (pa.requires_grad)
                    MatMap<T>(pa.ensure_grad().data(), batches * m, k).noalias() +=
                        G * ConstMatMap<T>(pb.value.data(), k, n).transpose();
                if (pb.requires_grad)
                    MatMap<T>(pb.ensure_grad().data(), k, n).noalias() +=
                        ConstMatMap<T>(pa.value.data(), batches * m, k).transpose() * G;
                return;
            }
            for (std::size_t s = 0; s < batches; ++s) {
                ConstMatMap<T> G(g + s * m * n, m, n);
                if (pa.requires_grad)
                    MatMap<T>(pa.ensure_grad().data() + s * m * k, m, k).noalias() +=
                        G * ConstMatMap<T>(pb.value.data() + s * k * n, k, n).transpose();
                if (pb.requires_grad)
                    MatMap<T>(pb.ensure_grad().data() + s * k * n, k, n).noalias() +=
                        ConstMatMap<T>(pa.value.data() + s * m * k, m, k).transpose() * G;
            }
        });
}

/// Affine map y = x·Wᵀ + b over the last dimension. W is stored
/// (out_features × in_features); `bias` may be undefined.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
    if (weight.rank() != 2) throw ShapeError("linear weight must be a matrix, got " + shape_str(weight.shape()));
    const std::size_t out_f = weight.dim(0);
    const std::size_t in_f = weight.dim(1);
    if (x.rank() < 1 || x.shape().back() != in_f) {
        throw ShapeError("linear input " + shape_str(x.shape()) + " does not match weight " + shape_str(weight.shape()));
    }
    const bool has_bias = bias.defined();
    if (has_bias && bias.shape() != Shape{out_f}) {
        throw ShapeError("linear bias " + shape_str(bias.shape()) + " does not match weight " + shape_str(weight.shape()));
    }
    const std::size_t rows = x.numel() / in_f;
    Shape out_shape = x.shape();
    out_shape.back() = out_f;
    std::vector<T> out(rows * out_f);
    using detail::ConstMatMap;
    using detail::MatMap;
    MatMap<T> Y(out.data(), rows, out_f);
    Y.noalias() = ConstMatMap<T>(x.data().data(), rows, in_f) * ConstMatMap<T>(weight.data().data(), out_f, in_f).transpose();
    if (has_bias) Y.rowwise() += detail::VecMap<T>(const_cast<T*>(bias.data().data()), out_f);

    std::vector<std::shared_ptr<detail::Node<T>>> parents{x.node(), weight.node()};
    if (has_bias) parents.push_back(bias.node());
    return detail::make_result<T>("linear", std::move(out_shape), std::move(out), std::move(parents),
        [=](detail::Node<T>& self) {
            auto& px = *self.parents[0];
            auto& pw = *self.parents[1];
            ConstMatMap<T> G(self.grad.data(), rows, out_f);
            if (px.requires_grad)
                MatMap<T>(px.ensure_grad().data(), rows, in_f).noalias() += G * ConstMatMap<T>(pw.value.data(), out_f, in_f);
            if (pw.requires_grad)
                MatMap<T>(pw.ensure_grad().data(), out_f, in_f).noalias() +=
                    G.transpose() * ConstMatMap<T>(px.value.data(), rows, in_f);
            if (has_bias && self.parents[2]->requires_grad) {
                auto& gb = self.parents[2]->ensure_grad();
                detail::VecMap<T>(gb.data(), out_f) += G.colwise().sum();
            }
        });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight) {
    return linear(x, weight, Tensor<T>{});
}

/// Swap the last two dimensions.
template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
    if (x.rank() < 2) throw ShapeError("transpose needs rank >= 2, got " + shape_str(x.shape()));
    const std::size_t r = x.shape()[x.rank() - 2];
    const std::size_t c = x.shape()[x.rank() - 1];
    const std::size_t batches = x.numel() / (r * c);
    Shape out_shape = x.shape();
    std::swap(out_shape[out_shape.size() - 2], out_shape[out_shape.size() - 1]);
    std::vector<T> out(x.numel());
    auto xv = x.data();
    for (std::size_t s = 0; s < batches; ++s)
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) out[s * r * c + j * r + i] = xv[s * r * c + i * c + j];
    return detail::make_result<T>("transpose", std::move(out_shape), std::move(out), {x.node()},
        [=](detail::Node<T>& self) {
            auto& gx = self.parents[0]->ensure_grad();
            for (std::size_t s = 0; s < batches; ++s)
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) gx[s * r * c + i * c + j] += self.grad[s * r * c + j * r + i];
        });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw ShapeError("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
    }
    return detail::make_result<T>("reshape", std::move(shape), x.values(), {x.node()}, [](detail::Node<T>& self) {
        auto& gx = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
    });
}

/// [a, b, c, d] -> [a, c, b, d]; used to move attention heads next to batch.
template <typename T>
Tensor<T> swap_axes12(const Tensor<T>& x) {
    if (x.rank() != 4) throw ShapeError("swap_axes12 needs rank 4, got " + shape_str(x.shape()));
    const auto A = x.dim(0), B = x.dim(1), C = x.dim(2), D = x.dim(3);
    std::vector<T> out(x.numel());
    auto xv = x.data();
    for (std::size_t a = 0; a < A; ++a)
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < C; ++c)
                std::copy_n(&xv[((a * B + b) * C + c) * D], D, &out[((a * C + c) * B + b) * D]);
    return detail::make_result<T>("swap_axes12", Shape{A, C, B, D}, std::move(out), {x.node()},
        [=](detail::Node<T>& self) {
            auto& gx = self.parents[0]->ensure_grad();
            for (std::size_t a = 0; a < A; ++a)
                for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t d = 0; d < D; ++d)
                            gx[((a * B + b) * C + c) * D + d] += self.grad[((a * C + c) * B + b) * D + d];
        });
}

/// Numerically stable softmax along `axis` (max subtraction).
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
    if (axis >= x.rank()) throw ShapeError("softmax axis out of range for " + shape_str(x.shape()));
    for (T v : x.data()) {
        if (std::isnan(v)) throw NonFiniteError("NaN input to softmax");
    }
    const auto& sh = x.shape();
    const std::size_t len = sh[axis];
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= sh[i];
    for (std::size_t i = axis + 1; i < sh.size(); ++i) inner *= sh[i];
    std::vector<T> out(x.numel());
    auto xv = x.data();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, xv[base + j * inner]);
            T total{0};
            for (std::size_t j = 0; j < len; ++j) {
                T e = std::exp(xv[base + j * inner] - mx);
                out[base + j * inner] = e;
                total += e;
            }
            for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= total;
        }
    }
    return detail::make_result<T>("softmax", sh, std::move(out), {x.node()},
        [=](detail::Node<T>& self) {
            auto& gx = self.parents[0]->ensure_grad();
            const auto& y = self.value;
            const auto& g = self.grad;
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t in = 0; in < inner; ++in) {
                    const std::size_t base = o * len * inner + in;
                    T dot{0};
                    for (std::size_t j = 0; j < len; ++j) dot += g[base + j * inner] * y[base + j * inner];
                    for (std::size_t j = 0; j < len; ++j) {
                        const std::size_t idx = base + j * inner;
                        gx[idx] += y[idx] * (g[idx] - dot);
                    }
                }
            }
        });
}

/// GELU, tanh approximation.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    constexpr T c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
    constexpr T k = static_cast<T>(0.044715);
    std::vector<T> out(x.numel());
    auto xv = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        T v = xv[i];
        out[i] = T(0.5) * v * (T(1) + std::tanh(c * (v + k * v * v * v)));
    }
    return detail::make_result<T>("gelu", x.shape(), std::move(out), {x.node()}, [](detail::Node<T>& self) {
        auto& px = *self.parents[0];
        auto& gx = px.ensure_grad();
        for (std::size_t i = 0; i < gx.size(); ++i) {
            T v = px.value[i];
            T t = std::tanh(c * (v + k * v * v * v));
            T d = T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * c * (T(1) + T(3) * k * v * v);
            gx[i] += self.grad[i] * d;
        }
    });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& x) {
    std::vector<T> out(x.numel());
    auto xv = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(xv[i]);
    return detail::make_result<T>("tanh", x.shape(), std::move(out), {x.node()}, [](detail::Node<T>& self) {
        auto& gx = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * (T(1) - self.value[i] * self.value[i]);
    });
}

/// Per-position standardization over the last dimension, then scale and shift.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-12)) {
    const std::size_t d = x.shape().back();
    if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
        throw ShapeError("layer_norm parameters " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                         " do not match input " + shape_str(x.shape()));
    }
    const std::size_t rows = x.numel() / d;
    std::vector<T> out(x.numel());
    std::vector<T> xhat(x.numel());
    std::vector<T> rstd(rows);
    auto xv = x.data();
    auto gv = gamma.data();
    auto bv = beta.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = &xv[r * d];
        T mu{0};
        for (std::size_t j = 0; j < d; ++j) mu += row[j];
        mu /= static_cast<T>(d);
        T var{0};
        for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<T>(d);
        T rs = T(1) / std::sqrt(var + eps);
        rstd[r] = rs;
        for (std::size_t j = 0; j < d; ++j) {
            T h = (row[j] - mu) * rs;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gv[j] + bv[j];
        }
    }
    return detail::make_result<T>("layer_norm", x.shape(), std::move(out), {x.node(), gamma.node(), beta.node()},
        [=, xhat = std::move(xhat), rstd = std::move(rstd)](detail::Node<T>& self) {
            auto& px = *self.parents[0];
            auto& pg = *self.parents[1];
            auto& pb = *self.parents[2];
            const auto& g = self.grad;
            if (pg.requires_grad || pb.requires_grad) {
                auto* gg = pg.requires_grad ? pg.ensure_grad().data() : nullptr;
                auto* gb = pb.requires_grad ? pb.ensure_grad().data() : nullptr;
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < d; ++j) {
                        if (gg) gg[j] += g[r * d + j] * xhat[r * d + j];
                        if (gb) gb[j] += g[r * d + j];
                    }
            }
            if (px.requires_grad) {
                auto& gx = px.ensure_grad();
                for (std::size_t r = 0; r < rows; ++r) {
                    T mean_dh{0}, mean_dh_h{0};
                    for (std::size_t j = 0; j < d; ++j) {
                        T dh = g[r * d + j] * pg.value[j];
                        mean_dh += dh;
                        mean_dh_h += dh * xhat[r * d + j];
                    }
                    mean_dh /= static_cast<T>(d);
                    mean_dh_h /= static_cast<T>(d);
                    for (std::size_t j = 0; j < d; ++j) {
                        T dh = g[r * d + j] * pg.value[j];
                        gx[r * d + j] += rstd[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
                    }
                }
            }
        });
}

/// Inverted dropout; identity when `p` is zero.
template <typename T, typename Rng>
Tensor<T> dropout(const Tensor<T>& x, double p, Rng& rng) {
    if (p <= 0.0) return x;
    if (p >= 1.0) throw ValidationError("dropout rate must be < 1");
    std::bernoulli_distribution keep(1.0 - p);
    const T scale = static_cast<T>(1.0 / (1.0 - p));
    std::vector<T> mask(x.numel());
    for (auto& m : mask) m = keep(rng) ? scale : T{0};
    return x * Tensor<T>(x.shape(), std::move(mask));
}

/// Row lookup into an embedding table [V, H] -> [ids.size(), H].
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> ids) {
    if (table.rank() != 2) throw ShapeError("embedding table must be a matrix");
    const std::size_t vocab = table.dim(0), h = table.dim(1);
    std::vector<T> out(ids.size() * h);
    auto tv = table.data();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
            throw ValidationError("embedding id " + std::to_string(ids[i]) + " outside table of " + std::to_string(vocab) + " rows");
        }
        std::copy_n(&tv[static_cast<std::size_t>(ids[i]) * h], h, &out[i * h]);
    }
    std::vector<std::int32_t> saved(ids.begin(), ids.end());
    return detail::make_result<T>("embedding", Shape{ids.size(), h}, std::move(out), {table.node()},
        [h, saved = std::move(saved)](detail::Node<T>& self) {
            auto& gt = self.parents[0]->ensure_grad();
            for (std::size_t i = 0; i < saved.size(); ++i) {
                T* dst = &gt[static_cast<std::size_t>(saved[i]) * h];
                const T* src = &self.grad[i * h];
                for (std::size_t j = 0; j < h; ++j) dst[j] += src[j];
            }
        });
}

/// Adds a large negative constant to attention logits whose key position is
/// padding. `scores` is [B, heads, Tq, Tk]; `key_valid` is B×Tk, row-major.
template <typename T>
Tensor<T> mask_keys(const Tensor<T>& scores, std::span<const std::uint8_t> key_valid, T fill = T(-1e9)) {
    if (scores.rank() != 4) throw ShapeError("mask_keys expects [B, heads, Tq, Tk] scores");
    const auto B = scores.dim(0), A = scores.dim(1), Tq = scores.dim(2), Tk = scores.dim(3);
    if (key_valid.size() != B * Tk) throw ShapeError("mask length does not match attention keys");
    for (std::size_t b = 0; b < B; ++b) {
        if (std::none_of(&key_valid[b * Tk], &key_valid[b * Tk] + Tk, [](auto v) { return v != 0; })) {
            throw ValidationError("attention row with every key masked (sequence " + std::to_string(b) + ")");
        }
    }
    std::vector<T> out(scores.values());
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t a = 0; a < A; ++a)
            for (std::size_t q = 0; q < Tq; ++q)
                for (std::size_t k = 0; k < Tk; ++k)
                    if (!key_valid[b * Tk + k]) out[((b * A + a) * Tq + q) * Tk + k] += fill;
    return detail::make_result<T>("mask_keys", scores.shape(), std::move(out), {scores.node()},
        [](detail::Node<T>& self) {
            auto& gx = self.parents[0]->ensure_grad();
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
        });
}

/// out[b] = Σ_t weights[b, t] · x[b, t]; x is [B, T, H], weights B×T constants.
template <typename T>
Tensor<T> weighted_pool(const Tensor<T>& x, std::span<const T> weights) {
    if (x.rank() != 3) throw ShapeError("weighted_pool expects [B, T, H]");
    const auto B = x.dim(0), Tn = x.dim(1), H = x.dim(2);
    if (weights.size() != B * Tn) throw ShapeError("pooling weights do not match sequence shape");
    std::vector<T> out(B * H, T{0});
    auto xv = x.data();
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t t = 0; t < Tn; ++t) {
            T w = weights[b * Tn + t];
            if (w == T{0}) continue;
            for (std::size_t j = 0; j < H; ++j) out[b * H + j] += w * xv[(b * Tn + t) * H + j];
        }
    std::vector<T> saved(weights.begin(), weights.end());
    return detail::make_result<T>("weighted_pool", Shape{B, H}, std::move(out), {x.node()},
        [=, saved = std::move(saved)](detail::Node<T>& self) {
            auto& gx = self.parents[0]->ensure_grad();
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t t = 0; t < Tn; ++t) {
                    T w = saved[b * Tn + t];
                    if (w == T{0}) continue;
                    for (std::size_t j = 0; j < H; ++j) gx[(b * Tn + t) * H + j] += w * self.grad[b * H + j];
                }
        });
}

/// Selects rows of the matrix view [N, H] of `x` (all leading dims flattened).
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> rows) {
    const std::size_t h = x.shape().back();
    const std::size_t n = x.numel() / h;
    std::vector<T> out(rows.size() * h);
    auto xv = x.data();
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= n) throw ValidationError("row " + std::to_string(rows[i]) + " out of range for " + std::to_string(n) + " rows");
        std::copy_n(&xv[rows[i] * h], h, &out[i * h]);
    }
    std::vector<std::size_t> saved(rows.begin(), rows.end());
    return detail::make_result<T>("gather_rows", Shape{rows.size(), h}, std::move(out), {x.node()},
        [h, saved = std::move(saved)](detail::Node<T>& self) {
            auto& gx = self.parents[0]->ensure_grad();
            for (std::size_t i = 0; i < saved.size(); ++i)
                for (std::size_t j = 0; j < h; ++j) gx[saved[i] * h + j] += self.grad[i * h + j];
        });
}

/// Mean cross-entropy of softmax(logits) against integer targets.
/// logits is [N, C]; targets has N entries.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets) {
    if (logits.rank() != 2) throw ShapeError("cross_entropy expects [N, C] logits, got " + shape_str(logits.shape()));
    const auto N = logits.dim(0), C = logits.dim(1);
    if (targets.size() != N) throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(N) + " rows");
    std::vector<T> probs(N * C);
    auto lv = logits.data();
    T loss{0};
    for (std::size_t i = 0; i < N; ++i) {
        if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= C) throw ValidationError("target class out of range");
        const T* row = &lv[i * C];
        T mx = *std::max_element(row, row + C);
        T total{0};
        for (std::size_t c = 0; c < C; ++c) {
            probs[i * C + c] = std::exp(row[c] - mx);
            total += probs[i * C + c];
        }
        for (std::size_t c = 0; c < C; ++c) probs[i * C + c] /= total;
        loss += -(row[targets[i]] - mx - std::log(total));
    }
    loss /= static_cast<T>(N);
    std::vector<std::int32_t> saved(targets.begin(), targets.end());
    return detail::make_result<T>("cross_entropy", Shape{}, {loss}, {logits.node()},
        [=, probs = std::move(probs), saved = std::move(saved)](detail::Node<T>& self) {
            auto& gx = self.parents[0]->ensure_grad();
            const T scale = self.grad[0] / static_cast<T>(N);
            for (std::size_t i = 0; i < N; ++i)
                for (std::size_t c = 0; c < C; ++c) {
                    T d = probs[i * C + c] - (static_cast<std::int32_t>(c) == saved[i] ? T(1) : T(0));
                    gx[i * C + c] += scale * d;
                }
        });
}

}  // namespace corruptlab
