#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>
#include <utility>
#include <vector>

#include "iseg/autograd.hpp"
#include "iseg/parallel.hpp"
#include "iseg/tensor.hpp"

// Differentiable primitives over (N, C, H, W) tensors. Each op computes its value eagerly and
// records a closure that maps the output gradient onto its inputs.
namespace iseg::ops {

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a.value(), b.value(), "add");
    BasicTensor<T> out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
    return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
        for (auto& p : self.parents) {
            if (!p->requires_grad) continue;
            auto& g = p->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a.value(), b.value(), "mul");
    BasicTensor<T> out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
    return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
            auto& g = pa.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.value[i];
        }
        if (pb.requires_grad) {
            auto& g = pb.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.value[i];
        }
    });
}

template <class T>
Var<T> scale(const Var<T>& a, T factor) {
    BasicTensor<T> out = a.value();
    for (auto& v : out.storage()) v *= factor;
    return make_result<T>(std::move(out), {a}, [factor](Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
    });
}

template <class T>
Var<T> sum(const Var<T>& a) {
    double acc = 0;
    for (T v : a.value().values()) acc += v;
    return make_result<T>(BasicTensor<T>({1}, static_cast<T>(acc)), {a}, [](Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (auto& v : g.storage()) v += self.grad[0];
    });
}

template <class T>
Var<T> relu(const Var<T>& a) {
    BasicTensor<T> out = a.value();
    for (auto& v : out.storage()) v = v > T{0} ? v : T{0};
    return make_result<T>(std::move(out), {a}, [](Node<T>& self) {
        auto& p = *self.parents[0];
        auto& g = p.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (p.value[i] > T{0}) g[i] += self.grad[i];
        }
    });
}

namespace detail {

inline void require_rank4(const Shape& s, const char* what) {
    if (s.size() != 4) throw ShapeError(std::string(what) + ": expected (N,C,H,W), got " + to_string(s));
}

/// C(MxN) += A(MxK) * B(KxN), row-major. Register-blocked: 4 x (2 vectors) accumulator tiles
/// over a fixed k order, so results do not depend on how callers split the work.
template <class T>
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
#if defined(__AVX__)
    constexpr std::size_t kBytes = 32;
#else
    constexpr std::size_t kBytes = 16;
#endif
    typedef T Vec __attribute__((vector_size(kBytes)));
    constexpr std::size_t VL = kBytes / sizeof(T);
    constexpr std::size_t MR = 4;
    constexpr std::size_t NR = 2 * VL;
    const auto load = [](const T* p) {
        Vec v;
        std::memcpy(&v, p, sizeof v);
        return v;
    };
    const auto store = [](T* p, const Vec& v) { std::memcpy(p, &v, sizeof v); };
    const std::size_t n_full = N - N % NR;
    for (std::size_t j0 = 0; j0 < n_full; j0 += NR) {
        std::size_t i0 = 0;
        for (; i0 + MR <= M; i0 += MR) {
            T* c0 = C + i0 * N + j0;
            Vec a00 = load(c0), a01 = load(c0 + VL);
            Vec a10 = load(c0 + N), a11 = load(c0 + N + VL);
            Vec a20 = load(c0 + 2 * N), a21 = load(c0 + 2 * N + VL);
            Vec a30 = load(c0 + 3 * N), a31 = load(c0 + 3 * N + VL);
            const T* ar = A + i0 * K;
            for (std::size_t k = 0; k < K; ++k) {
                const Vec b0 = load(B + k * N + j0), b1 = load(B + k * N + j0 + VL);
                const T x0 = ar[k], x1 = ar[K + k], x2 = ar[2 * K + k], x3 = ar[3 * K + k];
                a00 += x0 * b0;
                a01 += x0 * b1;
                a10 += x1 * b0;
                a11 += x1 * b1;
                a20 += x2 * b0;
                a21 += x2 * b1;
                a30 += x3 * b0;
                a31 += x3 * b1;
            }
            store(c0, a00), store(c0 + VL, a01);
            store(c0 + N, a10), store(c0 + N + VL, a11);
            store(c0 + 2 * N, a20), store(c0 + 2 * N + VL, a21);
            store(c0 + 3 * N, a30), store(c0 + 3 * N + VL, a31);
        }
        for (; i0 < M; ++i0) {
            T* c0 = C + i0 * N + j0;
            Vec a0 = load(c0), a1 = load(c0 + VL);
            for (std::size_t k = 0; k < K; ++k) {
                const T x = A[i0 * K + k];
                a0 += x * load(B + k * N + j0);
                a1 += x * load(B + k * N + j0 + VL);
            }
            store(c0, a0), store(c0 + VL, a1);
        }
    }
    for (std::size_t i = 0; i < M; ++i) {
        for (std::size_t j = n_full; j < N; ++j) {
            T acc = C[i * N + j];
            for (std::size_t k = 0; k < K; ++k) acc += A[i * K + k] * B[k * N + j];
            C[i * N + j] = acc;
        }
    }
}

/// C(MxN) += A(MxK) * B(NxK)^T: dot products of contiguous rows, 4x2 tiles, fixed lane order.
template <class T>
void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
#if defined(__AVX__)
    constexpr std::size_t kBytes = 32;
#else
    constexpr std::size_t kBytes = 16;
#endif
    typedef T Vec __attribute__((vector_size(kBytes)));
    constexpr std::size_t VL = kBytes / sizeof(T);
    const auto load = [](const T* p) {
        Vec v;
        std::memcpy(&v, p, sizeof v);
        return v;
    };
    const auto hsum = [](const Vec& v) {
        T s{0};
        for (std::size_t l = 0; l < VL; ++l) s += v[l];
        return s;
    };
    const std::size_t k_full = K - K % VL;
    const auto tail = [&](std::size_t i, std::size_t j) {
        T s{0};
        for (std::size_t k = k_full; k < K; ++k) s += A[i * K + k] * B[j * K + k];
        return s;
    };
    std::size_t i0 = 0;
    for (; i0 + 4 <= M; i0 += 4) {
        std::size_t j0 = 0;
        for (; j0 + 2 <= N; j0 += 2) {
            Vec s00{}, s01{}, s10{}, s11{}, s20{}, s21{}, s30{}, s31{};
            const T *a0 = A + i0 * K, *a1 = a0 + K, *a2 = a1 + K, *a3 = a2 + K;
            const T *b0 = B + j0 * K, *b1 = b0 + K;
            for (std::size_t k = 0; k < k_full; k += VL) {
                const Vec y0 = load(b0 + k), y1 = load(b1 + k);
                const Vec x0 = load(a0 + k), x1 = load(a1 + k), x2 = load(a2 + k), x3 = load(a3 + k);
                s00 += x0 * y0;
                s01 += x0 * y1;
                s10 += x1 * y0;
                s11 += x1 * y1;
                s20 += x2 * y0;
                s21 += x2 * y1;
                s30 += x3 * y0;
                s31 += x3 * y1;
            }
            C[i0 * N + j0] += hsum(s00) + tail(i0, j0);
            C[i0 * N + j0 + 1] += hsum(s01) + tail(i0, j0 + 1);
            C[(i0 + 1) * N + j0] += hsum(s10) + tail(i0 + 1, j0);
            C[(i0 + 1) * N + j0 + 1] += hsum(s11) + tail(i0 + 1, j0 + 1);
            C[(i0 + 2) * N + j0] += hsum(s20) + tail(i0 + 2, j0);
            C[(i0 + 2) * N + j0 + 1] += hsum(s21) + tail(i0 + 2, j0 + 1);
            C[(i0 + 3) * N + j0] += hsum(s30) + tail(i0 + 3, j0);
            C[(i0 + 3) * N + j0 + 1] += hsum(s31) + tail(i0 + 3, j0 + 1);
        }
        for (; j0 < N; ++j0) {
            for (std::size_t i = i0; i < i0 + 4; ++i) {
                Vec s0{};
                for (std::size_t k = 0; k < k_full; k += VL) s0 += load(A + i * K + k) * load(B + j0 * K + k);
                C[i * N + j0] += hsum(s0) + tail(i, j0);
            }
        }
    }
    for (; i0 < M; ++i0) {
        for (std::size_t j = 0; j < N; ++j) {
            Vec s0{};
            for (std::size_t k = 0; k < k_full; k += VL) s0 += load(A + i0 * K + k) * load(B + j * K + k);
            C[i0 * N + j] += hsum(s0) + tail(i0, j);
        }
    }
}

/// C(KxN) += A^T * B with A (MxK), B (MxN).
template <class T>
void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
    std::vector<T> at(K * M);
    for (std::size_t i = 0; i < M; ++i) {
        for (std::size_t k = 0; k < K; ++k) at[k * M + i] = A[i * K + k];
    }
    gemm_nn(K, N, M, at.data(), B, C);
}

struct ConvGeometry {
    std::size_t cin, h, w, k, stride, pad, oh, ow;
    std::size_t patch() const { return cin * k * k; }
    std::size_t pixels() const { return oh * ow; }
};

/// Output columns [lo, hi) whose input column ox*stride + kx - pad falls inside [0, w).
inline std::pair<std::size_t, std::size_t> valid_span(const ConvGeometry& g, std::size_t kx) {
    std::size_t lo = 0;
    while (lo < g.ow && lo * g.stride + kx < g.pad) ++lo;
    std::size_t hi = g.ow;
    while (hi > lo && (hi - 1) * g.stride + kx >= g.pad + g.w) --hi;
    return {lo, hi};
}

/// Column matrix (patch x pixels) for one image.
template <class T>
void im2col(const T* x, const ConvGeometry& g, T* cols) {
    const std::size_t P = g.pixels();
    for (std::size_t c = 0; c < g.cin; ++c) {
        for (std::size_t ky = 0; ky < g.k; ++ky) {
            for (std::size_t kx = 0; kx < g.k; ++kx) {
                T* row = cols + ((c * g.k + ky) * g.k + kx) * P;
                const auto [lo, hi] = valid_span(g, kx);
                for (std::size_t oy = 0; oy < g.oh; ++oy) {
                    T* out = row + oy * g.ow;
                    const long iy = long(oy * g.stride + ky) - long(g.pad);
                    if (iy < 0 || iy >= long(g.h)) {
                        std::fill(out, out + g.ow, T{0});
                        continue;
                    }
                    const T* src = x + (c * g.h + std::size_t(iy)) * g.w;
                    std::fill(out, out + lo, T{0});
                    if (g.stride == 1) {
                        std::copy(src + lo + kx - g.pad, src + hi + kx - g.pad, out + lo);
                    } else {
                        for (std::size_t ox = lo; ox < hi; ++ox) out[ox] = src[ox * g.stride + kx - g.pad];
                    }
                    std::fill(out + hi, out + g.ow, T{0});
                }
            }
        }
    }
}

template <class T>
void col2im(const T* cols, const ConvGeometry& g, T* dx) {
    const std::size_t P = g.pixels();
    for (std::size_t c = 0; c < g.cin; ++c) {
        for (std::size_t ky = 0; ky < g.k; ++ky) {
            for (std::size_t kx = 0; kx < g.k; ++kx) {
                const T* row = cols + ((c * g.k + ky) * g.k + kx) * P;
                const auto [lo, hi] = valid_span(g, kx);
                for (std::size_t oy = 0; oy < g.oh; ++oy) {
                    const long iy = long(oy * g.stride + ky) - long(g.pad);
                    if (iy < 0 || iy >= long(g.h)) continue;
                    const T* in = row + oy * g.ow;
                    T* dst = dx + (c * g.h + std::size_t(iy)) * g.w;
                    if (g.stride == 1) {
                        T* __restrict d = dst + lo + kx - g.pad;
                        const T* __restrict v = in + lo;
                        for (std::size_t i = 0; i < hi - lo; ++i) d[i] += v[i];
                    } else {
                        for (std::size_t ox = lo; ox < hi; ++ox) dst[ox * g.stride + kx - g.pad] += in[ox];
                    }
                }
            }
        }
    }
}

}  // namespace detail

/// Cross-correlation of x (N,Cin,H,W) with weight (Cout,Cin,k,k) plus bias (Cout).
/// Output spatial size is floor((in + 2*pad - k) / stride) + 1, i.e. ceil(in/stride) for same-style padding.
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, std::size_t stride, std::size_t pad) {
    detail::require_rank4(x.shape(), "conv2d input");
    detail::require_rank4(weight.shape(), "conv2d weight");
    const std::size_t N = x.dim(0), cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t cout = weight.dim(0), k = weight.dim(2);
    if (weight.dim(1) != cin || weight.dim(3) != k) {
        throw ShapeError("conv2d: weight " + to_string(weight.shape()) + " does not match input " + to_string(x.shape()));
    }
    if (bias.shape() != Shape{cout}) throw ShapeError("conv2d: bias shape " + to_string(bias.shape()));
    if (stride == 0 || H + 2 * pad < k || W + 2 * pad < k) throw ShapeError("conv2d: kernel larger than padded input");
    const detail::ConvGeometry g{cin, H, W, k, stride, pad, (H + 2 * pad - k) / stride + 1, (W + 2 * pad - k) / stride + 1};
    const std::size_t P = g.pixels(), K = g.patch();

    BasicTensor<T> out({N, cout, g.oh, g.ow});
    parallel_for(N, [&](std::size_t n) {
        std::vector<T> cols(K * P);
        detail::im2col(x.value().data() + n * cin * H * W, g, cols.data());
        T* o = out.data() + n * cout * P;
        for (std::size_t co = 0; co < cout; ++co) std::fill(o + co * P, o + (co + 1) * P, bias.value()[co]);
        detail::gemm_nn(cout, P, K, weight.value().data(), cols.data(), o);
    });

    return make_result<T>(std::move(out), {x, weight, bias}, [g, N, cout](Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        auto& pb = *self.parents[2];
        const std::size_t P = g.pixels(), K = g.patch(), in_size = g.cin * g.h * g.w;
        const T* dy = self.grad.data();
        if (pb.requires_grad) {
            auto& gb = pb.grad_buffer();
            for (std::size_t co = 0; co < cout; ++co) {
                double acc = 0;
                for (std::size_t n = 0; n < N; ++n) {
                    const T* d = dy + (n * cout + co) * P;
                    for (std::size_t p = 0; p < P; ++p) acc += d[p];
                }
                gb[co] += static_cast<T>(acc);
            }
        }
        if (pw.requires_grad) {
            // Per-sample partials reduced in sample order keep the result thread-count independent.
            std::vector<T> partial(N * cout * K, T{0});
            parallel_for(N, [&](std::size_t n) {
                std::vector<T> cols(K * P);
                detail::im2col(px.value.data() + n * in_size, g, cols.data());
                detail::gemm_nt(cout, K, P, dy + n * cout * P, cols.data(), partial.data() + n * cout * K);
            });
            auto& gw = pw.grad_buffer();
            for (std::size_t n = 0; n < N; ++n) {
                for (std::size_t i = 0; i < cout * K; ++i) gw[i] += partial[n * cout * K + i];
            }
        }
        if (px.requires_grad) {
            auto& gx = px.grad_buffer();
            parallel_for(N, [&](std::size_t n) {
                std::vector<T> dcols(K * P, T{0});
                detail::gemm_tn(cout, P, K, pw.value.data(), dy + n * cout * P, dcols.data());
                detail::col2im(dcols.data(), g, gx.data() + n * in_size);
            });
        }
    });
}

/// Learned scale/shift plus running statistics of one normalization layer.
template <class T>
struct BatchNormState {
    BasicTensor<T> running_mean;
    BasicTensor<T> running_var;
};

enum class Mode { train, eval };

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.9;

/// Per-channel normalization. Training mode uses batch statistics and updates the running
/// estimates (running = 0.9 * running + 0.1 * batch, unbiased variance); eval mode uses the running ones.
template <class T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, BatchNormState<T>& state, Mode mode) {
    detail::require_rank4(x.shape(), "batch_norm");
    const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    if (gamma.shape() != Shape{C} || beta.shape() != Shape{C}) throw ShapeError("batch_norm: scale/shift must be (C)");
    if (mode == Mode::train && N < 2) throw PreconditionError("batch_norm: training mode needs a batch of at least 2");
    const std::size_t count = N * HW;

    std::vector<double> mean(C), inv_std(C);
    if (mode == Mode::train) {
        for (std::size_t c = 0; c < C; ++c) {
            double s = 0;
            for (std::size_t n = 0; n < N; ++n) {
                const T* p = x.value().data() + (n * C + c) * HW;
                for (std::size_t i = 0; i < HW; ++i) s += p[i];
            }
            const double m = s / double(count);
            double v = 0;
            for (std::size_t n = 0; n < N; ++n) {
                const T* p = x.value().data() + (n * C + c) * HW;
                for (std::size_t i = 0; i < HW; ++i) v += (p[i] - m) * (p[i] - m);
            }
            v /= double(count);
            mean[c] = m;
            inv_std[c] = 1.0 / std::sqrt(v + kBatchNormEps);
            const double unbiased = count > 1 ? v * double(count) / double(count - 1) : v;
            state.running_mean[c] =
                static_cast<T>(kBatchNormMomentum * state.running_mean[c] + (1 - kBatchNormMomentum) * m);
            state.running_var[c] =
                static_cast<T>(kBatchNormMomentum * state.running_var[c] + (1 - kBatchNormMomentum) * unbiased);
        }
    } else {
        for (std::size_t c = 0; c < C; ++c) {
            mean[c] = state.running_mean[c];
            inv_std[c] = 1.0 / std::sqrt(double(state.running_var[c]) + kBatchNormEps);
        }
    }

    BasicTensor<T> xhat(x.shape());
    BasicTensor<T> out(x.shape());
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t c = 0; c < C; ++c) {
            const std::size_t off = (n * C + c) * HW;
            const double gm = gamma.value()[c], bt = beta.value()[c];
            for (std::size_t i = 0; i < HW; ++i) {
                const double h = (x.value()[off + i] - mean[c]) * inv_std[c];
                xhat[off + i] = static_cast<T>(h);
                out[off + i] = static_cast<T>(gm * h + bt);
            }
        }
    }

    return make_result<T>(std::move(out), {x, gamma, beta},
                          [xhat = std::move(xhat), inv_std, mode, N, C, HW](Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        const double cnt = double(N * HW);
        for (std::size_t c = 0; c < C; ++c) {
            double sum_dy = 0, sum_dy_xhat = 0;
            for (std::size_t n = 0; n < N; ++n) {
                const std::size_t off = (n * C + c) * HW;
                for (std::size_t i = 0; i < HW; ++i) {
                    sum_dy += self.grad[off + i];
                    sum_dy_xhat += double(self.grad[off + i]) * xhat[off + i];
                }
            }
            if (pg.requires_grad) pg.grad_buffer()[c] += static_cast<T>(sum_dy_xhat);
            if (pb.requires_grad) pb.grad_buffer()[c] += static_cast<T>(sum_dy);
            if (!px.requires_grad) continue;
            auto& gx = px.grad_buffer();
            const double k = double(pg.value[c]) * inv_std[c];
            for (std::size_t n = 0; n < N; ++n) {
                const std::size_t off = (n * C + c) * HW;
                for (std::size_t i = 0; i < HW; ++i) {
                    double d = self.grad[off + i];
                    if (mode == Mode::train) d -= (sum_dy + double(xhat[off + i]) * sum_dy_xhat) / cnt;
                    gx[off + i] += static_cast<T>(k * d);
                }
            }
        }
    });
}

template <class T>
Var<T> upsample_nearest2x(const Var<T>& x) {
    detail::require_rank4(x.shape(), "upsample_nearest2x");
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    BasicTensor<T> out({N, C, 2 * H, 2 * W});
    for (std::size_t nc = 0; nc < N * C; ++nc) {
        const T* src = x.value().data() + nc * H * W;
        T* dst = out.data() + nc * 4 * H * W;
        for (std::size_t y = 0; y < 2 * H; ++y) {
            for (std::size_t xx = 0; xx < 2 * W; ++xx) dst[y * 2 * W + xx] = src[(y / 2) * W + xx / 2];
        }
    }
    return make_result<T>(std::move(out), {x}, [N, C, H, W](Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t nc = 0; nc < N * C; ++nc) {
            const T* src = self.grad.data() + nc * 4 * H * W;
            T* dst = g.data() + nc * H * W;
            for (std::size_t y = 0; y < 2 * H; ++y) {
                for (std::size_t xx = 0; xx < 2 * W; ++xx) dst[(y / 2) * W + xx / 2] += src[y * 2 * W + xx];
            }
        }
    });
}

/// Concatenation along the channel axis of (N, C_i, H, W) tensors.
template <class T>
Var<T> concat_channels(const std::vector<Var<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_channels: no inputs");
    if (parts.size() == 1) return parts.front();
    const Shape& s0 = parts.front().shape();
    detail::require_rank4(s0, "concat_channels");
    std::size_t total = 0;
    std::vector<std::size_t> channels;
    for (const auto& p : parts) {
        detail::require_rank4(p.shape(), "concat_channels");
        if (p.dim(0) != s0[0] || p.dim(2) != s0[2] || p.dim(3) != s0[3]) {
            throw ShapeError("concat_channels: " + to_string(p.shape()) + " incompatible with " + to_string(s0));
        }
        channels.push_back(p.dim(1));
        total += p.dim(1);
    }
    const std::size_t N = s0[0], HW = s0[2] * s0[3];
    BasicTensor<T> out({N, total, s0[2], s0[3]});
    for (std::size_t n = 0; n < N; ++n) {
        std::size_t c0 = 0;
        for (std::size_t i = 0; i < parts.size(); ++i) {
            const T* src = parts[i].value().data() + n * channels[i] * HW;
            std::copy(src, src + channels[i] * HW, out.data() + (n * total + c0) * HW);
            c0 += channels[i];
        }
    }
    return make_result<T>(std::move(out), parts, [channels, N, total, HW](Node<T>& self) {
        std::size_t c0 = 0;
        for (std::size_t i = 0; i < self.parents.size(); ++i) {
            auto& p = *self.parents[i];
            if (p.requires_grad) {
                auto& g = p.grad_buffer();
                for (std::size_t n = 0; n < N; ++n) {
                    const T* src = self.grad.data() + (n * total + c0) * HW;
                    T* dst = g.data() + n * channels[i] * HW;
                    for (std::size_t j = 0; j < channels[i] * HW; ++j) dst[j] += src[j];
                }
            }
            c0 += channels[i];
        }
    });
}

/// Numerically stable softmax over the channel axis of an (N, C, H, W) tensor.
template <class T>
BasicTensor<T> softmax_channel_values(const BasicTensor<T>& x) {
    detail::require_rank4(x.shape(), "softmax_channel");
    const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    BasicTensor<T> out(x.shape());
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t i = 0; i < HW; ++i) {
            double mx = x[(n * C) * HW + i];
            for (std::size_t c = 1; c < C; ++c) mx = std::max<double>(mx, x[(n * C + c) * HW + i]);
            double z = 0;
            for (std::size_t c = 0; c < C; ++c) z += std::exp(double(x[(n * C + c) * HW + i]) - mx);
            for (std::size_t c = 0; c < C; ++c) {
                out[(n * C + c) * HW + i] = static_cast<T>(std::exp(double(x[(n * C + c) * HW + i]) - mx) / z);
            }
        }
    }
    return out;
}

template <class T>
Var<T> softmax_channel(const Var<T>& x) {
    BasicTensor<T> p = softmax_channel_values(x.value());
    const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    BasicTensor<T> saved = p;
    return make_result<T>(std::move(p), {x}, [saved = std::move(saved), N, C, HW](Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t n = 0; n < N; ++n) {
            for (std::size_t i = 0; i < HW; ++i) {
                double dot = 0;
                for (std::size_t c = 0; c < C; ++c) {
                    const std::size_t k = (n * C + c) * HW + i;
                    dot += double(self.grad[k]) * saved[k];
                }
                for (std::size_t c = 0; c < C; ++c) {
                    const std::size_t k = (n * C + c) * HW + i;
                    g[k] += static_cast<T>(saved[k] * (double(self.grad[k]) - dot));
                }
            }
        }
    });
}

}  // namespace iseg::ops
