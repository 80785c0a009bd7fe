#include "epnet/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace epnet::kern {

namespace {
// Parallelizing tiny loops costs more than it saves.
constexpr int64_t kOmpMin = 1 << 12;
}  // namespace

template <class T>
void conv2d_forward(const T* x, const T* w, const T* bias, T* y, const Conv2dDims& d) {
    const int64_t work = d.n * d.cout * d.ho * d.wo;
#pragma omp parallel for collapse(2) if (work > kOmpMin)
    for (int64_t n = 0; n < d.n; ++n) {
        for (int64_t co = 0; co < d.cout; ++co) {
            const T* wc = w + co * d.cin * d.kh * d.kw;
            T* yc = y + (n * d.cout + co) * d.ho * d.wo;
            const T b = bias ? bias[co] : T(0);
            for (int64_t oy = 0; oy < d.ho; ++oy) {
                for (int64_t ox = 0; ox < d.wo; ++ox) {
                    T acc = b;
                    for (int64_t ci = 0; ci < d.cin; ++ci) {
                        const T* xc = x + (n * d.cin + ci) * d.h * d.w;
                        const T* wk = wc + ci * d.kh * d.kw;
                        for (int64_t ky = 0; ky < d.kh; ++ky) {
                            const int64_t iy = oy * d.stride + ky - d.ph;
                            if (iy < 0 || iy >= d.h) continue;
                            for (int64_t kx = 0; kx < d.kw; ++kx) {
                                const int64_t ix = ox * d.stride + kx - d.pw;
                                if (ix < 0 || ix >= d.w) continue;
                                acc += xc[iy * d.w + ix] * wk[ky * d.kw + kx];
                            }
                        }
                    }
                    yc[oy * d.wo + ox] = acc;
                }
            }
        }
    }
}

template <class T>
void conv2d_backward_input(const T* gy, const T* w, T* gx, const Conv2dDims& d) {
    // Gather form: each input element sums the output positions it fed.
    const int64_t work = d.n * d.cin * d.h * d.w;
#pragma omp parallel for collapse(2) if (work > kOmpMin)
    for (int64_t n = 0; n < d.n; ++n) {
        for (int64_t ci = 0; ci < d.cin; ++ci) {
            T* gxc = gx + (n * d.cin + ci) * d.h * d.w;
            for (int64_t iy = 0; iy < d.h; ++iy) {
                for (int64_t ix = 0; ix < d.w; ++ix) {
                    T acc = 0;
                    for (int64_t ky = 0; ky < d.kh; ++ky) {
                        const int64_t ty = iy + d.ph - ky;
                        if (ty < 0 || ty % d.stride != 0) continue;
                        const int64_t oy = ty / d.stride;
                        if (oy >= d.ho) continue;
                        for (int64_t kx = 0; kx < d.kw; ++kx) {
                            const int64_t tx = ix + d.pw - kx;
                            if (tx < 0 || tx % d.stride != 0) continue;
                            const int64_t ox = tx / d.stride;
                            if (ox >= d.wo) continue;
                            for (int64_t co = 0; co < d.cout; ++co) {
                                acc += gy[((n * d.cout + co) * d.ho + oy) * d.wo + ox] *
                                       w[((co * d.cin + ci) * d.kh + ky) * d.kw + kx];
                            }
                        }
                    }
                    gxc[iy * d.w + ix] += acc;
                }
            }
        }
    }
}

template <class T>
void conv2d_backward_weight(const T* x, const T* gy, T* gw, const Conv2dDims& d) {
    const int64_t taps = d.cout * d.cin * d.kh * d.kw;
#pragma omp parallel for if (taps > 64)
    for (int64_t t = 0; t < taps; ++t) {
        const int64_t kx = t % d.kw;
        const int64_t ky = (t / d.kw) % d.kh;
        const int64_t ci = (t / (d.kw * d.kh)) % d.cin;
        const int64_t co = t / (d.kw * d.kh * d.cin);
        T acc = 0;
        for (int64_t n = 0; n < d.n; ++n) {
            const T* xc = x + (n * d.cin + ci) * d.h * d.w;
            const T* gc = gy + (n * d.cout + co) * d.ho * d.wo;
            for (int64_t oy = 0; oy < d.ho; ++oy) {
                const int64_t iy = oy * d.stride + ky - d.ph;
                if (iy < 0 || iy >= d.h) continue;
                for (int64_t ox = 0; ox < d.wo; ++ox) {
                    const int64_t ix = ox * d.stride + kx - d.pw;
                    if (ix < 0 || ix >= d.w) continue;
                    acc += xc[iy * d.w + ix] * gc[oy * d.wo + ox];
                }
            }
        }
        gw[t] += acc;
    }
}

template <class T>
void conv2d_backward_bias(const T* gy, T* gb, const Conv2dDims& d) {
#pragma omp parallel for if (d.cout > 8)
    for (int64_t co = 0; co < d.cout; ++co) {
        T acc = 0;
        for (int64_t n = 0; n < d.n; ++n) {
            const T* gc = gy + (n * d.cout + co) * d.ho * d.wo;
            for (int64_t i = 0; i < d.ho * d.wo; ++i) acc += gc[i];
        }
        gb[co] += acc;
    }
}

template <class T>
void channel_conv1d_forward(const T* x, const T* w, T* y, int64_t n, int64_t c, int64_t hw,
                            int64_t k) {
    const int64_t off = k / 2;
    for (int64_t b = 0; b < n; ++b) {
        for (int64_t ci = 0; ci < c; ++ci) {
            for (int64_t p = 0; p < hw; ++p) {
                T acc = 0;
                for (int64_t j = 0; j < k; ++j) {
                    const int64_t src = ci + j - off;
                    if (src < 0 || src >= c) continue;
                    acc += w[j] * x[(b * c + src) * hw + p];
                }
                y[(b * c + ci) * hw + p] = acc;
            }
        }
    }
}

template <class T>
void channel_conv1d_backward(const T* x, const T* w, const T* gy, T* gx, T* gw, int64_t n,
                             int64_t c, int64_t hw, int64_t k) {
    const int64_t off = k / 2;
    for (int64_t b = 0; b < n; ++b) {
        for (int64_t ci = 0; ci < c; ++ci) {
            for (int64_t p = 0; p < hw; ++p) {
                const T g = gy[(b * c + ci) * hw + p];
                for (int64_t j = 0; j < k; ++j) {
                    const int64_t src = ci + j - off;
                    if (src < 0 || src >= c) continue;
                    if (gx) gx[(b * c + src) * hw + p] += w[j] * g;
                    if (gw) gw[j] += x[(b * c + src) * hw + p] * g;
                }
            }
        }
    }
}

template <class T>
void binary_forward(BinOp op, const T* a, const T* b, T* y, const int64_t a_dims[4],
                    const int64_t b_strides[4]) {
    const int64_t N = a_dims[0], C = a_dims[1], H = a_dims[2], W = a_dims[3];
    const int64_t total = N * C * H * W;
#pragma omp parallel for collapse(2) if (total > kOmpMin)
    for (int64_t n = 0; n < N; ++n) {
        for (int64_t c = 0; c < C; ++c) {
            const int64_t base_b = n * b_strides[0] + c * b_strides[1];
            const int64_t base_a = (n * C + c) * H * W;
            for (int64_t h = 0; h < H; ++h) {
                for (int64_t w = 0; w < W; ++w) {
                    const int64_t ia = base_a + h * W + w;
                    const int64_t ib = base_b + h * b_strides[2] + w * b_strides[3];
                    switch (op) {
                        case BinOp::add: y[ia] = a[ia] + b[ib]; break;
                        case BinOp::sub: y[ia] = a[ia] - b[ib]; break;
                        case BinOp::mul: y[ia] = a[ia] * b[ib]; break;
                    }
                }
            }
        }
    }
}

template <class T>
void reduce_to_shape(const T* g, T* out, const int64_t a_dims[4], const int64_t b_dims[4]) {
    const int64_t bn = b_dims[0], bc = b_dims[1], bh = b_dims[2], bw = b_dims[3];
    const int64_t rn = a_dims[0] / bn, rc = a_dims[1] / bc, rh = a_dims[2] / bh,
                  rw = a_dims[3] / bw;
    const int64_t targets = bn * bc * bh * bw;
#pragma omp parallel for if (targets > 64 && a_dims[0] * a_dims[1] * a_dims[2] * a_dims[3] > kOmpMin)
    for (int64_t t = 0; t < targets; ++t) {
        const int64_t w0 = t % bw;
        const int64_t h0 = (t / bw) % bh;
        const int64_t c0 = (t / (bw * bh)) % bc;
        const int64_t n0 = t / (bw * bh * bc);
        T acc = 0;
        for (int64_t n = 0; n < rn; ++n)
            for (int64_t c = 0; c < rc; ++c)
                for (int64_t h = 0; h < rh; ++h)
                    for (int64_t w = 0; w < rw; ++w) {
                        const int64_t idx =
                            (((n0 * rn + n) * a_dims[1] + (c0 * rc + c)) * a_dims[2] +
                             (h0 * rh + h)) * a_dims[3] +
                            (w0 * rw + w);
                        acc += g[idx];
                    }
        out[t] += acc;
    }
}

template <class T>
void scale_add(T* dst, const T* src, T k, int64_t count) {
#pragma omp parallel for if (count > kOmpMin)
    for (int64_t i = 0; i < count; ++i) dst[i] += k * src[i];
}

template <class T>
void scale_add_mul(T* dst, const T* src, const T* other, int64_t count) {
#pragma omp parallel for if (count > kOmpMin)
    for (int64_t i = 0; i < count; ++i) dst[i] += src[i] * other[i];
}

template <class T>
void scale_add_mul_bcast(T* dst, const T* src, const T* other, const int64_t dims[4],
                         const int64_t o_strides[4]) {
    const int64_t N = dims[0], C = dims[1], H = dims[2], W = dims[3];
#pragma omp parallel for collapse(2) if (N * C * H * W > kOmpMin)
    for (int64_t n = 0; n < N; ++n) {
        for (int64_t c = 0; c < C; ++c) {
            const int64_t base_o = n * o_strides[0] + c * o_strides[1];
            const int64_t base = (n * C + c) * H * W;
            for (int64_t h = 0; h < H; ++h)
                for (int64_t w = 0; w < W; ++w)
                    dst[base + h * W + w] +=
                        src[base + h * W + w] * other[base_o + h * o_strides[2] + w * o_strides[3]];
        }
    }
}

template <class T>
void relu_forward(const T* x, T* y, int64_t count) {
#pragma omp parallel for if (count > kOmpMin)
    for (int64_t i = 0; i < count; ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
}

template <class T>
void relu_backward(const T* x, const T* gy, T* gx, int64_t count) {
#pragma omp parallel for if (count > kOmpMin)
    for (int64_t i = 0; i < count; ++i)
        if (x[i] > T(0)) gx[i] += gy[i];
}

// GELU, tanh form: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3))).
template <class T>
void gelu_forward(const T* x, T* y, int64_t count) {
    const T c0 = T(0.7978845608028654);  // sqrt(2/pi)
    const T c1 = T(0.044715);
#pragma omp parallel for if (count > kOmpMin)
    for (int64_t i = 0; i < count; ++i) {
        const T v = x[i];
        y[i] = T(0.5) * v * (T(1) + std::tanh(c0 * (v + c1 * v * v * v)));
    }
}

template <class T>
void gelu_backward(const T* x, const T* gy, T* gx, int64_t count) {
    const T c0 = T(0.7978845608028654);
    const T c1 = T(0.044715);
#pragma omp parallel for if (count > kOmpMin)
    for (int64_t i = 0; i < count; ++i) {
        const T v = x[i];
        const T u = c0 * (v + c1 * v * v * v);
        const T t = std::tanh(u);
        const T du = c0 * (T(1) + T(3) * c1 * v * v);
        gx[i] += gy[i] * (T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * du);
    }
}

template <class T>
void sigmoid_forward(const T* x, T* y, int64_t count) {
#pragma omp parallel for if (count > kOmpMin)
    for (int64_t i = 0; i < count; ++i) y[i] = T(1) / (T(1) + std::exp(-x[i]));
}

template <class T>
void sigmoid_backward(const T* y, const T* gy, T* gx, int64_t count) {
#pragma omp parallel for if (count > kOmpMin)
    for (int64_t i = 0; i < count; ++i) gx[i] += gy[i] * y[i] * (T(1) - y[i]);
}

template <class T>
void global_avg_forward(const T* x, T* y, int64_t n, int64_t c, int64_t hw) {
#pragma omp parallel for if (n * c > 16 && n * c * hw > kOmpMin)
    for (int64_t i = 0; i < n * c; ++i) {
        T acc = 0;
        for (int64_t p = 0; p < hw; ++p) acc += x[i * hw + p];
        y[i] = acc / T(hw);
    }
}

template <class T>
void global_avg_backward(const T* gy, T* gx, int64_t n, int64_t c, int64_t hw) {
#pragma omp parallel for if (n * c * hw > kOmpMin)
    for (int64_t i = 0; i < n * c; ++i) {
        const T g = gy[i] / T(hw);
        for (int64_t p = 0; p < hw; ++p) gx[i * hw + p] += g;
    }
}

template <class T>
void max_pool_forward(const T* x, T* y, int64_t* argmax, const Pool2dDims& d) {
#pragma omp parallel for if (d.n * d.c > 8)
    for (int64_t i = 0; i < d.n * d.c; ++i) {
        const T* xc = x + i * d.h * d.w;
        T* yc = y + i * d.ho * d.wo;
        int64_t* ac = argmax + i * d.ho * d.wo;
        for (int64_t oy = 0; oy < d.ho; ++oy) {
            for (int64_t ox = 0; ox < d.wo; ++ox) {
                T best = -std::numeric_limits<T>::infinity();
                int64_t best_idx = -1;
                for (int64_t ky = 0; ky < d.kernel; ++ky) {
                    const int64_t iy = oy * d.stride + ky;
                    if (iy >= d.h) break;
                    for (int64_t kx = 0; kx < d.kernel; ++kx) {
                        const int64_t ix = ox * d.stride + kx;
                        if (ix >= d.w) break;
                        const T v = xc[iy * d.w + ix];
                        if (v > best) {  // strict: first maximum wins ties
                            best = v;
                            best_idx = iy * d.w + ix;
                        }
                    }
                }
                yc[oy * d.wo + ox] = best;
                ac[oy * d.wo + ox] = best_idx;
            }
        }
    }
}

template <class T>
void max_pool_backward(const T* gy, const int64_t* argmax, T* gx, const Pool2dDims& d) {
    // Serial scatter: overlapping windows may route to the same element.
    for (int64_t i = 0; i < d.n * d.c; ++i) {
        const T* gc = gy + i * d.ho * d.wo;
        const int64_t* ac = argmax + i * d.ho * d.wo;
        T* gxc = gx + i * d.h * d.w;
        for (int64_t o = 0; o < d.ho * d.wo; ++o) gxc[ac[o]] += gc[o];
    }
}

template <class T>
void pixel_shuffle_forward(const T* x, T* y, int64_t n, int64_t c_out, int64_t r, int64_t h,
                           int64_t w) {
    const int64_t total = n * c_out * h * r * w * r;
#pragma omp parallel for collapse(2) if (total > kOmpMin)
    for (int64_t b = 0; b < n; ++b) {
        for (int64_t c = 0; c < c_out; ++c) {
            for (int64_t oy = 0; oy < h * r; ++oy) {
                const int64_t iy = oy / r, sy = oy % r;
                for (int64_t ox = 0; ox < w * r; ++ox) {
                    const int64_t ix = ox / r, sx = ox % r;
                    const int64_t ci = c * r * r + sy * r + sx;
                    y[((b * c_out + c) * h * r + oy) * w * r + ox] =
                        x[((b * c_out * r * r + ci) * h + iy) * w + ix];
                }
            }
        }
    }
}

template <class T>
void pixel_shuffle_backward(const T* gy, T* gx, int64_t n, int64_t c_out, int64_t r, int64_t h,
                            int64_t w) {
    const int64_t cin = c_out * r * r;
#pragma omp parallel for collapse(2) if (n * cin * h * w > kOmpMin)
    for (int64_t b = 0; b < n; ++b) {
        for (int64_t ci = 0; ci < cin; ++ci) {
            const int64_t c = ci / (r * r);
            const int64_t sy = (ci / r) % r, sx = ci % r;
            for (int64_t iy = 0; iy < h; ++iy)
                for (int64_t ix = 0; ix < w; ++ix)
                    gx[((b * cin + ci) * h + iy) * w + ix] +=
                        gy[((b * c_out + c) * h * r + iy * r + sy) * w * r + ix * r + sx];
        }
    }
}

template <class T>
void matmul(const T* a, const T* b, T* y, const MatmulDims& d) {
    const int64_t work = d.batch * d.m * d.p;
#pragma omp parallel for collapse(2) if (work > kOmpMin)
    for (int64_t g = 0; g < d.batch; ++g) {
        for (int64_t i = 0; i < d.m; ++i) {
            const T* ag = a + g * d.m * d.k;
            const T* bg = b + g * d.k * d.p;
            T* yg = y + g * d.m * d.p;
            for (int64_t j = 0; j < d.p; ++j) {
                T acc = 0;
                for (int64_t l = 0; l < d.k; ++l) {
                    const T av = d.trans_a ? ag[l * d.m + i] : ag[i * d.k + l];
                    const T bv = d.trans_b ? bg[j * d.k + l] : bg[l * d.p + j];
                    acc += av * bv;
                }
                if (d.accumulate)
                    yg[i * d.p + j] += acc;
                else
                    yg[i * d.p + j] = acc;
            }
        }
    }
}

template <class T>
void softmax_forward(const T* x, T* y, int64_t outer, int64_t axis_len, int64_t inner) {
#pragma omp parallel for collapse(2) if (outer * inner > 16)
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t i = 0; i < inner; ++i) {
            const T* xr = x + o * axis_len * inner + i;
            T* yr = y + o * axis_len * inner + i;
            T mx = xr[0];
            for (int64_t a = 1; a < axis_len; ++a) mx = std::max(mx, xr[a * inner]);
            T denom = 0;
            for (int64_t a = 0; a < axis_len; ++a) {
                const T e = std::exp(xr[a * inner] - mx);
                yr[a * inner] = e;
                denom += e;
            }
            for (int64_t a = 0; a < axis_len; ++a) yr[a * inner] /= denom;
        }
    }
}

template <class T>
void softmax_backward(const T* y, const T* gy, T* gx, int64_t outer, int64_t axis_len,
                      int64_t inner) {
#pragma omp parallel for collapse(2) if (outer * inner > 16)
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t i = 0; i < inner; ++i) {
            const T* yr = y + o * axis_len * inner + i;
            const T* gr = gy + o * axis_len * inner + i;
            T* xr = gx + o * axis_len * inner + i;
            T dot = 0;
            for (int64_t a = 0; a < axis_len; ++a) dot += yr[a * inner] * gr[a * inner];
            for (int64_t a = 0; a < axis_len; ++a)
                xr[a * inner] += yr[a * inner] * (gr[a * inner] - dot);
        }
    }
}

template <class T>
void layer_norm_forward(const T* x, const T* gamma, const T* beta, T* y, T* mean, T* rstd,
                        int64_t n, int64_t c, int64_t hw, T eps) {
#pragma omp parallel for collapse(2) if (n * hw > 16)
    for (int64_t b = 0; b < n; ++b) {
        for (int64_t p = 0; p < hw; ++p) {
            T mu = 0;
            for (int64_t ch = 0; ch < c; ++ch) mu += x[(b * c + ch) * hw + p];
            mu /= T(c);
            T var = 0;
            for (int64_t ch = 0; ch < c; ++ch) {
                const T dv = x[(b * c + ch) * hw + p] - mu;
                var += dv * dv;
            }
            var /= T(c);
            const T rs = T(1) / std::sqrt(var + eps);
            mean[b * hw + p] = mu;
            rstd[b * hw + p] = rs;
            for (int64_t ch = 0; ch < c; ++ch) {
                const T xn = (x[(b * c + ch) * hw + p] - mu) * rs;
                y[(b * c + ch) * hw + p] = gamma[ch] * xn + beta[ch];
            }
        }
    }
}

template <class T>
void layer_norm_backward(const T* x, const T* gamma, const T* mean, const T* rstd, const T* gy,
                         T* gx, T* ggamma, T* gbeta, int64_t n, int64_t c, int64_t hw) {
    if (gx) {
#pragma omp parallel for collapse(2) if (n * hw > 16)
        for (int64_t b = 0; b < n; ++b) {
            for (int64_t p = 0; p < hw; ++p) {
                const T mu = mean[b * hw + p];
                const T rs = rstd[b * hw + p];
                T sum_g = 0, sum_gx = 0;
                for (int64_t ch = 0; ch < c; ++ch) {
                    const T xn = (x[(b * c + ch) * hw + p] - mu) * rs;
                    const T gl = gy[(b * c + ch) * hw + p] * gamma[ch];
                    sum_g += gl;
                    sum_gx += gl * xn;
                }
                sum_g /= T(c);
                sum_gx /= T(c);
                for (int64_t ch = 0; ch < c; ++ch) {
                    const T xn = (x[(b * c + ch) * hw + p] - mu) * rs;
                    const T gl = gy[(b * c + ch) * hw + p] * gamma[ch];
                    gx[(b * c + ch) * hw + p] += (gl - sum_g - xn * sum_gx) * rs;
                }
            }
        }
    }
    if (ggamma || gbeta) {
#pragma omp parallel for if (c > 16)
        for (int64_t ch = 0; ch < c; ++ch) {
            T gg = 0, gb = 0;
            for (int64_t b = 0; b < n; ++b) {
                for (int64_t p = 0; p < hw; ++p) {
                    const T xn = (x[(b * c + ch) * hw + p] - mean[b * hw + p]) * rstd[b * hw + p];
                    const T g = gy[(b * c + ch) * hw + p];
                    gg += g * xn;
                    gb += g;
                }
            }
            if (ggamma) ggamma[ch] += gg;
            if (gbeta) gbeta[ch] += gb;
        }
    }
}

template <class T>
void window_partition(const T* x, T* y, int64_t n, int64_t c, int64_t h, int64_t w, int64_t win,
                      bool reverse) {
    const int64_t nh = h / win, nw = w / win;
    const int64_t total = n * c * h * w;
#pragma omp parallel for collapse(2) if (total > kOmpMin)
    for (int64_t b = 0; b < n; ++b) {
        for (int64_t ch = 0; ch < c; ++ch) {
            for (int64_t wy = 0; wy < nh; ++wy) {
                for (int64_t wx = 0; wx < nw; ++wx) {
                    const int64_t wb = (b * nh + wy) * nw + wx;
                    for (int64_t i = 0; i < win; ++i) {
                        for (int64_t j = 0; j < win; ++j) {
                            const int64_t src = ((b * c + ch) * h + wy * win + i) * w + wx * win + j;
                            const int64_t dst = ((wb * c + ch) * win + i) * win + j;
                            if (reverse)
                                y[src] = x[dst];
                            else
                                y[dst] = x[src];
                        }
                    }
                }
            }
        }
    }
}

template <class T>
void heads_split(const T* x, T* y, int64_t b, int64_t c, int64_t h, int64_t w, int64_t heads,
                 bool reverse) {
    const int64_t dim = c / heads;
    const int64_t tokens = h * w;
#pragma omp parallel for collapse(2) if (b * c * tokens > kOmpMin)
    for (int64_t bi = 0; bi < b; ++bi) {
        for (int64_t hd = 0; hd < heads; ++hd) {
            for (int64_t t = 0; t < tokens; ++t) {
                for (int64_t e = 0; e < dim; ++e) {
                    const int64_t nchw = ((bi * c + hd * dim + e) * tokens) + t;
                    const int64_t split = ((bi * heads + hd) * tokens + t) * dim + e;
                    if (reverse)
                        y[nchw] = x[split];
                    else
                        y[split] = x[nchw];
                }
            }
        }
    }
}

template <class T>
void cyclic_shift(const T* x, T* y, int64_t n, int64_t c, int64_t h, int64_t w, int64_t dy,
                  int64_t dx) {
    const auto wrap = [](int64_t v, int64_t m) { return ((v % m) + m) % m; };
#pragma omp parallel for collapse(2) if (n * c * h * w > kOmpMin)
    for (int64_t b = 0; b < n; ++b) {
        for (int64_t ch = 0; ch < c; ++ch) {
            const T* xc = x + (b * c + ch) * h * w;
            T* yc = y + (b * c + ch) * h * w;
            for (int64_t i = 0; i < h; ++i) {
                const int64_t si = wrap(i - dy, h);
                for (int64_t j = 0; j < w; ++j) yc[i * w + j] = xc[si * w + wrap(j - dx, w)];
            }
        }
    }
}

namespace {
// Reflect-101 index (edge not repeated), ping-ponged into [0, size).
inline int64_t reflect_index(int64_t i, int64_t size) {
    if (size == 1) return 0;
    const int64_t period = 2 * (size - 1);
    int64_t m = ((i % period) + period) % period;
    return m < size ? m : period - m;
}
}  // namespace

template <class T>
void pad_reflect_forward(const T* x, T* y, int64_t n, int64_t c, int64_t h, int64_t w, int64_t pt,
                         int64_t pb, int64_t pl, int64_t pr) {
    const int64_t oh = h + pt + pb, ow = w + pl + pr;
#pragma omp parallel for if (n * c * oh * ow > kOmpMin)
    for (int64_t i = 0; i < n * c; ++i) {
        const T* xc = x + i * h * w;
        T* yc = y + i * oh * ow;
        for (int64_t oy = 0; oy < oh; ++oy) {
            const int64_t sy = reflect_index(oy - pt, h);
            for (int64_t ox = 0; ox < ow; ++ox) yc[oy * ow + ox] = xc[sy * w + reflect_index(ox - pl, w)];
        }
    }
}

template <class T>
void pad_reflect_backward(const T* gy, T* gx, int64_t n, int64_t c, int64_t h, int64_t w,
                          int64_t pt, int64_t pb, int64_t pl, int64_t pr) {
    const int64_t oh = h + pt + pb, ow = w + pl + pr;
    for (int64_t i = 0; i < n * c; ++i) {
        const T* gc = gy + i * oh * ow;
        T* gxc = gx + i * h * w;
        for (int64_t oy = 0; oy < oh; ++oy) {
            const int64_t sy = reflect_index(oy - pt, h);
            for (int64_t ox = 0; ox < ow; ++ox)
                gxc[sy * w + reflect_index(ox - pl, w)] += gc[oy * ow + ox];
        }
    }
}

template <class T>
void crop_forward(const T* x, T* y, int64_t n, int64_t c, int64_t h, int64_t w, int64_t y0,
                  int64_t x0, int64_t oh, int64_t ow) {
#pragma omp parallel for if (n * c * oh * ow > kOmpMin)
    for (int64_t i = 0; i < n * c; ++i) {
        const T* xc = x + i * h * w;
        T* yc = y + i * oh * ow;
        for (int64_t oy = 0; oy < oh; ++oy)
            for (int64_t ox = 0; ox < ow; ++ox) yc[oy * ow + ox] = xc[(y0 + oy) * w + x0 + ox];
    }
}

template <class T>
void crop_backward(const T* gy, T* gx, int64_t n, int64_t c, int64_t h, int64_t w, int64_t y0,
                   int64_t x0, int64_t oh, int64_t ow) {
#pragma omp parallel for if (n * c * oh * ow > kOmpMin)
    for (int64_t i = 0; i < n * c; ++i) {
        const T* gc = gy + i * oh * ow;
        T* gxc = gx + i * h * w;
        for (int64_t oy = 0; oy < oh; ++oy)
            for (int64_t ox = 0; ox < ow; ++ox) gxc[(y0 + oy) * w + x0 + ox] += gc[oy * ow + ox];
    }
}

template <class T>
void upsample_nearest_forward(const T* x, T* y, int64_t n, int64_t c, int64_t h, int64_t w,
                              int64_t oh, int64_t ow) {
#pragma omp parallel for if (n * c * oh * ow > kOmpMin)
    for (int64_t i = 0; i < n * c; ++i) {
        const T* xc = x + i * h * w;
        T* yc = y + i * oh * ow;
        for (int64_t oy = 0; oy < oh; ++oy) {
            const int64_t sy = std::min(oy * h / oh, h - 1);
            for (int64_t ox = 0; ox < ow; ++ox)
                yc[oy * ow + ox] = xc[sy * w + std::min(ox * w / ow, w - 1)];
        }
    }
}

template <class T>
void upsample_nearest_backward(const T* gy, T* gx, int64_t n, int64_t c, int64_t h, int64_t w,
                               int64_t oh, int64_t ow) {
    // Gather per source pixel: dst rows with floor(dst*h/oh) == sy form a
    // contiguous interval [ceil(sy*oh/h), ceil((sy+1)*oh/h)).
    const auto ceil_div = [](int64_t a, int64_t b) { return (a + b - 1) / b; };
#pragma omp parallel for if (n * c * h * w > kOmpMin)
    for (int64_t i = 0; i < n * c; ++i) {
        const T* gc = gy + i * oh * ow;
        T* gxc = gx + i * h * w;
        for (int64_t sy = 0; sy < h; ++sy) {
            const int64_t y_lo = ceil_div(sy * oh, h);
            const int64_t y_hi = std::min(oh, ceil_div((sy + 1) * oh, h));
            for (int64_t sx = 0; sx < w; ++sx) {
                const int64_t x_lo = ceil_div(sx * ow, w);
                const int64_t x_hi = std::min(ow, ceil_div((sx + 1) * ow, w));
                T acc = 0;
                for (int64_t oy = y_lo; oy < y_hi; ++oy)
                    for (int64_t ox = x_lo; ox < x_hi; ++ox) acc += gc[oy * ow + ox];
                gxc[sy * w + sx] += acc;
            }
        }
    }
}

template <class T>
T sum_all(const T* x, int64_t count) {
    T acc = 0;
    for (int64_t i = 0; i < count; ++i) acc += x[i];
    return acc;
}

template <class T>
T l1_mean(const T* a, const T* b, int64_t count) {
    T acc = 0;
    for (int64_t i = 0; i < count; ++i) acc += std::abs(a[i] - b[i]);
    return acc / T(count);
}

template <class T>
void l1_mean_backward(const T* a, const T* b, T g, T* ga, T* gb, int64_t count) {
    const T k = g / T(count);
#pragma omp parallel for if (count > kOmpMin)
    for (int64_t i = 0; i < count; ++i) {
        const T diff = a[i] - b[i];
        const T s = diff > T(0) ? k : (diff < T(0) ? -k : T(0));  // subgradient 0 at ties
        if (ga) ga[i] += s;
        if (gb) gb[i] -= s;
    }
}

#define EPNET_INSTANTIATE(T)                                                                      \
    template void conv2d_forward<T>(const T*, const T*, const T*, T*, const Conv2dDims&);         \
    template void conv2d_backward_input<T>(const T*, const T*, T*, const Conv2dDims&);            \
    template void conv2d_backward_weight<T>(const T*, const T*, T*, const Conv2dDims&);           \
    template void conv2d_backward_bias<T>(const T*, T*, const Conv2dDims&);                       \
    template void channel_conv1d_forward<T>(const T*, const T*, T*, int64_t, int64_t, int64_t,    \
                                            int64_t);                                             \
    template void channel_conv1d_backward<T>(const T*, const T*, const T*, T*, T*, int64_t,       \
                                             int64_t, int64_t, int64_t);                          \
    template void binary_forward<T>(BinOp, const T*, const T*, T*, const int64_t[4],              \
                                    const int64_t[4]);                                            \
    template void reduce_to_shape<T>(const T*, T*, const int64_t[4], const int64_t[4]);           \
    template void scale_add<T>(T*, const T*, T, int64_t);                                         \
    template void scale_add_mul<T>(T*, const T*, const T*, int64_t);                              \
    template void scale_add_mul_bcast<T>(T*, const T*, const T*, const int64_t[4],                \
                                         const int64_t[4]);                                       \
    template void relu_forward<T>(const T*, T*, int64_t);                                         \
    template void relu_backward<T>(const T*, const T*, T*, int64_t);                              \
    template void gelu_forward<T>(const T*, T*, int64_t);                                         \
    template void gelu_backward<T>(const T*, const T*, T*, int64_t);                              \
    template void sigmoid_forward<T>(const T*, T*, int64_t);                                      \
    template void sigmoid_backward<T>(const T*, const T*, T*, int64_t);                           \
    template void global_avg_forward<T>(const T*, T*, int64_t, int64_t, int64_t);                 \
    template void global_avg_backward<T>(const T*, T*, int64_t, int64_t, int64_t);                \
    template void max_pool_forward<T>(const T*, T*, int64_t*, const Pool2dDims&);                 \
    template void max_pool_backward<T>(const T*, const int64_t*, T*, const Pool2dDims&);          \
    template void pixel_shuffle_forward<T>(const T*, T*, int64_t, int64_t, int64_t, int64_t,      \
                                           int64_t);                                              \
    template void pixel_shuffle_backward<T>(const T*, T*, int64_t, int64_t, int64_t, int64_t,     \
                                            int64_t);                                             \
    template void matmul<T>(const T*, const T*, T*, const MatmulDims&);                           \
    template void softmax_forward<T>(const T*, T*, int64_t, int64_t, int64_t);                    \
    template void softmax_backward<T>(const T*, const T*, T*, int64_t, int64_t, int64_t);         \
    template void layer_norm_forward<T>(const T*, const T*, const T*, T*, T*, T*, int64_t,        \
                                        int64_t, int64_t, T);                                     \
    template void layer_norm_backward<T>(const T*, const T*, const T*, const T*, const T*, T*,    \
                                         T*, T*, int64_t, int64_t, int64_t);                      \
    template void window_partition<T>(const T*, T*, int64_t, int64_t, int64_t, int64_t, int64_t,  \
                                      bool);                                                      \
    template void heads_split<T>(const T*, T*, int64_t, int64_t, int64_t, int64_t, int64_t,       \
                                 bool);                                                           \
    template void cyclic_shift<T>(const T*, T*, int64_t, int64_t, int64_t, int64_t, int64_t,      \
                                  int64_t);                                                       \
    template void pad_reflect_forward<T>(const T*, T*, int64_t, int64_t, int64_t, int64_t,        \
                                         int64_t, int64_t, int64_t, int64_t);                     \
    template void pad_reflect_backward<T>(const T*, T*, int64_t, int64_t, int64_t, int64_t,       \
                                          int64_t, int64_t, int64_t, int64_t);                    \
    template void crop_forward<T>(const T*, T*, int64_t, int64_t, int64_t, int64_t, int64_t,      \
                                  int64_t, int64_t, int64_t);                                     \
    template void crop_backward<T>(const T*, T*, int64_t, int64_t, int64_t, int64_t, int64_t,     \
                                   int64_t, int64_t, int64_t);                                    \
    template void upsample_nearest_forward<T>(const T*, T*, int64_t, int64_t, int64_t, int64_t,   \
                                              int64_t, int64_t);                                  \
    template void upsample_nearest_backward<T>(const T*, T*, int64_t, int64_t, int64_t, int64_t,  \
                                               int64_t, int64_t);                                 \
    template T sum_all<T>(const T*, int64_t);                                                     \
    template T l1_mean<T>(const T*, const T*, int64_t);                                           \
    template void l1_mean_backward<T>(const T*, const T*, T, T*, T*, int64_t);

EPNET_INSTANTIATE(float)
EPNET_INSTANTIATE(double)

#undef EPNET_INSTANTIATE

}  // namespace epnet::kern
