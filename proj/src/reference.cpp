#include "epnet/reference.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace epnet::ref {

template <class T>
void conv2d(const T* x, const T* w, const T* bias, T* y, int64_t n, int64_t cin, int64_t h,
            int64_t wd, int64_t cout, int64_t kh, int64_t kw, int64_t stride, int64_t pad) {
    const int64_t ho = (h + 2 * pad - kh) / stride + 1;
    const int64_t wo = (wd + 2 * pad - kw) / stride + 1;
    for (int64_t b = 0; b < n; ++b)
        for (int64_t co = 0; co < cout; ++co)
            for (int64_t oy = 0; oy < ho; ++oy)
                for (int64_t ox = 0; ox < wo; ++ox) {
                    T acc = bias ? bias[co] : T(0);
                    for (int64_t ci = 0; ci < cin; ++ci)
                        for (int64_t ky = 0; ky < kh; ++ky)
                            for (int64_t kx = 0; kx < kw; ++kx) {
                                const int64_t iy = oy * stride + ky - pad;
                                const int64_t ix = ox * stride + kx - pad;
                                if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                                acc += x[((b * cin + ci) * h + iy) * wd + ix] *
                                       w[((co * cin + ci) * kh + ky) * kw + kx];
                            }
                    y[((b * cout + co) * ho + oy) * wo + ox] = acc;
                }
}

template <class T>
void max_pool2d(const T* x, T* y, int64_t n, int64_t c, int64_t h, int64_t w, int64_t kernel,
                int64_t stride) {
    const int64_t ho = (h - kernel) / stride + 1;
    const int64_t wo = (w - kernel) / stride + 1;
    for (int64_t i = 0; i < n * c; ++i)
        for (int64_t oy = 0; oy < ho; ++oy)
            for (int64_t ox = 0; ox < wo; ++ox) {
                T best = -std::numeric_limits<T>::infinity();
                for (int64_t ky = 0; ky < kernel; ++ky)
                    for (int64_t kx = 0; kx < kernel; ++kx)
                        best = std::max(best,
                                        x[i * h * w + (oy * stride + ky) * w + ox * stride + kx]);
                y[i * ho * wo + oy * wo + ox] = best;
            }
}

template <class T>
void matmul(const T* a, const T* b, T* y, int64_t batch, int64_t m, int64_t k, int64_t p) {
    for (int64_t g = 0; g < batch; ++g)
        for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < p; ++j) {
                T acc = 0;
                for (int64_t l = 0; l < k; ++l)
                    acc += a[g * m * k + i * k + l] * b[g * k * p + l * p + j];
                y[g * m * p + i * p + j] = acc;
            }
}

template <class T>
void pixel_shuffle(const T* x, T* y, int64_t n, int64_t c_out, int64_t r, int64_t h, int64_t w) {
    for (int64_t b = 0; b < n; ++b)
        for (int64_t c = 0; c < c_out; ++c)
            for (int64_t iy = 0; iy < h; ++iy)
                for (int64_t ix = 0; ix < w; ++ix)
                    for (int64_t sy = 0; sy < r; ++sy)
                        for (int64_t sx = 0; sx < r; ++sx)
                            y[((b * c_out + c) * h * r + iy * r + sy) * w * r + ix * r + sx] =
                                x[((b * (c_out * r * r) + c * r * r + sy * r + sx) * h + iy) * w +
                                  ix];
}

namespace {

int64_t reflect(int64_t i, int64_t size) {
    if (size == 1) return 0;
    const int64_t period = 2 * (size - 1);
    int64_t m = ((i % period) + period) % period;
    return m < size ? m : period - m;
}

// y[c] = LN(x[.,pos]) * gamma + beta over channels at one position.
void layer_norm_at(const double* x, int64_t c, int64_t hw, int64_t pos, const double* gamma,
                   const double* beta, double eps, double* out) {
    double mu = 0;
    for (int64_t ch = 0; ch < c; ++ch) mu += x[ch * hw + pos];
    mu /= double(c);
    double var = 0;
    for (int64_t ch = 0; ch < c; ++ch) {
        const double d = x[ch * hw + pos] - mu;
        var += d * d;
    }
    var /= double(c);
    const double rs = 1.0 / std::sqrt(var + eps);
    for (int64_t ch = 0; ch < c; ++ch) out[ch] = gamma[ch] * (x[ch * hw + pos] - mu) * rs + beta[ch];
}

void linear(const double* w, const double* b, const double* in, int64_t out_dim, int64_t in_dim,
            double* out) {
    for (int64_t o = 0; o < out_dim; ++o) {
        double acc = b ? b[o] : 0.0;
        for (int64_t i = 0; i < in_dim; ++i) acc += w[o * in_dim + i] * in[i];
        out[o] = acc;
    }
}

double gelu_tanh(double v) {
    return 0.5 * v * (1.0 + std::tanh(0.7978845608028654 * (v + 0.044715 * v * v * v)));
}

}  // namespace

void swin_block(const double* x, int64_t c, int64_t h, int64_t w, const SwinWeights& wt,
                int64_t heads, int64_t win, bool shifted, int64_t hidden, double eps,
                double* out) {
    const int64_t hp = (h + win - 1) / win * win;
    const int64_t wp = (w + win - 1) / win * win;
    const int64_t shift = shifted ? win / 2 : 0;
    const int64_t dim = c / heads;
    const double scale = 1.0 / std::sqrt(double(dim));

    // Normalize, reflect-pad, then cyclically shift content up-left.
    std::vector<double> padded(c * hp * wp);
    {
        std::vector<double> normed(c * h * w);
        std::vector<double> col(c);
        for (int64_t p = 0; p < h * w; ++p) {
            layer_norm_at(x, c, h * w, p, wt.ln1_gamma, wt.ln1_beta, eps, col.data());
            for (int64_t ch = 0; ch < c; ++ch) normed[ch * h * w + p] = col[ch];
        }
        for (int64_t ch = 0; ch < c; ++ch)
            for (int64_t iy = 0; iy < hp; ++iy)
                for (int64_t ix = 0; ix < wp; ++ix) {
                    const int64_t py = (iy + shift) % hp;
                    const int64_t px = (ix + shift) % wp;
                    padded[(ch * hp + iy) * wp + ix] =
                        normed[(ch * h + reflect(py, h)) * w + reflect(px, w)];
                }
    }

    // Per-token q/k/v, then attention within each window and head.
    const int64_t tokens = hp * wp;
    std::vector<double> q(c * tokens), k(c * tokens), v(c * tokens), attn_out(c * tokens);
    {
        std::vector<double> tok(c), tq(c), tk(c), tv(c);
        for (int64_t p = 0; p < tokens; ++p) {
            for (int64_t ch = 0; ch < c; ++ch) tok[ch] = padded[ch * tokens + p];
            linear(wt.wq, wt.bq, tok.data(), c, c, tq.data());
            linear(wt.wk, wt.bk, tok.data(), c, c, tk.data());
            linear(wt.wv, wt.bv, tok.data(), c, c, tv.data());
            for (int64_t ch = 0; ch < c; ++ch) {
                q[ch * tokens + p] = tq[ch];
                k[ch * tokens + p] = tk[ch];
                v[ch * tokens + p] = tv[ch];
            }
        }
    }
    const int64_t nwy = hp / win, nwx = wp / win;
    const int64_t wt_count = win * win;
    std::vector<double> scores(wt_count), probs(wt_count);
    for (int64_t wy = 0; wy < nwy; ++wy)
        for (int64_t wx = 0; wx < nwx; ++wx)
            for (int64_t hd = 0; hd < heads; ++hd)
                for (int64_t ti = 0; ti < wt_count; ++ti) {
                    const int64_t qy = wy * win + ti / win, qx = wx * win + ti % win;
                    const int64_t qp = qy * wp + qx;
                    double mx = -std::numeric_limits<double>::infinity();
                    for (int64_t tj = 0; tj < wt_count; ++tj) {
                        const int64_t ky = wy * win + tj / win, kx = wx * win + tj % win;
                        const int64_t kp = ky * wp + kx;
                        double acc = 0;
                        for (int64_t e = 0; e < dim; ++e)
                            acc += q[(hd * dim + e) * tokens + qp] * k[(hd * dim + e) * tokens + kp];
                        scores[tj] = acc * scale;
                        mx = std::max(mx, scores[tj]);
                    }
                    double denom = 0;
                    for (int64_t tj = 0; tj < wt_count; ++tj) {
                        probs[tj] = std::exp(scores[tj] - mx);
                        denom += probs[tj];
                    }
                    for (int64_t e = 0; e < dim; ++e) {
                        double acc = 0;
                        for (int64_t tj = 0; tj < wt_count; ++tj) {
                            const int64_t ky = wy * win + tj / win, kx = wx * win + tj % win;
                            acc += probs[tj] / denom * v[(hd * dim + e) * tokens + ky * wp + kx];
                        }
                        attn_out[(hd * dim + e) * tokens + qp] = acc;
                    }
                }

    // Output projection, unshift, crop, residual; then the MLP sub-block.
    std::vector<double> proj(c * tokens);
    {
        std::vector<double> tok(c), t2(c);
        for (int64_t p = 0; p < tokens; ++p) {
            for (int64_t ch = 0; ch < c; ++ch) tok[ch] = attn_out[ch * tokens + p];
            linear(wt.wo, wt.bo, tok.data(), c, c, t2.data());
            for (int64_t ch = 0; ch < c; ++ch) proj[ch * tokens + p] = t2[ch];
        }
    }
    std::vector<double> mid(c * h * w);
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t iy = 0; iy < h; ++iy)
            for (int64_t ix = 0; ix < w; ++ix) {
                // invert the shift applied while padding
                const int64_t py = ((iy - shift) % hp + hp) % hp;
                const int64_t px = ((ix - shift) % wp + wp) % wp;
                mid[(ch * h + iy) * w + ix] =
                    x[(ch * h + iy) * w + ix] + proj[(ch * hp + py) * wp + px];
            }

    std::vector<double> col(c), hid(hidden), back(c);
    for (int64_t p = 0; p < h * w; ++p) {
        layer_norm_at(mid.data(), c, h * w, p, wt.ln2_gamma, wt.ln2_beta, eps, col.data());
        linear(wt.w1, wt.b1, col.data(), hidden, c, hid.data());
        for (int64_t i = 0; i < hidden; ++i) hid[i] = gelu_tanh(hid[i]);
        linear(wt.w2, wt.b2, hid.data(), c, hidden, back.data());
        for (int64_t ch = 0; ch < c; ++ch)
            out[ch * h * w + p] = mid[ch * h * w + p] + back[ch];
    }
}

void dcab(const double* x, int64_t c, int64_t h, int64_t w, int64_t split, const DcabWeights& wt,
          double* out) {
    const int64_t hw = h * w;
    const int64_t c2 = c - split;
    const auto gate = [&](const double* part, int64_t pc, const double* gw,
                          std::vector<double>& g) {
        std::vector<double> pooled(pc, 0.0);
        for (int64_t ch = 0; ch < pc; ++ch) {
            for (int64_t p = 0; p < hw; ++p) pooled[ch] += part[ch * hw + p];
            pooled[ch] /= double(hw);
        }
        g.assign(pc, 0.0);
        for (int64_t ch = 0; ch < pc; ++ch) {
            double acc = 0;
            for (int64_t j = 0; j < 3; ++j) {
                const int64_t src = ch + j - 1;
                if (src < 0 || src >= pc) continue;
                acc += gw[j] * pooled[src];
            }
            g[ch] = 1.0 / (1.0 + std::exp(-acc));
        }
    };
    const double* x1 = x;
    const double* x2 = x + split * hw;
    std::vector<double> alpha, beta;
    gate(x1, split, wt.alpha_w, alpha);
    gate(x2, c2, wt.beta_w, beta);

    // concat(concat(alpha*x1, x2), concat(x1, beta*x2)) -> 2c channels
    std::vector<double> pre(2 * c * hw);
    for (int64_t ch = 0; ch < split; ++ch)
        for (int64_t p = 0; p < hw; ++p) pre[ch * hw + p] = alpha[ch] * x1[ch * hw + p];
    for (int64_t ch = 0; ch < c2; ++ch)
        for (int64_t p = 0; p < hw; ++p) pre[(split + ch) * hw + p] = x2[ch * hw + p];
    for (int64_t ch = 0; ch < split; ++ch)
        for (int64_t p = 0; p < hw; ++p) pre[(c + ch) * hw + p] = x1[ch * hw + p];
    for (int64_t ch = 0; ch < c2; ++ch)
        for (int64_t p = 0; p < hw; ++p)
            pre[(c + split + ch) * hw + p] = beta[ch] * x2[ch * hw + p];

    for (int64_t co = 0; co < c; ++co)
        for (int64_t p = 0; p < hw; ++p) {
            double acc = wt.fuse_b ? wt.fuse_b[co] : 0.0;
            for (int64_t ci = 0; ci < 2 * c; ++ci) acc += wt.fuse_w[co * 2 * c + ci] * pre[ci * hw + p];
            out[co * hw + p] = x[co * hw + p] + acc;
        }
}

double ssim(const double* a, const double* b, int64_t width, int64_t height) {
    constexpr int64_t kWin = 11;
    constexpr double kSigma = 1.5;
    constexpr double kC1 = (0.01 * 255) * (0.01 * 255);
    constexpr double kC2 = (0.03 * 255) * (0.03 * 255);
    double g[kWin][kWin];
    double gsum = 0;
    for (int64_t i = 0; i < kWin; ++i)
        for (int64_t j = 0; j < kWin; ++j) {
            const double dy = double(i) - 5.0, dx = double(j) - 5.0;
            g[i][j] = std::exp(-(dx * dx + dy * dy) / (2 * kSigma * kSigma));
            gsum += g[i][j];
        }
    for (int64_t i = 0; i < kWin; ++i)
        for (int64_t j = 0; j < kWin; ++j) g[i][j] /= gsum;

    double total = 0;
    int64_t count = 0;
    for (int64_t y = 0; y + kWin <= height; ++y)
        for (int64_t x = 0; x + kWin <= width; ++x) {
            double ma = 0, mb = 0;
            for (int64_t i = 0; i < kWin; ++i)
                for (int64_t j = 0; j < kWin; ++j) {
                    ma += g[i][j] * a[(y + i) * width + x + j];
                    mb += g[i][j] * b[(y + i) * width + x + j];
                }
            double va = 0, vb = 0, cov = 0;
            for (int64_t i = 0; i < kWin; ++i)
                for (int64_t j = 0; j < kWin; ++j) {
                    const double da = a[(y + i) * width + x + j] - ma;
                    const double db = b[(y + i) * width + x + j] - mb;
                    va += g[i][j] * da * da;
                    vb += g[i][j] * db * db;
                    cov += g[i][j] * da * db;
                }
            total += ((2 * ma * mb + kC1) * (2 * cov + kC2)) /
                     ((ma * ma + mb * mb + kC1) * (va + vb + kC2));
            ++count;
        }
    return count ? total / double(count) : 1.0;
}

template void conv2d<float>(const float*, const float*, const float*, float*, int64_t, int64_t,
                            int64_t, int64_t, int64_t, int64_t, int64_t, int64_t, int64_t);
template void conv2d<double>(const double*, const double*, const double*, double*, int64_t,
                             int64_t, int64_t, int64_t, int64_t, int64_t, int64_t, int64_t,
                             int64_t);
template void max_pool2d<float>(const float*, float*, int64_t, int64_t, int64_t, int64_t, int64_t,
                                int64_t);
template void max_pool2d<double>(const double*, double*, int64_t, int64_t, int64_t, int64_t,
                                 int64_t, int64_t);
template void matmul<float>(const float*, const float*, float*, int64_t, int64_t, int64_t,
                            int64_t);
template void matmul<double>(const double*, const double*, double*, int64_t, int64_t, int64_t,
                             int64_t);
template void pixel_shuffle<float>(const float*, float*, int64_t, int64_t, int64_t, int64_t,
                                   int64_t);
template void pixel_shuffle<double>(const double*, double*, int64_t, int64_t, int64_t, int64_t,
                                    int64_t);

}  // namespace epnet::ref
