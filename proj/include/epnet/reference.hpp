#pragma once

#include <cstdint>

// Serial reference implementations, written as straight-line loops with no
// shared code, no tape and no threading. The test suites compare the OpenMP
// kernels and the block forwards against these; the benchmark times the two
// paths against each other. Keep this library independent of ops.cpp.

namespace epnet::ref {

template <class T>
void conv2d(const T* x, const T* w, const T* bias, T* y, int64_t n, int64_t cin, int64_t h,
            int64_t wd, int64_t cout, int64_t kh, int64_t kw, int64_t stride, int64_t pad);

template <class T>
void max_pool2d(const T* x, T* y, int64_t n, int64_t c, int64_t h, int64_t w, int64_t kernel,
                int64_t stride);

template <class T>
void matmul(const T* a, const T* b, T* y, int64_t batch, int64_t m, int64_t k, int64_t p);

template <class T>
void pixel_shuffle(const T* x, T* y, int64_t n, int64_t c_out, int64_t r, int64_t h, int64_t w);

// One transformer block: pre-norm windowed attention with residual, then
// pre-norm MLP with residual. Unbatched; weights are dense row-major
// [out][in] matrices taken straight from 1x1 conv layouts.
struct SwinWeights {
    const double* ln1_gamma;
    const double* ln1_beta;
    const double* wq;
    const double* bq;
    const double* wk;
    const double* bk;
    const double* wv;
    const double* bv;
    const double* wo;
    const double* bo;
    const double* ln2_gamma;
    const double* ln2_beta;
    const double* w1;  // [hidden][c]
    const double* b1;
    const double* w2;  // [c][hidden]
    const double* b2;
};

void swin_block(const double* x, int64_t c, int64_t h, int64_t w, const SwinWeights& wt,
                int64_t heads, int64_t win, bool shifted, int64_t hidden, double eps,
                double* out);

// Channel-split crossover block: gates from pooled descriptors through a
// width-3 channel convolution and sigmoid, double concat, 1x1 fusion,
// residual add. Unbatched.
struct DcabWeights {
    const double* alpha_w;  // [3]
    const double* beta_w;   // [3]
    const double* fuse_w;   // [c][2c]
    const double* fuse_b;   // [c]
};

void dcab(const double* x, int64_t c, int64_t h, int64_t w, int64_t split, const DcabWeights& wt,
          double* out);

// Single-scale SSIM over every valid 11x11 window position, Gaussian
// sigma 1.5, L = 255.
double ssim(const double* a, const double* b, int64_t width, int64_t height);

}  // namespace epnet::ref
