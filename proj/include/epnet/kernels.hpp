#pragma once

#include <cstdint>

// OpenMP-parallel compute kernels over raw NCHW buffers. Every kernel writes
// each output element from exactly one thread with a fixed serial reduction
// order, so results are bit-identical across thread counts. A serial mirror
// of the numerically independent kernels lives in epnet/reference.hpp and is
// used by the tests and the benchmark.

namespace epnet::kern {

struct Conv2dDims {
    int64_t n, cin, h, w;       // input
    int64_t cout, kh, kw;       // weight
    int64_t stride, ph, pw;     // stride and zero padding per axis
    int64_t ho, wo;             // output spatial extents
};

template <class T>
void conv2d_forward(const T* x, const T* w, const T* bias, T* y, const Conv2dDims& d);
template <class T>
void conv2d_backward_input(const T* gy, const T* w, T* gx, const Conv2dDims& d);
template <class T>
void conv2d_backward_weight(const T* x, const T* gy, T* gw, const Conv2dDims& d);
template <class T>
void conv2d_backward_bias(const T* gy, T* gb, const Conv2dDims& d);

// 1-D convolution across the channel axis (zero padded, odd kernel),
// applied independently at every (n,h,w) position.
template <class T>
void channel_conv1d_forward(const T* x, const T* w, T* y, int64_t n, int64_t c, int64_t hw,
                            int64_t k);
template <class T>
void channel_conv1d_backward(const T* x, const T* w, const T* gy, T* gx, T* gw, int64_t n,
                             int64_t c, int64_t hw, int64_t k);

enum class BinOp { add, sub, mul };

// b is addressed through strides that are zero on broadcast axes.
template <class T>
void binary_forward(BinOp op, const T* a, const T* b, T* y, const int64_t a_dims[4],
                    const int64_t b_strides[4]);
// Reduce `g` (shape a_dims) into `out` (shape b_dims, axes of extent 1 summed).
template <class T>
void reduce_to_shape(const T* g, T* out, const int64_t a_dims[4], const int64_t b_dims[4]);

template <class T>
void scale_add(T* dst, const T* src, T k, int64_t count);  // dst += k*src
template <class T>
void scale_add_mul(T* dst, const T* src, const T* other, int64_t count);  // dst += src*other
// dst += src*other where other is broadcast through strides.
template <class T>
void scale_add_mul_bcast(T* dst, const T* src, const T* other, const int64_t dims[4],
                         const int64_t o_strides[4]);

template <class T>
void relu_forward(const T* x, T* y, int64_t count);
template <class T>
void relu_backward(const T* x, const T* gy, T* gx, int64_t count);
template <class T>
void gelu_forward(const T* x, T* y, int64_t count);
template <class T>
void gelu_backward(const T* x, const T* gy, T* gx, int64_t count);
template <class T>
void sigmoid_forward(const T* x, T* y, int64_t count);
template <class T>
void sigmoid_backward(const T* y, const T* gy, T* gx, int64_t count);  // from forward output

template <class T>
void global_avg_forward(const T* x, T* y, int64_t n, int64_t c, int64_t hw);
template <class T>
void global_avg_backward(const T* gy, T* gx, int64_t n, int64_t c, int64_t hw);

struct Pool2dDims {
    int64_t n, c, h, w;
    int64_t kernel, stride;
    int64_t ho, wo;
};

// Forward records the flat argmax index per output element; ties resolve to
// the first maximum in row-major scan order.
template <class T>
void max_pool_forward(const T* x, T* y, int64_t* argmax, const Pool2dDims& d);
template <class T>
void max_pool_backward(const T* gy, const int64_t* argmax, T* gx, const Pool2dDims& d);

template <class T>
void pixel_shuffle_forward(const T* x, T* y, int64_t n, int64_t c_out, int64_t r, int64_t h,
                           int64_t w);
template <class T>
void pixel_shuffle_backward(const T* gy, T* gx, int64_t n, int64_t c_out, int64_t r, int64_t h,
                            int64_t w);

// Batched matrix product over the leading two axes:
// y[b,g] = a[b,g] (M x K) times b[b,g] (K x P), optionally with either side
// stored transposed.
struct MatmulDims {
    int64_t batch;  // n*c product
    int64_t m, k, p;
    bool trans_a = false;
    bool trans_b = false;
    bool accumulate = false;  // y += result instead of y = result
};
template <class T>
void matmul(const T* a, const T* b, T* y, const MatmulDims& d);

template <class T>
void softmax_forward(const T* x, T* y, int64_t outer, int64_t axis_len, int64_t inner);
template <class T>
void softmax_backward(const T* y, const T* gy, T* gx, int64_t outer, int64_t axis_len,
                      int64_t inner);

// Normalizes across the channel axis at every (n,h,w) position.
template <class T>
void layer_norm_forward(const T* x, const T* gamma, const T* beta, T* y, T* mean, T* rstd,
                        int64_t n, int64_t c, int64_t hw, T eps);
template <class T>
void layer_norm_backward(const T* x, const T* gamma, const T* mean, const T* rstd, const T* gy,
                         T* gx, T* ggamma, T* gbeta, int64_t n, int64_t c, int64_t hw);

template <class T>
void window_partition(const T* x, T* y, int64_t n, int64_t c, int64_t h, int64_t w, int64_t win,
                      bool reverse);
template <class T>
void heads_split(const T* x, T* y, int64_t b, int64_t c, int64_t h, int64_t w, int64_t heads,
                 bool reverse);
template <class T>
void cyclic_shift(const T* x, T* y, int64_t n, int64_t c, int64_t h, int64_t w, int64_t dy,
                  int64_t dx);

// Reflect padding (edge pixel not repeated); ping-pong reflection supports
// pads larger than the extent.
template <class T>
void pad_reflect_forward(const T* x, T* y, int64_t n, int64_t c, int64_t h, int64_t w, int64_t pt,
                         int64_t pb, int64_t pl, int64_t pr);
template <class T>
void pad_reflect_backward(const T* gy, T* gx, int64_t n, int64_t c, int64_t h, int64_t w,
                          int64_t pt, int64_t pb, int64_t pl, int64_t pr);

template <class T>
void crop_forward(const T* x, T* y, int64_t n, int64_t c, int64_t h, int64_t w, int64_t y0,
                  int64_t x0, int64_t oh, int64_t ow);
template <class T>
void crop_backward(const T* gy, T* gx, int64_t n, int64_t c, int64_t h, int64_t w, int64_t y0,
                   int64_t x0, int64_t oh, int64_t ow);

// Nearest-neighbor resize to an arbitrary target, src = floor(dst*in/out).
template <class T>
void upsample_nearest_forward(const T* x, T* y, int64_t n, int64_t c, int64_t h, int64_t w,
                              int64_t oh, int64_t ow);
template <class T>
void upsample_nearest_backward(const T* gy, T* gx, int64_t n, int64_t c, int64_t h, int64_t w,
                               int64_t oh, int64_t ow);

template <class T>
T sum_all(const T* x, int64_t count);  // serial; bit-stable regardless of threads

template <class T>
T l1_mean(const T* a, const T* b, int64_t count);
template <class T>
void l1_mean_backward(const T* a, const T* b, T g, T* ga, T* gb, int64_t count);

}  // namespace epnet::kern
