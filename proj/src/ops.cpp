#include "epnet/ops.hpp"

#include <cmath>
#include <cstring>
#include <memory>
#include <string>

#include "epnet/kernels.hpp"

namespace epnet {

namespace {

bool recording(std::initializer_list<const Tensor*> inputs) {
    if (!Tape::current()) return false;
    for (const Tensor* t : inputs)
        if (t && t->requires_grad()) return true;
    return false;
}

void check_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
    if (a.dtype() != b.dtype())
        throw UsageError(std::string(op) + ": mixed dtypes " + dtype_name(a.dtype()) + " vs " +
                         dtype_name(b.dtype()));
}

// Strides for the right operand of a broadcast binary op (0 on broadcast axes).
void broadcast_strides(const Shape4& a, const Shape4& b, const char* op, int64_t b_strides[4]) {
    const int64_t ad[4] = {a.n, a.c, a.h, a.w};
    const int64_t bd[4] = {b.n, b.c, b.h, b.w};
    const int64_t bs[4] = {b.c * b.h * b.w, b.h * b.w, b.w, 1};
    static const char* axis_names[4] = {"N", "C", "H", "W"};
    for (int i = 0; i < 4; ++i) {
        if (bd[i] == ad[i])
            b_strides[i] = bs[i];
        else if (bd[i] == 1)
            b_strides[i] = 0;
        else
            throw DimensionError(std::string(op) + ": axis " + axis_names[i] + " mismatch, " +
                                 a.str() + " vs " + b.str());
    }
}

Tensor binary_op(kern::BinOp op, const char* name, const Tensor& a, const Tensor& b) {
    check_same_dtype(a, b, name);
    int64_t b_strides[4];
    broadcast_strides(a.shape(), b.shape(), name, b_strides);
    const int64_t a_dims[4] = {a.shape().n, a.shape().c, a.shape().h, a.shape().w};

    Tensor y = Tensor::zeros(a.shape(), a.dtype());
    dispatch_dtype(a.dtype(), [&]<class T>() {
        kern::binary_forward(op, a.data<T>(), b.data<T>(), y.mut_data<T>(), a_dims, b_strides);
    });

    if (recording({&a, &b})) {
        y.set_requires_grad(true);
        Tensor ac = a, bc = b, yc = y;
        Tape::current()->record(name, y, [op, ac, bc, yc]() mutable {
            if (!yc.has_grad()) return;
            const Shape4 as = ac.shape(), bs = bc.shape();
            const int64_t a_dims[4] = {as.n, as.c, as.h, as.w};
            const int64_t b_dims[4] = {bs.n, bs.c, bs.h, bs.w};
            int64_t b_strides[4];
            broadcast_strides(as, bs, "binary.backward", b_strides);
            dispatch_dtype(yc.dtype(), [&]<class T>() {
                const T* gy = yc.grad_data<T>();
                const int64_t count = yc.numel();
                if (ac.requires_grad()) {
                    ac.ensure_grad();
                    T* ga = ac.mut_grad_data<T>();
                    if (op == kern::BinOp::mul)
                        kern::scale_add_mul_bcast(ga, gy, bc.data<T>(), a_dims, b_strides);
                    else
                        kern::scale_add(ga, gy, T(1), count);
                }
                if (bc.requires_grad()) {
                    bc.ensure_grad();
                    T* gb = bc.mut_grad_data<T>();
                    const T sign = op == kern::BinOp::sub ? T(-1) : T(1);
                    if (bs == as && op == kern::BinOp::mul) {
                        kern::scale_add_mul(gb, gy, ac.data<T>(), count);
                    } else if (bs == as) {
                        kern::scale_add(gb, gy, sign, count);
                    } else {
                        std::vector<T> contrib;
                        const T* src = gy;
                        if (op == kern::BinOp::mul) {
                            contrib.assign(static_cast<size_t>(count), T(0));
                            kern::scale_add_mul(contrib.data(), gy, ac.data<T>(), count);
                            src = contrib.data();
                        }
                        std::vector<T> reduced(static_cast<size_t>(bc.numel()), T(0));
                        kern::reduce_to_shape(src, reduced.data(), a_dims, b_dims);
                        kern::scale_add(gb, reduced.data(), sign, bc.numel());
                    }
                }
            });
        });
    }
    return y;
}

// Permutation ops share a backward pattern: apply the inverse permutation to
// the output gradient, then accumulate.
template <class Permute>
void accumulate_permuted(Tensor& input, const Tensor& output, Permute&& inverse_perm) {
    input.ensure_grad();
    dispatch_dtype(input.dtype(), [&]<class T>() {
        std::vector<T> tmp(static_cast<size_t>(input.numel()), T(0));
        inverse_perm.template operator()<T>(output.grad_data<T>(), tmp.data());
        kern::scale_add(input.mut_grad_data<T>(), tmp.data(), T(1), input.numel());
    });
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const std::optional<Tensor>& bias,
              int64_t stride, int64_t padding) {
    check_same_dtype(x, weight, "conv2d");
    if (stride < 1) throw UsageError("conv2d: stride must be positive, got " + std::to_string(stride));
    if (padding < 0) throw UsageError("conv2d: padding must be non-negative");
    const Shape4 xs = x.shape(), ws = weight.shape();
    if (xs.c != ws.c)
        throw DimensionError("conv2d: input channel axis C=" + std::to_string(xs.c) +
                             " does not match weight Cin=" + std::to_string(ws.c));
    if (ws.h > xs.h + 2 * padding)
        throw DimensionError("conv2d: kernel height " + std::to_string(ws.h) +
                             " exceeds padded input height " + std::to_string(xs.h + 2 * padding));
    if (ws.w > xs.w + 2 * padding)
        throw DimensionError("conv2d: kernel width " + std::to_string(ws.w) +
                             " exceeds padded input width " + std::to_string(xs.w + 2 * padding));
    if (bias) {
        check_same_dtype(x, *bias, "conv2d");
        if (bias->numel() != ws.n)
            throw DimensionError("conv2d: bias has " + std::to_string(bias->numel()) +
                                 " elements, expected Cout=" + std::to_string(ws.n));
    }

    kern::Conv2dDims d;
    d.n = xs.n;
    d.cin = xs.c;
    d.h = xs.h;
    d.w = xs.w;
    d.cout = ws.n;
    d.kh = ws.h;
    d.kw = ws.w;
    d.stride = stride;
    d.ph = padding;
    d.pw = padding;
    d.ho = (xs.h + 2 * padding - ws.h) / stride + 1;
    d.wo = (xs.w + 2 * padding - ws.w) / stride + 1;

    Tensor y = Tensor::zeros({xs.n, ws.n, d.ho, d.wo}, x.dtype());
    dispatch_dtype(x.dtype(), [&]<class T>() {
        kern::conv2d_forward(x.data<T>(), weight.data<T>(), bias ? bias->data<T>() : nullptr,
                             y.mut_data<T>(), d);
    });

    if (recording({&x, &weight, bias ? &*bias : nullptr})) {
        y.set_requires_grad(true);
        Tensor xc = x, wc = weight, yc = y;
        std::optional<Tensor> bc = bias;
        Tape::current()->record("conv2d", y, [xc, wc, bc, yc, d]() mutable {
            if (!yc.has_grad()) return;
            dispatch_dtype(yc.dtype(), [&]<class T>() {
                const T* gy = yc.grad_data<T>();
                if (xc.requires_grad()) {
                    xc.ensure_grad();
                    kern::conv2d_backward_input(gy, wc.data<T>(), xc.mut_grad_data<T>(), d);
                }
                if (wc.requires_grad()) {
                    wc.ensure_grad();
                    kern::conv2d_backward_weight(xc.data<T>(), gy, wc.mut_grad_data<T>(), d);
                }
                if (bc && bc->requires_grad()) {
                    bc->ensure_grad();
                    kern::conv2d_backward_bias(gy, bc->mut_grad_data<T>(), d);
                }
            });
        });
    }
    return y;
}

Tensor channel_conv1d(const Tensor& x, const Tensor& weight) {
    check_same_dtype(x, weight, "channel_conv1d");
    const Shape4 ws = weight.shape();
    if (ws.n != 1 || ws.c != 1 || ws.h != 1 || ws.w % 2 == 0)
        throw UsageError("channel_conv1d: weight must be [1,1,1,k] with k odd, got " + ws.str());
    const Shape4 xs = x.shape();
    const int64_t k = ws.w, hw = xs.h * xs.w;

    Tensor y = Tensor::zeros(xs, x.dtype());
    dispatch_dtype(x.dtype(), [&]<class T>() {
        kern::channel_conv1d_forward(x.data<T>(), weight.data<T>(), y.mut_data<T>(), xs.n, xs.c,
                                     hw, k);
    });

    if (recording({&x, &weight})) {
        y.set_requires_grad(true);
        Tensor xc = x, wc = weight, yc = y;
        Tape::current()->record("channel_conv1d", y, [xc, wc, yc, k, hw]() mutable {
            if (!yc.has_grad()) return;
            const Shape4 xs = xc.shape();
            dispatch_dtype(yc.dtype(), [&]<class T>() {
                T* gx = nullptr;
                T* gw = nullptr;
                if (xc.requires_grad()) {
                    xc.ensure_grad();
                    gx = xc.mut_grad_data<T>();
                }
                if (wc.requires_grad()) {
                    wc.ensure_grad();
                    gw = wc.mut_grad_data<T>();
                }
                kern::channel_conv1d_backward(xc.data<T>(), wc.data<T>(), yc.grad_data<T>(), gx,
                                              gw, xs.n, xs.c, hw, k);
            });
        });
    }
    return y;
}

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(kern::BinOp::add, "add", a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(kern::BinOp::sub, "sub", a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(kern::BinOp::mul, "mul", a, b); }

Tensor scalar_mul(const Tensor& x, double s) {
    Tensor y = Tensor::zeros(x.shape(), x.dtype());
    dispatch_dtype(x.dtype(), [&]<class T>() {
        kern::scale_add(y.mut_data<T>(), x.data<T>(), static_cast<T>(s), x.numel());
    });
    if (recording({&x})) {
        y.set_requires_grad(true);
        Tensor xc = x, yc = y;
        Tape::current()->record("scalar_mul", y, [xc, yc, s]() mutable {
            if (!yc.has_grad() || !xc.requires_grad()) return;
            xc.ensure_grad();
            dispatch_dtype(yc.dtype(), [&]<class T>() {
                kern::scale_add(xc.mut_grad_data<T>(), yc.grad_data<T>(), static_cast<T>(s),
                                xc.numel());
            });
        });
    }
    return y;
}

namespace {

template <void (*Fwd)(const float*, float*, int64_t), void (*Fwd64)(const double*, double*, int64_t)>
Tensor unary_forward(const Tensor& x) {
    Tensor y = Tensor::zeros(x.shape(), x.dtype());
    if (x.dtype() == DType::f32)
        Fwd(x.data<float>(), y.mut_data<float>(), x.numel());
    else
        Fwd64(x.data<double>(), y.mut_data<double>(), x.numel());
    return y;
}

}  // namespace

Tensor relu(const Tensor& x) {
    Tensor y = unary_forward<kern::relu_forward<float>, kern::relu_forward<double>>(x);
    if (recording({&x})) {
        y.set_requires_grad(true);
        Tensor xc = x, yc = y;
        Tape::current()->record("relu", y, [xc, yc]() mutable {
            if (!yc.has_grad() || !xc.requires_grad()) return;
            xc.ensure_grad();
            dispatch_dtype(yc.dtype(), [&]<class T>() {
                kern::relu_backward(xc.data<T>(), yc.grad_data<T>(), xc.mut_grad_data<T>(),
                                    xc.numel());
            });
        });
    }
    return y;
}

Tensor gelu(const Tensor& x) {
    Tensor y = unary_forward<kern::gelu_forward<float>, kern::gelu_forward<double>>(x);
    if (recording({&x})) {
        y.set_requires_grad(true);
        Tensor xc = x, yc = y;
        Tape::current()->record("gelu", y, [xc, yc]() mutable {
            if (!yc.has_grad() || !xc.requires_grad()) return;
            xc.ensure_grad();
            dispatch_dtype(yc.dtype(), [&]<class T>() {
                kern::gelu_backward(xc.data<T>(), yc.grad_data<T>(), xc.mut_grad_data<T>(),
                                    xc.numel());
            });
        });
    }
    return y;
}

Tensor sigmoid(const Tensor& x) {
    Tensor y = unary_forward<kern::sigmoid_forward<float>, kern::sigmoid_forward<double>>(x);
    if (recording({&x})) {
        y.set_requires_grad(true);
        Tensor xc = x, yc = y;
        Tape::current()->record("sigmoid", y, [xc, yc]() mutable {
            if (!yc.has_grad() || !xc.requires_grad()) return;
            xc.ensure_grad();
            dispatch_dtype(yc.dtype(), [&]<class T>() {
                kern::sigmoid_backward(yc.data<T>(), yc.grad_data<T>(), xc.mut_grad_data<T>(),
                                       xc.numel());
            });
        });
    }
    return y;
}

Tensor channel_concat(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw UsageError("channel_concat: needs at least one part");
    const Shape4 first = parts.front().shape();
    int64_t total_c = 0;
    for (size_t i = 0; i < parts.size(); ++i) {
        const Shape4 s = parts[i].shape();
        check_same_dtype(parts.front(), parts[i], "channel_concat");
        if (s.n != first.n || s.h != first.h || s.w != first.w)
            throw DimensionError("channel_concat: part " + std::to_string(i) + " shape " +
                                 s.str() + " incompatible with " + first.str());
        total_c += s.c;
    }

    Tensor y = Tensor::zeros({first.n, total_c, first.h, first.w}, parts.front().dtype());
    const int64_t hw = first.h * first.w;
    dispatch_dtype(y.dtype(), [&]<class T>() {
        T* out = y.mut_data<T>();
        for (int64_t n = 0; n < first.n; ++n) {
            int64_t c_off = 0;
            for (const Tensor& p : parts) {
                const int64_t pc = p.shape().c;
                std::memcpy(out + (n * total_c + c_off) * hw, p.data<T>() + n * pc * hw,
                            static_cast<size_t>(pc * hw) * sizeof(T));
                c_off += pc;
            }
        }
    });

    bool any_grad = false;
    for (const Tensor& p : parts) any_grad |= p.requires_grad();
    if (Tape::current() && any_grad) {
        y.set_requires_grad(true);
        std::vector<Tensor> pc = parts;
        Tensor yc = y;
        Tape::current()->record("channel_concat", y, [pc, yc, total_c, hw]() mutable {
            if (!yc.has_grad()) return;
            const int64_t n_batch = yc.shape().n;
            dispatch_dtype(yc.dtype(), [&]<class T>() {
                const T* gy = yc.grad_data<T>();
                int64_t c_off = 0;
                for (Tensor& p : pc) {
                    const int64_t pcnt = p.shape().c;
                    if (p.requires_grad()) {
                        p.ensure_grad();
                        T* gp = p.mut_grad_data<T>();
                        for (int64_t n = 0; n < n_batch; ++n) {
                            const T* src = gy + (n * total_c + c_off) * hw;
                            T* dst = gp + n * pcnt * hw;
                            for (int64_t i = 0; i < pcnt * hw; ++i) dst[i] += src[i];
                        }
                    }
                    c_off += pcnt;
                }
            });
        });
    }
    return y;
}

std::pair<Tensor, Tensor> channel_split(const Tensor& x, int64_t boundary) {
    const Shape4 s = x.shape();
    if (boundary <= 0 || boundary >= s.c)
        throw IndexError("channel_split: boundary " + std::to_string(boundary) +
                         " outside (0, " + std::to_string(s.c) + ")");
    Tensor a = Tensor::zeros({s.n, boundary, s.h, s.w}, x.dtype());
    Tensor b = Tensor::zeros({s.n, s.c - boundary, s.h, s.w}, x.dtype());
    const int64_t hw = s.h * s.w;
    dispatch_dtype(x.dtype(), [&]<class T>() {
        const T* in = x.data<T>();
        for (int64_t n = 0; n < s.n; ++n) {
            std::memcpy(a.mut_data<T>() + n * boundary * hw, in + n * s.c * hw,
                        static_cast<size_t>(boundary * hw) * sizeof(T));
            std::memcpy(b.mut_data<T>() + n * (s.c - boundary) * hw,
                        in + (n * s.c + boundary) * hw,
                        static_cast<size_t>((s.c - boundary) * hw) * sizeof(T));
        }
    });

    if (recording({&x})) {
        a.set_requires_grad(true);
        b.set_requires_grad(true);
        Tensor xc = x, ac = a, bc = b;
        Tape::current()->record("channel_split", a, [xc, ac, bc, boundary, hw]() mutable {
            if (!xc.requires_grad() || (!ac.has_grad() && !bc.has_grad())) return;
            xc.ensure_grad();
            const Shape4 s = xc.shape();
            dispatch_dtype(xc.dtype(), [&]<class T>() {
                T* gx = xc.mut_grad_data<T>();
                for (int64_t n = 0; n < s.n; ++n) {
                    if (ac.has_grad()) {
                        const T* ga = ac.grad_data<T>() + n * boundary * hw;
                        T* dst = gx + n * s.c * hw;
                        for (int64_t i = 0; i < boundary * hw; ++i) dst[i] += ga[i];
                    }
                    if (bc.has_grad()) {
                        const int64_t rest = s.c - boundary;
                        const T* gb = bc.grad_data<T>() + n * rest * hw;
                        T* dst = gx + (n * s.c + boundary) * hw;
                        for (int64_t i = 0; i < rest * hw; ++i) dst[i] += gb[i];
                    }
                }
            });
        });
        Tape::current()->link(b);
    }
    return {a, b};
}

Tensor global_avg_pool(const Tensor& x) {
    const Shape4 s = x.shape();
    Tensor y = Tensor::zeros({s.n, s.c, 1, 1}, x.dtype());
    dispatch_dtype(x.dtype(), [&]<class T>() {
        kern::global_avg_forward(x.data<T>(), y.mut_data<T>(), s.n, s.c, s.h * s.w);
    });
    if (recording({&x})) {
        y.set_requires_grad(true);
        Tensor xc = x, yc = y;
        Tape::current()->record("global_avg_pool", y, [xc, yc]() mutable {
            if (!yc.has_grad() || !xc.requires_grad()) return;
            xc.ensure_grad();
            const Shape4 s = xc.shape();
            dispatch_dtype(yc.dtype(), [&]<class T>() {
                kern::global_avg_backward(yc.grad_data<T>(), xc.mut_grad_data<T>(), s.n, s.c,
                                          s.h * s.w);
            });
        });
    }
    return y;
}

Tensor max_pool2d(const Tensor& x, int64_t kernel, int64_t stride) {
    const Shape4 s = x.shape();
    if (stride < 1) throw UsageError("max_pool2d: stride must be positive");
    if (kernel > s.h || kernel > s.w)
        throw DimensionError("max_pool2d: kernel " + std::to_string(kernel) +
                             " larger than input " + std::to_string(s.h) + "x" +
                             std::to_string(s.w));
    kern::Pool2dDims d{s.n, s.c, s.h, s.w, kernel, stride, (s.h - kernel) / stride + 1,
                       (s.w - kernel) / stride + 1};
    Tensor y = Tensor::zeros({s.n, s.c, d.ho, d.wo}, x.dtype());
    auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(y.numel()));
    dispatch_dtype(x.dtype(), [&]<class T>() {
        kern::max_pool_forward(x.data<T>(), y.mut_data<T>(), argmax->data(), d);
    });
    if (recording({&x})) {
        y.set_requires_grad(true);
        Tensor xc = x, yc = y;
        Tape::current()->record("max_pool2d", y, [xc, yc, argmax, d]() mutable {
            if (!yc.has_grad() || !xc.requires_grad()) return;
            xc.ensure_grad();
            dispatch_dtype(yc.dtype(), [&]<class T>() {
                kern::max_pool_backward(yc.grad_data<T>(), argmax->data(), xc.mut_grad_data<T>(),
                                        d);
            });
        });
    }
    return y;
}

Tensor pixel_shuffle(const Tensor& x, int64_t r) {
    const Shape4 s = x.shape();
    if (r < 1) throw UsageError("pixel_shuffle: factor must be positive");
    if (s.c % (r * r) != 0)
        throw DimensionError("pixel_shuffle: channels " + std::to_string(s.c) +
                             " not divisible by r^2=" + std::to_string(r * r));
    const int64_t c_out = s.c / (r * r);
    Tensor y = Tensor::zeros({s.n, c_out, s.h * r, s.w * r}, x.dtype());
    dispatch_dtype(x.dtype(), [&]<class T>() {
        kern::pixel_shuffle_forward(x.data<T>(), y.mut_data<T>(), s.n, c_out, r, s.h, s.w);
    });
    if (recording({&x})) {
        y.set_requires_grad(true);
        Tensor xc = x, yc = y;
        Tape::current()->record("pixel_shuffle", y, [xc, yc, c_out, r]() mutable {
            if (!yc.has_grad() || !xc.requires_grad()) return;
            xc.ensure_grad();
            const Shape4 s = xc.shape();
            dispatch_dtype(yc.dtype(), [&]<class T>() {
                kern::pixel_shuffle_backward(yc.grad_data<T>(), xc.mut_grad_data<T>(), s.n, c_out,
                                             r, s.h, s.w);
            });
        });
    }
    return y;
}

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b) {
    check_same_dtype(a, b, "matmul");
    const Shape4 as = a.shape(), bs = b.shape();
    if (as.n != bs.n || as.c != bs.c)
        throw DimensionError("matmul: batch axes differ, " + as.str() + " vs " + bs.str());
    const int64_t m = as.h, k = as.w;
    const int64_t bk = transpose_b ? bs.w : bs.h;
    const int64_t p = transpose_b ? bs.h : bs.w;
    if (bk != k)
        throw DimensionError("matmul: inner dimensions disagree, " + std::to_string(k) + " vs " +
                             std::to_string(bk));
    kern::MatmulDims d{as.n * as.c, m, k, p, false, transpose_b, false};
    Tensor y = Tensor::zeros({as.n, as.c, m, p}, a.dtype());
    dispatch_dtype(a.dtype(), [&]<class T>() {
        kern::matmul(a.data<T>(), b.data<T>(), y.mut_data<T>(), d);
    });
    if (recording({&a, &b})) {
        y.set_requires_grad(true);
        Tensor ac = a, bc = b, yc = y;
        Tape::current()->record("matmul", y, [ac, bc, yc, d, transpose_b]() mutable {
            if (!yc.has_grad()) return;
            dispatch_dtype(yc.dtype(), [&]<class T>() {
                const T* gy = yc.grad_data<T>();
                if (ac.requires_grad()) {
                    ac.ensure_grad();
                    // ga = gy @ b^T, or gy @ b when forward used b^T
                    kern::MatmulDims gd{d.batch, d.m, d.p, d.k, false, !transpose_b, true};
                    kern::matmul(gy, bc.data<T>(), ac.mut_grad_data<T>(), gd);
                }
                if (bc.requires_grad()) {
                    bc.ensure_grad();
                    if (!transpose_b) {
                        // gb = a^T @ gy
                        kern::MatmulDims gd{d.batch, d.k, d.m, d.p, true, false, true};
                        kern::matmul(ac.data<T>(), gy, bc.mut_grad_data<T>(), gd);
                    } else {
                        // gb = gy^T @ a
                        kern::MatmulDims gd{d.batch, d.p, d.m, d.k, true, false, true};
                        kern::matmul(gy, ac.data<T>(), bc.mut_grad_data<T>(), gd);
                    }
                }
            });
        });
    }
    return y;
}

Tensor softmax(const Tensor& x, int axis) {
    if (axis < 0 || axis > 3) throw UsageError("softmax: axis must be in [0,3]");
    const Shape4 s = x.shape();
    const int64_t dims[4] = {s.n, s.c, s.h, s.w};
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= dims[i];
    for (int i = axis + 1; i < 4; ++i) inner *= dims[i];
    const int64_t axis_len = dims[axis];

    Tensor y = Tensor::zeros(s, x.dtype());
    dispatch_dtype(x.dtype(), [&]<class T>() {
        kern::softmax_forward(x.data<T>(), y.mut_data<T>(), outer, axis_len, inner);
    });
    if (recording({&x})) {
        y.set_requires_grad(true);
        Tensor xc = x, yc = y;
        Tape::current()->record("softmax", y, [xc, yc, outer, axis_len, inner]() mutable {
            if (!yc.has_grad() || !xc.requires_grad()) return;
            xc.ensure_grad();
            dispatch_dtype(yc.dtype(), [&]<class T>() {
                kern::softmax_backward(yc.data<T>(), yc.grad_data<T>(), xc.mut_grad_data<T>(),
                                       outer, axis_len, inner);
            });
        });
    }
    return y;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    check_same_dtype(x, gamma, "layer_norm");
    check_same_dtype(x, beta, "layer_norm");
    const Shape4 s = x.shape();
    if (gamma.numel() != s.c || beta.numel() != s.c)
        throw DimensionError("layer_norm: gamma/beta must have C=" + std::to_string(s.c) +
                             " elements, got " + std::to_string(gamma.numel()) + "/" +
                             std::to_string(beta.numel()));
    const int64_t hw = s.h * s.w;
    Tensor y = Tensor::zeros(s, x.dtype());
    Tensor mean = Tensor::zeros({s.n, 1, s.h, s.w}, x.dtype());
    Tensor rstd = Tensor::zeros({s.n, 1, s.h, s.w}, x.dtype());
    dispatch_dtype(x.dtype(), [&]<class T>() {
        kern::layer_norm_forward(x.data<T>(), gamma.data<T>(), beta.data<T>(), y.mut_data<T>(),
                                 mean.mut_data<T>(), rstd.mut_data<T>(), s.n, s.c, hw,
                                 static_cast<T>(eps));
    });
    if (recording({&x, &gamma, &beta})) {
        y.set_requires_grad(true);
        Tensor xc = x, gc = gamma, bc = beta, yc = y, mc = mean, rc = rstd;
        Tape::current()->record("layer_norm", y, [xc, gc, bc, yc, mc, rc, hw]() mutable {
            if (!yc.has_grad()) return;
            const Shape4 s = xc.shape();
            dispatch_dtype(yc.dtype(), [&]<class T>() {
                T* gx = nullptr;
                T* gg = nullptr;
                T* gb = nullptr;
                if (xc.requires_grad()) {
                    xc.ensure_grad();
                    gx = xc.mut_grad_data<T>();
                }
                if (gc.requires_grad()) {
                    gc.ensure_grad();
                    gg = gc.mut_grad_data<T>();
                }
                if (bc.requires_grad()) {
                    bc.ensure_grad();
                    gb = bc.mut_grad_data<T>();
                }
                kern::layer_norm_backward(xc.data<T>(), gc.data<T>(), mc.data<T>(), rc.data<T>(),
                                          yc.grad_data<T>(), gx, gg, gb, s.n, s.c, hw);
            });
        });
    }
    return y;
}

Tensor window_partition(const Tensor& x, int64_t win) {
    const Shape4 s = x.shape();
    if (win < 1) throw UsageError("window_partition: window must be positive");
    if (s.h % win != 0 || s.w % win != 0)
        throw DimensionError("window_partition: " + std::to_string(s.h) + "x" +
                             std::to_string(s.w) + " not divisible by window " +
                             std::to_string(win));
    const int64_t nwin = (s.h / win) * (s.w / win);
    Tensor y = Tensor::zeros({s.n * nwin, s.c, win, win}, x.dtype());
    dispatch_dtype(x.dtype(), [&]<class T>() {
        kern::window_partition(x.data<T>(), y.mut_data<T>(), s.n, s.c, s.h, s.w, win, false);
    });
    if (recording({&x})) {
        y.set_requires_grad(true);
        Tensor xc = x, yc = y;
        Tape::current()->record("window_partition", y, [xc, yc, win]() mutable {
            if (!yc.has_grad() || !xc.requires_grad()) return;
            const Shape4 s = xc.shape();
            accumulate_permuted(xc, yc, [&]<class T>(const T* g, T* out) {
                kern::window_partition(g, out, s.n, s.c, s.h, s.w, win, true);
            });
        });
    }
    return y;
}

Tensor window_reverse(const Tensor& windows, int64_t win, int64_t h, int64_t w) {
    const Shape4 s = windows.shape();
    if (s.h != win || s.w != win)
        throw DimensionError("window_reverse: windows are " + std::to_string(s.h) + "x" +
                             std::to_string(s.w) + ", expected " + std::to_string(win) + "x" +
                             std::to_string(win));
    if (h % win != 0 || w % win != 0 || s.n % ((h / win) * (w / win)) != 0)
        throw DimensionError("window_reverse: " + std::to_string(s.n) + " windows of " +
                             std::to_string(win) + " do not tile " + std::to_string(h) + "x" +
                             std::to_string(w));
    const int64_t nwin = (h / win) * (w / win);
    const int64_t n = s.n / nwin;
    Tensor y = Tensor::zeros({n, s.c, h, w}, windows.dtype());
    dispatch_dtype(windows.dtype(), [&]<class T>() {
        kern::window_partition(windows.data<T>(), y.mut_data<T>(), n, s.c, h, w, win, true);
    });
    if (recording({&windows})) {
        y.set_requires_grad(true);
        Tensor xc = windows, yc = y;
        Tape::current()->record("window_reverse", y, [xc, yc, win, n, h, w]() mutable {
            if (!yc.has_grad() || !xc.requires_grad()) return;
            const int64_t c = xc.shape().c;
            accumulate_permuted(xc, yc, [&]<class T>(const T* g, T* out) {
                kern::window_partition(g, out, n, c, h, w, win, false);
            });
        });
    }
    return y;
}

Tensor cyclic_shift(const Tensor& x, int64_t dy, int64_t dx) {
    const Shape4 s = x.shape();
    Tensor y = Tensor::zeros(s, x.dtype());
    dispatch_dtype(x.dtype(), [&]<class T>() {
        kern::cyclic_shift(x.data<T>(), y.mut_data<T>(), s.n, s.c, s.h, s.w, dy, dx);
    });
    if (recording({&x})) {
        y.set_requires_grad(true);
        Tensor xc = x, yc = y;
        Tape::current()->record("cyclic_shift", y, [xc, yc, dy, dx]() mutable {
            if (!yc.has_grad() || !xc.requires_grad()) return;
            const Shape4 s = xc.shape();
            accumulate_permuted(xc, yc, [&]<class T>(const T* g, T* out) {
                kern::cyclic_shift(g, out, s.n, s.c, s.h, s.w, -dy, -dx);
            });
        });
    }
    return y;
}

Tensor heads_split(const Tensor& x, int64_t heads) {
    const Shape4 s = x.shape();
    if (heads < 1 || s.c % heads != 0)
        throw DimensionError("heads_split: channels " + std::to_string(s.c) +
                             " not divisible by heads " + std::to_string(heads));
    Tensor y = Tensor::zeros({s.n, heads, s.h * s.w, s.c / heads}, x.dtype());
    dispatch_dtype(x.dtype(), [&]<class T>() {
        kern::heads_split(x.data<T>(), y.mut_data<T>(), s.n, s.c, s.h, s.w, heads, false);
    });
    if (recording({&x})) {
        y.set_requires_grad(true);
        Tensor xc = x, yc = y;
        Tape::current()->record("heads_split", y, [xc, yc, heads]() mutable {
            if (!yc.has_grad() || !xc.requires_grad()) return;
            const Shape4 s = xc.shape();
            accumulate_permuted(xc, yc, [&]<class T>(const T* g, T* out) {
                kern::heads_split(g, out, s.n, s.c, s.h, s.w, heads, true);
            });
        });
    }
    return y;
}

Tensor heads_merge(const Tensor& x, int64_t h, int64_t w) {
    const Shape4 s = x.shape();  // [B, heads, tokens, dim]
    if (s.h != h * w)
        throw DimensionError("heads_merge: token count " + std::to_string(s.h) +
                             " does not equal " + std::to_string(h) + "x" + std::to_string(w));
    const int64_t channels = s.c * s.w;
    Tensor y = Tensor::zeros({s.n, channels, h, w}, x.dtype());
    dispatch_dtype(x.dtype(), [&]<class T>() {
        kern::heads_split(x.data<T>(), y.mut_data<T>(), s.n, channels, h, w, s.c, true);
    });
    if (recording({&x})) {
        y.set_requires_grad(true);
        Tensor xc = x, yc = y;
        const int64_t heads = s.c;
        Tape::current()->record("heads_merge", y, [xc, yc, heads, h, w, channels]() mutable {
            if (!yc.has_grad() || !xc.requires_grad()) return;
            const int64_t n = xc.shape().n;
            accumulate_permuted(xc, yc, [&]<class T>(const T* g, T* out) {
                kern::heads_split(g, out, n, channels, h, w, heads, false);
            });
        });
    }
    return y;
}

Tensor pad_reflect(const Tensor& x, int64_t pt, int64_t pb, int64_t pl, int64_t pr) {
    if (pt < 0 || pb < 0 || pl < 0 || pr < 0) throw UsageError("pad_reflect: negative padding");
    const Shape4 s = x.shape();
    Tensor y = Tensor::zeros({s.n, s.c, s.h + pt + pb, s.w + pl + pr}, x.dtype());
    dispatch_dtype(x.dtype(), [&]<class T>() {
        kern::pad_reflect_forward(x.data<T>(), y.mut_data<T>(), s.n, s.c, s.h, s.w, pt, pb, pl,
                                  pr);
    });
    if (recording({&x})) {
        y.set_requires_grad(true);
        Tensor xc = x, yc = y;
        Tape::current()->record("pad_reflect", y, [xc, yc, pt, pb, pl, pr]() mutable {
            if (!yc.has_grad() || !xc.requires_grad()) return;
            xc.ensure_grad();
            const Shape4 s = xc.shape();
            dispatch_dtype(yc.dtype(), [&]<class T>() {
                kern::pad_reflect_backward(yc.grad_data<T>(), xc.mut_grad_data<T>(), s.n, s.c,
                                           s.h, s.w, pt, pb, pl, pr);
            });
        });
    }
    return y;
}

Tensor crop(const Tensor& x, int64_t y0, int64_t x0, int64_t h, int64_t w) {
    const Shape4 s = x.shape();
    if (y0 < 0 || x0 < 0 || h < 1 || w < 1 || y0 + h > s.h || x0 + w > s.w)
        throw IndexError("crop: region " + std::to_string(h) + "x" + std::to_string(w) + "+" +
                         std::to_string(y0) + "+" + std::to_string(x0) + " outside " + s.str());
    Tensor y = Tensor::zeros({s.n, s.c, h, w}, x.dtype());
    dispatch_dtype(x.dtype(), [&]<class T>() {
        kern::crop_forward(x.data<T>(), y.mut_data<T>(), s.n, s.c, s.h, s.w, y0, x0, h, w);
    });
    if (recording({&x})) {
        y.set_requires_grad(true);
        Tensor xc = x, yc = y;
        Tape::current()->record("crop", y, [xc, yc, y0, x0, h, w]() mutable {
            if (!yc.has_grad() || !xc.requires_grad()) return;
            xc.ensure_grad();
            const Shape4 s = xc.shape();
            dispatch_dtype(yc.dtype(), [&]<class T>() {
                kern::crop_backward(yc.grad_data<T>(), xc.mut_grad_data<T>(), s.n, s.c, s.h, s.w,
                                    y0, x0, h, w);
            });
        });
    }
    return y;
}

Tensor upsample_nearest(const Tensor& x, int64_t out_h, int64_t out_w) {
    if (out_h < 1 || out_w < 1) throw UsageError("upsample_nearest: output extents must be positive");
    const Shape4 s = x.shape();
    Tensor y = Tensor::zeros({s.n, s.c, out_h, out_w}, x.dtype());
    dispatch_dtype(x.dtype(), [&]<class T>() {
        kern::upsample_nearest_forward(x.data<T>(), y.mut_data<T>(), s.n, s.c, s.h, s.w, out_h,
                                       out_w);
    });
    if (recording({&x})) {
        y.set_requires_grad(true);
        Tensor xc = x, yc = y;
        Tape::current()->record("upsample_nearest", y, [xc, yc, out_h, out_w]() mutable {
            if (!yc.has_grad() || !xc.requires_grad()) return;
            xc.ensure_grad();
            const Shape4 s = xc.shape();
            dispatch_dtype(yc.dtype(), [&]<class T>() {
                kern::upsample_nearest_backward(yc.grad_data<T>(), xc.mut_grad_data<T>(), s.n,
                                                s.c, s.h, s.w, out_h, out_w);
            });
        });
    }
    return y;
}

Tensor sum(const Tensor& x) {
    Tensor y = Tensor::zeros({1, 1, 1, 1}, x.dtype());
    dispatch_dtype(x.dtype(), [&]<class T>() {
        y.mut_data<T>()[0] = kern::sum_all(x.data<T>(), x.numel());
    });
    if (recording({&x})) {
        y.set_requires_grad(true);
        Tensor xc = x, yc = y;
        Tape::current()->record("sum", y, [xc, yc]() mutable {
            if (!yc.has_grad() || !xc.requires_grad()) return;
            xc.ensure_grad();
            dispatch_dtype(yc.dtype(), [&]<class T>() {
                const T g = yc.grad_data<T>()[0];
                T* gx = xc.mut_grad_data<T>();
                const int64_t count = xc.numel();
                for (int64_t i = 0; i < count; ++i) gx[i] += g;
            });
        });
    }
    return y;
}

Tensor l1_loss(const Tensor& pred, const Tensor& target) {
    check_same_dtype(pred, target, "l1_loss");
    if (!(pred.shape() == target.shape()))
        throw DimensionError("l1_loss: shapes differ, " + pred.shape().str() + " vs " +
                             target.shape().str());
    Tensor y = Tensor::zeros({1, 1, 1, 1}, pred.dtype());
    dispatch_dtype(pred.dtype(), [&]<class T>() {
        y.mut_data<T>()[0] = kern::l1_mean(pred.data<T>(), target.data<T>(), pred.numel());
    });
    if (recording({&pred, &target})) {
        y.set_requires_grad(true);
        Tensor pc = pred, tc = target, yc = y;
        Tape::current()->record("l1_loss", y, [pc, tc, yc]() mutable {
            if (!yc.has_grad()) return;
            dispatch_dtype(yc.dtype(), [&]<class T>() {
                T* gp = nullptr;
                T* gt = nullptr;
                if (pc.requires_grad()) {
                    pc.ensure_grad();
                    gp = pc.mut_grad_data<T>();
                }
                if (tc.requires_grad()) {
                    tc.ensure_grad();
                    gt = tc.mut_grad_data<T>();
                }
                kern::l1_mean_backward(pc.data<T>(), tc.data<T>(), yc.grad_data<T>()[0], gp, gt,
                                       pc.numel());
            });
        });
    }
    return y;
}

void clamp_values(Tensor& x, double lo, double hi) {
    dispatch_dtype(x.dtype(), [&]<class T>() {
        T* p = x.mut_data<T>();
        const T l = static_cast<T>(lo), h = static_cast<T>(hi);
        for (int64_t i = 0; i < x.numel(); ++i) p[i] = std::min(h, std::max(l, p[i]));
    });
}

}  // namespace epnet
