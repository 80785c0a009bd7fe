#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "epnet/errors.hpp"

namespace epnet {

enum class DType { f32, f64 };

inline const char* dtype_name(DType dt) { return dt == DType::f32 ? "f32" : "f64"; }

// Dense NCHW extents. All tensors in this engine are rank 4.
struct Shape4 {
    int64_t n = 0, c = 0, h = 0, w = 0;

    int64_t numel() const { return n * c * h * w; }
    bool operator==(const Shape4&) const = default;
    std::string str() const {
        return "[" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) +
               "," + std::to_string(w) + "]";
    }
};

// Runtime dtype dispatch: invokes f.operator()<float>() or <double>().
template <class F>
decltype(auto) dispatch_dtype(DType dt, F&& f) {
    if (dt == DType::f32) return std::forward<F>(f).template operator()<float>();
    return std::forward<F>(f).template operator()<double>();
}

class Tape;

namespace detail {

struct TapeState;

struct TensorData {
    Shape4 shape;
    DType dtype = DType::f32;
    std::vector<float> data32;
    std::vector<double> data64;
    std::vector<float> grad32;
    std::vector<double> grad64;
    bool requires_grad = false;
    std::weak_ptr<TapeState> tape;  // tape that recorded the producing op, if any

    template <class T>
    std::vector<T>& buf();
    template <class T>
    std::vector<T>& gbuf();
};

template <>
inline std::vector<float>& TensorData::buf<float>() { return data32; }
template <>
inline std::vector<double>& TensorData::buf<double>() { return data64; }
template <>
inline std::vector<float>& TensorData::gbuf<float>() { return grad32; }
template <>
inline std::vector<double>& TensorData::gbuf<double>() { return grad64; }

}  // namespace detail

// Value-semantic handle to shared NCHW storage with an optional gradient
// buffer. Copies alias the same data; use clone() for a deep copy.
class Tensor {
  public:
    Tensor() : d_(std::make_shared<detail::TensorData>()) {}

    static Tensor zeros(Shape4 s, DType dt = DType::f32);
    static Tensor full(Shape4 s, double value, DType dt = DType::f32);
    static Tensor from_values(Shape4 s, const std::vector<double>& values, DType dt = DType::f32);

    const Shape4& shape() const { return d_->shape; }
    int64_t numel() const { return d_->shape.numel(); }
    DType dtype() const { return d_->dtype; }

    bool requires_grad() const { return d_->requires_grad; }
    Tensor& set_requires_grad(bool rg) {
        d_->requires_grad = rg;
        return *this;
    }

    template <class T>
    const T* data() const {
        check_type<T>();
        return d_->buf<T>().data();
    }
    template <class T>
    T* mut_data() {
        check_type<T>();
        return d_->buf<T>().data();
    }

    bool has_grad() const { return !d_->grad32.empty() || !d_->grad64.empty(); }
    void ensure_grad();   // allocate zero gradient buffer if absent
    void zero_grad();     // zero (and allocate) the gradient buffer
    void drop_grad();     // release the gradient buffer

    template <class T>
    const T* grad_data() const {
        check_type<T>();
        return d_->gbuf<T>().data();
    }
    template <class T>
    T* mut_grad_data() {
        check_type<T>();
        return d_->gbuf<T>().data();
    }

    // Element accessors for tests and glue code (slow path).
    double at(int64_t n, int64_t c, int64_t h, int64_t w) const;
    void set(int64_t n, int64_t c, int64_t h, int64_t w, double v);
    double grad_at(int64_t n, int64_t c, int64_t h, int64_t w) const;

    int64_t index(int64_t n, int64_t c, int64_t h, int64_t w) const {
        const auto& s = d_->shape;
        return ((n * s.c + c) * s.h + h) * s.w + w;
    }

    Tensor clone() const;               // deep copy of values (not grads, not tape)
    Tensor to_dtype(DType dt) const;    // converting deep copy
    Tensor detached() const;            // alias of values without grad linkage

    bool same_storage(const Tensor& o) const { return d_ == o.d_; }
    bool all_finite() const;

    // Tape linkage (managed by op recording; see ops.hpp).
    std::shared_ptr<detail::TensorData> raw() const { return d_; }

  private:
    template <class T>
    void check_type() const {
        constexpr bool is32 = std::is_same_v<T, float>;
        if ((d_->dtype == DType::f32) != is32)
            throw UsageError(std::string("tensor dtype is ") + dtype_name(d_->dtype) +
                             ", requested " + (is32 ? "f32" : "f64"));
    }

    std::shared_ptr<detail::TensorData> d_;

    friend class Tape;
};

// Ordered record of executed operations. Creating a Tape makes it the current
// recording target for the enclosing scope; destruction restores the previous
// one. Ops record themselves only while a tape is current and some input
// requires gradients. backward() replays the record once, in reverse.
class Tape {
  public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* current();

    size_t size() const;

    // Seeds d(loss)/d(loss) = 1 and accumulates gradients into every
    // requires_grad tensor reachable from `loss`. Repeated calls accumulate;
    // callers zero gradients between optimizer steps.
    void backward(const Tensor& loss);

    void record(const char* name, const Tensor& output, std::function<void()> backward_fn);

    // Associate an additional output (ops with multiple results) with this tape.
    void link(const Tensor& output);

  private:
    std::shared_ptr<detail::TapeState> state_;
    Tape* prev_ = nullptr;
};

// Convenience: backward through the tape that produced `loss`.
// Errors with UsageError if the tensor was not recorded on a live tape.
void backward(const Tensor& loss);

// Deterministic helpers for tests and initialization.
Tensor uniform_tensor(Shape4 s, double lo, double hi, std::mt19937_64& rng, DType dt = DType::f32);
Tensor normal_tensor(Shape4 s, double mean, double stddev, std::mt19937_64& rng, DType dt = DType::f32);

}  // namespace epnet
