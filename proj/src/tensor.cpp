#include "epnet/tensor.hpp"

#include <cmath>

namespace epnet {

namespace detail {

struct TapeState {
    struct Node {
        const char* name;
        std::function<void()> backward;
    };
    std::vector<Node> nodes;
};

}  // namespace detail

namespace {
thread_local Tape* g_current_tape = nullptr;

void check_shape(const Shape4& s) {
    if (s.n < 0 || s.c < 0 || s.h < 0 || s.w < 0)
        throw DimensionError("tensor shape has negative extent " + s.str());
}
}  // namespace

Tensor Tensor::zeros(Shape4 s, DType dt) {
    check_shape(s);
    Tensor t;
    t.d_->shape = s;
    t.d_->dtype = dt;
    if (dt == DType::f32)
        t.d_->data32.assign(static_cast<size_t>(s.numel()), 0.0f);
    else
        t.d_->data64.assign(static_cast<size_t>(s.numel()), 0.0);
    return t;
}

Tensor Tensor::full(Shape4 s, double value, DType dt) {
    Tensor t = zeros(s, dt);
    dispatch_dtype(dt, [&]<class T>() {
        T* p = t.mut_data<T>();
        for (int64_t i = 0; i < s.numel(); ++i) p[i] = static_cast<T>(value);
    });
    return t;
}

Tensor Tensor::from_values(Shape4 s, const std::vector<double>& values, DType dt) {
    if (static_cast<int64_t>(values.size()) != s.numel())
        throw DimensionError("from_values: " + std::to_string(values.size()) +
                             " values for shape " + s.str());
    Tensor t = zeros(s, dt);
    dispatch_dtype(dt, [&]<class T>() {
        T* p = t.mut_data<T>();
        for (size_t i = 0; i < values.size(); ++i) p[i] = static_cast<T>(values[i]);
    });
    return t;
}

void Tensor::ensure_grad() {
    dispatch_dtype(d_->dtype, [&]<class T>() {
        auto& g = d_->gbuf<T>();
        if (g.empty()) g.assign(static_cast<size_t>(numel()), T(0));
    });
}

void Tensor::zero_grad() {
    dispatch_dtype(d_->dtype, [&]<class T>() {
        d_->gbuf<T>().assign(static_cast<size_t>(numel()), T(0));
    });
}

void Tensor::drop_grad() {
    d_->grad32.clear();
    d_->grad32.shrink_to_fit();
    d_->grad64.clear();
    d_->grad64.shrink_to_fit();
}

double Tensor::at(int64_t n, int64_t c, int64_t h, int64_t w) const {
    return dispatch_dtype(d_->dtype, [&]<class T>() -> double {
        return static_cast<double>(data<T>()[index(n, c, h, w)]);
    });
}

void Tensor::set(int64_t n, int64_t c, int64_t h, int64_t w, double v) {
    dispatch_dtype(d_->dtype, [&]<class T>() { mut_data<T>()[index(n, c, h, w)] = static_cast<T>(v); });
}

double Tensor::grad_at(int64_t n, int64_t c, int64_t h, int64_t w) const {
    if (!has_grad()) throw UsageError("grad_at: tensor has no gradient buffer");
    return dispatch_dtype(d_->dtype, [&]<class T>() -> double {
        return static_cast<double>(grad_data<T>()[index(n, c, h, w)]);
    });
}

Tensor Tensor::clone() const {
    Tensor t;
    t.d_->shape = d_->shape;
    t.d_->dtype = d_->dtype;
    t.d_->data32 = d_->data32;
    t.d_->data64 = d_->data64;
    return t;
}

Tensor Tensor::to_dtype(DType dt) const {
    if (dt == d_->dtype) return clone();
    Tensor t = zeros(d_->shape, dt);
    if (dt == DType::f64) {
        double* dst = t.mut_data<double>();
        const float* src = data<float>();
        for (int64_t i = 0; i < numel(); ++i) dst[i] = static_cast<double>(src[i]);
    } else {
        float* dst = t.mut_data<float>();
        const double* src = data<double>();
        for (int64_t i = 0; i < numel(); ++i) dst[i] = static_cast<float>(src[i]);
    }
    return t;
}

Tensor Tensor::detached() const {
    Tensor t;
    t.d_ = std::make_shared<detail::TensorData>();
    t.d_->shape = d_->shape;
    t.d_->dtype = d_->dtype;
    t.d_->data32 = d_->data32;  // value copy, no tape, no grad
    t.d_->data64 = d_->data64;
    return t;
}

bool Tensor::all_finite() const {
    return dispatch_dtype(d_->dtype, [&]<class T>() -> bool {
        const T* p = data<T>();
        for (int64_t i = 0; i < numel(); ++i)
            if (!std::isfinite(p[i])) return false;
        return true;
    });
}

Tape::Tape() : state_(std::make_shared<detail::TapeState>()) {
    prev_ = g_current_tape;
    g_current_tape = this;
}

Tape::~Tape() { g_current_tape = prev_; }

Tape* Tape::current() { return g_current_tape; }

size_t Tape::size() const { return state_->nodes.size(); }

void Tape::record(const char* name, const Tensor& output, std::function<void()> backward_fn) {
    output.raw()->tape = state_;
    state_->nodes.push_back({name, std::move(backward_fn)});
}

void Tape::link(const Tensor& output) { output.raw()->tape = state_; }

namespace {
void run_backward(detail::TapeState& state, const Tensor& loss) {
    if (loss.shape() != Shape4{1, 1, 1, 1})
        throw UsageError("backward: loss must have shape [1,1,1,1], got " + loss.shape().str());
    Tensor seed = loss;
    seed.ensure_grad();
    dispatch_dtype(seed.dtype(), [&]<class T>() { seed.mut_grad_data<T>()[0] += T(1); });
    for (auto it = state.nodes.rbegin(); it != state.nodes.rend(); ++it) it->backward();
}
}  // namespace

void Tape::backward(const Tensor& loss) {
    auto producer = loss.raw()->tape.lock();
    if (!producer || producer != state_)
        throw UsageError("backward: loss was not produced on this tape");
    run_backward(*state_, loss);
}

void backward(const Tensor& loss) {
    auto producer = loss.raw()->tape.lock();
    if (!producer) throw UsageError("backward: tensor has no tape");
    run_backward(*producer, loss);
}

Tensor uniform_tensor(Shape4 s, double lo, double hi, std::mt19937_64& rng, DType dt) {
    Tensor t = Tensor::zeros(s, dt);
    dispatch_dtype(dt, [&]<class T>() {
        T* p = t.mut_data<T>();
        for (int64_t i = 0; i < s.numel(); ++i) {
            const double u = static_cast<double>(rng()) / static_cast<double>(UINT64_MAX);
            p[i] = static_cast<T>(lo + (hi - lo) * u);
        }
    });
    return t;
}

Tensor normal_tensor(Shape4 s, double mean, double stddev, std::mt19937_64& rng, DType dt) {
    Tensor t = Tensor::zeros(s, dt);
    dispatch_dtype(dt, [&]<class T>() {
        T* p = t.mut_data<T>();
        // Box-Muller keeps the draw sequence identical across library versions.
        for (int64_t i = 0; i < s.numel(); ++i) {
            double u1 = (static_cast<double>(rng()) + 1.0) / (static_cast<double>(UINT64_MAX) + 2.0);
            double u2 = static_cast<double>(rng()) / static_cast<double>(UINT64_MAX);
            const double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
            p[i] = static_cast<T>(mean + stddev * z);
        }
    });
    return t;
}

}  // namespace epnet
