#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "limm/error.hpp"

namespace limm {

using Shape = std::vector<int>;

inline std::int64_t numel(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

/// Dense row-major tensor with an optional gradient buffer.
template <class T>
struct TensorNode {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // sized lazily, same length as data when in use
    bool requires_grad = false;

    std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    }
    void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
};

template <class T>
using Tensor = std::shared_ptr<TensorNode<T>>;

template <class T>
Tensor<T> make_tensor(Shape shape, bool requires_grad = false) {
    auto t = std::make_shared<TensorNode<T>>();
    for (int d : shape)
        if (d <= 0) throw InvalidArgument("tensor dimension must be positive, got shape " + shape_str(shape));
    t->shape = std::move(shape);
    t->data.assign(static_cast<size_t>(numel(t->shape)), T(0));
    t->requires_grad = requires_grad;
    if (requires_grad) t->ensure_grad();
    return t;
}

template <class T>
Tensor<T> make_tensor(Shape shape, std::vector<T> data, bool requires_grad = false) {
    auto t = make_tensor<T>(std::move(shape), requires_grad);
    if (static_cast<std::int64_t>(data.size()) != t->size())
        throw InvalidArgument("data length does not match shape " + shape_str(t->shape));
    t->data = std::move(data);
    return t;
}

template <class T>
Tensor<T> scalar_tensor(T v, bool requires_grad = false) {
    return make_tensor<T>({1}, {v}, requires_grad);
}

/// Detached copy: same shape/values, no grad, no history.
template <class T>
Tensor<T> detach(const Tensor<T>& x) {
    auto t = std::make_shared<TensorNode<T>>();
    t->shape = x->shape;
    t->data = x->data;
    return t;
}

template <class T>
void check_finite(const Tensor<T>& t, const char* op) {
    for (T v : t->data)
        if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + op);
}

/// Eager tape of executed primitives; one reverse sweep, then discarded.
/// Single-owner: never share an instance across threads.
template <class T>
class Graph {
  public:
    void record(std::function<void()> backward_fn) { tape_.push_back(std::move(backward_fn)); }

    size_t size() const { return tape_.size(); }

    /// Seeds d(loss)/d(loss) = 1 and replays the tape in exact reverse
    /// execution order, accumulating gradients additively at fan-out.
    void backward(const Tensor<T>& loss) {
        if (loss->size() != 1) throw InvalidArgument("backward requires a scalar loss");
        loss->ensure_grad();
        loss->grad[0] = T(1);
        for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) (*it)();
    }

    void clear() { tape_.clear(); }

  private:
    std::vector<std::function<void()>> tape_;
};

// ---------------------------------------------------------------------------
// TNSR v1 file format: one-line ASCII header
//   "TNSR v1 <dtype> <rank> <dims...>\n"
// followed by little-endian raw values (f32 or f64).
// ---------------------------------------------------------------------------

template <class T>
const char* tnsr_dtype_name();
template <>
inline const char* tnsr_dtype_name<float>() { return "f32"; }
template <>
inline const char* tnsr_dtype_name<double>() { return "f64"; }

template <class T>
void write_tnsr(std::ostream& os, const Tensor<T>& t) {
    os << "TNSR v1 " << tnsr_dtype_name<T>() << " " << t->shape.size();
    for (int d : t->shape) os << " " << d;
    os << "\n";
    os.write(reinterpret_cast<const char*>(t->data.data()),
             static_cast<std::streamsize>(t->data.size() * sizeof(T)));
}

template <class T>
void save_tnsr(const std::string& path, const Tensor<T>& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for write: " + path);
    write_tnsr(os, t);
    if (!os) throw IoError("write failed: " + path);
}

template <class T>
Tensor<T> read_tnsr(std::istream& is) {
    std::string line;
    if (!std::getline(is, line)) throw ParseError("TNSR: missing header");
    std::istringstream hs(line);
    std::string magic, ver, dtype;
    size_t rank = 0;
    if (!(hs >> magic >> ver >> dtype >> rank) || magic != "TNSR" || ver != "v1")
        throw ParseError("TNSR: bad header: " + line);
    Shape shape(rank);
    for (size_t i = 0; i < rank; ++i)
        if (!(hs >> shape[i])) throw ParseError("TNSR: bad dims: " + line);
    auto t = make_tensor<T>(shape);
    if (dtype == tnsr_dtype_name<T>()) {
        is.read(reinterpret_cast<char*>(t->data.data()),
                static_cast<std::streamsize>(t->data.size() * sizeof(T)));
        if (!is) throw ParseError("TNSR: truncated payload");
    } else if (dtype == "f32") {
        std::vector<float> buf(t->data.size());
        is.read(reinterpret_cast<char*>(buf.data()),
                static_cast<std::streamsize>(buf.size() * sizeof(float)));
        if (!is) throw ParseError("TNSR: truncated payload");
        for (size_t i = 0; i < buf.size(); ++i) t->data[i] = static_cast<T>(buf[i]);
    } else if (dtype == "f64") {
        std::vector<double> buf(t->data.size());
        is.read(reinterpret_cast<char*>(buf.data()),
                static_cast<std::streamsize>(buf.size() * sizeof(double)));
        if (!is) throw ParseError("TNSR: truncated payload");
        for (size_t i = 0; i < buf.size(); ++i) t->data[i] = static_cast<T>(buf[i]);
    } else {
        throw ParseError("TNSR: unknown dtype " + dtype);
    }
    return t;
}

template <class T>
Tensor<T> load_tnsr(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    return read_tnsr<T>(is);
}

}  // namespace limm
