#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <new>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace idn {

// Raised on any dimension disagreement. The message names the offending
// dimension so callers can surface it directly.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Rank-4 extent in (N, C, H, W) order.
struct Dims {
  std::size_t n = 0;
  std::size_t c = 0;
  std::size_t h = 0;
  std::size_t w = 0;

  constexpr std::size_t count() const { return n * c * h * w; }
  constexpr std::size_t plane() const { return h * w; }

  friend constexpr bool operator==(const Dims&, const Dims&) = default;

  std::string str() const {
    std::ostringstream os;
    os << '(' << n << ", " << c << ", " << h << ", " << w << ')';
    return os.str();
  }
};

template <typename... Args>
[[noreturn]] inline void shape_fail(Args&&... parts) {
  std::ostringstream os;
  (os << ... << std::forward<Args>(parts));
  throw ShapeError(os.str());
}

// Every buffer starts on a 64-byte boundary. Vectorised kernels pick their
// peeling from the address, so mixed alignment would make bitwise results
// depend on where the allocator happened to put a tensor.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }

  template <typename U>
  friend bool operator==(const AlignedAllocator&, const AlignedAllocator<U>&) {
    return true;
  }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

// Dense rank-4 tensor, contiguous row-major storage.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(Dims dims, T fill = T(0)) : dims_(dims), data_(dims.count(), fill) {}

  BasicTensor(Dims dims, const std::vector<T>& data) : BasicTensor(dims, AlignedVector<T>(data.begin(), data.end())) {}
  BasicTensor(Dims dims, AlignedVector<T> data) : dims_(dims), data_(std::move(data)) {
    if (data_.size() != dims_.count()) {
      shape_fail("tensor data length ", data_.size(), " does not match dims ", dims_.str());
    }
  }

  static BasicTensor vector(std::span<const T> values) {
    return BasicTensor({1, values.size(), 1, 1}, std::vector<T>(values.begin(), values.end()));
  }

  static BasicTensor scalar(T v) { return BasicTensor({1, 1, 1, 1}, v); }

  const Dims& dims() const { return dims_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::size_t offset(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    return ((n * dims_.c + c) * dims_.h + y) * dims_.w + x;
  }
  T& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) { return data_[offset(n, c, y, x)]; }
  const T& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    return data_[offset(n, c, y, x)];
  }

  // Pointer to the start of plane (n, c).
  T* plane(std::size_t n, std::size_t c) { return data_.data() + (n * dims_.c + c) * dims_.plane(); }
  const T* plane(std::size_t n, std::size_t c) const {
    return data_.data() + (n * dims_.c + c) * dims_.plane();
  }

  T item() const {
    if (data_.size() != 1) shape_fail("item() on tensor with dims ", dims_.str());
    return data_[0];
  }

  BasicTensor reshaped(Dims dims) const {
    if (dims.count() != dims_.count()) {
      shape_fail("cannot reshape ", dims_.str(), " to ", dims.str());
    }
    return BasicTensor(dims, data_);
  }

  // Batch item n as a (1, C, H, W) tensor.
  BasicTensor batch_item(std::size_t n) const {
    if (n >= dims_.n) shape_fail("batch index ", n, " out of range for N=", dims_.n);
    const std::size_t per = dims_.c * dims_.plane();
    return BasicTensor({1, dims_.c, dims_.h, dims_.w},
                       AlignedVector<T>(data_.begin() + n * per, data_.begin() + (n + 1) * per));
  }

  template <typename U>
  BasicTensor<U> cast() const {
    AlignedVector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return BasicTensor<U>(dims_, std::move(out));
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.dims_ == b.dims_ && a.data_ == b.data_;
  }

 private:
  Dims dims_;
  AlignedVector<T> data_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

// Stack batch-1 tensors along N.
template <typename T>
BasicTensor<T> stack_batch(std::span<const BasicTensor<T>> items) {
  if (items.empty()) return {};
  const Dims d0 = items[0].dims();
  AlignedVector<T> data;
  data.reserve(d0.count() * items.size());
  for (const auto& t : items) {
    const Dims d = t.dims();
    if (d.c != d0.c || d.h != d0.h || d.w != d0.w || d.n != d0.n) {
      shape_fail("stack_batch: item dims ", d.str(), " differ from ", d0.str());
    }
    data.insert(data.end(), t.values().begin(), t.values().end());
  }
  return BasicTensor<T>({d0.n * items.size(), d0.c, d0.h, d0.w}, std::move(data));
}

template <typename T>
T max_abs_diff(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.dims() != b.dims()) shape_fail("max_abs_diff: ", a.dims().str(), " vs ", b.dims().str());
  T m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, static_cast<T>(std::abs(a[i] - b[i])));
  return m;
}

}  // namespace idn
