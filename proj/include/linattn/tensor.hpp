#pragma once

// Dense row-major tensor substrate for the whole engine: shape-checked
// arithmetic, deterministic matmuls, seeded RNG, a tiny binary format, and
// global allocation counters used by the benchmark instrumentation.

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

namespace linattn {

static_assert(std::endian::native == std::endian::little,
              "serialization code assumes a little-endian host");

using Shape = std::vector<std::size_t>;

// ---------------------------------------------------------------------------
// Allocation instrumentation. Every Tensor buffer is counted here so that
// benchmarks can report peak additional bytes without touching OS counters.
// ---------------------------------------------------------------------------

struct AllocStats {
  std::uint64_t current_bytes = 0;
  std::uint64_t peak_bytes = 0;
};

namespace detail {

inline std::atomic<std::uint64_t> g_alloc_current{0};
inline std::atomic<std::uint64_t> g_alloc_peak{0};

inline void note_alloc(std::size_t bytes) {
  const std::uint64_t cur = g_alloc_current.fetch_add(bytes) + bytes;
  std::uint64_t peak = g_alloc_peak.load();
  while (cur > peak && !g_alloc_peak.compare_exchange_weak(peak, cur)) {
  }
}

inline void note_free(std::size_t bytes) { g_alloc_current.fetch_sub(bytes); }

}  // namespace detail

inline AllocStats alloc_stats() {
  return {detail::g_alloc_current.load(), detail::g_alloc_peak.load()};
}

// Resets the peak watermark to the currently live bytes.
inline void reset_alloc_peak() {
  detail::g_alloc_peak.store(detail::g_alloc_current.load());
}

// ---------------------------------------------------------------------------
// Dtype tags
// ---------------------------------------------------------------------------

enum class Dtype : std::uint8_t { F32 = 0, F64 = 1 };

template <typename T>
struct dtype_of;
template <>
struct dtype_of<float> {
  static constexpr Dtype value = Dtype::F32;
  static constexpr const char* name = "f32";
};
template <>
struct dtype_of<double> {
  static constexpr Dtype value = Dtype::F64;
  static constexpr const char* name = "f64";
};

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

[[noreturn]] inline void shape_fail(const std::string& op, const Shape& a,
                                    const Shape& b) {
  throw std::invalid_argument(op + ": incompatible shapes " + shape_str(a) +
                              " and " + shape_str(b));
}

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

template <typename T>
class Tensor {
  static_assert(std::is_floating_point_v<T>);

 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    size_ = 1;
    for (std::size_t d : shape_) size_ *= d;
    data_.reset(new T[size_]());
    detail::note_alloc(bytes());
  }

  Tensor(Shape shape, std::vector<T> values) : Tensor(std::move(shape)) {
    if (values.size() != size_)
      throw std::invalid_argument("Tensor: " + std::to_string(values.size()) +
                                  " values for shape " + shape_str(shape_));
    std::copy(values.begin(), values.end(), data_.get());
  }

  ~Tensor() {
    if (data_) detail::note_free(bytes());
  }

  Tensor(const Tensor& other) : shape_(other.shape_), size_(other.size_) {
    if (other.data_) {
      data_.reset(new T[size_]);
      std::memcpy(data_.get(), other.data_.get(), bytes());
      detail::note_alloc(bytes());
    }
  }

  Tensor& operator=(const Tensor& other) {
    if (this == &other) return *this;
    Tensor tmp(other);
    *this = std::move(tmp);
    return *this;
  }

  Tensor(Tensor&& other) noexcept
      : shape_(std::move(other.shape_)),
        size_(other.size_),
        data_(std::move(other.data_)) {
    other.size_ = 0;
    other.shape_.clear();
  }

  Tensor& operator=(Tensor&& other) noexcept {
    if (this == &other) return *this;
    if (data_) detail::note_free(bytes());
    shape_ = std::move(other.shape_);
    size_ = other.size_;
    data_ = std::move(other.data_);
    other.size_ = 0;
    other.shape_.clear();
    return *this;
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, T v) {
    Tensor t(std::move(shape));
    t.fill(v);
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return size_; }
  std::size_t bytes() const { return size_ * sizeof(T); }
  bool empty() const { return data_ == nullptr; }

  // Row-major stride of one step along `axis`.
  std::size_t stride(std::size_t axis) const {
    std::size_t s = 1;
    for (std::size_t i = axis + 1; i < shape_.size(); ++i) s *= shape_[i];
    return s;
  }

  std::size_t rows() const {
    require_rank(2);
    return shape_[0];
  }
  std::size_t cols() const {
    require_rank(2);
    return shape_[1];
  }

  T* data() { return data_.get(); }
  const T* data() const { return data_.get(); }
  std::span<T> span() { return {data_.get(), size_}; }
  std::span<const T> span() const { return {data_.get(), size_}; }

  T& operator[](std::size_t i) { return data_[i]; }
  T operator[](std::size_t i) const { return data_[i]; }

  T& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  T operator()(std::size_t i, std::size_t j) const {
    return data_[i * shape_[1] + j];
  }

  void fill(T v) { std::fill_n(data_.get(), size_, v); }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  void require_rank(std::size_t r) const {
    if (shape_.size() != r)
      throw std::invalid_argument("expected rank-" + std::to_string(r) +
                                  " tensor, got " + shape_str(shape_));
  }

 private:
  Shape shape_;
  std::size_t size_ = 0;
  std::unique_ptr<T[]> data_;
};

// ---------------------------------------------------------------------------
// Matrix products. Each output entry is accumulated strictly left-to-right
// over the contraction index, so results are bit-reproducible per dtype.
// ---------------------------------------------------------------------------

namespace detail {

// c[m x n] (+)= a[m x k] * b[k x n]
template <typename T>
void gemm_nn(T* c, const T* a, const T* b, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
  if (!accumulate) std::fill_n(c, m * n, T(0));
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m x n] (+)= a[m x k] * b[n x k]^T
template <typename T>
void gemm_nt(T* c, const T* a, const T* b, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      T acc = accumulate ? crow[j] : T(0);
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] = acc;
    }
  }
}

// c[m x n] (+)= a[k x m]^T * b[k x n]
template <typename T>
void gemm_tn(T* c, const T* a, const T* b, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
  if (!accumulate) std::fill_n(c, m * n, T(0));
  for (std::size_t p = 0; p < k; ++p) {
    const T* arow = a + p * m;
    const T* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = arow[i];
      T* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

template <typename T>
void matmul_into(Tensor<T>& out, const Tensor<T>& a, const Tensor<T>& b,
                 bool accumulate = false) {
  a.require_rank(2);
  b.require_rank(2);
  if (a.cols() != b.rows()) shape_fail("matmul", a.shape(), b.shape());
  if (out.rows() != a.rows() || out.cols() != b.cols())
    shape_fail("matmul(out)", out.shape(), {a.rows(), b.cols()});
  detail::gemm_nn(out.data(), a.data(), b.data(), a.rows(), a.cols(), b.cols(),
                  accumulate);
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  a.require_rank(2);
  b.require_rank(2);
  if (a.cols() != b.rows()) shape_fail("matmul", a.shape(), b.shape());
  Tensor<T> out({a.rows(), b.cols()});
  detail::gemm_nn(out.data(), a.data(), b.data(), a.rows(), a.cols(), b.cols(),
                  false);
  return out;
}

// a * b^T
template <typename T>
void matmul_nt_into(Tensor<T>& out, const Tensor<T>& a, const Tensor<T>& b,
                    bool accumulate = false) {
  a.require_rank(2);
  b.require_rank(2);
  if (a.cols() != b.cols()) shape_fail("matmul_nt", a.shape(), b.shape());
  if (out.rows() != a.rows() || out.cols() != b.rows())
    shape_fail("matmul_nt(out)", out.shape(), {a.rows(), b.rows()});
  detail::gemm_nt(out.data(), a.data(), b.data(), a.rows(), a.cols(), b.rows(),
                  accumulate);
}

template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> out({a.rows(), b.rows()});
  matmul_nt_into(out, a, b, false);
  return out;
}

// a^T * b
template <typename T>
void matmul_tn_into(Tensor<T>& out, const Tensor<T>& a, const Tensor<T>& b,
                    bool accumulate = false) {
  a.require_rank(2);
  b.require_rank(2);
  if (a.rows() != b.rows()) shape_fail("matmul_tn", a.shape(), b.shape());
  if (out.rows() != a.cols() || out.cols() != b.cols())
    shape_fail("matmul_tn(out)", out.shape(), {a.cols(), b.cols()});
  detail::gemm_tn(out.data(), a.data(), b.data(), a.cols(), a.rows(), b.cols(),
                  accumulate);
}

template <typename T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> out({a.cols(), b.cols()});
  matmul_tn_into(out, a, b, false);
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (!a.same_shape(b)) shape_fail(op, a.shape(), b.shape());
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("add", a, b);
  Tensor<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

template <typename T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("add", a, b);
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("sub", a, b);
  Tensor<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("mul", a, b);
  Tensor<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
  return out;
}

template <typename T>
void mul_inplace(Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("mul", a, b);
  for (std::size_t i = 0; i < a.size(); ++i) a[i] *= b[i];
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Tensor<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= s;
  return out;
}

template <typename T>
void scale_inplace(Tensor<T>& a, T s) {
  for (std::size_t i = 0; i < a.size(); ++i) a[i] *= s;
}

// y += alpha * x
template <typename T>
void axpy(Tensor<T>& y, T alpha, const Tensor<T>& x) {
  detail::require_same_shape("axpy", y, x);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += alpha * x[i];
}

template <typename T>
T elu_scalar(T x) {
  return x >= T(0) ? x : std::expm1(x);
}

// phi(x) = 1 + elu(x); equals e^x for x < 0 and 1 + x otherwise.
template <typename T>
T one_plus_elu_scalar(T x) {
  return x >= T(0) ? T(1) + x : std::exp(x);
}

template <typename T>
T sigmoid_scalar(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
T swish_scalar(T x) {
  return x * sigmoid_scalar(x);
}

template <typename T, typename F>
Tensor<T> map(const Tensor<T>& a, F f) {
  Tensor<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(out[i]);
  return out;
}

template <typename T>
Tensor<T> elu(const Tensor<T>& a) {
  return map(a, [](T x) { return elu_scalar(x); });
}

template <typename T>
Tensor<T> one_plus_elu(const Tensor<T>& a) {
  return map(a, [](T x) { return one_plus_elu_scalar(x); });
}

template <typename T>
Tensor<T> swish(const Tensor<T>& a) {
  return map(a, [](T x) { return swish_scalar(x); });
}

// Euclidean norm over the final axis; output keeps rank with last dim 1.
template <typename T>
Tensor<T> l2_norm_lastdim(const Tensor<T>& x) {
  if (x.rank() == 0) throw std::invalid_argument("l2_norm_lastdim: rank 0");
  const std::size_t d = x.dim(x.rank() - 1);
  const std::size_t rows = x.size() / std::max<std::size_t>(d, 1);
  Shape out_shape = x.shape();
  out_shape.back() = 1;
  Tensor<T> out(out_shape);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* p = x.data() + r * d;
    T acc = T(0);
    for (std::size_t i = 0; i < d; ++i) acc += p[i] * p[i];
    out[r] = std::sqrt(acc);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Seeded RNG. Engine is std::mt19937_64 but the uniform/normal transforms are
// spelled out here so streams are identical across standard libraries.
// ---------------------------------------------------------------------------

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  // [0, 1)
  double uniform() {
    return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal(double mean = 0.0, double sd = 1.0) {
    if (have_cached_) {
      have_cached_ = false;
      return mean + sd * cached_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * 3.14159265358979323846 * u2;
    cached_ = r * std::sin(a);
    have_cached_ = true;
    return mean + sd * r * std::cos(a);
  }

  template <typename T>
  void fill_uniform(Tensor<T>& t, double lo = 0.0, double hi = 1.0) {
    for (std::size_t i = 0; i < t.size(); ++i)
      t[i] = static_cast<T>(uniform(lo, hi));
  }

  template <typename T>
  void fill_normal(Tensor<T>& t, double mean = 0.0, double sd = 1.0) {
    for (std::size_t i = 0; i < t.size(); ++i)
      t[i] = static_cast<T>(normal(mean, sd));
  }

 private:
  std::mt19937_64 eng_;
  double cached_ = 0.0;
  bool have_cached_ = false;
};

// ---------------------------------------------------------------------------
// Binary tensor format: "LTSR" | dtype u8 | rank u8 | dims u64... | payload.
// Everything little-endian.
// ---------------------------------------------------------------------------

namespace detail {

inline constexpr char kTensorMagic[4] = {'L', 'T', 'S', 'R'};

template <typename V>
void write_pod(std::ostream& os, const V& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V read_pod(std::istream& is) {
  V v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (!is) throw std::runtime_error("tensor read: truncated stream");
  return v;
}

}  // namespace detail

template <typename T>
void save_tensor(std::ostream& os, const Tensor<T>& t) {
  os.write(detail::kTensorMagic, 4);
  detail::write_pod(os, static_cast<std::uint8_t>(dtype_of<T>::value));
  detail::write_pod(os, static_cast<std::uint8_t>(t.rank()));
  for (std::size_t i = 0; i < t.rank(); ++i)
    detail::write_pod(os, static_cast<std::uint64_t>(t.dim(i)));
  os.write(reinterpret_cast<const char*>(t.data()),
           static_cast<std::streamsize>(t.bytes()));
  if (!os) throw std::runtime_error("tensor write failed");
}

template <typename T>
void save_tensor(const std::string& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for write: " + path);
  save_tensor(os, t);
}

// Loads a tensor, converting the stored dtype to T if they differ.
template <typename T>
Tensor<T> load_tensor(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, detail::kTensorMagic, 4) != 0)
    throw std::runtime_error("tensor read: bad magic");
  const auto dtype = static_cast<Dtype>(detail::read_pod<std::uint8_t>(is));
  const auto rank = detail::read_pod<std::uint8_t>(is);
  Shape shape(rank);
  for (auto& d : shape)
    d = static_cast<std::size_t>(detail::read_pod<std::uint64_t>(is));
  Tensor<T> out(shape);
  if (dtype == dtype_of<T>::value) {
    is.read(reinterpret_cast<char*>(out.data()),
            static_cast<std::streamsize>(out.bytes()));
    if (!is) throw std::runtime_error("tensor read: truncated payload");
  } else if (dtype == Dtype::F32) {
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = static_cast<T>(detail::read_pod<float>(is));
  } else {
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = static_cast<T>(detail::read_pod<double>(is));
  }
  return out;
}

template <typename T>
Tensor<T> load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open for read: " + path);
  return load_tensor<T>(is);
}

// ---------------------------------------------------------------------------
// Tiny thread helper: runs fn(begin, end, tid) over contiguous chunks of
// [0, count). Chunk 0 runs on the calling thread.
// ---------------------------------------------------------------------------

inline void parallel_chunks(
    int threads, std::size_t count,
    const std::function<void(std::size_t, std::size_t, int)>& fn) {
  if (count == 0) return;
  const int nt =
      std::max(1, std::min<int>(threads, static_cast<int>(count)));
  if (nt == 1) {
    fn(0, count, 0);
    return;
  }
  const std::size_t chunk = (count + nt - 1) / nt;
  std::vector<std::thread> pool;
  for (int t = 1; t < nt; ++t) {
    const std::size_t b = std::min(count, t * chunk);
    const std::size_t e = std::min(count, (t + 1) * chunk);
    if (b < e) pool.emplace_back([&, b, e, t] { fn(b, e, t); });
  }
  fn(0, std::min(count, chunk), 0);
  for (auto& th : pool) th.join();
}

}  // namespace linattn
