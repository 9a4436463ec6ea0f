#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace lam {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or axis disagreement between tensors.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid structural parameter (kernel size, depth, ratio, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// API misuse (e.g. backward from a non-scalar).
class UsageError : public Error {
 public:
  using Error::Error;
};

// Bad runtime data (label out of range, ...).
class DataError : public Error {
 public:
  using Error::Error;
};

// File I/O and serialization failures.
class IoError : public Error {
 public:
  using Error::Error;
};

// Training-time failures (non-finite gradients, divergence).
class TrainError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<std::int64_t>;

std::string shape_str(const Shape& s);
std::int64_t shape_numel(const Shape& s);

// Global instrumentation: multiply-accumulate counts (matmul/conv only) and
// resident tensor payload bytes. Used by the benchmark harness.
namespace counters {
void add_macs(std::uint64_t n);
std::uint64_t macs();
void reset_macs();
std::uint64_t current_bytes();
std::uint64_t peak_bytes();
void reset_peak();
}  // namespace counters

class Tape;

namespace detail {
// Allocates a float buffer registered with the byte counters.
std::shared_ptr<std::vector<float>> make_buffer(std::size_t n);

struct GradSlot {
  std::vector<float> g;  // empty means "all zeros, not yet touched"
};
}  // namespace detail

// Dense row-major float32 tensor. Copies share the underlying buffer; tensors
// are immutable once built except for parameter updates between optimizer
// steps (mutable_data) and gradient accumulation during a backward pass.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<float> values, bool requires_grad = false);
  explicit Tensor(Shape shape, float fill = 0.0f, bool requires_grad = false);
  static Tensor scalar(float v);

  bool defined() const { return data_ != nullptr; }
  int rank() const { return static_cast<int>(shape_.size()); }
  const Shape& shape() const { return shape_; }
  std::int64_t dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  std::int64_t numel() const { return data_ ? static_cast<std::int64_t>(data_->size()) : 0; }

  std::span<const float> data() const { return {data_->data(), data_->size()}; }
  std::span<float> mutable_data() { return {data_->data(), data_->size()}; }
  float item() const;

  bool requires_grad() const { return requires_grad_; }
  Tensor& set_requires_grad(bool on);

  // A tensor is tracked once it owns a gradient slot (parameters and any
  // op output recorded on a tape).
  bool tracked() const { return grad_ != nullptr; }
  bool grad_filled() const { return grad_ && !grad_->g.empty(); }
  std::span<const float> grad() const;
  // Zero-initialized accumulation buffer, allocated on first use.
  std::span<float> grad_accum();
  void zero_grad();

  int tape_node() const { return tape_node_; }
  const Tape* tape_owner() const { return tape_owner_; }

 private:
  friend class Tape;
  friend Tensor make_tracked_output(Tensor out);

  Shape shape_;
  std::shared_ptr<std::vector<float>> data_;
  std::shared_ptr<detail::GradSlot> grad_;
  bool requires_grad_ = false;
  int tape_node_ = -1;
  const Tape* tape_owner_ = nullptr;
};

// Integer label tensor (masks, class maps). No gradients.
struct IntTensor {
  Shape shape;
  std::vector<std::int32_t> data;

  IntTensor() = default;
  IntTensor(Shape s, std::vector<std::int32_t> d);
  explicit IntTensor(Shape s, std::int32_t fill = 0);
  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
};

// Reverse-mode gradient tape. Append-only; node order is execution order and
// a backward pass visits nodes exactly once in reverse. One tape per thread
// at a time; constructing a Tape makes it the active tape for this thread.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current();

  // Two-phase recording: reserve a node id, attach the output's grad slot,
  // then fill in the backward closure (whose captures now share that slot).
  int reserve();
  void fill(int node_id, std::function<void()> backward_fn);
  void track_output(Tensor& out, int node_id);
  std::size_t size() const { return nodes_.size(); }

  // Seeds d(loss)/d(loss) = 1 and propagates to every tracked tensor.
  void backward(const Tensor& loss);

 private:
  std::vector<std::function<void()>> nodes_;
  Tape* previous_ = nullptr;
};

}  // namespace lam
