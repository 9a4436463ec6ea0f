#include "lamformer/tensor.hpp"

#include <atomic>
#include <sstream>

namespace lam {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << "x";
    os << s[i];
  }
  os << "]";
  return os.str();
}

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

namespace counters {
namespace {
std::atomic<std::uint64_t> g_macs{0};
std::atomic<std::uint64_t> g_cur_bytes{0};
std::atomic<std::uint64_t> g_peak_bytes{0};
}  // namespace

void add_macs(std::uint64_t n) { g_macs.fetch_add(n, std::memory_order_relaxed); }
std::uint64_t macs() { return g_macs.load(std::memory_order_relaxed); }
void reset_macs() { g_macs.store(0, std::memory_order_relaxed); }
std::uint64_t current_bytes() { return g_cur_bytes.load(std::memory_order_relaxed); }
std::uint64_t peak_bytes() { return g_peak_bytes.load(std::memory_order_relaxed); }
void reset_peak() { g_peak_bytes.store(g_cur_bytes.load(std::memory_order_relaxed), std::memory_order_relaxed); }

namespace {
void on_alloc(std::size_t bytes) {
  auto cur = g_cur_bytes.fetch_add(bytes, std::memory_order_relaxed) + bytes;
  auto peak = g_peak_bytes.load(std::memory_order_relaxed);
  while (cur > peak &&
         !g_peak_bytes.compare_exchange_weak(peak, cur, std::memory_order_relaxed)) {
  }
}
void on_free(std::size_t bytes) { g_cur_bytes.fetch_sub(bytes, std::memory_order_relaxed); }
}  // namespace
}  // namespace counters

namespace detail {

std::shared_ptr<std::vector<float>> make_buffer(std::size_t n) {
  counters::on_alloc(n * sizeof(float));
  auto* v = new std::vector<float>(n);
  return std::shared_ptr<std::vector<float>>(v, [n](std::vector<float>* p) {
    counters::on_free(n * sizeof(float));
    delete p;
  });
}

}  // namespace detail

Tensor::Tensor(Shape shape, std::vector<float> values, bool requires_grad) : shape_(std::move(shape)) {
  const auto n = shape_numel(shape_);
  for (auto d : shape_) {
    if (d < 1) throw DimensionError("tensor dimensions must be >= 1, got " + shape_str(shape_));
  }
  if (n != static_cast<std::int64_t>(values.size())) {
    throw DimensionError("value count " + std::to_string(values.size()) +
                         " does not match shape " + shape_str(shape_));
  }
  data_ = detail::make_buffer(values.size());
  std::copy(values.begin(), values.end(), data_->begin());
  if (requires_grad) set_requires_grad(true);
}

Tensor::Tensor(Shape shape, float fill, bool requires_grad) : shape_(std::move(shape)) {
  for (auto d : shape_) {
    if (d < 1) throw DimensionError("tensor dimensions must be >= 1, got " + shape_str(shape_));
  }
  data_ = detail::make_buffer(static_cast<std::size_t>(shape_numel(shape_)));
  if (fill != 0.0f) std::fill(data_->begin(), data_->end(), fill);
  if (requires_grad) set_requires_grad(true);
}

Tensor Tensor::scalar(float v) { return Tensor({1}, std::vector<float>{v}); }

float Tensor::item() const {
  if (numel() != 1) throw UsageError("item() requires a scalar tensor, got " + shape_str(shape_));
  return (*data_)[0];
}

Tensor& Tensor::set_requires_grad(bool on) {
  requires_grad_ = on;
  if (on && !grad_) grad_ = std::make_shared<detail::GradSlot>();
  return *this;
}

std::span<const float> Tensor::grad() const {
  if (!grad_filled()) return {};
  return {grad_->g.data(), grad_->g.size()};
}

std::span<float> Tensor::grad_accum() {
  if (!grad_) grad_ = std::make_shared<detail::GradSlot>();
  if (grad_->g.empty()) grad_->g.assign(static_cast<std::size_t>(numel()), 0.0f);
  return {grad_->g.data(), grad_->g.size()};
}

void Tensor::zero_grad() {
  if (grad_) grad_->g.clear();
}

IntTensor::IntTensor(Shape s, std::vector<std::int32_t> d) : shape(std::move(s)), data(std::move(d)) {
  if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
    throw DimensionError("value count does not match shape " + shape_str(shape));
  }
}

IntTensor::IntTensor(Shape s, std::int32_t fill) : shape(std::move(s)) {
  data.assign(static_cast<std::size_t>(shape_numel(shape)), fill);
}

namespace {
thread_local Tape* t_current_tape = nullptr;
}

Tape::Tape() {
  previous_ = t_current_tape;
  t_current_tape = this;
}

Tape::~Tape() { t_current_tape = previous_; }

Tape* Tape::current() { return t_current_tape; }

int Tape::reserve() {
  nodes_.emplace_back();
  return static_cast<int>(nodes_.size()) - 1;
}

void Tape::fill(int node_id, std::function<void()> backward_fn) {
  nodes_[static_cast<std::size_t>(node_id)] = std::move(backward_fn);
}

void Tape::track_output(Tensor& out, int node_id) {
  if (!out.grad_) out.grad_ = std::make_shared<detail::GradSlot>();
  out.tape_node_ = node_id;
  out.tape_owner_ = this;
}

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw UsageError("backward requires a scalar loss, got " + shape_str(loss.shape()));
  }
  if (loss.tape_owner() != this || loss.tape_node() < 0) {
    throw UsageError("backward requires a loss recorded on the active tape");
  }
  Tensor seed = loss;
  seed.grad_accum()[0] = 1.0f;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (*it) (*it)();
  }
}

}  // namespace lam
