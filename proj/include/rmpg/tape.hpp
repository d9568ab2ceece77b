#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rmpg/errors.hpp"
#include "rmpg/tensor.hpp"

namespace rmpg {

/// Handle to a value recorded on a tape.
struct Var {
  std::uint64_t tape = 0;
  std::size_t index = 0;
};

/// Wengert list for reverse-mode differentiation.
///
/// Entries are appended in execution order, so every input precedes its
/// consumers. A tape records exactly one forward pass and supports exactly
/// one backward sweep; build a new tape for the next pass.
template <class T>
class Tape {
 public:
  /// Receives the entry being replayed and its gradient, and pushes
  /// contributions into its inputs through accumulate()/grad_buffer().
  using BackwardFn = std::function<void(Tape&, Var, const Tensor<T>&)>;

  Tape() : id_(next_id()) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) noexcept = default;
  Tape& operator=(Tape&&) noexcept = default;

  Var input(Tensor<T> value, bool requires_grad = false) {
    check_finite(value, "input");
    entries_.push_back(Entry{std::move(value), std::nullopt, {}, {}, requires_grad, true});
    return Var{id_, entries_.size() - 1};
  }

  Var parameter(Tensor<T> value) { return input(std::move(value), true); }

  /// Appends the result of a primitive. The entry requires a gradient iff
  /// any of its inputs does.
  Var record(Tensor<T> value, std::vector<Var> inputs, BackwardFn backward) {
    check_finite(value, "operation output");
    bool needs = false;
    std::vector<std::size_t> ids;
    ids.reserve(inputs.size());
    for (Var v : inputs) {
      ids.push_back(resolve(v));
      needs = needs || entries_[ids.back()].requires_grad;
    }
    entries_.push_back(
        Entry{std::move(value), std::nullopt, std::move(ids), needs ? std::move(backward) : BackwardFn{}, needs, false});
    return Var{id_, entries_.size() - 1};
  }

  const Tensor<T>& value(Var v) const { return entries_[resolve(v)].value; }

  bool requires_grad(Var v) const { return entries_[resolve(v)].requires_grad; }

  bool has_grad(Var v) const { return entries_[resolve(v)].grad.has_value(); }

  const Tensor<T>& grad(Var v) const {
    const auto& e = entries_[resolve(v)];
    if (!e.grad) throw LookupError("no gradient recorded for tape entry " + std::to_string(v.index));
    return *e.grad;
  }

  /// Writable gradient storage for an input, zero-initialised on first use.
  /// Empty when the input does not take part in differentiation.
  std::span<T> grad_buffer(Var v) {
    auto& e = entries_[resolve(v)];
    if (!e.requires_grad) return {};
    if (!e.grad) e.grad.emplace(e.value.shape());
    return e.grad->data();
  }

  void accumulate(Var v, const Tensor<T>& g) {
    auto buf = grad_buffer(v);
    if (buf.empty()) return;
    if (g.size() != buf.size()) throw DimensionError("gradient size mismatch during backward");
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
  }

  /// Reverse sweep from a scalar loss. Intermediate gradients are released
  /// once propagated; gradients of input entries stay readable.
  void backward(Var loss) {
    const std::size_t root = resolve(loss);
    if (consumed_) throw ContractError("backward already ran on this tape");
    if (entries_[root].value.size() != 1) {
      throw ContractError("loss must be a scalar, got shape " + to_string(entries_[root].value.shape()));
    }
    consumed_ = true;
    if (!entries_[root].requires_grad) return;
    entries_[root].grad.emplace(entries_[root].value.shape(), T{1});
    for (std::size_t i = root + 1; i-- > 0;) {
      auto& e = entries_[i];
      if (!e.grad || e.is_input) continue;
      if (e.backward) {
        // The closure may append grads to earlier entries, never to this one.
        const Tensor<T> g = std::move(*e.grad);
        e.grad.reset();
        e.backward(*this, Var{id_, i}, g);
      }
    }
  }

  bool consumed() const noexcept { return consumed_; }
  std::size_t size() const noexcept { return entries_.size(); }
  std::uint64_t id() const noexcept { return id_; }

  OpCounter& counter() noexcept { return counter_; }
  const OpCounter& counter() const noexcept { return counter_; }

 private:
  struct Entry {
    Tensor<T> value;
    std::optional<Tensor<T>> grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad;
    bool is_input;
  };

  static std::uint64_t next_id() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1, std::memory_order_relaxed);
  }

  std::size_t resolve(Var v) const {
    if (v.tape != id_ || v.index >= entries_.size()) {
      throw LookupError("variable is not recorded on this tape");
    }
    return v.index;
  }

  static void check_finite(const Tensor<T>& t, const char* what) {
    if (!t.all_finite()) throw NumericError(std::string("non-finite value in ") + what);
  }

  std::uint64_t id_;
  std::deque<Entry> entries_;  // deque: values stay put while the tape grows
  OpCounter counter_;
  bool consumed_ = false;
};

}  // namespace rmpg
