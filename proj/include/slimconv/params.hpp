#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "slimconv/ops.hpp"
#include "slimconv/tape.hpp"
#include "slimconv/tensor_io.hpp"

namespace slimconv {

// How a tensor in the store gets its initial value.
enum class Init { Zeros, Ones, FanOutNormal, SmallNormal };

// Named tensors in insertion order. Buffers (BN running statistics) are
// stored alongside parameters but are not trained and not counted.
template <typename T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> value;
    bool buffer = false;
    Init init = Init::Zeros;
  };

  Tensor<T>& add(const std::string& name, Shape shape, Init init, bool buffer = false) {
    if (index_.contains(name)) throw ContractViolation("param store: duplicate tensor '" + name + "'");
    index_[name] = entries_.size();
    entries_.push_back({name, Tensor<T>(shape, init == Init::Ones ? T(1) : T(0)), buffer, init});
    return entries_.back().value;
  }

  bool contains(const std::string& name) const { return index_.contains(name); }

  Tensor<T>& at(const std::string& name) { return entries_[position(name)].value; }
  const Tensor<T>& at(const std::string& name) const { return entries_[position(name)].value; }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::size_t parameter_count() const {
    std::size_t total = 0;
    for (const auto& e : entries_)
      if (!e.buffer) total += e.value.numel();
    return total;
  }

  // Draws every randomly initialized tensor from one generator, in
  // insertion order, so a seed fixes the whole store.
  void initialize(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (auto& e : entries_) {
      Tensor<T>& t = e.value;
      switch (e.init) {
        case Init::Zeros:
        case Init::Ones:
          std::fill(t.data(), t.data() + t.numel(), e.init == Init::Ones ? T(1) : T(0));
          break;
        case Init::FanOutNormal:
        case Init::SmallNormal: {
          // Conv weights are [Cout, Cin/g, kh, kw]; fan-out = Cout*kh*kw.
          const double stddev = e.init == Init::SmallNormal
                                    ? 0.01
                                    : std::sqrt(2.0 / static_cast<double>(t.shape().n * t.shape().plane()));
          std::normal_distribution<double> dist(0.0, stddev);
          for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(dist(rng));
          break;
        }
      }
    }
  }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& e : entries_) out.add(e.name, e.value.shape(), e.init, e.buffer) = e.value.template cast<U>();
    return out;
  }

  // One SCT1 file per tensor, named after the tensor.
  void save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    for (const auto& e : entries_) sct1::save(dir / (e.name + ".sct"), e.value.template cast<float>());
  }

  // Fills the already-declared tensors from `dir`; shapes must agree.
  void load(const std::filesystem::path& dir) {
    for (auto& e : entries_) {
      const auto path = dir / (e.name + ".sct");
      Tensor<float> t = sct1::load<float>(path);
      if (t.shape() != e.value.shape()) {
        throw IoError(path.string() + ": shape " + t.shape().str() + " does not match expected " +
                      e.value.shape().str());
      }
      e.value = t.template cast<T>();
    }
  }

 private:
  std::size_t position(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractViolation("param store: no tensor named '" + name + "'");
    return it->second;
  }

  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

// Places store tensors on a tape on first use. Trainable tensors become tape
// parameters (when `trainable`), so their gradients can be read afterwards.
template <typename T>
class ParamBinding {
 public:
  ParamBinding(Tape<T>& tape, ParamStore<T>& store, bool trainable = true)
      : tape_(tape), store_(store), trainable_(trainable) {}

  Tape<T>& tape() { return tape_; }

  const Var<T>& operator()(const std::string& name) {
    auto it = vars_.find(name);
    if (it != vars_.end()) return it->second;
    const Tensor<T>& value = store_.at(name);
    Var<T> v = trainable_ ? tape_.parameter(value) : tape_.constant(value);
    order_.push_back(name);
    return vars_.emplace(name, std::move(v)).first->second;
  }

  ops::RunningStats<T> running(const std::string& prefix) {
    return {&store_.at(prefix + "running_mean"), &store_.at(prefix + "running_var")};
  }

  // Bound tensors in first-use order.
  const std::vector<std::string>& order() const { return order_; }
  const Var<T>& var(const std::string& name) const { return vars_.at(name); }

 private:
  Tape<T>& tape_;
  ParamStore<T>& store_;
  bool trainable_;
  std::map<std::string, Var<T>> vars_;
  std::vector<std::string> order_;
};

// Declares gamma/beta and the running statistics of a BN layer over `c`
// channels under `prefix`.
template <typename T>
void add_batch_norm_params(ParamStore<T>& store, const std::string& prefix, std::size_t c) {
  const Shape s{1, c, 1, 1};
  store.add(prefix + "gamma", s, Init::Ones);
  store.add(prefix + "beta", s, Init::Zeros);
  store.add(prefix + "running_mean", s, Init::Zeros, true);
  store.add(prefix + "running_var", s, Init::Ones, true);
}

template <typename T>
Var<T> apply_batch_norm(ParamBinding<T>& p, const Var<T>& x, const std::string& prefix, Mode mode) {
  return ops::batch_norm(p.tape(), x, p(prefix + "gamma"), p(prefix + "beta"), p.running(prefix), mode);
}

}  // namespace slimconv
