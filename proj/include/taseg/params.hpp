#pragma once

#include <cstddef>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "taseg/autograd.hpp"
#include "taseg/error.hpp"
#include "taseg/tensor.hpp"

namespace taseg {

/// A named model weight. Trainable parameters own a gradient buffer of the
/// same shape; frozen ones never do.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool frozen = false;

  std::size_t count() const noexcept { return value.size(); }
};

/// Ordered set of uniquely named parameters. Addresses of registered
/// parameters are stable for the registry's lifetime.
class ParamRegistry {
 public:
  ParamRegistry() = default;
  ParamRegistry(const ParamRegistry&) = delete;
  ParamRegistry& operator=(const ParamRegistry&) = delete;
  ParamRegistry(ParamRegistry&&) = default;
  ParamRegistry& operator=(ParamRegistry&&) = default;

  Parameter& add(std::string name, Tensor value, bool frozen) {
    if (index_.contains(name)) throw ConfigError("parameter '" + name + "' registered twice");
    auto p = std::make_unique<Parameter>();
    p->name = std::move(name);
    p->frozen = frozen;
    if (!frozen) p->grad = Tensor(value.shape(), Scalar{0});
    p->value = std::move(value);
    index_.emplace(p->name, entries_.size());
    entries_.push_back(std::move(p));
    return *entries_.back();
  }

  Parameter* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : entries_[it->second].get();
  }
  const Parameter* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : entries_[it->second].get();
  }

  Parameter& at(const std::string& name) {
    if (Parameter* p = find(name)) return *p;
    throw ConfigError("unknown parameter '" + name + "'");
  }

  std::size_t size() const noexcept { return entries_.size(); }

  Parameter& operator[](std::size_t i) { return *entries_[i]; }
  const Parameter& operator[](std::size_t i) const { return *entries_[i]; }

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& p : entries_) n += p->frozen ? 0 : p->count();
    return n;
  }

  std::size_t frozen_count() const {
    std::size_t n = 0;
    for (const auto& p : entries_) n += p->frozen ? p->count() : 0;
    return n;
  }

  void zero_grad() {
    for (auto& p : entries_) {
      if (!p->frozen) p->grad.fill(0);
    }
  }

  /// Copy of every value, in registration order.
  std::vector<Tensor> snapshot() const {
    std::vector<Tensor> out;
    out.reserve(entries_.size());
    for (const auto& p : entries_) out.push_back(p->value);
    return out;
  }

 private:
  std::vector<std::unique_ptr<Parameter>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Puts a parameter on the tape: frozen weights become constants, trainable
/// ones route their gradient into Parameter::grad.
inline Var bind(Tape& tape, Parameter& p) {
  return p.frozen ? tape.constant_ref(p.value) : tape.parameter(p.value, p.grad);
}

}  // namespace taseg
