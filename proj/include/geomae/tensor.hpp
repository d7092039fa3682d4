#pragma once

#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "geomae/common.hpp"

namespace geomae {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

/// Dense row-major tensor.
template <class T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), data(numel(shape), T(0)) {}
  Tensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (numel(shape) != data.size())
      fail_usage("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                 shape_str(shape));
  }

  std::size_t size() const noexcept { return data.size(); }
  std::size_t rank() const noexcept { return shape.size(); }
  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  template <class U>
  Tensor<U> cast() const {
    return Tensor<U>(shape, std::vector<U>(data.begin(), data.end()));
  }
};

/// Named parameter tensors, iterated in lexicographic name order.
template <class T>
class ParamStore {
public:
  struct Entry {
    Tensor<T> tensor;
    bool trainable = true;
  };

  void add(const std::string& name, Tensor<T> t, bool trainable = true) {
    if (entries_.count(name)) fail_usage("duplicate parameter '" + name + "'");
    entries_.emplace(name, Entry{std::move(t), trainable});
  }

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }

  const Entry& entry(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) fail_usage("unknown parameter '" + name + "'");
    return it->second;
  }
  Entry& entry(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) fail_usage("unknown parameter '" + name + "'");
    return it->second;
  }
  const Tensor<T>& get(const std::string& name) const { return entry(name).tensor; }
  Tensor<T>& get(const std::string& name) { return entry(name).tensor; }

  /// Sets the trainable flag on every entry whose name starts with `prefix`.
  std::size_t set_trainable(const std::string& prefix, bool trainable) {
    std::size_t n = 0;
    for (auto& [name, e] : entries_) {
      if (name.compare(0, prefix.size(), prefix) == 0) {
        e.trainable = trainable;
        ++n;
      }
    }
    return n;
  }

  void erase_prefix(const std::string& prefix) {
    for (auto it = entries_.begin(); it != entries_.end();) {
      if (it->first.compare(0, prefix.size(), prefix) == 0) it = entries_.erase(it);
      else ++it;
    }
  }

  std::size_t size() const noexcept { return entries_.size(); }
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, e] : entries_) n += e.tensor.size();
    return n;
  }

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  template <class U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& [name, e] : entries_) out.add(name, e.tensor.template cast<U>(), e.trainable);
    return out;
  }

private:
  std::map<std::string, Entry> entries_;
};

/// FNV-1a over names, shapes and raw payload bytes; used to prove tensors were not touched.
template <class T>
std::uint64_t hash_params(const ParamStore<T>& store, const std::string& prefix = "") {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& [name, e] : store) {
    if (name.compare(0, prefix.size(), prefix) != 0) continue;
    feed(name.data(), name.size());
    for (auto d : e.tensor.shape) feed(&d, sizeof d);
    feed(e.tensor.data.data(), e.tensor.data.size() * sizeof(T));
  }
  return h;
}

}  // namespace geomae
