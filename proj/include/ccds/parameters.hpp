#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "ccds/autodiff.hpp"

namespace ccds {

// Named differentiable leaves in insertion order. Order is part of the checkpoint format.
class ParameterStore {
 public:
  struct Entry {
    std::string name;
    Var var;
    bool trainable = true;
  };

  Var add(const std::string& name, Tensor init, bool trainable = true);

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const Var& get(const std::string& name) const;
  Var& get(const std::string& name);
  bool trainable(const std::string& name) const { return entries_[lookup(name)].trainable; }

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::size_t total_values() const;

  void zero_grad();

 private:
  std::size_t lookup(const std::string& name) const;

  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace ccds
