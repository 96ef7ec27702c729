#include "ccds/parameters.hpp"

#include "ccds/errors.hpp"

namespace ccds {

Var ParameterStore::add(const std::string& name, Tensor init, bool trainable) {
  if (contains(name)) throw ContractError("duplicate parameter '" + name + "'");
  Var v = Var::parameter(std::move(init));
  index_[name] = entries_.size();
  entries_.push_back({name, v, trainable});
  return v;
}

std::size_t ParameterStore::lookup(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("unknown parameter '" + name + "'");
  return it->second;
}

const Var& ParameterStore::get(const std::string& name) const { return entries_[lookup(name)].var; }
Var& ParameterStore::get(const std::string& name) { return entries_[lookup(name)].var; }

std::size_t ParameterStore::total_values() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.var.value().size();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& e : entries_) e.var.zero_grad();
}

}  // namespace ccds
