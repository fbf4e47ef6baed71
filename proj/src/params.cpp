#include "nimg/params.hpp"

namespace nimg {

Tensor ParamStore::add(const std::string& name, Tensor value) {
  if (contains(name)) throw ConfigError("duplicate parameter '" + name + "'");
  index_[name] = items_.size();
  items_.emplace_back(name, std::move(value));
  return items_.back().second;
}

Tensor& ParamStore::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return items_[it->second].second;
}

const Tensor& ParamStore::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return items_[it->second].second;
}

void ParamStore::zero_grad() {
  for (auto& [name, t] : items_) t.zero_grad();
}

ParamStore ParamStore::clone() const {
  ParamStore out;
  for (const auto& [name, t] : items_) {
    Tensor copy = t.detach();
    copy.set_requires_grad(t.requires_grad());
    out.add(name, copy);
  }
  return out;
}

}  // namespace nimg
