#pragma once

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "nimg/tensor.hpp"

namespace nimg {

// Named tensors in a fixed insertion order.
class ParamStore {
 public:
  // Returns a handle sharing storage with the stored tensor.
  Tensor add(const std::string& name, Tensor value);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;

  std::size_t size() const { return items_.size(); }
  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }
  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }

  void zero_grad();
  // Deep copy of the values (no gradient history).
  ParamStore clone() const;

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace nimg
