#include "stllm/parameter.hpp"

#include <fnmatch.h>

#include "stllm/error.hpp"

namespace stllm {

Parameter::Parameter(std::string name, Tensor init) : node_(std::make_shared<ad::Node>()) {
  node_->value = std::move(init);
  node_->leaf_name = std::move(name);
  node_->requires_grad = true;
}

void Parameter::assign(const Tensor& value) {
  if (value.shape() != node_->value.shape()) {
    throw ShapeError("parameter " + name() + ": expected " + shape_str(node_->value.shape()) + ", got " +
                     shape_str(value.shape()));
  }
  node_->value = value;
}

Parameter& ParameterSet::add(std::string name, Tensor init) {
  if (name.empty()) throw ConfigError("parameter name must be non-empty");
  if (index_.contains(name)) throw ConfigError("duplicate parameter name: " + name);
  index_.emplace(name, params_.size());
  params_.push_back(std::make_unique<Parameter>(std::move(name), std::move(init)));
  return *params_.back();
}

Parameter* ParameterSet::find(std::string_view name) noexcept {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : params_[it->second].get();
}

const Parameter* ParameterSet::find(std::string_view name) const noexcept {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : params_[it->second].get();
}

Parameter& ParameterSet::at(std::string_view name) {
  if (Parameter* p = find(name)) return *p;
  throw ConfigError("unknown parameter: " + std::string(name));
}

const Parameter& ParameterSet::at(std::string_view name) const {
  if (const Parameter* p = find(name)) return *p;
  throw ConfigError("unknown parameter: " + std::string(name));
}

std::vector<Parameter*> ParameterSet::all() {
  std::vector<Parameter*> out;
  out.reserve(params_.size());
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<const Parameter*> ParameterSet::all() const {
  std::vector<const Parameter*> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.get());
  return out;
}

bool glob_match(std::string_view pattern, std::string_view name) {
  const std::string pat(pattern);
  const std::string str(name);
  return ::fnmatch(pat.c_str(), str.c_str(), 0) == 0;
}

std::vector<Parameter*> ParameterSet::matching(std::string_view pattern) {
  std::vector<Parameter*> out;
  for (auto& p : params_) {
    if (glob_match(pattern, p->name())) out.push_back(p.get());
  }
  return out;
}

std::size_t ParameterSet::set_frozen(std::string_view pattern, bool frozen) {
  auto hits = matching(pattern);
  for (Parameter* p : hits) p->set_frozen(frozen);
  return hits.size();
}

std::vector<std::string> ParameterSet::frozen_names() const {
  std::vector<std::string> out;
  for (const auto& p : params_) {
    if (p->frozen()) out.push_back(p->name());
  }
  return out;
}

std::map<std::string, Tensor, std::less<>> ParameterSet::snapshot() const {
  std::map<std::string, Tensor, std::less<>> out;
  for (const auto& p : params_) out.emplace(p->name(), p->value());
  return out;
}

void ParameterSet::restore(const std::map<std::string, Tensor, std::less<>>& values) {
  for (const auto& [name, value] : values) at(name).assign(value);
}

ParameterCounts count_parameters(const ParameterSet& params) {
  ParameterCounts c;
  for (const Parameter* p : params.all()) {
    c.total += p->value().size();
    (p->frozen() ? c.frozen : c.trainable) += p->value().size();
  }
  return c;
}

}  // namespace stllm
