#pragma once

#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace tl {

// A named index domain: a cardinality plus an optional list of interned
// symbolic constants (symbol k maps to position k).
class IndexDomain {
 public:
  IndexDomain() = default;
  explicit IndexDomain(std::string name, int cardinality = 0)
      : name_(std::move(name)), cardinality_(cardinality) {}

  const std::string& name() const { return name_; }
  int cardinality() const { return cardinality_; }
  void set_cardinality(int c) {
    if (c < (int)symbols_.size())
      throw std::runtime_error("domain " + name_ +
                               ": cardinality below interned symbol count");
    cardinality_ = c;
  }

  const std::vector<std::string>& symbols() const { return symbols_; }

  // Interns a symbol, growing the cardinality if needed.
  int intern(const std::string& sym) {
    auto it = index_.find(sym);
    if (it != index_.end()) return it->second;
    int id = (int)symbols_.size();
    symbols_.push_back(sym);
    index_[sym] = id;
    if (id >= cardinality_) cardinality_ = id + 1;
    return id;
  }

  // Lookup without interning; -1 if unknown.
  int find(const std::string& sym) const {
    auto it = index_.find(sym);
    return it == index_.end() ? -1 : it->second;
  }

  // Name of position i (symbol if interned, else the number itself).
  std::string label(int i) const {
    if (i >= 0 && i < (int)symbols_.size()) return symbols_[i];
    return std::to_string(i);
  }

 private:
  std::string name_;
  int cardinality_ = 0;
  std::vector<std::string> symbols_;
  std::unordered_map<std::string, int> index_;
};

using DomainPtr = std::shared_ptr<IndexDomain>;

inline DomainPtr make_domain(const std::string& name, int card) {
  return std::make_shared<IndexDomain>(name, card);
}

}  // namespace tl
