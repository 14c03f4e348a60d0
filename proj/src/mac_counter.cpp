#include "cmt/mac_counter.hpp"

namespace cmt {

void MacCounter::add(std::string_view label, std::uint64_t macs) {
  total_ += macs;
  auto it = by_label_.find(label);
  if (it == by_label_.end()) {
    by_label_.emplace(std::string(label), macs);
  } else {
    it->second += macs;
  }
}

void MacCounter::reset() {
  total_ = 0;
  by_label_.clear();
}

std::uint64_t MacCounter::count(std::string_view label) const {
  auto it = by_label_.find(label);
  return it == by_label_.end() ? 0 : it->second;
}

}  // namespace cmt
