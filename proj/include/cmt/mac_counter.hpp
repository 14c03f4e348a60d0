#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>

namespace cmt {

// Tally of scalar multiply-accumulates, broken down by operation label.
// Counts only grow inside a scope; reset() marks a scope boundary.
class MacCounter {
 public:
  void add(std::string_view label, std::uint64_t macs);
  void reset();

  std::uint64_t total() const { return total_; }
  std::uint64_t count(std::string_view label) const;
  const std::map<std::string, std::uint64_t, std::less<>>& breakdown() const { return by_label_; }

 private:
  std::uint64_t total_ = 0;
  std::map<std::string, std::uint64_t, std::less<>> by_label_;
};

// Opens a counting scope: resets the counter on entry.
class MacScope {
 public:
  explicit MacScope(MacCounter& counter) : counter_(counter) { counter_.reset(); }
  MacScope(const MacScope&) = delete;
  MacScope& operator=(const MacScope&) = delete;

  std::uint64_t total() const { return counter_.total(); }

 private:
  MacCounter& counter_;
};

}  // namespace cmt
