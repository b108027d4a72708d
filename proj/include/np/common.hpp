#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace np {

using i64 = std::int64_t;
using u64 = std::uint64_t;

// Contract violations and malformed inputs surface as np::Error carrying a
// message that names the operation and the offending values.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

[[noreturn]] inline void fail(const std::string& msg) { throw Error(msg); }

inline void require(bool ok, const std::string& msg) {
  if (!ok) fail(msg);
}

}  // namespace np
