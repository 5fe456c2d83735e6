#pragma once

#include <ostream>
#include <string>
#include <utility>
#include <vector>

namespace fal {

/// Ordered key/value lines written as "# key: value" above every table.
using Metadata = std::vector<std::pair<std::string, std::string>>;

inline void write_metadata(std::ostream& os, const Metadata& meta) {
  for (const auto& [k, v] : meta) os << "# " << k << ": " << v << '\n';
}

}  // namespace fal
