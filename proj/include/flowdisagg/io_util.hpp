#pragma once

#include <string>

namespace flowdisagg {

std::string read_file(const std::string& path);

// Writes to `path + ".tmp"` then renames, so readers never observe a
// half-written file.
void atomic_write_file(const std::string& path, const std::string& content);

}  // namespace flowdisagg
