#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace caps::io {

bool file_exists(const std::string& path);
std::string join_path(const std::string& dir, const std::string& name);
void ensure_dir(const std::string& path);  // mkdir -p

// Whole file; transparently inflates gzip (sniffed from the 0x1f 0x8b magic,
// independent of the file name).
std::vector<uint8_t> read_file(const std::string& path);

// Writes to <path>.tmp then renames, so failures never leave partial output.
void write_file_atomic(const std::string& path, const void* data, size_t n);
void write_file_atomic(const std::string& path, const std::string& content);

// Binary PGM (P5, maxval 255); pixels in [0, 1] row-major, clamped.
void write_pgm(const std::string& path, int h, int w, const std::vector<double>& pixels);

}  // namespace caps::io
