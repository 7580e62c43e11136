#pragma once

#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "tempo/errors.hpp"

namespace tempo {

// Little-endian binary primitives shared by the feature, state and
// checkpoint file formats. This code assumes a little-endian host.

inline void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}

inline void write_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), 8);
}

inline void write_f32(std::ostream& os, float v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}

inline void write_f64(std::ostream& os, double v) {
  os.write(reinterpret_cast<const char*>(&v), 8);
}

inline void write_bytes(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

/// Tracks the byte offset of every read so format errors can name the
/// position where the file became unreadable.
class BinReader {
 public:
  explicit BinReader(std::istream& is) : is_(is) {}

  std::uint64_t offset() const { return offset_; }

  void read_raw(void* dst, std::size_t n, const char* what) {
    is_.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n) {
      throw FormatError(std::string("truncated file: expected ") + what +
                        " at byte offset " + std::to_string(offset_));
    }
    offset_ += n;
  }

  std::uint32_t read_u32(const char* what) {
    std::uint32_t v = 0;
    read_raw(&v, 4, what);
    return v;
  }

  std::uint64_t read_u64(const char* what) {
    std::uint64_t v = 0;
    read_raw(&v, 8, what);
    return v;
  }

  float read_f32(const char* what) {
    float v = 0;
    read_raw(&v, 4, what);
    return v;
  }

  double read_f64(const char* what) {
    double v = 0;
    read_raw(&v, 8, what);
    return v;
  }

  std::string read_bytes(const char* what) {
    const std::uint32_t n = read_u32(what);
    std::string s(n, '\0');
    if (n > 0) read_raw(s.data(), n, what);
    return s;
  }

  void expect_magic(const char magic[4]) {
    char buf[4];
    const std::uint64_t at = offset_;
    read_raw(buf, 4, "magic");
    if (std::memcmp(buf, magic, 4) != 0) {
      throw FormatError("bad magic at byte offset " + std::to_string(at) +
                        ": expected \"" + std::string(magic, 4) + "\"");
    }
  }

 private:
  std::istream& is_;
  std::uint64_t offset_ = 0;
};

}  // namespace tempo
