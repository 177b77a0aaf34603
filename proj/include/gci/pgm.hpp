#ifndef GCI_PGM_HPP_
#define GCI_PGM_HPP_

#include <string>

#include "gci/tensor.hpp"

namespace gci {

/// Writes an 8-bit binary PGM (P5). `gray` is [H,W] with values in [0,255];
/// entries are rounded and clamped to the byte range.
void write_pgm(const std::string& path, const Tensor& gray);

/// Reads an 8-bit binary PGM into an [H,W] tensor of raw byte values 0..255.
/// Rejects non-P5 files and maxval != 255. Throws IoError naming the path.
Tensor read_pgm(const std::string& path);

}  // namespace gci

#endif  // GCI_PGM_HPP_
