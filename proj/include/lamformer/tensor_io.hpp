#pragma once

#include <iosfwd>
#include <string>

#include "lamformer/tensor.hpp"

namespace lam {

// "LTF1" binary tensor format: 4-byte magic, u8 rank, rank x u32 little-endian
// dims, then the row-major float32 little-endian payload. Used for
// checkpoints, datasets and test fixtures.

void write_ltf(std::ostream& os, const Tensor& t);
Tensor read_ltf(std::istream& is);

void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

// Integer masks travel as float LTF1 payloads (values are small integers).
void save_mask(const std::string& path, const IntTensor& m);
IntTensor load_mask(const std::string& path);

}  // namespace lam
