#pragma once

#include <string>

#include "tl/tensor.hpp"

namespace tl {

// Reads a text file into a sparse Boolean (position, token) matrix; the
// vocabulary is interned in first-occurrence order on the token domain.
TensorValue read_text_tensor(const std::string& path);

// Loads either the native tensor format (.tns) or a text file.
TensorValue load_tensor_file(const std::string& path);

void save_tensor_file(const std::string& path, const std::string& name,
                      const TensorValue& t);

}  // namespace tl
