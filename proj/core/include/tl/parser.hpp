#pragma once

#include <string>

#include "tl/ast.hpp"

namespace tl {

// Parses `.tl` source into a Program (AST only; run infer_domains + desugar
// from analyze.hpp before evaluating).
Program parse_program(const std::string& source);

Program parse_file(const std::string& path);

// Parses a bare tensor reference such as "Ancestor(Alice,x)" or "Y".
TensorRef parse_ref(const std::string& text);

}  // namespace tl
