#pragma once

#include <string>

#include "tl/ast.hpp"

namespace tl {

std::string print_index(const IndexExpr& e);
std::string print_ref(const TensorRef& r);
std::string print_scalar(const ScalarExpr& e);
std::string print_expr(const Expr& e);
std::string print_equation(const Equation& eq);

// Renders a program back to source. Printing then reparsing yields the same
// program (modulo whitespace), which is what the gradient transform relies on.
std::string print_program(const Program& p);

std::string format_number(double v);

}  // namespace tl
