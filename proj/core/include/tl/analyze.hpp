#pragma once

#include <string>

#include "tl/ast.hpp"

namespace tl {

// Evaluates a constant scalar expression (no index variables).
double eval_scalar_const(const ScalarExpr& e,
                         const std::map<std::string, double>& consts);

// Evaluates a scalar expression given index-variable values.
double eval_scalar(const ScalarExpr& e, const std::map<std::string, double>& consts,
                   const std::map<std::string, int>& vars);

// Binds every index variable and tensor slot to a domain. Cardinalities come
// from declarations, literal shapes, fact constants and file reads; conflicts
// are reported with both binding sites. `base_dir` resolves read-file paths.
void infer_domains(Program& p, const std::string& base_dir = ".");

// Merges same-LHS equations into accumulation groups with canonical variable
// names and validates the range restriction (every LHS variable occurs in
// every term). Fills p.groups.
void desugar(Program& p);

// Convenience: parse + infer + desugar.
Program analyze_program(const std::string& source, const std::string& base_dir = ".");

}  // namespace tl
