#pragma once

#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "tl/tensor.hpp"

namespace tl {

// One index argument of a tensor reference. Affine forms cover the paper's
// index functions: t+1, x/S, x+dx, slices, *t (virtual), and trailing-dot
// normalization markers.
struct IndexExpr {
  enum class Kind {
    Var,      // i        (delta may shift: i+1, i-1)
    Const,    // Alice, 3
    VarSum,   // x+dx
    Scaled,   // x/S      (integer division)
    Slice     // 4:8
  };
  Kind kind = Kind::Var;
  std::string var;        // primary variable
  std::string var2;       // VarSum second variable
  std::string symbol;     // Const symbol (empty when numeric)
  long number = 0;        // Const numeric value, or Var delta
  std::string divisor_name;  // Scaled divisor when given as a named const
  long divisor = 1;          // Scaled divisor when literal
  long lo = 0, hi = 0;    // Slice bounds
  bool is_virtual = false;   // *t marker
  bool normalized = false;   // trailing '.' marker

  bool is_plain_var() const {
    return kind == Kind::Var && number == 0 && !is_virtual;
  }
};

struct TensorRef {
  std::string name;
  std::vector<IndexExpr> args;
  bool boolean_syntax = false;  // parentheses form
  int line = 0;
};

// Scalar arithmetic over index variables, named constants and numbers;
// used for index-function factors (sin(p / L^(d/D_e))) and scalar divisors.
struct ScalarExpr {
  enum class Kind { Number, ConstName, IndexVar, Add, Sub, Mul, Div, Pow, Neg, Call };
  Kind kind = Kind::Number;
  double number = 0.0;
  std::string name;  // ConstName / IndexVar / Call function name
  std::vector<ScalarExpr> args;
};

struct Expr;

// One multiplicative factor of a term.
struct Factor {
  enum class Kind {
    Ref,       // tensor reference
    Grouped,   // (expr)^power, combined pointwise before the join
    IndexFunc, // builtin(scalar-expr over index vars), e.g. sin(p/L^(d/D_e))
    ArgmaxInd  // argmaxind(T[...], M[...]): max-projection backward indicator
  };
  Kind kind = Kind::Ref;
  TensorRef ref;
  std::shared_ptr<Expr> group;
  double group_power = 1.0;
  std::string func;
  ScalarExpr scalar_arg;
  TensorRef ref2;  // ArgmaxInd reduced tensor
};

struct Term {
  double coefficient = 1.0;
  std::vector<Factor> factors;
  std::vector<ScalarExpr> scalars;    // index-free multipliers
  std::vector<ScalarExpr> divisors;   // index-free divisors
};

struct Expr {
  std::vector<Term> terms;
};

struct Equation {
  TensorRef lhs;
  Expr rhs;
  ReduceOp proj = ReduceOp::Sum;
  NonlinearitySpec nonlin;
  bool from_datalog = false;
  bool is_concat = false;  // RHS was concat(T[...]): merge non-LHS indices
  int line = 0;
};

struct Fact {
  TensorRef atom;      // all-constant args
  double value = 1.0;  // 1 for Boolean facts; real element assignments allowed
  int line = 0;
};

struct LiteralDef {
  std::string name;
  std::vector<int> shape;
  std::vector<double> values;  // row-major
  int line = 0;
};

struct Directive {
  enum class Kind { Query, ReadFile, WriteFile, ConstantTensor };
  Kind kind = Kind::Query;
  std::string query;   // raw query text (without trailing '?')
  std::string tensor;
  std::string path;
  int line = 0;
};

struct DomainDecl {
  std::string name;
  int cardinality = 0;                // 0 when symbols given
  std::vector<std::string> symbols;
  int line = 0;
};

// An accumulation group: all equations writing the same LHS pattern, with
// variables renamed to a shared scheme. Terms sum before the nonlinearity.
struct EqGroup {
  TensorRef lhs;
  std::vector<Term> terms;
  ReduceOp proj = ReduceOp::Sum;
  NonlinearitySpec nonlin;
  bool is_concat = false;
  bool from_datalog = false;
  std::map<std::string, DomainPtr> vars;
  std::vector<int> member_lines;
};

struct Program {
  std::vector<DomainDecl> domain_decls;
  std::map<std::string, double> scalar_consts;   // const L = 10000
  std::vector<Equation> equations;               // ordered
  std::vector<Fact> facts;
  std::vector<LiteralDef> literals;
  std::vector<Directive> directives;
  std::set<std::string> constant_tensors;
  std::string loss_name = "Loss";

  // Filled in by infer_domains.
  std::map<std::string, DomainPtr> domains;      // domain name -> domain
  std::map<std::string, std::vector<DomainPtr>> signatures;  // tensor -> axis domains
  std::map<std::string, bool> boolean_tensors;
  // Per-equation variable bindings (parallel to `equations`).
  std::vector<std::map<std::string, DomainPtr>> eq_vars;
  // Filled in by desugar.
  std::vector<EqGroup> groups;
  // Tensors loaded by read-file directives during inference.
  std::map<std::string, TensorValue> file_tensors;
  // Inference hints: tensor -> tensor whose per-slot domains it shares
  // (used by generated programs, e.g. gradient tensors match their primal).
  std::map<std::string, std::string> same_signature;

  bool has_tensor(const std::string& n) const { return signatures.count(n) > 0; }
};

struct ParseError : std::runtime_error {
  int line, column;
  ParseError(const std::string& msg, int l, int c)
      : std::runtime_error("parse error at " + std::to_string(l) + ":" +
                           std::to_string(c) + ": " + msg),
        line(l),
        column(c) {}
};

}  // namespace tl
