#include "tl/printer.hpp"

#include <charconv>
#include <cmath>
#include <functional>
#include <sstream>

namespace tl {

std::string format_number(double v) {
  if (v == (long long)v && std::fabs(v) < 1e15) {
    return std::to_string((long long)v);
  }
  char buf[40];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string print_index(const IndexExpr& e) {
  std::string s;
  if (e.is_virtual) s += "*";
  switch (e.kind) {
    case IndexExpr::Kind::Var:
      s += e.var;
      if (e.number > 0) s += "+" + std::to_string(e.number);
      if (e.number < 0) s += std::to_string(e.number);
      break;
    case IndexExpr::Kind::Const:
      s += e.symbol.empty() ? std::to_string(e.number) : e.symbol;
      break;
    case IndexExpr::Kind::VarSum:
      s += e.var + "+" + e.var2;
      break;
    case IndexExpr::Kind::Scaled:
      s += e.var + "/" +
           (e.divisor_name.empty() ? std::to_string(e.divisor) : e.divisor_name);
      break;
    case IndexExpr::Kind::Slice:
      s += std::to_string(e.lo) + ":" + std::to_string(e.hi);
      break;
  }
  if (e.normalized) s += ".";
  return s;
}

std::string print_ref(const TensorRef& r) {
  std::string s = r.name;
  if (!r.args.empty() || r.boolean_syntax) {
    s += r.boolean_syntax ? "(" : "[";
    for (size_t i = 0; i < r.args.size(); ++i) {
      if (i) s += ",";
      s += print_index(r.args[i]);
    }
    s += r.boolean_syntax ? ")" : "]";
  }
  return s;
}

namespace {

int precedence(ScalarExpr::Kind k) {
  switch (k) {
    case ScalarExpr::Kind::Add:
    case ScalarExpr::Kind::Sub: return 1;
    case ScalarExpr::Kind::Mul:
    case ScalarExpr::Kind::Div: return 2;
    case ScalarExpr::Kind::Neg: return 3;
    case ScalarExpr::Kind::Pow: return 4;
    default: return 5;
  }
}

std::string print_scalar_prec(const ScalarExpr& e, int parent) {
  std::string s;
  switch (e.kind) {
    case ScalarExpr::Kind::Number:
      s = format_number(e.number);
      if (e.number < 0) s = "(" + s + ")";
      return s;
    case ScalarExpr::Kind::ConstName:
    case ScalarExpr::Kind::IndexVar: return e.name;
    case ScalarExpr::Kind::Call:
      return e.name + "(" + print_scalar_prec(e.args[0], 0) + ")";
    case ScalarExpr::Kind::Neg:
      s = "-" + print_scalar_prec(e.args[0], 3);
      break;
    case ScalarExpr::Kind::Pow:
      // right-associative
      s = print_scalar_prec(e.args[0], 5) + "^" + print_scalar_prec(e.args[1], 4);
      break;
    default: {
      const char* op = e.kind == ScalarExpr::Kind::Add   ? " + "
                       : e.kind == ScalarExpr::Kind::Sub ? " - "
                       : e.kind == ScalarExpr::Kind::Mul ? " * "
                                                         : " / ";
      int p = precedence(e.kind);
      s = print_scalar_prec(e.args[0], p) + op + print_scalar_prec(e.args[1], p + 1);
      break;
    }
  }
  if (precedence(e.kind) < parent) s = "(" + s + ")";
  return s;
}

std::string print_term(const Term& t) {
  std::string s;
  double coeff = t.coefficient;
  std::vector<const ScalarExpr*> named;
  for (auto& sc : t.scalars) {
    if (sc.kind == ScalarExpr::Kind::Number)
      coeff *= sc.number;  // numbers fold into the coefficient when reparsed
    else
      named.push_back(&sc);
  }
  double mag = std::fabs(coeff);
  bool need_coeff = mag != 1.0 || (t.factors.empty() && named.empty());
  if (need_coeff) s += format_number(mag);
  for (auto* sc : named) {
    if (!s.empty()) s += " ";
    s += print_scalar_prec(*sc, 5);
  }
  for (auto& f : t.factors) {
    if (!s.empty()) s += " ";
    switch (f.kind) {
      case Factor::Kind::Ref: s += print_ref(f.ref); break;
      case Factor::Kind::Grouped:
        s += "(" + print_expr(*f.group) + ")";
        if (f.group_power != 1.0) s += "^" + format_number(f.group_power);
        break;
      case Factor::Kind::IndexFunc:
        s += f.func + "(" + print_scalar_prec(f.scalar_arg, 0) + ")";
        break;
      case Factor::Kind::ArgmaxInd:
        s += "argmaxind(" + print_ref(f.ref) + ", " + print_ref(f.ref2) + ")";
        break;
    }
  }
  for (auto& d : t.divisors) s += " / " + print_scalar_prec(d, 5);
  return s;
}

const char* nonlin_name(const NonlinearitySpec& n) {
  switch (n.kind) {
    case Nonlin::Step: return "step";
    case Nonlin::Sigmoid: return "sig";
    case Nonlin::Relu: return "relu";
    case Nonlin::Exp: return "exp";
    case Nonlin::Sqrt: return "sqrt";
    case Nonlin::Softmax: return "softmax";
    case Nonlin::Lnorm: return "lnorm";
    case Nonlin::Power: return "pow";
    default: return "";
  }
}

std::string shaped_values(const LiteralDef& lit) {
  // Recursively prints the row-major value list with the literal's shape.
  std::function<std::string(int, int&)> rec = [&](int depth, int& pos) {
    if (depth == (int)lit.shape.size()) return format_number(lit.values[pos++]);
    std::string s = "[";
    for (int i = 0; i < lit.shape[depth]; ++i) {
      if (i) s += ", ";
      s += rec(depth + 1, pos);
    }
    return s + "]";
  };
  int pos = 0;
  if (lit.shape.empty()) return format_number(lit.values[0]);
  return rec(0, pos);
}

}  // namespace

std::string print_scalar(const ScalarExpr& e) { return print_scalar_prec(e, 0); }

std::string print_expr(const Expr& e) {
  std::string s;
  for (size_t i = 0; i < e.terms.size(); ++i) {
    double c = e.terms[i].coefficient;
    if (i == 0) {
      if (c < 0) s += "-";
    } else {
      s += c < 0 ? " - " : " + ";
    }
    s += print_term(e.terms[i]);
  }
  return s;
}

std::string print_equation(const Equation& eq) {
  if (eq.from_datalog) {
    std::string s = print_ref(eq.lhs) + " <- ";
    const Term& t = eq.rhs.terms[0];
    for (size_t i = 0; i < t.factors.size(); ++i) {
      if (i) s += ", ";
      s += print_ref(t.factors[i].ref);
    }
    return s;
  }
  std::string op = eq.proj == ReduceOp::Max   ? " max= "
                   : eq.proj == ReduceOp::Avg ? " avg= "
                                              : " = ";
  std::string rhs;
  if (eq.is_concat) {
    rhs = "concat(" + print_expr(eq.rhs) + ")";
  } else if (eq.nonlin.kind == Nonlin::Identity) {
    rhs = print_expr(eq.rhs);
  } else {
    rhs = std::string(nonlin_name(eq.nonlin)) + "(" + print_expr(eq.rhs);
    if (eq.nonlin.kind == Nonlin::Sigmoid && eq.nonlin.has_temperature)
      rhs += ", " + format_number(eq.nonlin.temperature);
    if (eq.nonlin.kind == Nonlin::Power)
      rhs += ", " + format_number(eq.nonlin.power);
    rhs += ")";
  }
  return print_ref(eq.lhs) + op + rhs;
}

std::string print_program(const Program& p) {
  std::ostringstream out;
  for (auto& d : p.domain_decls) {
    out << "domain " << d.name << " = ";
    if (!d.symbols.empty()) {
      out << "{";
      for (size_t i = 0; i < d.symbols.size(); ++i)
        out << (i ? ", " : "") << d.symbols[i];
      out << "}";
    } else {
      out << d.cardinality;
    }
    out << "\n";
  }
  for (auto& [name, v] : p.scalar_consts)
    out << "const " << name << " = " << format_number(v) << "\n";
  for (auto& d : p.directives)
    if (d.kind == Directive::Kind::ConstantTensor)
      out << "constant " << d.tensor << "\n";
  for (auto& lit : p.literals)
    out << lit.name << " = " << shaped_values(lit) << "\n";
  for (auto& d : p.directives)
    if (d.kind == Directive::Kind::ReadFile)
      out << d.tensor << " = \"" << d.path << "\"\n";
  for (auto& f : p.facts) {
    if (f.atom.boolean_syntax && f.value == 1.0)
      out << print_ref(f.atom) << "\n";
    else
      out << print_ref(f.atom) << " = " << format_number(f.value) << "\n";
  }
  for (auto& eq : p.equations) out << print_equation(eq) << "\n";
  for (auto& d : p.directives) {
    if (d.kind == Directive::Kind::Query) out << d.query << "?\n";
    if (d.kind == Directive::Kind::WriteFile)
      out << "\"" << d.path << "\" = " << d.tensor << "\n";
  }
  return out.str();
}

}  // namespace tl
