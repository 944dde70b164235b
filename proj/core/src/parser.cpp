#include "tl/parser.hpp"

#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

namespace tl {

namespace {

enum class Tok { End, Newline, Ident, Number, String, Punct };

struct Token {
  Tok kind = Tok::End;
  std::string text;
  double number = 0.0;
  int line = 1, col = 1;
};

class Lexer {
 public:
  explicit Lexer(const std::string& src) : src_(src) { next(); }

  const Token& peek() const { return tok_; }
  Token take() {
    Token t = tok_;
    next();
    return t;
  }
  bool is_punct(const char* p) const {
    return tok_.kind == Tok::Punct && tok_.text == p;
  }
  bool is_ident(const char* s) const {
    return tok_.kind == Tok::Ident && tok_.text == s;
  }

 private:
  void next() {
    // skip spaces and comments (not newlines)
    while (pos_ < src_.size()) {
      char c = src_[pos_];
      if (c == '#') {
        while (pos_ < src_.size() && src_[pos_] != '\n') ++pos_;
      } else if (c == ' ' || c == '\t' || c == '\r') {
        ++pos_;
        ++col_;
      } else if (c == '\\' && pos_ + 1 < src_.size() && src_[pos_ + 1] == '\n') {
        pos_ += 2;  // line continuation
        ++line_;
        col_ = 1;
      } else {
        break;
      }
    }
    tok_ = Token{};
    tok_.line = line_;
    tok_.col = col_;
    if (pos_ >= src_.size()) {
      tok_.kind = Tok::End;
      return;
    }
    char c = src_[pos_];
    if (c == '\n') {
      ++pos_;
      ++line_;
      col_ = 1;
      tok_.kind = Tok::Newline;
      tok_.text = "\n";
      return;
    }
    if (std::isalpha((unsigned char)c) || c == '_') {
      size_t s = pos_;
      while (pos_ < src_.size() &&
             (std::isalnum((unsigned char)src_[pos_]) || src_[pos_] == '_' ||
              src_[pos_] == '\''))
        ++pos_;
      tok_.kind = Tok::Ident;
      tok_.text = src_.substr(s, pos_ - s);
      col_ += (int)(pos_ - s);
      return;
    }
    if (std::isdigit((unsigned char)c)) {
      size_t s = pos_;
      while (pos_ < src_.size() && std::isdigit((unsigned char)src_[pos_])) ++pos_;
      if (pos_ < src_.size() && src_[pos_] == '.' && pos_ + 1 < src_.size() &&
          std::isdigit((unsigned char)src_[pos_ + 1])) {
        ++pos_;
        while (pos_ < src_.size() && std::isdigit((unsigned char)src_[pos_])) ++pos_;
      }
      if (pos_ < src_.size() && (src_[pos_] == 'e' || src_[pos_] == 'E')) {
        size_t save = pos_;
        ++pos_;
        if (pos_ < src_.size() && (src_[pos_] == '+' || src_[pos_] == '-')) ++pos_;
        if (pos_ < src_.size() && std::isdigit((unsigned char)src_[pos_])) {
          while (pos_ < src_.size() && std::isdigit((unsigned char)src_[pos_])) ++pos_;
        } else {
          pos_ = save;
        }
      }
      tok_.kind = Tok::Number;
      tok_.text = src_.substr(s, pos_ - s);
      tok_.number = std::stod(tok_.text);
      col_ += (int)(pos_ - s);
      return;
    }
    if (c == '"') {
      size_t s = ++pos_;
      while (pos_ < src_.size() && src_[pos_] != '"') ++pos_;
      if (pos_ >= src_.size()) throw ParseError("unterminated string", line_, col_);
      tok_.kind = Tok::String;
      tok_.text = src_.substr(s, pos_ - s);
      ++pos_;
      col_ += (int)(pos_ - s) + 2;
      return;
    }
    // multi-char puncts
    if (c == '<' && pos_ + 1 < src_.size() && src_[pos_ + 1] == '-') {
      pos_ += 2;
      col_ += 2;
      tok_.kind = Tok::Punct;
      tok_.text = "<-";
      return;
    }
    if (c == '+' && pos_ + 1 < src_.size() && src_[pos_ + 1] == '=') {
      pos_ += 2;
      col_ += 2;
      tok_.kind = Tok::Punct;
      tok_.text = "+=";
      return;
    }
    ++pos_;
    ++col_;
    tok_.kind = Tok::Punct;
    tok_.text = std::string(1, c);
  }

  const std::string& src_;
  size_t pos_ = 0;
  int line_ = 1, col_ = 1;
  Token tok_;
};

bool is_capital(const std::string& s) {
  return !s.empty() && std::isupper((unsigned char)s[0]);
}

const char* kNonlinNames[] = {"step", "sig", "sigmoid", "relu", "exp",
                              "sqrt", "softmax", "lnorm", "pow"};
const char* kScalarFuncs[] = {"sin", "cos", "exp", "sqrt"};

bool is_nonlin_name(const std::string& s) {
  for (auto* n : kNonlinNames)
    if (s == n) return true;
  return false;
}
bool is_scalar_func(const std::string& s) {
  for (auto* n : kScalarFuncs)
    if (s == n) return true;
  return false;
}

Nonlin nonlin_from_name(const std::string& s) {
  if (s == "step") return Nonlin::Step;
  if (s == "sig" || s == "sigmoid") return Nonlin::Sigmoid;
  if (s == "relu") return Nonlin::Relu;
  if (s == "exp") return Nonlin::Exp;
  if (s == "sqrt") return Nonlin::Sqrt;
  if (s == "softmax") return Nonlin::Softmax;
  if (s == "lnorm") return Nonlin::Lnorm;
  if (s == "pow") return Nonlin::Power;
  return Nonlin::Identity;
}

class Parser {
 public:
  explicit Parser(const std::string& src) : lex_(src) {}

  Program parse() {
    while (lex_.peek().kind != Tok::End) {
      if (lex_.peek().kind == Tok::Newline) {
        lex_.take();
        continue;
      }
      parse_statement();
      end_statement();
    }
    return std::move(prog_);
  }

  TensorRef parse_bare_ref() {
    TensorRef r = parse_ref_tok();
    return r;
  }

 private:
  Lexer lex_;
  Program prog_;

  [[noreturn]] void fail(const std::string& msg) {
    throw ParseError(msg, lex_.peek().line, lex_.peek().col);
  }

  void end_statement() {
    if (lex_.peek().kind == Tok::Newline) {
      lex_.take();
    } else if (lex_.peek().kind != Tok::End) {
      fail("unexpected trailing input '" + lex_.peek().text + "'");
    }
  }

  void expect_punct(const char* p) {
    if (!lex_.is_punct(p)) fail(std::string("expected '") + p + "'");
    lex_.take();
  }

  void parse_statement() {
    int line = lex_.peek().line;
    if (lex_.peek().kind == Tok::String) {
      // "path" = Tensor  (write)
      Directive d;
      d.kind = Directive::Kind::WriteFile;
      d.path = lex_.take().text;
      expect_punct("=");
      if (lex_.peek().kind != Tok::Ident) fail("expected tensor name");
      d.tensor = lex_.take().text;
      d.line = line;
      prog_.directives.push_back(std::move(d));
      return;
    }
    if (lex_.is_ident("domain")) {
      lex_.take();
      parse_domain(line);
      return;
    }
    if (lex_.is_ident("const")) {
      lex_.take();
      if (lex_.peek().kind != Tok::Ident) fail("expected constant name");
      std::string name = lex_.take().text;
      expect_punct("=");
      double v = parse_signed_number();
      prog_.scalar_consts[name] = v;
      return;
    }
    if (lex_.is_ident("constant")) {
      lex_.take();
      if (lex_.peek().kind != Tok::Ident) fail("expected tensor name");
      while (true) {
        std::string name = lex_.take().text;
        prog_.constant_tensors.insert(name);
        Directive d;
        d.kind = Directive::Kind::ConstantTensor;
        d.tensor = name;
        d.line = line;
        prog_.directives.push_back(std::move(d));
        if (lex_.is_punct(",")) {
          lex_.take();
          continue;
        }
        break;
      }
      return;
    }
    if (lex_.peek().kind != Tok::Ident) fail("expected statement");

    TensorRef head = parse_ref_tok();
    head.line = line;

    if (lex_.is_punct("?")) {
      lex_.take();
      Directive d;
      d.kind = Directive::Kind::Query;
      d.query = print_ref_text(head);
      d.tensor = head.name;
      d.line = line;
      prog_.directives.push_back(std::move(d));
      return;
    }
    if (lex_.is_punct("|")) {
      // conditional query: collect the evidence atoms verbatim up to '?'
      lex_.take();
      std::string evidence;
      while (!lex_.is_punct("?")) {
        if (lex_.peek().kind == Tok::End || lex_.peek().kind == Tok::Newline)
          fail("conditional query must end with '?'");
        evidence += lex_.take().text;
      }
      lex_.take();  // ?
      Directive d;
      d.kind = Directive::Kind::Query;
      d.query = print_ref_text(head) + " | " + evidence;
      d.tensor = head.name;
      d.line = line;
      prog_.directives.push_back(std::move(d));
      return;
    }
    if (lex_.is_punct("<-")) {
      lex_.take();
      parse_rule(head, line);
      return;
    }
    // max= / avg=
    ReduceOp proj = ReduceOp::Sum;
    if (lex_.is_ident("max") || lex_.is_ident("avg")) {
      std::string op = lex_.take().text;
      expect_punct("=");
      proj = op == "max" ? ReduceOp::Max : ReduceOp::Avg;
      parse_equation(head, proj, line);
      return;
    }
    if (lex_.is_punct("=") || lex_.is_punct("+=")) {
      lex_.take();
      // literal / read-file / fact-with-value / equation
      if (lex_.peek().kind == Tok::String) {
        Directive d;
        d.kind = Directive::Kind::ReadFile;
        d.tensor = head.name;
        d.path = lex_.take().text;
        d.line = line;
        prog_.directives.push_back(std::move(d));
        return;
      }
      if (lex_.is_punct("[") && head.args.empty()) {
        parse_literal(head.name, line);
        return;
      }
      if (all_const_args(head) && is_number_start() && number_statement_ends()) {
        // Name[c,...] = 3.5   (element fact) or scalar literal Name = v
        double v = parse_signed_number();
        if (head.args.empty()) {
          LiteralDef lit;
          lit.name = head.name;
          lit.values = {v};
          lit.line = line;
          prog_.literals.push_back(std::move(lit));
        } else {
          Fact f;
          f.atom = head;
          f.value = v;
          f.line = line;
          prog_.facts.push_back(std::move(f));
        }
        return;
      }
      parse_equation(head, proj, line);
      return;
    }
    // Fact list: Atom(...), Atom(...)
    if (head.boolean_syntax && all_const_args(head)) {
      Fact f;
      f.atom = head;
      f.line = line;
      prog_.facts.push_back(std::move(f));
      while (lex_.is_punct(",")) {
        lex_.take();
        TensorRef atom = parse_ref_tok();
        if (!atom.boolean_syntax || !all_const_args(atom))
          fail("fact arguments must be constants");
        Fact g;
        g.atom = atom;
        g.line = line;
        prog_.facts.push_back(std::move(g));
      }
      return;
    }
    fail("expected '=', '<-', '?' or a fact");
  }

  bool is_number_start() {
    return lex_.peek().kind == Tok::Number || lex_.is_punct("-");
  }

  // Lookahead: a bare number followed by end-of-statement.
  bool number_statement_ends() {
    // cheap check: numbers used as facts are the entire RHS; an equation RHS
    // beginning with a number continues with a factor. We copy the lexer state
    // by re-lexing from the token; instead, peek structure: parse later if
    // ambiguity arises. Here we approximate: number then Newline/End.
    Lexer probe = lex_;
    if (probe.is_punct("-")) probe.take();
    if (probe.peek().kind != Tok::Number) return false;
    probe.take();
    return probe.peek().kind == Tok::Newline || probe.peek().kind == Tok::End;
  }

  double parse_signed_number() {
    double sign = 1.0;
    if (lex_.is_punct("-")) {
      lex_.take();
      sign = -1.0;
    }
    if (lex_.peek().kind != Tok::Number) fail("expected number");
    return sign * lex_.take().number;
  }

  void parse_domain(int line) {
    DomainDecl d;
    d.line = line;
    if (lex_.peek().kind != Tok::Ident) fail("expected domain name");
    d.name = lex_.take().text;
    expect_punct("=");
    if (lex_.is_punct("{")) {
      lex_.take();
      while (!lex_.is_punct("}")) {
        if (lex_.peek().kind != Tok::Ident) fail("expected symbol");
        d.symbols.push_back(lex_.take().text);
        if (lex_.is_punct(",")) lex_.take();
      }
      lex_.take();
      d.cardinality = (int)d.symbols.size();
    } else if (lex_.peek().kind == Tok::Number) {
      d.cardinality = (int)lex_.take().number;
    } else {
      fail("expected size or symbol list");
    }
    prog_.domain_decls.push_back(std::move(d));
  }

  void parse_literal(const std::string& name, int line) {
    LiteralDef lit;
    lit.name = name;
    lit.line = line;
    parse_nested_list(lit, 0);
    prog_.literals.push_back(std::move(lit));
  }

  void parse_nested_list(LiteralDef& lit, int depth) {
    expect_punct("[");
    int count = 0;
    bool nested = lex_.is_punct("[");
    while (!lex_.is_punct("]")) {
      if (nested) {
        parse_nested_list(lit, depth + 1);
      } else {
        lit.values.push_back(parse_signed_number());
      }
      ++count;
      if (lex_.is_punct(",")) lex_.take();
    }
    lex_.take();  // ]
    if ((int)lit.shape.size() <= depth) lit.shape.resize(depth + 1, -1);
    if (lit.shape[depth] == -1) {
      lit.shape[depth] = count;
    } else if (lit.shape[depth] != count) {
      fail("ragged tensor literal");
    }
  }

  TensorRef parse_ref_tok() {
    if (lex_.peek().kind != Tok::Ident) fail("expected tensor name");
    TensorRef r;
    r.line = lex_.peek().line;
    r.name = lex_.take().text;
    if (lex_.is_punct("[")) {
      lex_.take();
      parse_args(r, "]");
    } else if (lex_.is_punct("(")) {
      // Boolean parentheses form — but only if it really is an arg list;
      // callers handle function calls before calling parse_ref_tok.
      lex_.take();
      r.boolean_syntax = true;
      parse_args(r, ")");
    }
    return r;
  }

  void parse_args(TensorRef& r, const char* close) {
    if (lex_.is_punct(close)) {
      lex_.take();
      return;
    }
    while (true) {
      r.args.push_back(parse_index_expr());
      if (lex_.is_punct(",")) {
        lex_.take();
        continue;
      }
      expect_punct(close);
      break;
    }
  }

  IndexExpr parse_index_expr() {
    IndexExpr e;
    if (lex_.is_punct("*")) {
      lex_.take();
      e.is_virtual = true;
    }
    if (lex_.peek().kind == Tok::Number) {
      long v = (long)lex_.take().number;
      if (lex_.is_punct(":")) {
        lex_.take();
        e.kind = IndexExpr::Kind::Slice;
        e.lo = v;
        if (lex_.peek().kind != Tok::Number) fail("expected slice end");
        e.hi = (long)lex_.take().number;
      } else {
        e.kind = IndexExpr::Kind::Const;
        e.number = v;
      }
      return e;
    }
    if (lex_.peek().kind != Tok::Ident) fail("expected index expression");
    std::string id = lex_.take().text;
    if (is_capital(id)) {
      e.kind = IndexExpr::Kind::Const;
      e.symbol = id;
      return e;
    }
    e.kind = IndexExpr::Kind::Var;
    e.var = id;
    if (lex_.is_punct("+")) {
      lex_.take();
      if (lex_.peek().kind == Tok::Number) {
        e.number = (long)lex_.take().number;
      } else if (lex_.peek().kind == Tok::Ident) {
        e.kind = IndexExpr::Kind::VarSum;
        e.var2 = lex_.take().text;
      } else {
        fail("expected offset or variable after '+'");
      }
    } else if (lex_.is_punct("-")) {
      lex_.take();
      if (lex_.peek().kind != Tok::Number) fail("expected offset after '-'");
      e.number = -(long)lex_.take().number;
    } else if (lex_.is_punct("/")) {
      lex_.take();
      e.kind = IndexExpr::Kind::Scaled;
      if (lex_.peek().kind == Tok::Number) {
        e.divisor = (long)lex_.take().number;
      } else if (lex_.peek().kind == Tok::Ident) {
        e.divisor_name = lex_.take().text;
      } else {
        fail("expected divisor");
      }
    }
    if (lex_.is_punct(".")) {
      lex_.take();
      e.normalized = true;
    }
    return e;
  }

  void parse_rule(TensorRef head, int line) {
    head.boolean_syntax = true;
    Equation eq;
    eq.lhs = std::move(head);
    eq.line = line;
    eq.from_datalog = true;
    eq.nonlin.kind = Nonlin::Step;
    Term t;
    while (true) {
      Factor f;
      f.kind = Factor::Kind::Ref;
      f.ref = parse_ref_tok();
      f.ref.boolean_syntax = true;
      t.factors.push_back(std::move(f));
      if (lex_.is_punct(",")) {
        lex_.take();
        continue;
      }
      break;
    }
    eq.rhs.terms.push_back(std::move(t));
    prog_.equations.push_back(std::move(eq));
  }

  void parse_equation(TensorRef lhs, ReduceOp proj, int line) {
    Equation eq;
    eq.lhs = std::move(lhs);
    eq.proj = proj;
    eq.line = line;

    // Whole-RHS nonlinearity or concat?
    if (lex_.peek().kind == Tok::Ident &&
        (is_nonlin_name(lex_.peek().text) || lex_.peek().text == "concat")) {
      Lexer probe = lex_;
      Token name = probe.take();
      if (probe.is_punct("(")) {
        // Commit: these names are reserved at RHS top level.
        lex_.take();
        lex_.take();
        if (name.text == "concat") {
          eq.nonlin.kind = Nonlin::Identity;
          eq.rhs = parse_expr();
          expect_punct(")");
          mark_concat(eq);
        } else {
          eq.nonlin.kind = nonlin_from_name(name.text);
          eq.rhs = parse_expr();
          if (lex_.is_punct(",")) {
            lex_.take();
            double v = parse_scalar_const_arg();
            if (eq.nonlin.kind == Nonlin::Sigmoid) {
              eq.nonlin.temperature = v;
              eq.nonlin.has_temperature = true;
            } else if (eq.nonlin.kind == Nonlin::Power) {
              eq.nonlin.power = v;
            } else {
              fail("unexpected second argument to " + name.text);
            }
          } else if (eq.nonlin.kind == Nonlin::Power) {
            fail("pow() needs an exponent argument");
          }
          expect_punct(")");
        }
        finish_equation(std::move(eq));
        return;
      }
    }
    eq.rhs = parse_expr();
    finish_equation(std::move(eq));
  }

  double parse_scalar_const_arg() {
    if (lex_.peek().kind == Tok::Number || lex_.is_punct("-"))
      return parse_signed_number();
    if (lex_.peek().kind == Tok::Ident) {
      std::string n = lex_.take().text;
      auto it = prog_.scalar_consts.find(n);
      if (it == prog_.scalar_consts.end())
        fail("unknown constant '" + n + "'");
      return it->second;
    }
    fail("expected scalar constant");
  }

  void mark_concat(Equation& eq) {
    if (eq.rhs.terms.size() != 1 || eq.rhs.terms[0].factors.size() != 1 ||
        eq.rhs.terms[0].factors[0].kind != Factor::Kind::Ref)
      fail("concat takes a single tensor reference");
    eq.nonlin.kind = Nonlin::Identity;
    // The concat marker: stash on the equation via the normalized_index slot
    // being unused; use a dedicated flag instead.
    eq.is_concat = true;
  }

  void finish_equation(Equation eq) {
    // Normalized-index markers move from the LHS args onto the nonlinearity.
    for (auto& a : eq.lhs.args) {
      if (a.normalized) {
        if (!eq.nonlin.normalized_index.empty())
          fail("multiple normalized indices");
        eq.nonlin.normalized_index = a.var;
      }
    }
    if (eq.nonlin.is_normalizer() && eq.nonlin.normalized_index.empty()) {
      // default: last LHS index variable
      for (auto it = eq.lhs.args.rbegin(); it != eq.lhs.args.rend(); ++it) {
        if (it->kind == IndexExpr::Kind::Var) {
          eq.nonlin.normalized_index = it->var;
          break;
        }
      }
      if (eq.nonlin.normalized_index.empty())
        fail("softmax/lnorm needs an index to normalize over");
    }
    prog_.equations.push_back(std::move(eq));
  }

  // expr := term (('+'|'-') term)*
  Expr parse_expr() {
    Expr e;
    double sign = 1.0;
    if (lex_.is_punct("-")) {
      lex_.take();
      sign = -1.0;
    } else if (lex_.is_punct("+")) {
      lex_.take();
    }
    e.terms.push_back(parse_term(sign));
    while (lex_.is_punct("+") || lex_.is_punct("-")) {
      sign = lex_.take().text == "-" ? -1.0 : 1.0;
      e.terms.push_back(parse_term(sign));
    }
    return e;
  }

  bool at_factor_start() {
    if (lex_.peek().kind == Tok::Number) return true;
    if (lex_.peek().kind == Tok::Ident) return true;
    if (lex_.is_punct("(")) return true;
    return false;
  }

  Term parse_term(double sign) {
    Term t;
    t.coefficient = sign;
    bool any = false;
    while (true) {
      if (lex_.is_punct("*")) {
        lex_.take();
        continue;
      }
      if (lex_.is_punct("/")) {
        lex_.take();
        t.divisors.push_back(parse_scalar_primary());
        continue;
      }
      if (!at_factor_start()) break;
      if (lex_.peek().kind == Tok::Number) {
        t.coefficient *= lex_.take().number;
        any = true;
        continue;
      }
      parse_factor(t);
      any = true;
    }
    if (!any && t.divisors.empty())
      fail("expected a term");
    return t;
  }

  void parse_factor(Term& t) {
    if (lex_.is_punct("(")) {
      lex_.take();
      Factor f;
      f.kind = Factor::Kind::Grouped;
      f.group = std::make_shared<Expr>(parse_expr());
      expect_punct(")");
      if (lex_.is_punct("^")) {
        lex_.take();
        f.group_power = parse_scalar_const_arg();
      }
      t.factors.push_back(std::move(f));
      return;
    }
    if (lex_.peek().kind != Tok::Ident) fail("expected factor");
    std::string name = lex_.peek().text;
    if (name == "argmaxind") {
      lex_.take();
      expect_punct("(");
      Factor f;
      f.kind = Factor::Kind::ArgmaxInd;
      f.ref = parse_ref_tok();
      expect_punct(",");
      f.ref2 = parse_ref_tok();
      expect_punct(")");
      t.factors.push_back(std::move(f));
      return;
    }
    if (is_scalar_func(name) && !is_capital(name)) {
      // could be a scalar/index function call: func(scalar-expr)
      Lexer probe = lex_;
      probe.take();
      if (probe.is_punct("(")) {
        lex_.take();
        lex_.take();
        Factor f;
        f.kind = Factor::Kind::IndexFunc;
        f.func = name;
        f.scalar_arg = parse_scalar_expr();
        expect_punct(")");
        t.factors.push_back(std::move(f));
        return;
      }
    }
    // plain tensor ref (or named scalar constant)
    TensorRef r = parse_ref_tok();
    if (r.args.empty() && !r.boolean_syntax &&
        prog_.scalar_consts.count(r.name)) {
      ScalarExpr s;
      s.kind = ScalarExpr::Kind::ConstName;
      s.name = r.name;
      t.scalars.push_back(std::move(s));
      return;
    }
    Factor f;
    f.kind = Factor::Kind::Ref;
    f.ref = std::move(r);
    t.factors.push_back(std::move(f));
  }

  // Scalar-expression grammar with precedence: ^ > unary- > * / > + -.
  ScalarExpr parse_scalar_expr() { return parse_scalar_sum(); }

  ScalarExpr parse_scalar_sum() {
    ScalarExpr lhs = parse_scalar_product();
    while (lex_.is_punct("+") || lex_.is_punct("-")) {
      bool add = lex_.take().text == "+";
      ScalarExpr rhs = parse_scalar_product();
      ScalarExpr node;
      node.kind = add ? ScalarExpr::Kind::Add : ScalarExpr::Kind::Sub;
      node.args = {std::move(lhs), std::move(rhs)};
      lhs = std::move(node);
    }
    return lhs;
  }

  ScalarExpr parse_scalar_product() {
    ScalarExpr lhs = parse_scalar_unary();
    while (lex_.is_punct("*") || lex_.is_punct("/")) {
      bool mul = lex_.take().text == "*";
      ScalarExpr rhs = parse_scalar_unary();
      ScalarExpr node;
      node.kind = mul ? ScalarExpr::Kind::Mul : ScalarExpr::Kind::Div;
      node.args = {std::move(lhs), std::move(rhs)};
      lhs = std::move(node);
    }
    return lhs;
  }

  ScalarExpr parse_scalar_unary() {
    if (lex_.is_punct("-")) {
      lex_.take();
      ScalarExpr node;
      node.kind = ScalarExpr::Kind::Neg;
      node.args = {parse_scalar_unary()};
      return node;
    }
    return parse_scalar_power();
  }

  ScalarExpr parse_scalar_power() {
    ScalarExpr base = parse_scalar_primary();
    if (lex_.is_punct("^")) {
      lex_.take();
      ScalarExpr exp = parse_scalar_unary();  // right-associative
      ScalarExpr node;
      node.kind = ScalarExpr::Kind::Pow;
      node.args = {std::move(base), std::move(exp)};
      return node;
    }
    return base;
  }

  ScalarExpr parse_scalar_primary() {
    ScalarExpr e;
    if (lex_.peek().kind == Tok::Number) {
      e.kind = ScalarExpr::Kind::Number;
      e.number = lex_.take().number;
      return parse_scalar_power_suffix(std::move(e));
    }
    if (lex_.is_punct("(")) {
      lex_.take();
      e = parse_scalar_sum();
      expect_punct(")");
      return parse_scalar_power_suffix(std::move(e));
    }
    if (lex_.peek().kind != Tok::Ident) fail("expected scalar expression");
    std::string id = lex_.take().text;
    if (is_scalar_func(id) && lex_.is_punct("(")) {
      lex_.take();
      e.kind = ScalarExpr::Kind::Call;
      e.name = id;
      e.args = {parse_scalar_sum()};
      expect_punct(")");
      return parse_scalar_power_suffix(std::move(e));
    }
    e.kind = (is_capital(id) || prog_.scalar_consts.count(id))
                 ? ScalarExpr::Kind::ConstName
                 : ScalarExpr::Kind::IndexVar;
    e.name = id;
    return parse_scalar_power_suffix(std::move(e));
  }

  ScalarExpr parse_scalar_power_suffix(ScalarExpr base) {
    if (lex_.is_punct("^")) {
      lex_.take();
      ScalarExpr exp = parse_scalar_unary();
      ScalarExpr node;
      node.kind = ScalarExpr::Kind::Pow;
      node.args = {std::move(base), std::move(exp)};
      return node;
    }
    return base;
  }

  bool all_const_args(const TensorRef& r) {
    for (auto& a : r.args)
      if (a.kind != IndexExpr::Kind::Const) return false;
    return true;
  }

  std::string print_ref_text(const TensorRef& r);
};

std::string index_expr_text(const IndexExpr& e) {
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

std::string Parser::print_ref_text(const TensorRef& r) {
  std::string s = r.name;
  if (!r.args.empty() || r.boolean_syntax) {
    s += r.boolean_syntax ? "(" : "[";
    for (size_t i = 0; i < r.args.size(); ++i) {
      if (i) s += ",";
      s += index_expr_text(r.args[i]);
    }
    s += r.boolean_syntax ? ")" : "]";
  }
  return s;
}

}  // namespace

Program parse_program(const std::string& source) {
  Parser p(source);
  return p.parse();
}

Program parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_program(ss.str());
}

TensorRef parse_ref(const std::string& text) {
  Parser p(text);
  return p.parse_bare_ref();
}

}  // namespace tl
