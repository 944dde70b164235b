#include "tl/analyze.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <set>

#include "tl/io.hpp"
#include "tl/parser.hpp"

namespace tl {

double eval_scalar(const ScalarExpr& e, const std::map<std::string, double>& consts,
                   const std::map<std::string, int>& vars) {
  switch (e.kind) {
    case ScalarExpr::Kind::Number: return e.number;
    case ScalarExpr::Kind::ConstName: {
      auto it = consts.find(e.name);
      if (it != consts.end()) return it->second;
      if (e.name == "L") return 10000.0;  // positional-encoding base default
      throw std::runtime_error("unknown constant '" + e.name + "'");
    }
    case ScalarExpr::Kind::IndexVar: {
      auto it = vars.find(e.name);
      if (it == vars.end())
        throw std::runtime_error("unbound index variable '" + e.name +
                                 "' in scalar expression");
      return (double)it->second;
    }
    case ScalarExpr::Kind::Add:
      return eval_scalar(e.args[0], consts, vars) + eval_scalar(e.args[1], consts, vars);
    case ScalarExpr::Kind::Sub:
      return eval_scalar(e.args[0], consts, vars) - eval_scalar(e.args[1], consts, vars);
    case ScalarExpr::Kind::Mul:
      return eval_scalar(e.args[0], consts, vars) * eval_scalar(e.args[1], consts, vars);
    case ScalarExpr::Kind::Div:
      return eval_scalar(e.args[0], consts, vars) / eval_scalar(e.args[1], consts, vars);
    case ScalarExpr::Kind::Pow:
      return std::pow(eval_scalar(e.args[0], consts, vars),
                      eval_scalar(e.args[1], consts, vars));
    case ScalarExpr::Kind::Neg: return -eval_scalar(e.args[0], consts, vars);
    case ScalarExpr::Kind::Call: {
      double x = eval_scalar(e.args[0], consts, vars);
      if (e.name == "sin") return std::sin(x);
      if (e.name == "cos") return std::cos(x);
      if (e.name == "exp") return std::exp(x);
      if (e.name == "sqrt") return std::sqrt(x);
      throw std::runtime_error("unknown function '" + e.name + "'");
    }
  }
  throw std::runtime_error("bad scalar expression");
}

double eval_scalar_const(const ScalarExpr& e,
                         const std::map<std::string, double>& consts) {
  return eval_scalar(e, consts, {});
}

namespace {

struct UnionFind {
  std::map<std::string, std::string> parent;
  const std::string& find(const std::string& k) {
    auto it = parent.find(k);
    if (it == parent.end()) {
      parent[k] = k;
      return parent.find(k)->first;
    }
    if (it->second == k) return it->first;
    const std::string root = find(it->second);
    parent[k] = root;
    return parent.find(k)->second;
  }
  void unite(const std::string& a, const std::string& b) {
    std::string ra = find(a), rb = find(b);
    if (ra != rb) parent[ra] = rb;
  }
};

struct GroupInfo {
  struct Evidence {
    int card;
    std::string site;
  };
  std::vector<Evidence> exact;
  int lower = 0;
  std::vector<std::string> symbols;  // first-occurrence order
  std::string declared;              // declared domain name, if any
  std::string display;               // best name for messages
};

std::string slot_key(const std::string& tensor, int pos) {
  return "slot:" + tensor + ":" + std::to_string(pos);
}
std::string var_key(int eq, const std::string& v) {
  return "var:" + std::to_string(eq) + ":" + v;
}
std::string domain_key(const std::string& d) { return "domain:" + d; }

// Walks every tensor reference of an expression (grouped factors included)
// and every index variable used in scalar positions.
void walk_expr(const Expr& e, const std::function<void(const TensorRef&)>& on_ref,
               const std::function<void(const std::string&)>& on_scalar_var);

void walk_scalar(const ScalarExpr& s,
                 const std::function<void(const std::string&)>& on_var) {
  if (s.kind == ScalarExpr::Kind::IndexVar) on_var(s.name);
  for (auto& a : s.args) walk_scalar(a, on_var);
}

void walk_term(const Term& t, const std::function<void(const TensorRef&)>& on_ref,
               const std::function<void(const std::string&)>& on_scalar_var) {
  for (auto& f : t.factors) {
    switch (f.kind) {
      case Factor::Kind::Ref:
        on_ref(f.ref);
        break;
      case Factor::Kind::Grouped:
        walk_expr(*f.group, on_ref, on_scalar_var);
        break;
      case Factor::Kind::IndexFunc:
        walk_scalar(f.scalar_arg, on_scalar_var);
        break;
      case Factor::Kind::ArgmaxInd:
        on_ref(f.ref);
        on_ref(f.ref2);
        break;
    }
  }
  for (auto& s : t.scalars) walk_scalar(s, on_scalar_var);
  for (auto& s : t.divisors) walk_scalar(s, on_scalar_var);
}

void walk_expr(const Expr& e, const std::function<void(const TensorRef&)>& on_ref,
               const std::function<void(const std::string&)>& on_scalar_var) {
  for (auto& t : e.terms) walk_term(t, on_ref, on_scalar_var);
}

struct Analyzer {
  Program& p;
  std::string base_dir;
  UnionFind uf;
  std::map<std::string, GroupInfo> info;  // keyed by representative at the end
  std::map<std::string, int> arity;
  std::map<std::string, int> arity_line;
  std::map<std::string, std::string> symbol_home;  // symbol -> declared domain key

  GroupInfo& at(const std::string& key) {
    auto& g = info[key];
    return g;
  }

  void add_exact(const std::string& key, int card, const std::string& site) {
    at(key).exact.push_back({card, site});
  }
  void add_lower(const std::string& key, int bound) {
    at(key).lower = std::max(at(key).lower, bound);
  }
  void add_symbol(const std::string& key, const std::string& sym) {
    auto& g = at(key);
    if (std::find(g.symbols.begin(), g.symbols.end(), sym) == g.symbols.end())
      g.symbols.push_back(sym);
    auto it = symbol_home.find(sym);
    if (it != symbol_home.end()) uf.unite(key, it->second);
  }

  void check_arity(const std::string& name, int n, int line) {
    auto it = arity.find(name);
    if (it == arity.end()) {
      arity[name] = n;
      arity_line[name] = line;
      return;
    }
    if (it->second != n)
      throw std::runtime_error(
          "arity mismatch for tensor '" + name + "': " + std::to_string(it->second) +
          " (line " + std::to_string(arity_line[name]) + ") vs " + std::to_string(n) +
          " (line " + std::to_string(line) + ")");
  }

  void visit_ref(const TensorRef& r, int eq_idx) {
    check_arity(r.name, (int)r.args.size(), r.line);
    for (int j = 0; j < (int)r.args.size(); ++j) {
      const IndexExpr& a = r.args[j];
      std::string sk = slot_key(r.name, j);
      at(sk).display = r.name + "[" + std::to_string(j) + "]";
      switch (a.kind) {
        case IndexExpr::Kind::Var: {
          std::string vk = var_key(eq_idx, a.var);
          at(vk).display = a.var;
          uf.unite(sk, vk);
          break;
        }
        case IndexExpr::Kind::Const:
          if (!a.symbol.empty()) {
            if (p.scalar_consts.count(a.symbol)) {
              add_lower(sk, (int)p.scalar_consts.at(a.symbol) + 1);
            } else {
              add_symbol(sk, a.symbol);
            }
          } else {
            add_lower(sk, (int)a.number + 1);
          }
          break;
        case IndexExpr::Kind::VarSum:
          // no unification; cardinality resolved in the post pass
          at(var_key(eq_idx, a.var)).display = a.var;
          at(var_key(eq_idx, a.var2)).display = a.var2;
          break;
        case IndexExpr::Kind::Scaled:
          at(var_key(eq_idx, a.var)).display = a.var;
          break;
        case IndexExpr::Kind::Slice:
          add_lower(sk, (int)a.hi);
          break;
      }
    }
  }

  void run() {
    // Declared domains.
    for (auto& d : p.domain_decls) {
      std::string dk = domain_key(d.name);
      at(dk).declared = d.name;
      at(dk).display = d.name;
      add_exact(dk, d.cardinality, "domain declaration line " + std::to_string(d.line));
      for (auto& s : d.symbols) {
        at(dk).symbols.push_back(s);
        if (!symbol_home.count(s)) symbol_home[s] = dk;
      }
    }
    // Variables named like a declared domain bind to it.
    // (Handled when visiting refs below, via this lookup.)

    // Literals.
    for (auto& lit : p.literals) {
      check_arity(lit.name, (int)lit.shape.size(), lit.line);
      for (int j = 0; j < (int)lit.shape.size(); ++j)
        add_exact(slot_key(lit.name, j), lit.shape[j],
                  "literal at line " + std::to_string(lit.line));
    }
    // Facts.
    for (auto& f : p.facts) {
      check_arity(f.atom.name, (int)f.atom.args.size(), f.line);
      for (int j = 0; j < (int)f.atom.args.size(); ++j) {
        auto& a = f.atom.args[j];
        std::string sk = slot_key(f.atom.name, j);
        at(sk).display = f.atom.name + "[" + std::to_string(j) + "]";
        if (a.kind != IndexExpr::Kind::Const)
          throw std::runtime_error("fact arguments must be constants (line " +
                                   std::to_string(f.line) + ")");
        if (!a.symbol.empty())
          add_symbol(sk, a.symbol);
        else
          add_lower(sk, (int)a.number + 1);
      }
    }
    // File reads.
    for (auto& d : p.directives) {
      if (d.kind != Directive::Kind::ReadFile) continue;
      TensorValue t;
      if (auto pre = p.file_tensors.find(d.tensor); pre != p.file_tensors.end()) {
        t = pre->second;  // preloaded (e.g. carried into a derived program)
      } else {
        std::string path = d.path;
        if (!path.empty() && path[0] != '/') path = base_dir + "/" + path;
        t = load_tensor_file(path);
      }
      check_arity(d.tensor, t.rank(), d.line);
      for (int j = 0; j < t.rank(); ++j) {
        std::string sk = slot_key(d.tensor, j);
        add_exact(sk, t.axis(j).domain->cardinality(),
                  "file " + d.path + " axis " + std::to_string(j));
        for (auto& s : t.axis(j).domain->symbols()) add_symbol(sk, s);
      }
      p.file_tensors[d.tensor] = std::move(t);
    }
    // Equations.
    for (int ei = 0; ei < (int)p.equations.size(); ++ei) {
      auto& eq = p.equations[ei];
      visit_ref(eq.lhs, ei);
      walk_expr(
          eq.rhs, [&](const TensorRef& r) { visit_ref(r, ei); },
          [&](const std::string& v) { at(var_key(ei, v)).display = v; });
      // variables named like a declared domain bind to it
      for (auto& [key, g] : info) {
        (void)g;
      }
    }
    // Signature hints: unify each slot with the slot of the hinted tensor.
    for (auto& [name, like] : p.same_signature) {
      auto ia = arity.find(name);
      auto ib = arity.find(like);
      if (ia == arity.end() || ib == arity.end()) continue;
      for (int j = 0; j < std::min(ia->second, ib->second); ++j)
        uf.unite(slot_key(name, j), slot_key(like, j));
    }
    // Bind variables whose name matches a declared domain.
    std::vector<std::pair<std::string, std::string>> links;
    for (auto& [key, g] : info) {
      if (key.rfind("var:", 0) == 0) {
        std::string v = g.display;
        if (info.count(domain_key(v))) links.emplace_back(key, domain_key(v));
      }
    }
    for (auto& [a, b] : links) uf.unite(a, b);

    resolve();
  }

  std::map<std::string, DomainPtr> resolved;  // root key -> domain

  DomainPtr domain_of(const std::string& key) {
    auto it = resolved.find(uf.find(key));
    return it == resolved.end() ? nullptr : it->second;
  }

  void merge_groups() {
    std::map<std::string, GroupInfo> merged;
    for (auto& [key, g] : info) {
      std::string root = uf.find(key);
      auto& m = merged[root];
      for (auto& e : g.exact) m.exact.push_back(e);
      m.lower = std::max(m.lower, g.lower);
      for (auto& s : g.symbols)
        if (std::find(m.symbols.begin(), m.symbols.end(), s) == m.symbols.end())
          m.symbols.push_back(s);
      if (!g.declared.empty()) {
        if (!m.declared.empty() && m.declared != g.declared)
          throw std::runtime_error("domains '" + m.declared + "' and '" + g.declared +
                                   "' are used for the same index");
        m.declared = g.declared;
      }
      if (m.display.empty() || (!g.declared.empty()))
        m.display = g.display.empty() ? m.display : g.display;
    }
    info = std::move(merged);
  }

  void resolve() {
    merge_groups();
    for (auto& [root, g] : info) {
      int card = -1;
      std::string site;
      for (auto& e : g.exact) {
        if (card >= 0 && e.card != card)
          throw std::runtime_error("conflicting sizes for index '" + g.display +
                                   "': " + std::to_string(card) + " (" + site +
                                   ") vs " + std::to_string(e.card) + " (" + e.site +
                                   ")");
        card = e.card;
        site = e.site;
      }
      int min_card = std::max(g.lower, (int)g.symbols.size());
      if (card >= 0 && min_card > card)
        throw std::runtime_error("index '" + g.display + "' needs at least " +
                                 std::to_string(min_card) + " values but is sized " +
                                 std::to_string(card) + " (" + site + ")");
      if (card < 0 && min_card == 0) continue;  // maybe resolvable in post pass
      auto dom = make_domain(g.declared.empty() ? g.display : g.declared,
                             card >= 0 ? card : min_card);
      for (auto& s : g.symbols) dom->intern(s);
      if (card >= 0) dom->set_cardinality(card);
      resolved[root] = dom;
    }

    // Post passes: scaled / var-sum / concat derived sizes.
    for (int pass = 0; pass < 6; ++pass) {
      bool changed = false;
      for (int ei = 0; ei < (int)p.equations.size(); ++ei) {
        auto& eq = p.equations[ei];
        auto derive_ref = [&](const TensorRef& r) {
          for (int j = 0; j < (int)r.args.size(); ++j) {
            auto& a = r.args[j];
            std::string sk = slot_key(r.name, j);
            if (a.kind == IndexExpr::Kind::Scaled) {
              auto vd = domain_of(var_key(ei, a.var));
              if (!vd || domain_of(sk)) continue;
              long div = a.divisor;
              if (!a.divisor_name.empty()) {
                auto it = p.scalar_consts.find(a.divisor_name);
                if (it == p.scalar_consts.end())
                  throw std::runtime_error("unknown stride constant '" +
                                           a.divisor_name + "'");
                div = (long)it->second;
              }
              if (div <= 0) throw std::runtime_error("stride must be positive");
              int card = (int)((vd->cardinality() - 1) / div + 1);
              resolved[uf.find(sk)] = make_domain(info[uf.find(sk)].display, card);
              changed = true;
            } else if (a.kind == IndexExpr::Kind::VarSum) {
              auto v1 = domain_of(var_key(ei, a.var));
              auto v2 = domain_of(var_key(ei, a.var2));
              if (!v1 || !v2 || domain_of(sk)) continue;
              int card = v1->cardinality() + v2->cardinality() - 1;
              resolved[uf.find(sk)] = make_domain(info[uf.find(sk)].display, card);
              changed = true;
            } else if (a.kind == IndexExpr::Kind::Slice) {
              if (domain_of(sk)) continue;
              // slice evidence was a lower bound; leave to generic resolution
            }
          }
        };
        derive_ref(eq.lhs);
        walk_expr(
            eq.rhs, derive_ref, [](const std::string&) {});
        if (eq.is_concat) derive_concat(eq, ei, changed);
      }
      if (!changed) break;
    }

    // Fill program outputs.
    for (auto& d : p.domain_decls) {
      p.domains[d.name] = domain_of(domain_key(d.name));
    }
    p.eq_vars.assign(p.equations.size(), {});
    for (auto& [key, g] : uf.parent) {
      if (key.rfind("var:", 0) == 0) {
        auto c1 = key.find(':');
        auto c2 = key.find(':', c1 + 1);
        int ei = std::stoi(key.substr(c1 + 1, c2 - c1 - 1));
        std::string v = key.substr(c2 + 1);
        auto dom = domain_of(key);
        if (!dom)
          throw std::runtime_error("cannot infer a domain for index variable '" + v +
                                   "' (line " + std::to_string(p.equations[ei].line) +
                                   "); declare it with 'domain " + v + " = N'");
        p.eq_vars[ei][v] = dom;
      }
    }
    for (auto& [name, n] : arity) {
      std::vector<DomainPtr> sig;
      for (int j = 0; j < n; ++j) {
        auto dom = domain_of(slot_key(name, j));
        if (!dom)
          throw std::runtime_error("cannot infer the domain of argument " +
                                   std::to_string(j) + " of tensor '" + name + "'");
        sig.push_back(dom);
      }
      p.signatures[name] = std::move(sig);
    }
    // Boolean marking: parenthesis syntax anywhere, or a step/datalog head.
    for (auto& f : p.facts)
      if (f.atom.boolean_syntax) p.boolean_tensors[f.atom.name] = true;
    for (auto& eq : p.equations) {
      if (eq.lhs.boolean_syntax || eq.nonlin.kind == Nonlin::Step)
        p.boolean_tensors[eq.lhs.name] = true;
      walk_expr(
          eq.rhs,
          [&](const TensorRef& r) {
            if (r.boolean_syntax && !p.boolean_tensors.count(r.name))
              p.boolean_tensors[r.name] = true;
          },
          [](const std::string&) {});
    }
  }

  void derive_concat(const Equation& eq, int ei, bool& changed) {
    // LHS var absent from the RHS gets the product of the merged cardinalities.
    const TensorRef& src = eq.rhs.terms[0].factors[0].ref;
    std::set<std::string> rhs_vars;
    for (auto& a : src.args)
      if (a.kind == IndexExpr::Kind::Var) rhs_vars.insert(a.var);
    for (int j = 0; j < (int)eq.lhs.args.size(); ++j) {
      auto& a = eq.lhs.args[j];
      if (a.kind != IndexExpr::Kind::Var || rhs_vars.count(a.var)) continue;
      if (domain_of(var_key(ei, a.var))) continue;
      std::set<std::string> lhs_vars;
      for (auto& b : eq.lhs.args)
        if (b.kind == IndexExpr::Kind::Var) lhs_vars.insert(b.var);
      long card = 1;
      bool ready = true;
      for (auto& b : src.args) {
        if (b.kind == IndexExpr::Kind::Var && !lhs_vars.count(b.var)) {
          auto vd = domain_of(var_key(ei, b.var));
          if (!vd) {
            ready = false;
            break;
          }
          card *= vd->cardinality();
        }
      }
      if (!ready) continue;
      resolved[uf.find(var_key(ei, a.var))] =
          make_domain(a.var, (int)card);
      changed = true;
    }
  }
};

}  // namespace

void infer_domains(Program& p, const std::string& base_dir) {
  Analyzer a{p, base_dir};
  a.run();
}

namespace {

using Rename = std::map<std::string, std::string>;

void rename_scalar(ScalarExpr& s, const Rename& rn) {
  if (s.kind == ScalarExpr::Kind::IndexVar) {
    auto it = rn.find(s.name);
    if (it != rn.end()) s.name = it->second;
  }
  for (auto& a : s.args) rename_scalar(a, rn);
}

void rename_ref(TensorRef& r, const Rename& rn) {
  for (auto& a : r.args) {
    auto it = rn.find(a.var);
    if (!a.var.empty() && it != rn.end()) a.var = it->second;
    auto it2 = rn.find(a.var2);
    if (!a.var2.empty() && it2 != rn.end()) a.var2 = it2->second;
  }
}

void rename_expr(Expr& e, const Rename& rn);

void rename_term(Term& t, const Rename& rn) {
  for (auto& f : t.factors) {
    switch (f.kind) {
      case Factor::Kind::Ref: rename_ref(f.ref, rn); break;
      case Factor::Kind::Grouped: rename_expr(*f.group, rn); break;
      case Factor::Kind::IndexFunc: rename_scalar(f.scalar_arg, rn); break;
      case Factor::Kind::ArgmaxInd:
        rename_ref(f.ref, rn);
        rename_ref(f.ref2, rn);
        break;
    }
  }
  for (auto& s : t.scalars) rename_scalar(s, rn);
  for (auto& s : t.divisors) rename_scalar(s, rn);
}

void rename_expr(Expr& e, const Rename& rn) {
  for (auto& t : e.terms) rename_term(t, rn);
}

std::string pattern_key(const TensorRef& r) {
  std::string k = r.name + "/";
  std::map<std::string, int> var_ids;  // repeated variables must stay aligned
  for (auto& a : r.args) {
    switch (a.kind) {
      case IndexExpr::Kind::Var: {
        auto [it, fresh] = var_ids.try_emplace(a.var, (int)var_ids.size());
        k += (a.is_virtual ? "*v" : "v") + std::to_string(it->second);
        if (a.number) k += (a.number > 0 ? "+" : "") + std::to_string(a.number);
        break;
      }
      case IndexExpr::Kind::Const:
        k += "c:" + (a.symbol.empty() ? std::to_string(a.number) : a.symbol);
        break;
      case IndexExpr::Kind::VarSum: k += "v+v"; break;
      case IndexExpr::Kind::Scaled:
        k += "v/" + (a.divisor_name.empty() ? std::to_string(a.divisor)
                                            : a.divisor_name);
        break;
      case IndexExpr::Kind::Slice:
        k += std::to_string(a.lo) + ":" + std::to_string(a.hi);
        break;
    }
    k += ",";
  }
  return k;
}

bool same_nonlin(const NonlinearitySpec& a, const NonlinearitySpec& b) {
  return a.kind == b.kind && a.power == b.power &&
         a.has_temperature == b.has_temperature &&
         (!a.has_temperature || a.temperature == b.temperature);
}

void collect_term_vars(const Term& t, std::set<std::string>& vars) {
  walk_term(
      t,
      [&](const TensorRef& r) {
        for (auto& a : r.args) {
          if (!a.var.empty()) vars.insert(a.var);
          if (!a.var2.empty()) vars.insert(a.var2);
        }
      },
      [&](const std::string& v) { vars.insert(v); });
}

}  // namespace

void desugar(Program& p) {
  p.groups.clear();
  std::map<std::string, int> group_of;  // pattern key -> group index
  int fresh = 0;

  for (int ei = 0; ei < (int)p.equations.size(); ++ei) {
    const Equation& eq = p.equations[ei];
    std::string key = pattern_key(eq.lhs);
    auto it = group_of.find(key);
    if (it == group_of.end() || eq.is_concat) {
      group_of[key] = (int)p.groups.size();
      EqGroup g;
      g.lhs = eq.lhs;
      for (auto& a : g.lhs.args) a.normalized = false;
      g.terms = eq.rhs.terms;
      g.proj = eq.proj;
      g.nonlin = eq.nonlin;
      g.is_concat = eq.is_concat;
      g.from_datalog = eq.from_datalog;
      g.vars = p.eq_vars[ei];
      g.member_lines.push_back(eq.line);
      p.groups.push_back(std::move(g));
      continue;
    }
    EqGroup& g = p.groups[it->second];
    if (!same_nonlin(g.nonlin, eq.nonlin))
      throw std::runtime_error(
          "equations for '" + eq.lhs.name +
          "' disagree on the nonlinearity (lines " +
          std::to_string(g.member_lines.front()) + " and " +
          std::to_string(eq.line) + "); it is applied after accumulation");
    if (g.proj != eq.proj)
      throw std::runtime_error("equations for '" + eq.lhs.name +
                               "' disagree on the projection operator");
    // Rename this member's variables into the group's scheme.
    Rename rn;
    for (size_t j = 0; j < eq.lhs.args.size(); ++j) {
      const IndexExpr& mine = eq.lhs.args[j];
      const IndexExpr& canon = g.lhs.args[j];
      if (!mine.var.empty()) rn[mine.var] = canon.var;
      if (!mine.var2.empty()) rn[mine.var2] = canon.var2;
    }
    std::set<std::string> body_vars;
    for (auto& t : eq.rhs.terms) collect_term_vars(t, body_vars);
    std::set<std::string> used;
    for (auto& [k, v] : rn) used.insert(v);
    for (auto& [v, d] : g.vars) used.insert(v);
    for (auto& v : body_vars) {
      if (rn.count(v)) continue;
      std::string nv = v;
      while (used.count(nv)) nv = "_r" + std::to_string(fresh++);
      rn[v] = nv;
      used.insert(nv);
    }
    for (Term t : eq.rhs.terms) {
      rename_term(t, rn);
      g.terms.push_back(std::move(t));
    }
    // carry variable domains under the new names
    for (auto& [v, dom] : p.eq_vars[ei]) {
      auto r = rn.find(v);
      std::string name = r == rn.end() ? v : r->second;
      g.vars.emplace(name, dom);
    }
    if (eq.nonlin.is_normalizer() && g.nonlin.normalized_index.empty())
      g.nonlin.normalized_index = eq.nonlin.normalized_index;
    g.member_lines.push_back(eq.line);
  }

  // Range restriction: every LHS variable of a rule appears in every body
  // term (Datalog safety). Plain equations may broadcast over LHS-only
  // variables (gradients of projections need this).
  for (auto& g : p.groups) {
    if (g.is_concat || !g.from_datalog) continue;
    std::set<std::string> lhs_vars;
    for (auto& a : g.lhs.args) {
      if (!a.var.empty()) lhs_vars.insert(a.var);
      if (!a.var2.empty()) lhs_vars.insert(a.var2);
    }
    for (auto& t : g.terms) {
      if (t.factors.empty()) continue;  // constant term broadcasts
      std::set<std::string> tv;
      collect_term_vars(t, tv);
      for (auto& v : lhs_vars) {
        if (!tv.count(v))
          throw std::runtime_error("index '" + v + "' of '" + g.lhs.name +
                                   "' does not appear in a term (line " +
                                   std::to_string(g.member_lines.front()) + ")");
      }
    }
  }
}

Program analyze_program(const std::string& source, const std::string& base_dir) {
  Program p = parse_program(source);
  infer_domains(p, base_dir);
  desugar(p);
  return p;
}

}  // namespace tl
