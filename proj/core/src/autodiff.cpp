#include "tl/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "tl/analyze.hpp"

namespace tl {

namespace {

void collect_refs(const Term& t, std::vector<const TensorRef*>& out) {
  for (auto& f : t.factors) {
    switch (f.kind) {
      case Factor::Kind::Ref: out.push_back(&f.ref); break;
      case Factor::Kind::Grouped:
        for (auto& it : f.group->terms) collect_refs(it, out);
        break;
      case Factor::Kind::ArgmaxInd:
        out.push_back(&f.ref);
        out.push_back(&f.ref2);
        break;
      case Factor::Kind::IndexFunc: break;
    }
  }
}

void collect_scalar_vars(const ScalarExpr& s, std::set<std::string>& out) {
  if (s.kind == ScalarExpr::Kind::IndexVar) out.insert(s.name);
  for (auto& a : s.args) collect_scalar_vars(a, out);
}

std::set<std::string> term_vars(const Term& t) {
  std::set<std::string> vars;
  std::vector<const TensorRef*> refs;
  collect_refs(t, refs);
  for (auto* r : refs)
    for (auto& a : r->args) {
      if (!a.var.empty()) vars.insert(a.var);
      if (!a.var2.empty()) vars.insert(a.var2);
    }
  for (auto& s : t.scalars) collect_scalar_vars(s, vars);
  for (auto& s : t.divisors) collect_scalar_vars(s, vars);
  for (auto& f : t.factors)
    if (f.kind == Factor::Kind::IndexFunc) collect_scalar_vars(f.scalar_arg, vars);
  return vars;
}

std::vector<IndexExpr> strip(const std::vector<IndexExpr>& args) {
  std::vector<IndexExpr> out = args;
  for (auto& a : out) {
    a.normalized = false;
    a.is_virtual = false;
  }
  return out;
}

TensorRef make_ref(const std::string& name, std::vector<IndexExpr> args) {
  TensorRef r;
  r.name = name;
  r.args = std::move(args);
  return r;
}

IndexExpr var_arg(const std::string& v) {
  IndexExpr e;
  e.kind = IndexExpr::Kind::Var;
  e.var = v;
  return e;
}

Factor ref_factor(TensorRef r) {
  Factor f;
  f.kind = Factor::Kind::Ref;
  f.ref = std::move(r);
  return f;
}

struct Differ {
  const Program& p;
  const LossSpec& loss;
  Program gp;
  std::map<std::string, std::string> adj;
  std::set<std::string> used;
  std::set<std::string> need;  // tensors whose adjoints are required
  std::vector<Equation> generated;
  // pending dc -> d sums: tensor -> list of (contribution name, arity)
  std::map<std::string, std::vector<std::string>> pending;
  std::map<int, std::string> preact_of;  // group index -> preact tensor (or primal)
  std::map<int, TensorRef> du_of;        // group index -> adjoint source ref

  Differ(const Program& pr, const LossSpec& ls) : p(pr), loss(ls) {
    for (auto& [n, s] : p.signatures) used.insert(n);
  }

  std::string fresh(const std::string& base) {
    std::string n = base;
    while (used.count(n)) n += "_";
    used.insert(n);
    return n;
  }

  std::string adj_of(const std::string& x) {
    auto it = adj.find(x);
    if (it != adj.end()) return it->second;
    std::string n = fresh("d_" + x);
    adj[x] = n;
    gp.same_signature[n] = x;
    return n;
  }

  std::string aux(const std::string& base, const std::string& like) {
    std::string n = fresh(base);
    if (!like.empty()) gp.same_signature[n] = like;
    return n;
  }

  void emit(TensorRef lhs, std::vector<Term> terms, ReduceOp proj = ReduceOp::Sum,
            NonlinearitySpec nl = {}) {
    Equation eq;
    eq.lhs = std::move(lhs);
    eq.rhs.terms = std::move(terms);
    eq.proj = proj;
    eq.nonlin = nl;
    generated.push_back(std::move(eq));
  }

  // ---- reachability -------------------------------------------------------

  std::set<std::string> reachability() {
    std::map<std::string, std::set<std::string>> deps;
    for (auto& g : p.groups) {
      std::vector<const TensorRef*> refs;
      for (auto& t : g.terms) collect_refs(t, refs);
      for (auto* r : refs) deps[g.lhs.name].insert(r->name);
    }
    // tensors the loss depends on
    std::set<std::string> feeds{loss.loss_name};
    bool grew = true;
    while (grew) {
      grew = false;
      for (auto& [y, ds] : deps) {
        if (!feeds.count(y)) continue;
        for (auto& d : ds) grew |= feeds.insert(d).second;
      }
    }
    // tensors that reach a learned leaf
    std::set<std::string> reach = learned_tensors(p, loss);
    grew = true;
    while (grew) {
      grew = false;
      for (auto& [y, ds] : deps) {
        if (reach.count(y)) continue;
        for (auto& d : ds)
          if (reach.count(d)) {
            reach.insert(y);
            grew = true;
            break;
          }
      }
    }
    std::set<std::string> out;
    for (auto& x : feeds)
      if (reach.count(x)) out.insert(x);
    return out;
  }

  // ---- nonlinearity adjoints ----------------------------------------------

  std::string preact(const EqGroup& g, int gi) {
    auto it = preact_of.find(gi);
    if (it != preact_of.end()) return it->second;
    std::string u = aux("u" + std::to_string(gi) + "_" + g.lhs.name, g.lhs.name);
    std::vector<Term> terms = g.terms;
    for (auto& t : terms) strip_term(t);
    emit(make_ref(u, strip(g.lhs.args)), std::move(terms), g.proj);
    preact_of[gi] = u;
    return u;
  }

  void strip_term(Term& t) {
    for (auto& f : t.factors) {
      if (f.kind == Factor::Kind::Grouped) {
        auto copy = std::make_shared<Expr>(*f.group);
        for (auto& it : copy->terms) strip_term(it);
        f.group = copy;
      }
      f.ref.args = strip(f.ref.args);
      f.ref2.args = strip(f.ref2.args);
    }
  }

  // Adjoint of the pre-activation: one reference usable as a factor.
  TensorRef adjoint_source(const EqGroup& g, int gi) {
    auto cached = du_of.find(gi);
    if (cached != du_of.end()) return cached->second;

    const std::string& y = g.lhs.name;
    std::vector<IndexExpr> ya = strip(g.lhs.args);
    TensorRef dy = make_ref(adj_of(y), ya);
    std::string tag = std::to_string(gi) + "_" + y;
    TensorRef result;

    auto simple = [&](std::vector<Term> gterms, NonlinearitySpec gnl, double coeff,
                      bool with_g) {
      std::string gname;
      if (with_g) {
        gname = aux("g" + tag, y);
        emit(make_ref(gname, ya), std::move(gterms), ReduceOp::Sum, gnl);
      }
      std::string du = aux("du" + tag, y);
      Term t;
      t.coefficient = coeff;
      t.factors.push_back(ref_factor(dy));
      if (with_g) t.factors.push_back(ref_factor(make_ref(gname, ya)));
      emit(make_ref(du, ya), {std::move(t)});
      return make_ref(du, ya);
    };
    auto y_minus_yy = [&](const TensorRef& yr) {
      Term t1;
      t1.factors.push_back(ref_factor(yr));
      Term t2;
      t2.coefficient = -1.0;
      t2.factors.push_back(ref_factor(yr));
      t2.factors.push_back(ref_factor(yr));
      return std::vector<Term>{std::move(t1), std::move(t2)};
    };

    switch (g.nonlin.kind) {
      case Nonlin::Identity: result = dy; break;
      case Nonlin::Sigmoid: {
        double T = g.nonlin.has_temperature ? g.nonlin.temperature : 1.0;
        result = simple(y_minus_yy(make_ref(y, ya)), {}, 1.0 / T, true);
        break;
      }
      case Nonlin::Relu: {
        std::string u = preact(g, gi);
        Term t;
        t.factors.push_back(ref_factor(make_ref(u, ya)));
        NonlinearitySpec nl;
        nl.kind = Nonlin::Step;
        result = simple({std::move(t)}, nl, 1.0, true);
        break;
      }
      case Nonlin::Exp: {
        Term t;
        t.factors.push_back(ref_factor(dy));
        t.factors.push_back(ref_factor(make_ref(y, ya)));
        std::string du = aux("du" + tag, y);
        emit(make_ref(du, ya), {std::move(t)});
        result = make_ref(du, ya);
        break;
      }
      case Nonlin::Sqrt: {
        Term t;
        t.factors.push_back(ref_factor(make_ref(y, ya)));
        NonlinearitySpec nl;
        nl.kind = Nonlin::Power;
        nl.power = -1.0;
        result = simple({std::move(t)}, nl, 0.5, true);
        break;
      }
      case Nonlin::Power: {
        std::string u = preact(g, gi);
        Term t;
        t.factors.push_back(ref_factor(make_ref(u, ya)));
        NonlinearitySpec nl;
        nl.kind = Nonlin::Power;
        nl.power = g.nonlin.power - 1.0;
        result = simple({std::move(t)}, nl, g.nonlin.power, true);
        break;
      }
      case Nonlin::Step: {
        if (!loss.surrogate)
          throw std::runtime_error(
              "step has zero derivative almost everywhere; rerun with a sigmoid "
              "surrogate to differentiate through '" + y + "'");
        std::string u = preact(g, gi);
        std::string s = aux("s" + tag, y);
        Term t;
        t.factors.push_back(ref_factor(make_ref(u, ya)));
        NonlinearitySpec sg;
        sg.kind = Nonlin::Sigmoid;
        sg.temperature = loss.surrogate_T;
        sg.has_temperature = true;
        emit(make_ref(s, ya), {std::move(t)}, ReduceOp::Sum, sg);
        result = simple(y_minus_yy(make_ref(s, ya)), {}, 1.0 / loss.surrogate_T, true);
        break;
      }
      case Nonlin::Softmax: {
        std::vector<IndexExpr> rest;
        for (auto& a : ya)
          if (!(a.kind == IndexExpr::Kind::Var && a.var == g.nonlin.normalized_index))
            rest.push_back(a);
        std::string acc = aux("sm" + tag, "");
        Term ta;
        ta.factors.push_back(ref_factor(dy));
        ta.factors.push_back(ref_factor(make_ref(y, ya)));
        emit(make_ref(acc, rest), {std::move(ta)});
        Term t1;
        t1.factors.push_back(ref_factor(dy));
        t1.factors.push_back(ref_factor(make_ref(y, ya)));
        Term t2;
        t2.coefficient = -1.0;
        t2.factors.push_back(ref_factor(make_ref(y, ya)));
        t2.factors.push_back(ref_factor(make_ref(acc, rest)));
        std::string du = aux("du" + tag, y);
        emit(make_ref(du, ya), {std::move(t1), std::move(t2)});
        result = make_ref(du, ya);
        break;
      }
      case Nonlin::Lnorm: {
        std::string u = preact(g, gi);
        std::vector<IndexExpr> rest;
        for (auto& a : ya)
          if (!(a.kind == IndexExpr::Kind::Var && a.var == g.nonlin.normalized_index))
            rest.push_back(a);
        auto one_ref_term = [&](TensorRef r) {
          Term t;
          t.factors.push_back(ref_factor(std::move(r)));
          return t;
        };
        std::string mu = aux("mu" + tag, "");
        emit(make_ref(mu, rest), {one_ref_term(make_ref(u, ya))}, ReduceOp::Avg);
        // variance: avg of (u - mu)^2
        std::string va = aux("va" + tag, "");
        {
          auto inner = std::make_shared<Expr>();
          Term i1;
          i1.factors.push_back(ref_factor(make_ref(u, ya)));
          Term i2;
          i2.coefficient = -1.0;
          i2.factors.push_back(ref_factor(make_ref(mu, rest)));
          inner->terms = {std::move(i1), std::move(i2)};
          Factor sq;
          sq.kind = Factor::Kind::Grouped;
          sq.group = inner;
          sq.group_power = 2.0;
          Term t;
          t.factors.push_back(std::move(sq));
          emit(make_ref(va, rest), {std::move(t)}, ReduceOp::Avg);
        }
        // 1 / sqrt(var + eps)
        std::string isd = aux("isd" + tag, "");
        {
          Term t1 = one_ref_term(make_ref(va, rest));
          Term t2;
          t2.coefficient = g.nonlin.eps;
          NonlinearitySpec nl;
          nl.kind = Nonlin::Power;
          nl.power = -0.5;
          emit(make_ref(isd, rest), {std::move(t1), std::move(t2)}, ReduceOp::Sum, nl);
        }
        std::string m1 = aux("m1" + tag, "");
        emit(make_ref(m1, rest), {one_ref_term(dy)}, ReduceOp::Avg);
        std::string m2 = aux("m2" + tag, "");
        {
          Term t;
          t.factors.push_back(ref_factor(dy));
          t.factors.push_back(ref_factor(make_ref(y, ya)));
          emit(make_ref(m2, rest), {std::move(t)}, ReduceOp::Avg);
        }
        Term t1;
        t1.factors.push_back(ref_factor(dy));
        t1.factors.push_back(ref_factor(make_ref(isd, rest)));
        Term t2;
        t2.coefficient = -1.0;
        t2.factors.push_back(ref_factor(make_ref(m1, rest)));
        t2.factors.push_back(ref_factor(make_ref(isd, rest)));
        Term t3;
        t3.coefficient = -1.0;
        t3.factors.push_back(ref_factor(make_ref(y, ya)));
        t3.factors.push_back(ref_factor(make_ref(m2, rest)));
        t3.factors.push_back(ref_factor(make_ref(isd, rest)));
        std::string du = aux("du" + tag, y);
        emit(make_ref(du, ya), {std::move(t1), std::move(t2), std::move(t3)});
        result = make_ref(du, ya);
        break;
      }
      default:
        throw std::runtime_error("no derivative registered for this nonlinearity");
    }
    du_of[gi] = result;
    return result;
  }

  // ---- contributions ------------------------------------------------------

  double avg_scale(const EqGroup& g, const Term& t) const {
    if (g.proj != ReduceOp::Avg) return 1.0;
    std::set<std::string> lhs_vars;
    for (auto& a : g.lhs.args) {
      if (!a.var.empty()) lhs_vars.insert(a.var);
      if (!a.var2.empty()) lhs_vars.insert(a.var2);
    }
    double n = 1.0;
    for (auto& v : term_vars(t))
      if (!lhs_vars.count(v) && g.vars.count(v))
        n *= (double)g.vars.at(v)->cardinality();
    return 1.0 / n;
  }

  // Emits d_X[XA] += du * siblings for the factor occurrence (fi) of term t;
  // (ti, ri) address a reference inside a grouped factor, -1 otherwise.
  void contribute(const Term& t, int fi, int ti, int ri, const TensorRef& du,
                  double scale) {
    const TensorRef* x;
    Term ct;
    ct.coefficient = t.coefficient * scale;
    ct.scalars = t.scalars;
    ct.divisors = t.divisors;
    ct.factors.push_back(ref_factor(du));
    for (int j = 0; j < (int)t.factors.size(); ++j) {
      if (j == fi && ti < 0) continue;  // the occurrence itself
      if (j == fi) {
        // inside a grouped factor: power rule + inner product rule
        const Factor& gf = t.factors[j];
        const Term& it = gf.group->terms[ti];
        ct.coefficient *= gf.group_power * it.coefficient;
        for (auto& s : it.scalars) ct.scalars.push_back(s);
        for (auto& s : it.divisors) ct.divisors.push_back(s);
        if (gf.group_power != 1.0) {
          Factor down = gf;
          down.group_power = gf.group_power - 1.0;
          ct.factors.push_back(down);
        }
        int k = 0;
        for (auto& inf : it.factors) {
          if (inf.kind != Factor::Kind::Ref)
            throw std::runtime_error(
                "cannot differentiate nested grouped expressions");
          if (k++ != ri) ct.factors.push_back(inf);
        }
      } else {
        ct.factors.push_back(t.factors[j]);
      }
    }
    if (ti < 0) {
      x = &t.factors[fi].ref;
    } else {
      x = &t.factors[fi].group->terms[ti].factors[ri].ref;
    }
    for (auto& f : ct.factors) {
      f.ref.args = strip(f.ref.args);
      f.ref2.args = strip(f.ref2.args);
    }
    std::vector<IndexExpr> xa = strip(x->args);
    bool plain = true;
    std::set<std::string> seen;
    for (auto& a : xa) {
      if (!a.is_plain_var() || !seen.insert(a.var).second) plain = false;
    }
    std::string lhs_name;
    if (plain) {
      lhs_name = adj_of(x->name);
    } else {
      lhs_name = fresh("dc" + std::to_string(pending[x->name].size()) + "_" + x->name);
      gp.same_signature[lhs_name] = x->name;
      pending[x->name].push_back(lhs_name);
    }
    emit(make_ref(lhs_name, std::move(xa)), {std::move(ct)});
  }

  void process_group(const EqGroup& g, int gi) {
    // which occurrences need adjoints?
    struct Occ {
      int fi, ti, ri;
      const TensorRef* ref;
    };
    std::vector<Occ> occs;
    for (auto& t : g.terms) (void)t;
    auto scan_term = [&](const Term& t) {
      occs.clear();
      for (int fi = 0; fi < (int)t.factors.size(); ++fi) {
        const Factor& f = t.factors[fi];
        if (f.kind == Factor::Kind::Ref) {
          if (need.count(f.ref.name)) occs.push_back({fi, -1, -1, &f.ref});
        } else if (f.kind == Factor::Kind::Grouped) {
          for (int ti = 0; ti < (int)f.group->terms.size(); ++ti) {
            const Term& it = f.group->terms[ti];
            for (int ri = 0; ri < (int)it.factors.size(); ++ri) {
              if (it.factors[ri].kind != Factor::Kind::Ref) continue;
              if (need.count(it.factors[ri].ref.name))
                occs.push_back({fi, ti, ri, &it.factors[ri].ref});
            }
          }
        }
      }
    };
    bool any = false;
    for (auto& t : g.terms) {
      scan_term(t);
      any |= !occs.empty();
    }
    if (!any) return;

    if (g.proj == ReduceOp::Max) {
      process_max_group(g, gi);
      return;
    }
    TensorRef du = adjoint_source(g, gi);
    for (auto& t : g.terms) {
      scan_term(t);
      double scale = avg_scale(g, t);
      for (auto& o : occs) contribute(t, o.fi, o.ti, o.ri, du, scale);
    }
  }

  void process_max_group(const EqGroup& g, int gi) {
    if (g.terms.size() != 1)
      throw std::runtime_error(
          "cannot differentiate a max= tensor accumulated from several terms");
    const Term& t0 = g.terms[0];
    for (auto& f : t0.factors)
      if (f.kind == Factor::Kind::Grouped)
        throw std::runtime_error(
            "cannot differentiate grouped expressions under max=");
    std::string tag = std::to_string(gi) + "_" + g.lhs.name;
    std::vector<IndexExpr> ya = strip(g.lhs.args);

    // materialize the joined term over all of its variables
    std::vector<std::string> vs;
    for (auto& v : term_vars(t0)) vs.push_back(v);
    std::vector<IndexExpr> va;
    for (auto& v : vs) va.push_back(var_arg(v));
    std::string tn = aux("t" + tag, "");
    {
      Term t = t0;
      strip_term(t);
      emit(make_ref(tn, va), {std::move(t)});
    }
    // pre-activation for the nonlinearity chain
    std::string uname = g.lhs.name;
    if (g.nonlin.kind != Nonlin::Identity) {
      uname = aux("u" + std::to_string(gi) + "_" + g.lhs.name, g.lhs.name);
      Term t;
      t.factors.push_back(ref_factor(make_ref(tn, va)));
      emit(make_ref(uname, ya), {std::move(t)}, ReduceOp::Max);
      preact_of[gi] = uname;
    }
    TensorRef du = adjoint_source(g, gi);
    // route the adjoint to the argmax element
    std::string dt = aux("dt" + tag, tn);
    {
      Term t;
      t.factors.push_back(ref_factor(du));
      Factor am;
      am.kind = Factor::Kind::ArgmaxInd;
      am.ref = make_ref(tn, va);
      am.ref2 = make_ref(uname, ya);
      t.factors.push_back(std::move(am));
      emit(make_ref(dt, va), {std::move(t)});
    }
    // then ordinary product rule below the join
    Term fake = t0;
    TensorRef dtr = make_ref(dt, va);
    for (int fi = 0; fi < (int)fake.factors.size(); ++fi) {
      if (fake.factors[fi].kind != Factor::Kind::Ref) continue;
      if (!need.count(fake.factors[fi].ref.name)) continue;
      Term base = fake;
      base.coefficient = 1.0;  // the coefficient is already inside t
      contribute(base, fi, -1, -1, dtr, 1.0);
    }
  }

  GradientProgram run() {
    if (!p.has_tensor(loss.loss_name))
      throw std::runtime_error("the program has no '" + loss.loss_name +
                               "' equation to differentiate");
    gp.domain_decls = p.domain_decls;
    gp.scalar_consts = p.scalar_consts;
    gp.equations = p.equations;
    gp.facts = p.facts;
    gp.literals = p.literals;
    gp.constant_tensors = p.constant_tensors;
    gp.loss_name = loss.loss_name;
    gp.file_tensors = p.file_tensors;
    for (auto& d : p.directives)
      if (d.kind == Directive::Kind::ReadFile ||
          d.kind == Directive::Kind::ConstantTensor)
        gp.directives.push_back(d);

    need = reachability();
    // seed: dLoss = 1
    LiteralDef seed;
    seed.name = adj_of(loss.loss_name);
    seed.values = {1.0};
    gp.literals.push_back(std::move(seed));

    for (int gi = (int)p.groups.size() - 1; gi >= 0; --gi) {
      const EqGroup& g = p.groups[gi];
      if (g.lhs.name != loss.loss_name && !need.count(g.lhs.name)) continue;
      process_group(g, gi);
    }
    // dc accumulation sums
    for (auto& [x, parts] : pending) {
      int arity = (int)p.signatures.at(x).size();
      std::vector<IndexExpr> args;
      for (int j = 0; j < arity; ++j) args.push_back(var_arg("_g" + std::to_string(j)));
      for (auto& part : parts) {
        Term t;
        t.factors.push_back(ref_factor(make_ref(part, args)));
        emit(make_ref(adj_of(x), args), {std::move(t)});
      }
    }
    for (auto& eq : generated) gp.equations.push_back(eq);

    infer_domains(gp);
    desugar(gp);
    GradientProgram out;
    out.program = std::move(gp);
    out.adjoint_name = adj;
    return out;
  }
};

}  // namespace

std::set<std::string> learned_tensors(const Program& p, const LossSpec& loss) {
  std::set<std::string> defined;
  for (auto& g : p.groups) defined.insert(g.lhs.name);
  for (auto& f : p.facts) defined.insert(f.atom.name);
  for (auto& l : p.literals) defined.insert(l.name);
  for (auto& [n, t] : p.file_tensors) defined.insert(n);
  std::set<std::string> out;
  for (auto& [n, sig] : p.signatures) {
    if (defined.count(n)) continue;
    if (loss.data_tensors.count(n)) continue;
    if (loss.constant_tensors.count(n)) continue;
    if (p.constant_tensors.count(n)) continue;
    if (n == loss.loss_name) continue;
    out.insert(n);
  }
  return out;
}

GradientProgram differentiate(const Program& p, const LossSpec& loss) {
  Differ d(p, loss);
  return d.run();
}

double finite_diff_check(const Program& p, const LossSpec& loss,
                         const Environment& env, double h) {
  GradientProgram gp = differentiate(p, loss);
  std::set<std::string> learned = learned_tensors(p, loss);

  auto loss_at = [&](const Environment& e) {
    Environment run = e;
    forward_chain(p, run);
    const TensorValue* l = run.find(loss.loss_name);
    if (!l) throw std::runtime_error("loss was not computed");
    return l->scalar_value();
  };

  Environment grun = env;
  forward_chain(gp.program, grun);

  double worst = 0.0;
  for (auto& name : learned) {
    const TensorValue* w = env.find(name);
    if (!w)
      throw std::runtime_error("finite_diff_check: tensor '" + name +
                               "' is not bound");
    const TensorValue* g = grun.find(gp.adjoint_name.at(name));
    TensorValue dense = w->to_dense();
    dense.for_each([&](const Coord& c, double) {
      Environment ep = env;
      TensorValue wp = *w;
      wp.set(c, wp.at(c) + h);
      ep.bind(name, wp, Environment::Provenance::Learned);
      double lp = loss_at(ep);
      TensorValue wm = *w;
      wm.set(c, wm.at(c) - h);
      ep.bind(name, wm, Environment::Provenance::Learned);
      double lm = loss_at(ep);
      double fd = (lp - lm) / (2.0 * h);
      double an = g ? g->at(c) : 0.0;
      double err = std::fabs(fd - an) /
                   std::max({1.0, std::fabs(fd), std::fabs(an)});
      worst = std::max(worst, err);
    });
  }
  return worst;
}

}  // namespace tl
