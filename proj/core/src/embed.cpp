#include "tl/embed.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

#include "tl/analyze.hpp"

namespace tl {

namespace {

std::string emb_axis(int k) { return "e" + std::to_string(k); }

int object_id(const EmbeddingSpace& e, const std::string& sym) {
  int id = e.domain->find(sym);
  if (id < 0) {
    // numeric constants address positions directly
    try {
      size_t pos = 0;
      int v = std::stoi(sym, &pos);
      if (pos == sym.size() && v >= 0 && v < e.domain->cardinality()) return v;
    } catch (...) {
    }
    throw std::runtime_error("unknown object '" + sym + "' in domain '" +
                             e.domain->name() + "'");
  }
  return id;
}

// Emb with its axes renamed to (obj, dim).
TensorValue emb_as(const EmbeddingSpace& e, const std::string& obj,
                   const std::string& dim) {
  return e.emb.with_axis_names({obj, dim});
}

TensorValue emb_row(const EmbeddingSpace& e, int x, const std::string& dim) {
  TensorValue row = TensorValue::dense_zeros(
      Dtype::Real, {{dim, make_domain(dim, e.dimension)}});
  const auto& data = e.emb.dense_data();
  auto& out = row.dense_data();
  for (int d = 0; d < e.dimension; ++d)
    out[d] = data[(std::int64_t)x * e.dimension + d];
  return row;
}

}  // namespace

EmbeddingSpace make_embedding_space(DomainPtr domain, int dimension,
                                    std::uint64_t seed) {
  if (dimension < 1) throw std::runtime_error("embedding dimension must be >= 1");
  EmbeddingSpace e;
  e.domain = domain;
  e.dimension = dimension;
  e.seed = seed;
  int n = domain->cardinality();
  e.emb = TensorValue::dense_zeros(
      Dtype::Real,
      {{"x", domain}, {"d", make_domain("d", dimension)}});
  auto& data = e.emb.dense_data();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (int x = 0; x < n; ++x) {
    double norm2 = 0.0;
    for (int d = 0; d < dimension; ++d) {
      double v = gauss(rng);
      data[(std::int64_t)x * dimension + d] = v;
      norm2 += v * v;
    }
    double inv = 1.0 / std::sqrt(norm2);
    for (int d = 0; d < dimension; ++d)
      data[(std::int64_t)x * dimension + d] *= inv;
  }
  return e;
}

TensorValue gram(const EmbeddingSpace& e) {
  TensorValue a = emb_as(e, "x", "d");
  TensorValue b = emb_as(e, "x2", "d");
  return contract_sum(a, b, {"x", "x2"});
}

TensorValue embed_set(const TensorValue& v, const EmbeddingSpace& e) {
  if (v.rank() != 1) throw std::runtime_error("embed_set expects a rank-1 set");
  TensorValue vv = v.with_axis_names({"x"});
  return contract_sum(vv, emb_as(e, "x", "d"), {"d"});
}

MembershipResult membership(const TensorValue& s, const EmbeddingSpace& e,
                            const std::string& object, double threshold) {
  int x = object_id(e, object);
  const TensorValue sd = s.to_dense();
  const auto& emb = e.emb.dense_data();
  double score = 0.0;
  const auto& sv = sd.dense_data();
  for (int d = 0; d < e.dimension; ++d)
    score += sv[d] * emb[(std::int64_t)x * e.dimension + d];
  return {score, score > threshold};
}

EmbeddedRelation embed_relation(const std::string& name, const TensorValue& r,
                                const EmbeddingSpace& e) {
  int n = r.rank();
  if (n < 1 || n > 3)
    throw std::runtime_error("embed_relation supports arity 1..3 (reduce wider "
                             "relations to triples first)");
  // rename the relation's axes to a0.. and contract each with Emb in turn
  std::vector<std::string> rel_axes, out_axes;
  for (int k = 0; k < n; ++k) {
    rel_axes.push_back("a" + std::to_string(k));
    out_axes.push_back(emb_axis(k));
  }
  TensorValue cur = r.with_axis_names(rel_axes);
  if (cur.dtype() == Dtype::Boolean) cur.set_dtype(Dtype::Real);
  for (int k = 0; k < n; ++k) {
    std::vector<std::string> keep;
    for (int j = k + 1; j < n; ++j) keep.push_back(rel_axes[j]);
    for (int j = 0; j <= k; ++j) keep.push_back(emb_axis(j));
    cur = contract_sum(cur, emb_as(e, rel_axes[k], emb_axis(k)), keep);
  }
  // order axes e0, e1, ...
  std::vector<int> order;
  for (auto& a : out_axes) order.push_back(cur.axis_pos(a));
  EmbeddedRelation er;
  er.name = name;
  er.arity = n;
  er.tensor = cur.permuted(order);
  return er;
}

TensorValue decode(const TensorValue& embedded, const EmbeddingSpace& e) {
  int n = embedded.rank();
  std::vector<std::string> in_axes, out_axes;
  for (int k = 0; k < n; ++k) {
    in_axes.push_back(emb_axis(k));
    out_axes.push_back("x" + std::to_string(k));
  }
  TensorValue cur = embedded.with_axis_names(in_axes);
  for (int k = 0; k < n; ++k) {
    std::vector<std::string> keep;
    for (int j = k + 1; j < n; ++j) keep.push_back(in_axes[j]);
    for (int j = 0; j <= k; ++j) keep.push_back(out_axes[j]);
    cur = contract_sum(cur, emb_as(e, out_axes[k], in_axes[k]), keep);
  }
  std::vector<int> order;
  for (auto& a : out_axes) order.push_back(cur.axis_pos(a));
  return cur.permuted(order);
}

TensorValue retrieve(const EmbeddedRelation& er, const EmbeddingSpace& e,
                     const std::vector<std::optional<std::string>>& bound) {
  if ((int)bound.size() != er.arity)
    throw std::runtime_error("retrieve: binding list must match the arity");
  std::vector<std::string> in_axes;
  for (int k = 0; k < er.arity; ++k) in_axes.push_back(emb_axis(k));
  TensorValue cur = er.tensor.with_axis_names(in_axes);
  std::vector<std::string> free_axes;
  for (int k = 0; k < er.arity; ++k) {
    if (bound[k]) {
      int x = object_id(e, *bound[k]);
      std::vector<std::string> keep;
      for (int j = 0; j < (int)cur.rank(); ++j)
        if (cur.axis(j).name != in_axes[k]) keep.push_back(cur.axis(j).name);
      cur = contract_sum(cur, emb_row(e, x, in_axes[k]), keep);
    } else {
      free_axes.push_back(in_axes[k]);
    }
  }
  // decode the remaining embedding axes
  std::vector<std::string> out_axes;
  for (size_t k = 0; k < free_axes.size(); ++k) {
    std::string ox = "x" + std::to_string(k);
    out_axes.push_back(ox);
    std::vector<std::string> keep;
    for (size_t j = k + 1; j < free_axes.size(); ++j) keep.push_back(free_axes[j]);
    for (size_t j = 0; j <= k; ++j) keep.push_back(out_axes[j]);
    cur = contract_sum(cur, emb_as(e, ox, free_axes[k]), keep);
  }
  if (!out_axes.empty()) {
    std::vector<int> order;
    for (auto& a : out_axes) order.push_back(cur.axis_pos(a));
    cur = cur.permuted(order);
  }
  return cur;
}

DomainPtr object_domain(const Program& p) {
  // Distinct slot domains in a deterministic order.
  std::vector<DomainPtr> doms;
  for (auto& [name, sig] : p.signatures)
    for (auto& d : sig)
      if (std::find(doms.begin(), doms.end(), d) == doms.end())
        doms.push_back(d);
  if (doms.empty())
    throw std::runtime_error("the program has no relations to embed");
  if (doms.size() == 1) return doms[0];
  // Several domains merge into one object universe when they are all
  // symbolic (slots linked only through shared constants, not variables).
  for (auto& d : doms)
    if ((int)d->symbols().size() != d->cardinality())
      throw std::runtime_error(
          "program relations span several domains ('" + doms[0]->name() +
          "' and '" + d->name() + "'); embed one domain at a time");
  DomainPtr merged = std::make_shared<IndexDomain>("obj");
  for (auto& d : doms)
    for (auto& s : d->symbols()) merged->intern(s);
  return merged;
}

EmbeddedProgram embed_program(const Program& p, const EmbeddingSpace& e) {
  EmbeddedProgram out;
  Program& ep = out.program;

  // arities of every relation
  std::map<std::string, int> arity;
  for (auto& [n, sig] : p.signatures) arity[n] = (int)sig.size();

  // fact tensors per relation
  std::map<std::string, TensorValue> fact_tensors;
  for (auto& f : p.facts) {
    int n = (int)f.atom.args.size();
    auto it = fact_tensors.find(f.atom.name);
    if (it == fact_tensors.end()) {
      std::vector<Axis> axes;
      for (int k = 0; k < n; ++k)
        axes.push_back({"a" + std::to_string(k), e.domain});
      it = fact_tensors
               .emplace(f.atom.name,
                        TensorValue::sparse_zeros(Dtype::Real, std::move(axes)))
               .first;
    }
    Coord c;
    for (auto& a : f.atom.args) {
      if (!a.symbol.empty())
        c.push_back(object_id(e, a.symbol));
      else
        c.push_back((int)a.number);
    }
    it->second.set(c, f.value);
  }

  std::set<std::string> rule_heads;
  for (auto& eq : p.equations) rule_heads.insert(eq.lhs.name);

  std::set<std::string> const_tensors;  // EmbC_<sym> rank-1 rows
  auto emb_name = [](const std::string& n) { return "Emb" + n; };

  // base relations: facts, embedded
  for (auto& [name, ft] : fact_tensors) {
    std::string en = emb_name(name);
    std::string bound = rule_heads.count(name) ? en + "_base" : en;
    EmbeddedRelation er = embed_relation(name, ft, e);
    ep.file_tensors[bound] = er.tensor;
    Directive d;
    d.kind = Directive::Kind::ReadFile;
    d.tensor = bound;
    d.path = "<embedded:" + name + ">";
    ep.directives.push_back(d);
    out.arity[en] = er.arity;
    out.symbolic_name[en] = name;
    if (rule_heads.count(name)) {
      // folded into the head's accumulation group
      Equation eq;
      eq.lhs.name = en;
      Term t;
      Factor f;
      f.kind = Factor::Kind::Ref;
      f.ref.name = bound;
      for (int k = 0; k < er.arity; ++k) {
        IndexExpr ie;
        ie.kind = IndexExpr::Kind::Var;
        ie.var = "v" + std::to_string(k);
        eq.lhs.args.push_back(ie);
        f.ref.args.push_back(ie);
      }
      t.factors.push_back(std::move(f));
      eq.rhs.terms.push_back(std::move(t));
      ep.equations.push_back(std::move(eq));
    }
  }

  // rules: each logical variable becomes an embedding index, each constant a
  // contraction with that object's embedding row
  int next_const = 0;
  for (auto& eq : p.equations) {
    if (!eq.from_datalog)
      throw std::runtime_error(
          "embed_program supports Boolean Datalog rules only ('" + eq.lhs.name +
          "' is not a rule)");
    Equation emb_eq;
    std::vector<std::pair<std::string, std::string>> const_factors;  // tensor, var
    int fresh = 0;
    auto map_ref = [&](const TensorRef& r) {
      TensorRef m;
      m.name = emb_name(r.name);
      for (auto& a : r.args) {
        IndexExpr ie;
        ie.kind = IndexExpr::Kind::Var;
        if (a.is_plain_var()) {
          ie.var = "e_" + a.var;
        } else if (a.kind == IndexExpr::Kind::Const) {
          std::string sym = a.symbol.empty() ? std::to_string(a.number) : a.symbol;
          std::string cn = "EmbC_" + sym;
          if (!const_tensors.count(cn)) {
            const_tensors.insert(cn);
            ep.file_tensors[cn] =
                emb_row(e, object_id(e, sym), "d").with_axis_names({"d"});
            Directive d;
            d.kind = Directive::Kind::ReadFile;
            d.tensor = cn;
            d.path = "<embedded-object:" + sym + ">";
            ep.directives.push_back(d);
          }
          ie.var = "c" + std::to_string(next_const + fresh++);
          const_factors.emplace_back(cn, ie.var);
        } else {
          throw std::runtime_error(
              "embed_program supports plain variables and constants only");
        }
        m.args.push_back(ie);
      }
      return m;
    };
    emb_eq.lhs = map_ref(eq.lhs);
    Term t;
    for (auto& term : eq.rhs.terms) {
      for (auto& f : term.factors) {
        if (f.kind != Factor::Kind::Ref)
          throw std::runtime_error("embed_program supports plain joins only");
        Factor mf;
        mf.kind = Factor::Kind::Ref;
        mf.ref = map_ref(f.ref);
        t.factors.push_back(std::move(mf));
      }
    }
    for (auto& [cn, var] : const_factors) {
      Factor cf;
      cf.kind = Factor::Kind::Ref;
      cf.ref.name = cn;
      IndexExpr ie;
      ie.kind = IndexExpr::Kind::Var;
      ie.var = var;
      cf.ref.args.push_back(ie);
      t.factors.push_back(std::move(cf));
    }
    next_const += fresh;
    emb_eq.rhs.terms.push_back(std::move(t));
    ep.equations.push_back(std::move(emb_eq));

    std::string en = emb_name(eq.lhs.name);
    if (!out.arity.count(en)) {
      out.arity[en] = (int)eq.lhs.args.size();
      out.symbolic_name[en] = eq.lhs.name;
    }
    if (std::find(out.derived.begin(), out.derived.end(), en) == out.derived.end())
      out.derived.push_back(en);
  }

  infer_domains(ep);
  desugar(ep);
  seed_environment(ep, out.base);
  return out;
}

Environment reason_embedded(const EmbeddedProgram& ep, const EmbeddingSpace& e,
                            const ReasonerConfig& cfg) {
  Environment env = ep.base;
  seed_environment(ep.program, env);

  FixpointConfig one;
  one.max_sweeps = 1;
  one.fixed_sweeps = true;

  std::map<std::string, TensorValue> prev;
  for (int sweep = 1; sweep <= cfg.max_sweeps; ++sweep) {
    forward_chain(ep.program, env, one);
    if (cfg.reembed_interval > 0 && sweep % cfg.reembed_interval == 0) {
      for (auto& name : ep.derived) {
        const TensorValue* t = env.find(name);
        if (!t) continue;
        TensorValue scores = decode(*t, e).to_dense();
        for (auto& v : scores.dense_data()) {
          if (cfg.temperature > 0.0)
            v = 1.0 / (1.0 + std::exp(-(v - cfg.threshold) / cfg.temperature));
          else
            v = v > cfg.threshold ? 1.0 : 0.0;
        }
        EmbeddedRelation er = embed_relation(name, scores, e);
        env.bind(name, er.tensor, Environment::Provenance::Computed);
      }
    }
    bool stable = !prev.empty();
    for (auto& name : ep.derived) {
      const TensorValue* t = env.find(name);
      if (!t) continue;
      auto it = prev.find(name);
      if (it == prev.end() || it->second.max_abs_diff(*t) > 1e-9) stable = false;
      prev[name] = *t;
    }
    if (stable) break;
  }
  return env;
}

}  // namespace tl
