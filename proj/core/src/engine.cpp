#include "tl/engine.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <sstream>

#include <cblas.h>

#include "tl/analyze.hpp"
#include "tl/parser.hpp"
#include "tl/printer.hpp"

namespace tl {

namespace {

// ---------------------------------------------------------------------------
// small tensor helpers

TensorValue scaled_by(TensorValue t, double c) {
  if (c == 1.0) return t;
  TensorValue out = t.is_dense()
                        ? TensorValue::dense_zeros(Dtype::Real, t.axes())
                        : TensorValue::sparse_zeros(Dtype::Real, t.axes());
  t.for_each_nonzero([&](const Coord& co, double v) { out.set(co, v * c); });
  return out;
}

// Fixes one axis at a coordinate, dropping it from the result.
TensorValue slice_select(const TensorValue& t, int pos, int idx) {
  std::vector<Axis> axes;
  for (int i = 0; i < t.rank(); ++i)
    if (i != pos) axes.push_back(t.axis(i));
  TensorValue out = t.is_dense() ? TensorValue::dense_zeros(t.dtype(), axes)
                                 : TensorValue::sparse_zeros(t.dtype(), axes);
  t.for_each_nonzero([&](const Coord& c, double v) {
    if (c[pos] != idx) return;
    Coord rest;
    rest.reserve(c.size() - 1);
    for (int i = 0; i < (int)c.size(); ++i)
      if (i != pos) rest.push_back(c[i]);
    out.set(rest, v);
  });
  return out;
}

// Keeps only entries where the two named axes agree and drops the second.
TensorValue diagonalize(const TensorValue& t, int pos_keep, int pos_drop) {
  std::vector<Axis> axes;
  for (int i = 0; i < t.rank(); ++i)
    if (i != pos_drop) axes.push_back(t.axis(i));
  TensorValue out = TensorValue::sparse_zeros(t.dtype(), axes);
  t.for_each_nonzero([&](const Coord& c, double v) {
    if (c[pos_keep] != c[pos_drop]) return;
    Coord rest;
    for (int i = 0; i < (int)c.size(); ++i)
      if (i != pos_drop) rest.push_back(c[i]);
    out.set(rest, v);
  });
  return maybe_densify(std::move(out));
}

std::int64_t size_of(const std::vector<Axis>& axes) {
  std::int64_t s = 1;
  for (auto& a : axes) s *= a.domain->cardinality();
  return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// contract_sum: pairwise join + sum projection without the full join tensor.

TensorValue contract_sum(const TensorValue& a, const TensorValue& b,
                         const std::vector<std::string>& keep) {
  std::set<std::string> kept(keep.begin(), keep.end());
  std::set<std::string> b_names;
  for (auto& ax : b.axes()) b_names.insert(ax.name);
  std::set<std::string> a_names;
  for (auto& ax : a.axes()) a_names.insert(ax.name);

  if (a.is_dense() && b.is_dense()) {
    // Pre-sum axes private to one side that are not kept.
    auto presum = [&](const TensorValue& t, const std::set<std::string>& other) {
      std::vector<std::string> want;
      for (auto& ax : t.axes())
        if (kept.count(ax.name) || other.count(ax.name)) want.push_back(ax.name);
      if ((int)want.size() == t.rank()) return t;
      return tensor_project(t, want, ReduceOp::Sum);
    };
    TensorValue A = presum(a, b_names);
    TensorValue B = presum(b, a_names);

    std::vector<std::string> batch, contracted, m_axes, n_axes;
    for (auto& ax : A.axes()) {
      if (b_names.count(ax.name))
        (kept.count(ax.name) ? batch : contracted).push_back(ax.name);
      else
        m_axes.push_back(ax.name);
    }
    for (auto& ax : B.axes())
      if (!a_names.count(ax.name)) n_axes.push_back(ax.name);

    auto permute_to = [&](const TensorValue& t, const std::vector<std::string>& order) {
      std::vector<int> perm;
      for (auto& n : order) perm.push_back(t.axis_pos(n));
      bool identity = true;
      for (int i = 0; i < (int)perm.size(); ++i) identity &= perm[i] == i;
      return identity ? t : t.permuted(perm);
    };
    std::vector<std::string> a_order = batch;
    a_order.insert(a_order.end(), m_axes.begin(), m_axes.end());
    a_order.insert(a_order.end(), contracted.begin(), contracted.end());
    std::vector<std::string> b_order = batch;
    b_order.insert(b_order.end(), contracted.begin(), contracted.end());
    b_order.insert(b_order.end(), n_axes.begin(), n_axes.end());
    TensorValue A2 = permute_to(A, a_order);
    TensorValue B2 = permute_to(B, b_order);

    std::vector<Axis> out_axes;
    std::int64_t sb = 1, sm = 1, sk = 1, sn = 1;
    for (auto& n : batch) {
      out_axes.push_back(A2.axis(A2.axis_pos(n)));
      sb *= out_axes.back().domain->cardinality();
    }
    for (auto& n : m_axes) {
      out_axes.push_back(A2.axis(A2.axis_pos(n)));
      sm *= out_axes.back().domain->cardinality();
    }
    for (auto& n : n_axes) {
      out_axes.push_back(B2.axis(B2.axis_pos(n)));
      sn *= out_axes.back().domain->cardinality();
    }
    for (auto& n : contracted) sk *= A2.axis(A2.axis_pos(n)).domain->cardinality();

    TensorValue C = TensorValue::dense_zeros(Dtype::Real, out_axes);
    const double* pa = A2.dense_data().data();
    const double* pb = B2.dense_data().data();
    double* pc = C.dense_data().data();
    for (std::int64_t ib = 0; ib < sb; ++ib) {
      const double* ab = pa + ib * sm * sk;
      const double* bb = pb + ib * sk * sn;
      double* cb = pc + ib * sm * sn;
      if (sm * sk * sn >= (1 << 18)) {
        cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, (int)sm, (int)sn,
                    (int)sk, 1.0, ab, (int)sk, bb, (int)sn, 0.0, cb, (int)sn);
        continue;
      }
      for (std::int64_t im = 0; im < sm; ++im) {
        const double* arow = ab + im * sk;
        double* crow = cb + im * sn;
        for (std::int64_t ik = 0; ik < sk; ++ik) {
          double av = arow[ik];
          if (av == 0.0) continue;
          const double* brow = bb + ik * sn;
          for (std::int64_t in = 0; in < sn; ++in) crow[in] += av * brow[in];
        }
      }
    }
    // Order the result as requested.
    std::vector<std::string> want;
    for (auto& k : keep)
      if (C.axis_pos(k) >= 0) want.push_back(k);
    return tensor_project(C, want, ReduceOp::Sum);
  }

  TensorValue j = tensor_join(a, b);
  std::vector<std::string> want;
  for (auto& ax : j.axes())
    if (kept.count(ax.name)) want.push_back(ax.name);
  TensorValue out = tensor_project(j, want, ReduceOp::Sum);
  if (out.dtype() == Dtype::Boolean) out.set_dtype(Dtype::Real);
  return out;
}

// ---------------------------------------------------------------------------
// environment seeding

TensorValue zeros_for(const Program& p, const std::string& name) {
  auto it = p.signatures.find(name);
  if (it == p.signatures.end())
    throw std::runtime_error("unknown tensor '" + name + "'");
  std::vector<Axis> axes;
  for (auto& d : it->second) axes.push_back({d->name(), d});
  bool boolean = p.boolean_tensors.count(name) && p.boolean_tensors.at(name);
  if (boolean) return TensorValue::sparse_zeros(Dtype::Boolean, axes);
  if (axes.empty()) return TensorValue::scalar(0.0);
  return TensorValue::dense_zeros(Dtype::Real, axes);
}

namespace {

int resolve_const(const Program& p, const std::string& tensor, int pos,
                  const IndexExpr& a) {
  const DomainPtr& dom = p.signatures.at(tensor)[pos];
  if (!a.symbol.empty()) {
    if (p.scalar_consts.count(a.symbol)) {
      int idx = (int)p.scalar_consts.at(a.symbol);
      if (idx < 0 || idx >= dom->cardinality())
        throw std::runtime_error("index constant " + a.symbol + " out of range for '" +
                                 tensor + "'");
      return idx;
    }
    int idx = dom->find(a.symbol);
    if (idx < 0)
      throw std::runtime_error("unknown constant '" + a.symbol + "' for tensor '" +
                               tensor + "'");
    return idx;
  }
  if (a.number < 0 || a.number >= dom->cardinality())
    throw std::runtime_error("index " + std::to_string(a.number) +
                             " out of range for '" + tensor + "'");
  return (int)a.number;
}

}  // namespace

void seed_environment(const Program& p, Environment& env) {
  for (auto& lit : p.literals) {
    if (env.has(lit.name)) continue;
    TensorValue t = zeros_for(p, lit.name);
    if (t.rank() == 0) {
      t = TensorValue::scalar(lit.values[0]);
    } else {
      t = t.to_dense();
      t.dense_data() = lit.values;
    }
    env.bind(lit.name, std::move(t), Environment::Provenance::Fact);
  }
  for (auto& [name, t] : p.file_tensors) {
    if (env.has(name)) continue;
    env.bind(name, t, Environment::Provenance::File);
  }
  std::set<std::string> fact_only;
  for (auto& f : p.facts) fact_only.insert(f.atom.name);
  for (auto& g : p.groups) fact_only.erase(g.lhs.name);
  for (auto& f : p.facts) {
    if (!fact_only.count(f.atom.name)) continue;  // rule-bearing seeds fold in eval
    if (!env.has(f.atom.name))
      env.bind(f.atom.name, zeros_for(p, f.atom.name), Environment::Provenance::Fact);
    Coord c;
    for (int j = 0; j < (int)f.atom.args.size(); ++j)
      c.push_back(resolve_const(p, f.atom.name, j, f.atom.args[j]));
    env.bindings[f.atom.name].set(c, f.value);
  }
}

// ---------------------------------------------------------------------------
// group evaluation

namespace {

double apply_pointwise(double v, const NonlinearitySpec& f) {
  switch (f.kind) {
    case Nonlin::Identity: return v;
    case Nonlin::Step: return step_fn(v);
    case Nonlin::Sigmoid: return sigmoid(v, f.has_temperature ? f.temperature : 1.0);
    case Nonlin::Relu: return v > 0 ? v : 0.0;
    case Nonlin::Exp: return std::exp(v);
    case Nonlin::Sqrt:
      if (v < 0) throw std::runtime_error("sqrt of negative value");
      return std::sqrt(v);
    case Nonlin::Power: return std::pow(v, f.power);
    case Nonlin::Sin: return std::sin(v);
    case Nonlin::Cos: return std::cos(v);
    default: throw std::runtime_error("normalizer applied pointwise");
  }
}

bool zero_preserving(const NonlinearitySpec& f) {
  switch (f.kind) {
    case Nonlin::Identity:
    case Nonlin::Step:
    case Nonlin::Relu:
    case Nonlin::Sqrt:
    case Nonlin::Sin: return true;
    case Nonlin::Power: return f.power > 0;
    default: return false;
  }
}

struct Range {
  int lo = 0, hi = 0;  // [lo, hi)
  bool empty() const { return hi <= lo; }
};

// Collects every tensor reference of a term, including grouped subexpressions
// and argmaxind operands.
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

bool scalar_has_index_var(const ScalarExpr& s,
                          const std::map<std::string, double>& consts) {
  if (s.kind == ScalarExpr::Kind::IndexVar) return true;
  for (auto& a : s.args)
    if (scalar_has_index_var(a, consts)) return true;
  return false;
}

class GroupEvaluator {
 public:
  GroupEvaluator(const Program& p, const EqGroup& g, const Environment& env)
      : p_(p), g_(g), env_(env) {}

  TensorValue run() {
    const TensorValue* cur = env_.find(g_.lhs.name);
    working_ = cur ? *cur : zeros_for(p_, g_.lhs.name);
    sig_ = &p_.signatures.at(g_.lhs.name);

    find_seq_var();
    for (int i = 0; i < (int)g_.lhs.args.size(); ++i)
      for (int j = i + 1; j < (int)g_.lhs.args.size(); ++j)
        if (g_.lhs.args[i].kind == IndexExpr::Kind::Var &&
            g_.lhs.args[j].kind == IndexExpr::Kind::Var &&
            g_.lhs.args[i].var == g_.lhs.args[j].var)
          diag_.emplace_back(i, j);
    collect_facts();
    find_shared_regions();
    // Facts whose coordinates fall outside this group's write pattern (e.g. a
    // base-case element next to a recurrence) must still appear in the tensor;
    // in-box seeds are zeroed and refolded during evaluation, so writing them
    // all here is idempotent.
    for (auto& [c, v] : fact_seeds_) working_.set(c, v);

    if (seq_var_.empty()) {
      eval_slice(-1);
    } else {
      // Slices that other groups define with a constant index on the
      // sequential axis (explicit base cases) are never overwritten.
      int seq_pos = -1, seq_delta = 0;
      for (int j = 0; j < (int)g_.lhs.args.size(); ++j) {
        auto& a = g_.lhs.args[j];
        if (a.kind == IndexExpr::Kind::Var && a.var == seq_var_) {
          seq_pos = j;
          seq_delta = (int)a.number;
          break;
        }
      }
      std::set<int> pinned;
      for (auto& og : p_.groups) {
        if (&og == &g_ || og.lhs.name != g_.lhs.name) continue;
        if (seq_pos >= 0 && seq_pos < (int)og.lhs.args.size() &&
            og.lhs.args[seq_pos].kind == IndexExpr::Kind::Const)
          pinned.insert(
              resolve_const(p_, g_.lhs.name, seq_pos, og.lhs.args[seq_pos]));
      }
      auto skip = [&](int sv) { return pinned.count(sv + seq_delta) > 0; };
      int card = g_.vars.at(seq_var_)->cardinality();
      if (seq_desc_) {
        for (int sv = card - 1; sv >= 0; --sv)
          if (!skip(sv)) eval_slice(sv);
      } else {
        for (int sv = 0; sv < card; ++sv)
          if (!skip(sv)) eval_slice(sv);
      }
    }
    return maybe_densify(std::move(working_));
  }

 private:
  const Program& p_;
  const EqGroup& g_;
  const Environment& env_;
  TensorValue working_;
  const std::vector<DomainPtr>* sig_ = nullptr;
  std::string seq_var_;
  bool seq_desc_ = false;
  std::vector<std::pair<int, int>> diag_;  // LHS positions sharing a variable
  // Write regions of other step-groups on the same tensor. Overlapping cells
  // (e.g. R(x,y) <- ... next to R(x,x) <- ...) are owned by several groups;
  // since step rules are monotone, they are never zeroed and updates combine
  // with max, which reaches the same fixpoint as summing pre-activations.
  struct SharedRegion {
    std::vector<Range> box;
    std::vector<std::pair<int, int>> diag;
  };
  std::vector<SharedRegion> shared_;
  std::vector<std::pair<Coord, double>> fact_seeds_;
  std::map<const Factor*, TensorValue> argmax_cache_;

  // Reads a tensor; self-references see the working value (so sequential
  // recurrences observe already-computed steps).
  const TensorValue* lookup(const std::string& name) const {
    if (name == g_.lhs.name) return &working_;
    return env_.find(name);
  }

  // A recurrence index: an LHS variable that the group's own tensor is read
  // at with a smaller offset (ascending, e.g. H[t] from H[t-1]) or a larger
  // one (descending, e.g. an adjoint D[t] from D[t+1]).
  void find_seq_var() {
    std::vector<const TensorRef*> refs;
    for (auto& t : g_.terms) collect_refs(t, refs);
    for (auto& a : g_.lhs.args) {
      if (a.kind != IndexExpr::Kind::Var) continue;
      if (a.is_virtual) {
        seq_var_ = a.var;
        return;
      }
      for (auto* r : refs) {
        if (r->name != g_.lhs.name) continue;
        for (auto& ra : r->args) {
          bool same_var = (ra.kind == IndexExpr::Kind::Var && ra.var == a.var) ||
                          (ra.kind == IndexExpr::Kind::Scaled && ra.var == a.var);
          if (!same_var) continue;
          if (ra.kind == IndexExpr::Kind::Scaled || ra.number < a.number ||
              ra.is_virtual) {
            seq_var_ = a.var;
            return;
          }
          if (ra.number > a.number) {
            seq_var_ = a.var;
            seq_desc_ = true;
            return;
          }
        }
      }
    }
  }

  void collect_facts() {
    for (auto& f : p_.facts) {
      if (f.atom.name != g_.lhs.name) continue;
      Coord c;
      for (int j = 0; j < (int)f.atom.args.size(); ++j)
        c.push_back(resolve_const(p_, f.atom.name, j, f.atom.args[j]));
      fact_seeds_.emplace_back(std::move(c), f.value);
    }
  }

  void find_shared_regions() {
    if (g_.nonlin.kind != Nonlin::Step) return;
    for (auto& og : p_.groups) {
      if (&og == &g_ || og.lhs.name != g_.lhs.name) continue;
      if (og.nonlin.kind != Nonlin::Step) continue;
      SharedRegion reg;
      for (int j = 0; j < (int)og.lhs.args.size(); ++j) {
        const IndexExpr& a = og.lhs.args[j];
        int card = (*sig_)[j]->cardinality();
        Range r{0, card};  // conservative: marking extra cells shared is safe
        if (a.kind == IndexExpr::Kind::Var && og.vars.count(a.var)) {
          int cv = og.vars.at(a.var)->cardinality();
          r = {(int)std::max<long>(0, a.number),
               (int)std::min<long>(card, cv + a.number)};
        } else if (a.kind == IndexExpr::Kind::Const) {
          int idx = resolve_const(p_, og.lhs.name, j, a);
          r = {idx, idx + 1};
        }
        reg.box.push_back(r);
      }
      for (int i = 0; i < (int)og.lhs.args.size(); ++i)
        for (int j = i + 1; j < (int)og.lhs.args.size(); ++j)
          if (og.lhs.args[i].kind == IndexExpr::Kind::Var &&
              og.lhs.args[j].kind == IndexExpr::Kind::Var &&
              og.lhs.args[i].var == og.lhs.args[j].var)
            reg.diag.emplace_back(i, j);
      shared_.push_back(std::move(reg));
    }
  }

  bool shared(const Coord& c) const {
    for (auto& reg : shared_) {
      bool inside = true;
      for (int i = 0; i < (int)c.size() && inside; ++i)
        inside = c[i] >= reg.box[i].lo && c[i] < reg.box[i].hi;
      for (auto& [i, j] : reg.diag)
        if (c[i] != c[j]) inside = false;
      if (inside) return true;
    }
    return false;
  }

  // The statically known write region of the LHS pattern, one contiguous
  // range per tensor axis; seq >= 0 pins the sequential variable.
  std::vector<Range> box_for(int seq) const {
    std::vector<Range> box;
    for (int j = 0; j < (int)g_.lhs.args.size(); ++j) {
      const IndexExpr& a = g_.lhs.args[j];
      int card = (*sig_)[j]->cardinality();
      Range r;
      switch (a.kind) {
        case IndexExpr::Kind::Var: {
          if (a.var == seq_var_ && seq >= 0) {
            int v = seq + (int)a.number;
            r = {v, v + 1};
          } else {
            int cv = g_.vars.at(a.var)->cardinality();
            r = {(int)std::max<long>(0, a.number),
                 (int)std::min<long>(card, cv + a.number)};
          }
          break;
        }
        case IndexExpr::Kind::Const: {
          int idx = resolve_const(p_, g_.lhs.name, j, a);
          r = {idx, idx + 1};
          break;
        }
        case IndexExpr::Kind::Scaled: {
          long div = divisor_of(a);
          if (a.var == seq_var_ && seq >= 0) {
            int v = (int)(seq / div);
            r = {v, v + 1};
          } else {
            int cv = g_.vars.at(a.var)->cardinality();
            r = {0, (int)((cv - 1) / div) + 1};
          }
          break;
        }
        case IndexExpr::Kind::VarSum: {
          int c1 = g_.vars.at(a.var)->cardinality();
          int c2 = g_.vars.at(a.var2)->cardinality();
          r = {0, c1 + c2 - 1};
          break;
        }
        case IndexExpr::Kind::Slice:
          throw std::runtime_error("slice on the left-hand side of '" + g_.lhs.name +
                                   "'");
      }
      r.lo = std::max(r.lo, 0);
      r.hi = std::min(r.hi, card);
      box.push_back(r);
    }
    return box;
  }

  long divisor_of(const IndexExpr& a) const {
    if (a.divisor_name.empty()) return a.divisor;
    auto it = p_.scalar_consts.find(a.divisor_name);
    if (it == p_.scalar_consts.end())
      throw std::runtime_error("unknown stride constant '" + a.divisor_name + "'");
    return (long)it->second;
  }

  bool in_box(const Coord& c, const std::vector<Range>& box) const {
    for (int i = 0; i < (int)c.size(); ++i)
      if (c[i] < box[i].lo || c[i] >= box[i].hi) return false;
    // repeated LHS variables write only the diagonal of the rectangular box
    for (auto& [i, j] : diag_)
      if (c[i] != c[j]) return false;
    return true;
  }

  void for_each_box(const std::vector<Range>& box,
                    const std::function<void(const Coord&)>& fn) const {
    for (auto& r : box)
      if (r.empty()) return;
    Coord c;
    for (auto& r : box) c.push_back(r.lo);
    while (true) {
      fn(c);
      int i = (int)c.size() - 1;
      for (; i >= 0; --i) {
        if (++c[i] < box[i].hi) break;
        c[i] = box[i].lo;
      }
      if (i < 0) break;
      if (c.empty()) break;
    }
  }

  void eval_slice(int seq) {
    std::vector<Range> box = box_for(seq);
    for (auto& r : box)
      if (r.empty()) return;

    if (seq < 0 && try_eval_dense()) return;

    std::map<Coord, double> scratch;

    for (auto& t : g_.terms) eval_term(t, seq, scratch);

    // Fact seeds fold into the pre-activation.
    for (auto& [c, v] : fact_seeds_) {
      if (!in_box(c, box)) continue;
      if (g_.proj == ReduceOp::Max) {
        auto it = scratch.find(c);
        if (it == scratch.end())
          scratch[c] = v;
        else
          it->second = std::max(it->second, v);
      } else {
        scratch[c] += v;
      }
    }

    finalize(box, scratch);
  }

  // Large dense groups skip the coordinate-map scratch entirely: every term's
  // projection is already a full dense tensor aligned to the LHS, so the terms
  // accumulate as flat vectors and the nonlinearity applies in place.
  bool try_eval_dense() {
    if (!seq_var_.empty() || !working_.is_dense() || !shared_.empty()) return false;
    if (g_.proj != ReduceOp::Sum || g_.nonlin.is_normalizer()) return false;
    std::set<std::string> seen;
    for (auto& a : g_.lhs.args)
      if (!a.is_plain_var() || !seen.insert(a.var).second) return false;
    for (auto& t : g_.terms)
      if (!fast_eligible(t, -1)) return false;

    std::vector<double> acc(working_.total_size(), 0.0);
    for (auto& t : g_.terms) {
      TensorValue res;
      double c = 1.0;
      if (!fast_term_value(t, res, c)) continue;  // zero term
      TensorValue d = res.is_dense() ? std::move(res) : res.to_dense();
      const auto& dv = d.dense_data();
      for (size_t i = 0; i < dv.size(); ++i) acc[i] += c * dv[i];
    }
    for (auto& [c, v] : fact_seeds_) {
      std::int64_t idx = 0;
      for (int j = 0; j < (int)c.size(); ++j)
        idx = idx * working_.axis(j).domain->cardinality() + c[j];
      acc[idx] += v;
    }
    auto& wd = working_.dense_data();
    for (size_t i = 0; i < acc.size(); ++i)
      wd[i] = apply_pointwise(acc[i], g_.nonlin);
    return true;
  }

  // --- term evaluation ------------------------------------------------------

  void eval_term(const Term& t, int seq, std::map<Coord, double>& scratch) {
    std::map<Coord, double> local;
    std::map<Coord, std::int64_t> counts;
    if (!fast_term(t, seq, local)) enum_term(t, seq, local, counts);
    if (g_.proj == ReduceOp::Avg && !counts.empty())
      for (auto& [c, v] : local) v /= (double)counts[c];
    for (auto& [c, v] : local) {
      if (g_.proj == ReduceOp::Max) {
        auto it = scratch.find(c);
        if (it == scratch.end())
          scratch[c] = v;
        else
          it->second = std::max(it->second, v);
      } else {
        scratch[c] += v;
      }
    }
  }

  bool fast_eligible(const Term& t, int seq) const {
    if (seq >= 0 || !seq_var_.empty()) return false;
    if (g_.proj == ReduceOp::Avg) return false;  // per-assignment counts
    for (auto& f : t.factors) {
      if (f.kind != Factor::Kind::Ref) return false;
      for (auto& a : f.ref.args) {
        if (a.kind == IndexExpr::Kind::Const) continue;
        if (!a.is_plain_var()) return false;
      }
    }
    for (auto& a : g_.lhs.args) {
      if (a.kind == IndexExpr::Kind::Const) continue;
      if (!a.is_plain_var()) return false;
    }
    for (auto& s : t.scalars)
      if (scalar_has_index_var(s, p_.scalar_consts)) return false;
    for (auto& s : t.divisors)
      if (scalar_has_index_var(s, p_.scalar_consts)) return false;
    // broadcast over an LHS-only variable needs the enumeration path
    for (auto& a : g_.lhs.args) {
      if (a.kind != IndexExpr::Kind::Var) continue;
      bool found = false;
      for (auto& f : t.factors)
        for (auto& ra : f.ref.args) found |= ra.var == a.var;
      if (!found) return false;
    }
    return !t.factors.empty();
  }

  double const_scalar(const ScalarExpr& s) const {
    if (s.kind == ScalarExpr::Kind::ConstName && !p_.scalar_consts.count(s.name)) {
      const TensorValue* tv = env_.find(s.name);
      if (tv && tv->rank() == 0) return tv->scalar_value();
    }
    return eval_scalar(s, p_.scalar_consts, {});
  }

  // Joins and projects one fast-eligible term. Returns false when some input
  // tensor is unbound (the term reads as zero); otherwise `out` holds the
  // projection aligned to the unique LHS variables in LHS order, and `coeff`
  // the scalar multiplier.
  bool fast_term_value(const Term& t, TensorValue& out, double& coeff) {
    std::vector<std::string> keep;  // unique LHS vars, in LHS order
    for (auto& a : g_.lhs.args)
      if (a.kind == IndexExpr::Kind::Var &&
          std::find(keep.begin(), keep.end(), a.var) == keep.end())
        keep.push_back(a.var);

    // Materialize each factor with axes named by its variables.
    std::vector<TensorValue> fs;
    for (auto& f : t.factors) {
      const TensorValue* src = lookup(f.ref.name);
      if (!src) return false;  // unbound tensor: the whole term is zero
      TensorValue v = *src;
      // fix constants, highest position first so indices stay valid
      for (int j = (int)f.ref.args.size() - 1; j >= 0; --j) {
        if (f.ref.args[j].kind != IndexExpr::Kind::Const) continue;
        v = slice_select(v, j, resolve_const(p_, f.ref.name, j, f.ref.args[j]));
      }
      std::vector<std::string> names;
      for (auto& a : f.ref.args)
        if (a.kind == IndexExpr::Kind::Var) names.push_back(a.var);
      v = v.with_axis_names(names);
      // repeated variable within one atom: take the diagonal
      for (int i = 0; i < v.rank(); ++i) {
        for (int j = v.rank() - 1; j > i; --j) {
          if (v.axis(i).name == v.axis(j).name) v = diagonalize(v, i, j);
        }
      }
      fs.push_back(std::move(v));
    }

    TensorValue cur = fs[0];
    for (size_t i = 1; i < fs.size(); ++i) {
      if (g_.proj == ReduceOp::Sum) {
        std::set<std::string> wanted(keep.begin(), keep.end());
        for (size_t j = i + 1; j < fs.size(); ++j)
          for (auto& ax : fs[j].axes()) wanted.insert(ax.name);
        std::vector<std::string> w(wanted.begin(), wanted.end());
        cur = contract_sum(cur, fs[i], w);
      } else {
        cur = tensor_join(cur, fs[i]);
      }
    }
    std::vector<std::string> present;
    for (auto& k : keep)
      if (cur.axis_pos(k) >= 0) present.push_back(k);

    double c = t.coefficient;
    for (auto& s : t.scalars) c *= const_scalar(s);
    for (auto& s : t.divisors) c /= const_scalar(s);
    // a negative coefficient flips the direction of a max projection, so it
    // must scale the values before projecting, not after
    if (g_.proj == ReduceOp::Max && c != 1.0) {
      cur = cur.to_dense();
      for (auto& v : cur.dense_data()) v *= c;
      c = 1.0;
    }
    TensorValue res = tensor_project(cur, present, g_.proj);
    if (res.dtype() == Dtype::Boolean) res.set_dtype(Dtype::Real);
    out = std::move(res);
    coeff = c;
    return true;
  }

  bool fast_term(const Term& t, int seq, std::map<Coord, double>& local) {
    if (!fast_eligible(t, seq)) return false;
    TensorValue res;
    double c = 1.0;
    if (!fast_term_value(t, res, c)) return true;  // zero term

    // Scatter into LHS coordinates.
    std::vector<int> var_pos;  // result axis per LHS arg (-1 for const)
    std::vector<int> const_idx(g_.lhs.args.size(), 0);
    for (int j = 0; j < (int)g_.lhs.args.size(); ++j) {
      auto& a = g_.lhs.args[j];
      if (a.kind == IndexExpr::Kind::Const) {
        var_pos.push_back(-1);
        const_idx[j] = resolve_const(p_, g_.lhs.name, j, a);
      } else {
        var_pos.push_back(res.axis_pos(a.var));
      }
    }
    auto scatter = [&](const Coord& rc, double v) {
      Coord c2(g_.lhs.args.size());
      for (int j = 0; j < (int)c2.size(); ++j)
        c2[j] = var_pos[j] < 0 ? const_idx[j] : rc[var_pos[j]];
      double val = v * c;
      auto it = local.find(c2);
      if (it == local.end())
        local[c2] = val;
      else if (g_.proj == ReduceOp::Max)
        it->second = std::max(it->second, val);
      else
        it->second += val;
    };
    if (g_.proj == ReduceOp::Max && res.is_dense())
      res.for_each(scatter);
    else
      res.for_each_nonzero(scatter);
    return true;
  }

  // --- general enumeration path --------------------------------------------

  struct RefReader {
    const TensorValue* tensor = nullptr;
    // per tensor axis: how to compute the coordinate
    struct Slot {
      int var = -1, var2 = -1;  // positions into the assignment vector
      long delta = 0;
      long divisor = 0;  // > 0 for scaled
      int fixed = -1;    // constant coordinate
    };
    std::vector<Slot> slots;
    int card(int i) const { return tensor->axis(i).domain->cardinality(); }

    // Returns false when an index falls out of range (the value reads as 0).
    bool coord(const std::vector<int>& asg, Coord& c) const {
      for (int i = 0; i < (int)slots.size(); ++i) {
        const Slot& s = slots[i];
        long v;
        if (s.fixed >= 0)
          v = s.fixed;
        else if (s.var2 >= 0)
          v = (long)asg[s.var] + asg[s.var2];
        else if (s.divisor > 0)
          v = asg[s.var] / s.divisor;
        else
          v = (long)asg[s.var] + s.delta;
        if (v < 0 || v >= card(i)) return false;
        c[i] = (int)v;
      }
      return true;
    }
  };

  struct EnumCtx {
    std::vector<std::string> var_names;
    std::vector<int> var_card;
    std::map<std::string, int> var_slot;
    std::vector<int> asg;
  };

  int ctx_var(EnumCtx& ctx, const std::string& name, int card) const {
    auto it = ctx.var_slot.find(name);
    if (it != ctx.var_slot.end()) return it->second;
    int id = (int)ctx.var_names.size();
    ctx.var_names.push_back(name);
    ctx.var_card.push_back(card);
    ctx.var_slot[name] = id;
    return id;
  }

  RefReader make_reader(const TensorRef& r, EnumCtx& ctx, int& hidden) const {
    RefReader rd;
    rd.tensor = lookup(r.name);
    rd.slots.resize(r.args.size());
    for (int j = 0; j < (int)r.args.size(); ++j) {
      const IndexExpr& a = r.args[j];
      auto& s = rd.slots[j];
      switch (a.kind) {
        case IndexExpr::Kind::Var:
          s.var = ctx_var(ctx, a.var, g_.vars.at(a.var)->cardinality());
          s.delta = a.number;
          break;
        case IndexExpr::Kind::Const:
          s.fixed = resolve_const(p_, r.name, j, a);
          break;
        case IndexExpr::Kind::VarSum:
          s.var = ctx_var(ctx, a.var, g_.vars.at(a.var)->cardinality());
          s.var2 = ctx_var(ctx, a.var2, g_.vars.at(a.var2)->cardinality());
          break;
        case IndexExpr::Kind::Scaled:
          s.var = ctx_var(ctx, a.var, g_.vars.at(a.var)->cardinality());
          s.divisor = (int)divisor_of(a);
          break;
        case IndexExpr::Kind::Slice: {
          std::string name = "_slice" + std::to_string(hidden++);
          s.var = ctx_var(ctx, name, (int)(a.hi - a.lo));
          s.delta = a.lo;
          break;
        }
      }
    }
    return rd;
  }

  double read_ref(const RefReader& rd, const EnumCtx& ctx) const {
    if (!rd.tensor) return 0.0;
    Coord c(rd.slots.size());
    if (!rd.coord(ctx.asg, c)) return 0.0;
    return rd.tensor->at(c);
  }

  // The argmax indicator for max= backward passes: f.ref names a tensor whose
  // axes are plain variables; each of its coordinates maps through f.ref2's
  // index pattern (which may scale or shift) to a coordinate of the reduced
  // tensor. Within every such reduction group the first coordinate in
  // row-major order attaining the group's maximum is marked 1.
  const TensorValue& argmax_indicator(const Factor& f, EnumCtx& ctx) {
    auto it = argmax_cache_.find(&f);
    if (it != argmax_cache_.end()) return it->second;
    const TensorValue* full = lookup(f.ref.name);
    if (!full) throw std::runtime_error("argmaxind over unbound tensor");
    for (auto& a : f.ref.args)
      if (!a.is_plain_var())
        throw std::runtime_error("argmaxind needs plain index variables");

    // variable -> axis position of the full tensor
    std::map<std::string, int> var_axis;
    for (int j = 0; j < (int)f.ref.args.size(); ++j)
      var_axis[f.ref.args[j].var] = j;
    auto reduced_coord = [&](const Coord& c, Coord& out) {
      out.clear();
      for (int j = 0; j < (int)f.ref2.args.size(); ++j) {
        const IndexExpr& a = f.ref2.args[j];
        long v;
        switch (a.kind) {
          case IndexExpr::Kind::Var: v = c[var_axis.at(a.var)] + a.number; break;
          case IndexExpr::Kind::Const:
            v = resolve_const(p_, f.ref2.name, j, a);
            break;
          case IndexExpr::Kind::Scaled:
            v = c[var_axis.at(a.var)] / divisor_of(a);
            break;
          case IndexExpr::Kind::VarSum:
            v = (long)c[var_axis.at(a.var)] + c[var_axis.at(a.var2)];
            break;
          default: throw std::runtime_error("argmaxind: unsupported index");
        }
        const DomainPtr& dom = p_.signatures.at(f.ref2.name)[j];
        if (v < 0 || v >= dom->cardinality()) return false;
        out.push_back((int)v);
      }
      return true;
    };

    TensorValue dense = full->to_dense();
    TensorValue ind = TensorValue::sparse_zeros(Dtype::Boolean, dense.axes());
    std::map<Coord, std::pair<double, Coord>> best;  // group -> (max, argmax)
    Coord key;
    dense.for_each([&](const Coord& c, double v) {
      if (!reduced_coord(c, key)) return;
      auto b = best.find(key);
      if (b == best.end() || v > b->second.first) best[key] = {v, c};
    });
    for (auto& [k, mv] : best) ind.set(mv.second, 1.0);
    (void)ctx;
    return argmax_cache_.emplace(&f, std::move(ind)).first->second;
  }

  bool enum_term(const Term& t, int seq, std::map<Coord, double>& local,
                 std::map<Coord, std::int64_t>& counts) {
    EnumCtx ctx;
    int hidden = 0;

    // LHS coordinate computation (vars register first so the seq var exists).
    RefReader lhs_rd = make_reader(g_.lhs, ctx, hidden);

    struct FEval {
      const Factor* f;
      RefReader rd, rd2;
      std::vector<RefReader> inner;          // grouped: readers per inner ref
      std::vector<std::pair<int, int>> spans;  // grouped: [begin,end) per term
      const TensorValue* ind = nullptr;      // argmaxind indicator
    };
    std::vector<FEval> evs;
    for (auto& f : t.factors) {
      FEval fe;
      fe.f = &f;
      switch (f.kind) {
        case Factor::Kind::Ref:
          fe.rd = make_reader(f.ref, ctx, hidden);
          if (!fe.rd.tensor) return true;  // term is identically zero
          break;
        case Factor::Kind::Grouped:
          for (auto& it : f.group->terms) {
            int b = (int)fe.inner.size();
            std::vector<const TensorRef*> refs;
            collect_refs(it, refs);
            for (auto* r : refs) fe.inner.push_back(make_reader(*r, ctx, hidden));
            fe.spans.emplace_back(b, (int)fe.inner.size());
          }
          break;
        case Factor::Kind::IndexFunc:
          // variables register below via scalar walk
          break;
        case Factor::Kind::ArgmaxInd: {
          fe.rd = make_reader(f.ref, ctx, hidden);
          if (!fe.rd.tensor) return true;
          fe.ind = &argmax_indicator(f, ctx);
          RefReader r = fe.rd;
          r.tensor = fe.ind;
          fe.rd2 = r;
          break;
        }
      }
      evs.push_back(std::move(fe));
    }
    // Register index variables used only in scalar positions.
    auto reg_scalar = [&](const ScalarExpr& s) {
      std::function<void(const ScalarExpr&)> rec = [&](const ScalarExpr& e) {
        if (e.kind == ScalarExpr::Kind::IndexVar && g_.vars.count(e.name))
          ctx_var(ctx, e.name, g_.vars.at(e.name)->cardinality());
        for (auto& a : e.args) rec(a);
      };
      rec(s);
    };
    for (auto& f : t.factors)
      if (f.kind == Factor::Kind::IndexFunc) reg_scalar(f.scalar_arg);
    for (auto& s : t.scalars) reg_scalar(s);
    for (auto& s : t.divisors) reg_scalar(s);

    int seq_slot = -1;
    if (!seq_var_.empty()) {
      auto itv = ctx.var_slot.find(seq_var_);
      seq_slot = itv == ctx.var_slot.end()
                     ? ctx_var(ctx, seq_var_, g_.vars.at(seq_var_)->cardinality())
                     : itv->second;
    }

    std::map<std::string, int> scalar_asg;  // name -> value, for eval_scalar
    auto scalar_at = [&](const ScalarExpr& s) {
      scalar_asg.clear();
      for (auto& [name, slot] : ctx.var_slot) scalar_asg[name] = ctx.asg[slot];
      std::map<std::string, double> consts = p_.scalar_consts;
      // rank-0 tensors referenced by name act as scalar constants
      std::function<void(const ScalarExpr&)> inject = [&](const ScalarExpr& e) {
        if (e.kind == ScalarExpr::Kind::ConstName && !consts.count(e.name)) {
          const TensorValue* tv = env_.find(e.name);
          if (tv && tv->rank() == 0) consts[e.name] = tv->scalar_value();
        }
        for (auto& a : e.args) inject(a);
      };
      inject(s);
      return eval_scalar(s, consts, scalar_asg);
    };

    std::function<double()> term_value = [&]() -> double {
      double v = t.coefficient;
      for (auto& fe : evs) {
        double fv = 1.0;
        switch (fe.f->kind) {
          case Factor::Kind::Ref: fv = read_ref(fe.rd, ctx); break;
          case Factor::Kind::Grouped: {
            double sum = 0.0;
            for (size_t ti = 0; ti < fe.spans.size(); ++ti) {
              double prod = fe.f->group->terms[ti].coefficient;
              for (int ri = fe.spans[ti].first; ri < fe.spans[ti].second; ++ri)
                prod *= read_ref(fe.inner[ri], ctx);
              for (auto& s : fe.f->group->terms[ti].scalars) prod *= scalar_at(s);
              for (auto& s : fe.f->group->terms[ti].divisors) prod /= scalar_at(s);
              sum += prod;
            }
            fv = fe.f->group_power == 1.0 ? sum : std::pow(sum, fe.f->group_power);
            break;
          }
          case Factor::Kind::IndexFunc: {
            double x = scalar_at(fe.f->scalar_arg);
            if (fe.f->func == "sin")
              fv = std::sin(x);
            else if (fe.f->func == "cos")
              fv = std::cos(x);
            else if (fe.f->func == "exp")
              fv = std::exp(x);
            else if (fe.f->func == "sqrt")
              fv = std::sqrt(x);
            else
              throw std::runtime_error("unknown index function " + fe.f->func);
            break;
          }
          case Factor::Kind::ArgmaxInd:
            fv = read_ref(fe.rd2, ctx);
            break;
        }
        v *= fv;
        if (v == 0.0 && g_.proj != ReduceOp::Max && g_.proj != ReduceOp::Avg)
          return 0.0;
      }
      for (auto& s : t.scalars) v *= scalar_at(s);
      for (auto& s : t.divisors) v /= scalar_at(s);
      return v;
    };

    // Odometer over all registered variables.
    ctx.asg.assign(ctx.var_names.size(), 0);
    if (seq_slot >= 0) ctx.asg[seq_slot] = seq;
    Coord lhs_c(g_.lhs.args.size());
    while (true) {
      double v = term_value();
      if (lhs_rd.coord(ctx.asg, lhs_c)) {
        if (g_.proj == ReduceOp::Max) {
          auto it = local.find(lhs_c);
          if (it == local.end())
            local[lhs_c] = v;
          else
            it->second = std::max(it->second, v);
        } else {
          local[lhs_c] += v;
          if (g_.proj == ReduceOp::Avg) counts[lhs_c] += 1;
        }
      }
      int i = (int)ctx.asg.size() - 1;
      for (; i >= 0; --i) {
        if (i == seq_slot) continue;
        if (++ctx.asg[i] < ctx.var_card[i]) break;
        ctx.asg[i] = 0;
      }
      if (i < 0) break;
    }
    return true;
  }

  // --- nonlinearity + write-back -------------------------------------------

  void finalize(const std::vector<Range>& box, std::map<Coord, double>& scratch) {
    // Reset the write region of the working tensor.
    if (working_.is_dense()) {
      for_each_box(box, [&](const Coord& c) {
        if (on_diag(c) && !shared(c)) working_.set(c, 0.0);
      });
    } else {
      std::vector<Coord> dead;
      working_.for_each_nonzero([&](const Coord& c, double) {
        if (in_box(c, box) && !shared(c)) dead.push_back(c);
      });
      for (auto& c : dead) working_.set(c, 0.0);
    }

    if (g_.nonlin.is_normalizer()) {
      // slice position of the normalized index
      int npos = -1;
      for (int j = 0; j < (int)g_.lhs.args.size(); ++j)
        if (g_.lhs.args[j].kind == IndexExpr::Kind::Var &&
            g_.lhs.args[j].var == g_.nonlin.normalized_index)
          npos = j;
      if (npos < 0)
        throw std::runtime_error("normalized index '" + g_.nonlin.normalized_index +
                                 "' is not an index of '" + g_.lhs.name + "'");
      std::vector<Range> rest = box;
      rest[npos] = {0, 1};
      int nlo = box[npos].lo, nhi = box[npos].hi;
      std::vector<double> vals(nhi - nlo);
      for_each_box(rest, [&](const Coord& base) {
        Coord c = base;
        for (int v = nlo; v < nhi; ++v) {
          c[npos] = v;
          auto it = scratch.find(c);
          vals[v - nlo] = it == scratch.end() ? 0.0 : it->second;
        }
        normalize_vector(vals);
        for (int v = nlo; v < nhi; ++v) {
          c[npos] = v;
          if (on_diag(c)) working_.set(c, vals[v - nlo]);
        }
      });
      return;
    }

    if (zero_preserving(g_.nonlin)) {
      for (auto& [c, v] : scratch) {
        double out = apply_pointwise(v, g_.nonlin);
        if (shared(c)) out = std::max(out, working_.at(c));
        if (out != 0.0 || working_.is_dense()) working_.set(c, out);
      }
    } else {
      for_each_box(box, [&](const Coord& c) {
        if (!on_diag(c)) return;
        auto it = scratch.find(c);
        double v = it == scratch.end() ? 0.0 : it->second;
        double out = apply_pointwise(v, g_.nonlin);
        if (shared(c)) out = std::max(out, working_.at(c));
        working_.set(c, out);
      });
    }
  }

  bool on_diag(const Coord& c) const {
    for (auto& [i, j] : diag_)
      if (c[i] != c[j]) return false;
    return true;
  }

  void normalize_vector(std::vector<double>& vals) const {
    if (g_.nonlin.kind == Nonlin::Softmax) {
      double m = *std::max_element(vals.begin(), vals.end());
      double z = 0.0;
      for (auto& v : vals) {
        v = std::exp(v - m);
        z += v;
      }
      for (auto& v : vals) v /= z;
    } else {  // lnorm
      double mean = 0.0;
      for (double v : vals) mean += v;
      mean /= (double)vals.size();
      double var = 0.0;
      for (double v : vals) var += (v - mean) * (v - mean);
      var /= (double)vals.size();
      double inv = 1.0 / std::sqrt(var + g_.nonlin.eps);
      for (auto& v : vals) v = (v - mean) * inv;
    }
  }
};

}  // namespace

TensorValue eval_equation(const Program& p, const EqGroup& g, const Environment& env) {
  GroupEvaluator ev(p, g, env);
  return ev.run();
}

// ---------------------------------------------------------------------------
// forward chaining

ChainReport forward_chain(const Program& p, Environment& env,
                          const FixpointConfig& cfg) {
  seed_environment(p, env);
  ChainReport rep;
  for (int sweep = 1; sweep <= cfg.max_sweeps; ++sweep) {
    double delta = 0.0;
    for (auto& g : p.groups) {
      TensorValue next = eval_equation(p, g, env);
      const TensorValue* old = env.find(g.lhs.name);
      double d = old ? next.max_abs_diff(*old) : next.max_abs();
      delta = std::max(delta, d);
      env.bind(g.lhs.name, std::move(next), Environment::Provenance::Computed);
    }
    rep.sweeps = sweep;
    rep.residual = delta;
    if (!cfg.fixed_sweeps && delta <= cfg.epsilon) {
      rep.converged = true;
      return rep;
    }
  }
  rep.converged = cfg.fixed_sweeps;
  return rep;
}

// ---------------------------------------------------------------------------
// backward chaining

namespace {

struct DemandEvaluator {
  const Program& p;
  Environment& env;
  const FixpointConfig& cfg;
  std::map<std::string, std::vector<const EqGroup*>> groups_of;
  std::set<std::string> done;
  std::set<std::string> in_progress;
  std::string warning;

  DemandEvaluator(const Program& pr, Environment& e, const FixpointConfig& c)
      : p(pr), env(e), cfg(c) {
    for (auto& g : p.groups) groups_of[g.lhs.name].push_back(&g);
    seed_environment(p, env);
  }

  std::set<std::string> deps_of(const std::string& name) {
    std::set<std::string> deps;
    auto it = groups_of.find(name);
    if (it == groups_of.end()) return deps;
    for (auto* g : it->second) {
      std::vector<const TensorRef*> refs;
      for (auto& t : g->terms) collect_refs(t, refs);
      for (auto* r : refs) deps.insert(r->name);
    }
    return deps;
  }

  void demand(const std::string& name) {
    if (done.count(name)) return;
    if (in_progress.count(name)) return;  // cycle: resolved by the SCC loop
    if (!groups_of.count(name)) {
      if (!env.has(name)) {
        if (p.has_tensor(name)) {
          env.bind(name, zeros_for(p, name), Environment::Provenance::Computed);
          warning = "tensor '" + name + "' has no facts or rules; it reads as 0";
        }
      }
      done.insert(name);
      return;
    }
    // Collect the cyclic component reachable from `name` through unfinished
    // tensors, then iterate it to fixpoint (acyclic members settle in the
    // first pass because dependencies are demanded first).
    in_progress.insert(name);
    std::set<std::string> cycle{name};
    std::vector<std::string> order;
    gather(name, cycle, order);
    for (auto& member : order)
      for (auto& d : deps_of(member))
        if (!cycle.count(d)) demand(d);

    bool cyclic = false;
    for (auto& member : order)
      for (auto& d : deps_of(member))
        if (cycle.count(d)) cyclic = true;

    int sweeps = cyclic ? cfg.max_sweeps : 1;
    for (int s = 0; s < sweeps; ++s) {
      double delta = 0.0;
      for (auto& g : p.groups) {
        if (!cycle.count(g.lhs.name)) continue;
        TensorValue next = eval_equation(p, g, env);
        const TensorValue* old = env.find(g.lhs.name);
        double d = old ? next.max_abs_diff(*old) : next.max_abs();
        delta = std::max(delta, d);
        env.bind(g.lhs.name, std::move(next), Environment::Provenance::Computed);
      }
      if (cyclic && !cfg.fixed_sweeps && delta <= cfg.epsilon) break;
    }
    for (auto& member : cycle) {
      done.insert(member);
      in_progress.erase(member);
    }
  }

  // Members of the mutually recursive component containing `name`, collected
  // as every unfinished tensor on a dependency cycle through `name`.
  void gather(const std::string& name, std::set<std::string>& cycle,
              std::vector<std::string>& order) {
    order.push_back(name);
    std::set<std::string> seen;
    std::function<bool(const std::string&)> reaches = [&](const std::string& from) {
      if (cycle.count(from)) return true;
      if (seen.count(from) || done.count(from)) return false;
      seen.insert(from);
      for (auto& d : deps_of(from))
        if (reaches(d)) return true;
      return false;
    };
    std::function<void(const std::string&)> expand = [&](const std::string& n) {
      for (auto& d : deps_of(n)) {
        if (cycle.count(d) || done.count(d) || !groups_of.count(d)) continue;
        seen.clear();
        if (reaches(d)) {
          cycle.insert(d);
          order.push_back(d);
          expand(d);
        }
      }
    };
    expand(name);
  }
};

QueryResult slice_result(const Program& p, const TensorRef& target,
                         const Environment& env) {
  QueryResult qr;
  qr.target = target;
  qr.boolean = p.boolean_tensors.count(target.name) &&
               p.boolean_tensors.at(target.name);
  const TensorValue* t = env.find(target.name);
  TensorValue v = t ? *t : zeros_for(p, target.name);
  // fix constants highest position first
  std::vector<std::string> frees;
  for (int j = 0; j < (int)target.args.size(); ++j)
    if (target.args[j].kind == IndexExpr::Kind::Var)
      frees.push_back(target.args[j].var);
  for (int j = (int)target.args.size() - 1; j >= 0; --j) {
    auto& a = target.args[j];
    if (a.kind == IndexExpr::Kind::Var) continue;
    if (a.kind != IndexExpr::Kind::Const)
      throw std::runtime_error("query arguments must be constants or variables");
    v = slice_select(v, j, resolve_const(p, target.name, j, a));
  }
  if ((int)frees.size() == v.rank()) v = v.with_axis_names(frees);
  qr.free_vars = frees;
  qr.value = std::move(v);
  return qr;
}

}  // namespace

QueryResult backward_chain(const Program& p, const TensorRef& query,
                           Environment& env, const FixpointConfig& cfg) {
  if (!p.has_tensor(query.name)) {
    QueryResult qr;
    qr.target = query;
    qr.value = TensorValue::scalar(0.0);
    qr.warning = "unknown tensor '" + query.name + "'; the answer is 0";
    return qr;
  }
  DemandEvaluator de(p, env, cfg);
  de.demand(query.name);
  QueryResult qr = slice_result(p, query, env);
  qr.warning = de.warning;
  return qr;
}

// ---------------------------------------------------------------------------
// queries

QueryResult answer_query(const Program& p, const std::string& text, Environment& env,
                         bool forward, const FixpointConfig& cfg) {
  std::string s = text;
  if (!s.empty() && s.back() == '?') s.pop_back();
  auto bar = s.find('|');
  std::string target_text = s.substr(0, bar == std::string::npos ? s.size() : bar);
  TensorRef target = parse_ref(target_text);

  if (bar == std::string::npos) {
    if (forward) {
      bool chained = false;
      for (auto& [n, pr] : env.provenance)
        chained |= pr == Environment::Provenance::Computed;
      if (!chained) forward_chain(p, env, cfg);
      if (!p.has_tensor(target.name)) {
        QueryResult qr;
        qr.target = target;
        qr.value = TensorValue::scalar(0.0);
        qr.warning = "unknown tensor '" + target.name + "'; the answer is 0";
        return qr;
      }
      return slice_result(p, target, env);
    }
    return backward_chain(p, target, env, cfg);
  }

  // Conditional query: clamp evidence tensors to one-hots, evaluate the
  // target (P(Q,E)) and the partition tensor Z (P(E)), and divide.
  std::vector<TensorRef> evidence;
  {
    // split on commas at depth 0
    std::string rest = s.substr(bar + 1);
    int depth = 0;
    std::string cur;
    for (char c : rest) {
      if (c == '(' || c == '[') ++depth;
      if (c == ')' || c == ']') --depth;
      if (c == ',' && depth == 0) {
        evidence.push_back(parse_ref(cur));
        cur.clear();
      } else {
        cur += c;
      }
    }
    if (cur.find_first_not_of(" \t") != std::string::npos)
      evidence.push_back(parse_ref(cur));
  }
  if (!p.has_tensor("Z"))
    throw std::runtime_error(
        "conditional queries need a partition tensor named Z in the program");

  Environment clamped;
  for (auto& [n, v] : env.bindings) {
    if (env.provenance.at(n) == Environment::Provenance::Computed) continue;
    clamped.bind(n, v, env.provenance.at(n));
  }
  for (auto& e : evidence) {
    if (!p.has_tensor(e.name))
      throw std::runtime_error("unknown evidence tensor '" + e.name + "'");
    TensorValue hot = zeros_for(p, e.name);
    Coord c;
    for (int j = 0; j < (int)e.args.size(); ++j) {
      if (e.args[j].kind != IndexExpr::Kind::Const)
        throw std::runtime_error("evidence arguments must be constants");
      c.push_back(resolve_const(p, e.name, j, e.args[j]));
    }
    hot.set(c, 1.0);
    clamped.bind(e.name, std::move(hot), Environment::Provenance::Fact);
  }
  QueryResult num = backward_chain(p, target, clamped, cfg);
  TensorRef zref;
  zref.name = "Z";
  QueryResult zres = backward_chain(p, zref, clamped, cfg);
  double z = zres.value.scalar_value();
  if (z <= 0.0)
    throw std::runtime_error("inconsistent evidence: P(E) = 0, conditional undefined");
  num.value = scaled_by(std::move(num.value), 1.0 / z);
  return num;
}

// ---------------------------------------------------------------------------
// selective-projection sampling

TensorValue sample_project(const TensorValue& t, const std::vector<std::string>& keep,
                           int k, std::uint64_t seed) {
  std::vector<int> keep_pos;
  std::vector<Axis> out_axes;
  for (auto& name : keep) {
    int p = t.axis_pos(name);
    if (p < 0) throw std::runtime_error("sample_project: no axis named " + name);
    keep_pos.push_back(p);
    out_axes.push_back(t.axis(p));
  }
  std::vector<int> drop_pos;
  std::int64_t count = 1;
  for (int i = 0; i < t.rank(); ++i) {
    if (std::find(keep_pos.begin(), keep_pos.end(), i) == keep_pos.end()) {
      drop_pos.push_back(i);
      count *= t.axis(i).domain->cardinality();
    }
  }
  TensorValue out = out_axes.empty() ? TensorValue::scalar(0.0)
                                     : TensorValue::dense_zeros(Dtype::Real, out_axes);
  std::mt19937_64 rng(seed);

  auto drop_coord = [&](std::int64_t flat, Coord& full) {
    for (int i = (int)drop_pos.size() - 1; i >= 0; --i) {
      int card = t.axis(drop_pos[i]).domain->cardinality();
      full[drop_pos[i]] = (int)(flat % card);
      flat /= card;
    }
  };

  // iterate kept coordinates in row-major order for determinism
  Coord kc(out_axes.size(), 0);
  Coord full(t.rank(), 0);
  bool run = true;
  while (run) {
    for (int i = 0; i < (int)keep_pos.size(); ++i) full[keep_pos[i]] = kc[i];
    double sum = 0.0;
    if ((std::int64_t)k >= count) {
      for (std::int64_t f = 0; f < count; ++f) {
        drop_coord(f, full);
        sum += t.at(full);
      }
    } else {
      // partial Fisher–Yates over the implicit range [0, count)
      std::map<std::int64_t, std::int64_t> swapped;
      for (int i = 0; i < k; ++i) {
        std::uniform_int_distribution<std::int64_t> d(i, count - 1);
        std::int64_t j = d(rng);
        std::int64_t vi = swapped.count(i) ? swapped[i] : i;
        std::int64_t vj = swapped.count(j) ? swapped[j] : j;
        swapped[i] = vj;
        swapped[j] = vi;
        drop_coord(vj, full);
        sum += t.at(full);
      }
      sum *= (double)count / (double)k;
    }
    if (out_axes.empty()) {
      out = TensorValue::scalar(sum);
      break;
    }
    out.set(kc, sum);
    int i = (int)kc.size() - 1;
    for (; i >= 0; --i) {
      if (++kc[i] < out_axes[i].domain->cardinality()) break;
      kc[i] = 0;
    }
    run = i >= 0;
  }
  return out;
}

// ---------------------------------------------------------------------------
// rendering

std::string render_result(const QueryResult& r) {
  std::ostringstream out;
  if (r.value.rank() == 0) {
    out << format_number(r.value.scalar_value());
    return out.str();
  }
  if (r.boolean) {
    // tuple set over the free variables
    std::vector<std::string> tuples;
    r.value.for_each_nonzero([&](const Coord& c, double v) {
      if (v == 0.0) return;
      std::string tup;
      for (int i = 0; i < (int)c.size(); ++i) {
        if (i) tup += ",";
        tup += r.value.axis(i).domain->label(c[i]);
      }
      tuples.push_back(tup.find(',') == std::string::npos ? tup : "(" + tup + ")");
    });
    std::sort(tuples.begin(), tuples.end());
    out << "{";
    for (size_t i = 0; i < tuples.size(); ++i) out << (i ? ", " : "") << tuples[i];
    out << "}";
    return out.str();
  }
  write_tensor(out, r.target.name, r.value);
  return out.str();
}

}  // namespace tl
