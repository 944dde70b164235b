#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "tl/ast.hpp"
#include "tl/tensor.hpp"

namespace tl {

struct FixpointConfig {
  int max_sweeps = 200;
  double epsilon = 0.0;   // max-norm convergence threshold
  bool fixed_sweeps = false;  // run exactly max_sweeps regardless of change
};

struct Environment {
  enum class Provenance { Fact, File, Computed, Learned };
  std::map<std::string, TensorValue> bindings;
  std::map<std::string, Provenance> provenance;

  bool has(const std::string& n) const { return bindings.count(n) > 0; }
  const TensorValue* find(const std::string& n) const {
    auto it = bindings.find(n);
    return it == bindings.end() ? nullptr : &it->second;
  }
  void bind(const std::string& n, TensorValue v, Provenance prov) {
    bindings[n] = std::move(v);
    provenance[n] = prov;
  }
};

struct QueryResult {
  TensorRef target;
  TensorValue value;             // over the free variables of the target
  std::vector<std::string> free_vars;
  bool boolean = false;
  std::string warning;
};

struct ChainReport {
  int sweeps = 0;
  double residual = 0.0;
  bool converged = false;
};

// An all-zeros tensor shaped by the program's inferred signature
// (sparse for Boolean tensors, dense otherwise).
TensorValue zeros_for(const Program& p, const std::string& name);

// Binds facts, literals and file tensors; existing bindings are kept.
void seed_environment(const Program& p, Environment& env);

// Evaluates one accumulation group against the environment: joins each term,
// projects onto the LHS indices, sums the terms (max/avg per the group's
// projection), folds in fact seeds, and applies the nonlinearity over the
// written region. Regions of the LHS tensor outside the group's write
// pattern keep their current values.
TensorValue eval_equation(const Program& p, const EqGroup& g, const Environment& env);

// Sweeps the groups in program order until no tensor moves by more than
// cfg.epsilon (max-norm) or cfg.max_sweeps is reached.
ChainReport forward_chain(const Program& p, Environment& env,
                          const FixpointConfig& cfg = {});

// Demand-driven evaluation: computes only the tensors the query depends on,
// memoized per tensor; cyclic components iterate to the fixpoint config;
// tensors with no facts or rules read as all-zeros (with a warning).
QueryResult backward_chain(const Program& p, const TensorRef& query, Environment& env,
                           const FixpointConfig& cfg = {});

// Parses a query string ("Y?", "Ancestor(Alice,x)", "PQ[q] | E1(0), E2(1)").
// A '|' introduces evidence atoms: each names a tensor clamped to a one-hot
// at the given constants; the result is then divided by the clamped partition
// tensor Z (P(Q|E) = P(Q,E)/P(E)); P(E) = 0 raises an inconsistent-evidence
// error. With `forward` set the program is forward-chained and the value is
// read from the fixpoint instead of backward chaining.
QueryResult answer_query(const Program& p, const std::string& text, Environment& env,
                         bool forward = false, const FixpointConfig& cfg = {});

// Monte-Carlo projection: for each kept coordinate, sums k uniformly sampled
// terms of the reduction (without replacement) scaled by count/k — an
// unbiased estimator of the sum projection. k >= group size gives the exact
// projection. Deterministic given the seed.
TensorValue sample_project(const TensorValue& t, const std::vector<std::string>& keep,
                           int k, std::uint64_t seed);

// Pairwise einsum: joins a and b and sum-projects the result onto `keep`
// without materializing the full join (dense inputs take a blocked
// matrix-multiply path). Exposed for the embedding module.
TensorValue contract_sum(const TensorValue& a, const TensorValue& b,
                         const std::vector<std::string>& keep);

// Renders a query result: Boolean relations as tuple sets, real tensors in
// the text serialization format, scalars as a bare number.
std::string render_result(const QueryResult& r);

}  // namespace tl
