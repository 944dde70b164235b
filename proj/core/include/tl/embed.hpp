#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tl/ast.hpp"
#include "tl/engine.hpp"

namespace tl {

// Random unit embeddings of a symbol domain: object x -> row Emb[x,d].
struct EmbeddingSpace {
  DomainPtr domain;
  int dimension = 0;
  std::uint64_t seed = 0;
  TensorValue emb;  // dense (x, d), unit L2 rows
};

// Rows are i.i.d. gaussian vectors normalized to unit length; deterministic
// given the seed.
EmbeddingSpace make_embedding_space(DomainPtr domain, int dimension,
                                    std::uint64_t seed);

// Gram matrix Sim[x,x'] = Emb[x,d] Emb[x',d].
TensorValue gram(const EmbeddingSpace& e);

// Superposition S[d] = V[x] Emb[x,d] of the members of a (multi-hot) set.
TensorValue embed_set(const TensorValue& v, const EmbeddingSpace& e);

struct MembershipResult {
  double score = 0.0;  // S . Emb[object]
  bool member = false;  // score > threshold
};

MembershipResult membership(const TensorValue& s, const EmbeddingSpace& e,
                            const std::string& object, double threshold = 0.5);

// Tensor product representation of a relation:
// EmbR[i,j,...] = sum_{tuples} R(x,y,...) Emb[x,i] Emb[y,j] ...
struct EmbeddedRelation {
  std::string name;
  int arity = 0;
  TensorValue tensor;  // rank-arity, every axis of size D
};

EmbeddedRelation embed_relation(const std::string& name, const TensorValue& r,
                                const EmbeddingSpace& e);

// Contracts bound argument positions with their constants' embeddings and
// decodes the remaining embedding axes against Emb: scores over object
// tuples (scalar when fully bound).
TensorValue retrieve(const EmbeddedRelation& er, const EmbeddingSpace& e,
                     const std::vector<std::optional<std::string>>& bound);

// Decodes a rank-n embedded tensor to scores over object tuples.
TensorValue decode(const TensorValue& embedded, const EmbeddingSpace& e);

// A Datalog program rewritten over embedding indices: each relation X
// becomes a tensor EmbX over embedding axes, each rule becomes one real
// tensor equation joining the embedded antecedents, and the base (fact)
// relations become pre-bound embedded tensors.
struct EmbeddedProgram {
  Program program;           // analyzed
  Environment base;          // embedded fact relations
  std::map<std::string, int> arity;      // embedded tensor -> relation arity
  std::vector<std::string> derived;      // rule heads, program order
  std::map<std::string, std::string> symbolic_name;  // EmbX -> X
};

EmbeddedProgram embed_program(const Program& p, const EmbeddingSpace& e);

// The object domain of a Datalog program: the single domain its relation
// slots range over (error when slots span several domains).
DomainPtr object_domain(const Program& p);

struct ReasonerConfig {
  double temperature = 0.0;   // 0 = exact step at the threshold
  double threshold = 0.5;
  int reembed_interval = 1;   // sweeps between extract/threshold/re-embed; <=0 = never
  bool forward = true;
  int max_sweeps = 200;
};

// Chains the embedded rules to a fixpoint. Every reembed_interval sweeps each
// derived tensor is decoded, squashed (step at T=0, temperature sigmoid
// otherwise) and re-embedded. The result binds the embedded tensors; apply
// decode() to read relations back out.
Environment reason_embedded(const EmbeddedProgram& ep, const EmbeddingSpace& e,
                            const ReasonerConfig& cfg);

}  // namespace tl
