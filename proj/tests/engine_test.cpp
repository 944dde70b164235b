#include <doctest.h>

#include <cmath>
#include <set>

#include "tl/analyze.hpp"
#include "tl/engine.hpp"

using namespace tl;

namespace {
Environment run(const std::string& src, const FixpointConfig& cfg = {}) {
  Program p = analyze_program(src);
  Environment env;
  seed_environment(p, env);
  forward_chain(p, env, cfg);
  return env;
}
double scalar(const Environment& env, const std::string& name) {
  const TensorValue* t = env.find(name);
  REQUIRE(t != nullptr);
  REQUIRE(t->rank() == 0);
  return t->at({});
}
}  // namespace

TEST_CASE("matrix-vector einsum with bias and sigmoid") {
  Environment env = run(
      "W = [[1, -2], [0.5, 1]]\n"
      "X = [3, 1]\n"
      "B = [0.5, -1]\n"
      "Y[i] = sig(W[i,j] X[j] + B[i])\n");
  const TensorValue& y = *env.find("Y");
  CHECK(y.at({0}) == doctest::Approx(1 / (1 + std::exp(-1.5))).epsilon(1e-12));
  CHECK(y.at({1}) == doctest::Approx(1 / (1 + std::exp(-1.5))).epsilon(1e-12));
}

TEST_CASE("repeated index on one tensor reads the diagonal") {
  Environment env = run(
      "A = [[1, 2], [3, 4]]\n"
      "Tr = A[i,i]\n"
      "D[i] = A[i,i]\n");
  CHECK(scalar(env, "Tr") == 5.0);
  CHECK(env.find("D")->at({1}) == 4.0);
}

TEST_CASE("same-LHS equations accumulate before the nonlinearity") {
  Environment env = run(
      "A = [1, 2]\n"
      "B = [10, 20]\n"
      "Y[i] = sig(A[i])\n"
      "Y[i] = sig(B[i])\n");
  // sum first, squash once: sig(11), not sig(1)+sig(10)
  CHECK(env.find("Y")->at({0}) ==
        doctest::Approx(1 / (1 + std::exp(-11.0))).epsilon(1e-12));
}

TEST_CASE("constant-index writes land in their slice and are preserved") {
  Environment env = run(
      "X0 = [7, 8]\n"
      "domain i = 3\n"
      "W = [[[0,0],[0,0]],[[1,0],[0,1]],[[1,0],[0,1]]]\n"
      "X[0,j] = X0[j]\n"
      "X[i,j] = sig(W[i,j,k] X[i-1,k])\n");
  const TensorValue& x = *env.find("X");
  CHECK(x.at({0, 0}) == 7.0);  // base slice pinned, not overwritten
  CHECK(x.at({0, 1}) == 8.0);
  CHECK(x.at({1, 0}) == doctest::Approx(1 / (1 + std::exp(-7.0))).epsilon(1e-12));
  double h = x.at({1, 0});
  CHECK(x.at({2, 0}) == doctest::Approx(1 / (1 + std::exp(-h))).epsilon(1e-12));
}

TEST_CASE("ascending recurrence evaluates slices in order within one sweep") {
  Environment env = run(
      "domain t = 4\n"
      "S[0] = 1\n"
      "S[t+1] = 2 S[t]\n");
  const TensorValue& s = *env.find("S");
  CHECK(s.at({0}) == 1.0);
  CHECK(s.at({1}) == 2.0);
  CHECK(s.at({2}) == 4.0);
  CHECK(s.at({3}) == 8.0);
}

TEST_CASE("descending recurrence (adjoint-style) runs back to front") {
  Environment env = run(
      "domain t = 4\n"
      "R[3] = 1\n"
      "R[t-1] = 0.5 R[t]\n");
  const TensorValue& r = *env.find("R");
  CHECK(r.at({3}) == 1.0);
  CHECK(r.at({2}) == 0.5);
  CHECK(r.at({0}) == 0.125);
}

TEST_CASE("shifted reads past the boundary are zero (zero padding)") {
  Environment env = run(
      "X = [1, 2, 3]\n"
      "Y[i] = X[i] + X[i+1]\n");
  const TensorValue& y = *env.find("Y");
  CHECK(y.at({0}) == 3.0);
  CHECK(y.at({1}) == 5.0);
  CHECK(y.at({2}) == 3.0);  // X[3] reads as 0
}

TEST_CASE("datalog transitive closure reaches the fixpoint") {
  Program p = analyze_program(
      "Parent(Alice, Bob)\n"
      "Parent(Bob, Charlie)\n"
      "Parent(Charlie, Dave)\n"
      "Ancestor(x,y) <- Parent(x,y)\n"
      "Ancestor(x,y) <- Parent(x,z), Ancestor(z,y)\n");
  Environment env;
  seed_environment(p, env);
  ChainReport rep = forward_chain(p, env);
  CHECK(rep.converged);
  const TensorValue& a = *env.find("Ancestor");
  const DomainPtr& dom = p.signatures.at("Ancestor")[0];
  auto idx = [&](const char* s) { return (int)dom->find(s); };
  CHECK(a.at({idx("Alice"), idx("Dave")}) == 1.0);
  CHECK(a.at({idx("Bob"), idx("Dave")}) == 1.0);
  CHECK(a.at({idx("Dave"), idx("Alice")}) == 0.0);
  CHECK(a.nonzero_count() == 6);
}

TEST_CASE("rectangular and diagonal rule heads on one relation accumulate") {
  // R(x,y) and R(x,x) are distinct groups whose write regions overlap on the
  // diagonal; neither may clobber the other's tuples across sweeps.
  Program p = analyze_program(
      "E(A, B)\n"
      "S(B, B)\n"
      "R(x,y) <- E(x,y)\n"
      "R(x,y) <- S(x,y)\n"
      "R(x,x) <- E(x,y)\n");
  Environment env;
  seed_environment(p, env);
  ChainReport rep = forward_chain(p, env);
  CHECK(rep.converged);
  const TensorValue& r = *env.find("R");
  const DomainPtr& dom = p.signatures.at("R")[0];
  auto idx = [&](const char* s) { return (int)dom->find(s); };
  CHECK(r.at({idx("A"), idx("B")}) == 1.0);  // rectangular rule, off-diagonal
  CHECK(r.at({idx("B"), idx("B")}) == 1.0);  // rectangular rule, on-diagonal
  CHECK(r.at({idx("A"), idx("A")}) == 1.0);  // diagonal rule
  CHECK(r.nonzero_count() == 3);
}

TEST_CASE("forward and backward chaining agree on a recursive query") {
  const char* src =
      "Edge(A, B)\n"
      "Edge(B, C)\n"
      "Edge(C, D)\n"
      "Path(x,y) <- Edge(x,y)\n"
      "Path(x,y) <- Edge(x,z), Path(z,y)\n";
  Program p = analyze_program(src);
  Environment fwd_env;
  seed_environment(p, fwd_env);
  Environment bwd_env;
  seed_environment(p, bwd_env);
  QueryResult fwd = answer_query(p, "Path(A,x)", fwd_env, /*forward=*/true);
  QueryResult bwd = answer_query(p, "Path(A,x)", bwd_env, /*forward=*/false);
  CHECK(fwd.free_vars == std::vector<std::string>{"x"});
  CHECK(approx_equal(fwd.value, bwd.value, 0.0));
  CHECK(fwd.value.nonzero_count() == 3);  // B, C, D
}

TEST_CASE("backward chaining leaves unrelated tensors unevaluated") {
  const char* src =
      "A = [1, 2]\n"
      "Y[i] = 2 A[i]\n"
      "Huge[i] = 3 A[i]\n";
  Program p = analyze_program(src);
  Environment env;
  seed_environment(p, env);
  TensorRef q;
  q.name = "Y";
  IndexExpr ix;
  ix.var = "i";
  q.args.push_back(ix);
  QueryResult r = backward_chain(p, q, env);
  CHECK(r.value.at({1}) == 4.0);
  CHECK(!env.has("Huge"));
}

TEST_CASE("querying an undefined relation warns and returns zeros") {
  Program p = analyze_program(
      "Edge(A, B)\n"
      "Nowhere(x,y) <- Edge(x,z), Edge(z,y), Missing(y,x)\n");
  Environment env;
  seed_environment(p, env);
  QueryResult r = answer_query(p, "Nowhere(A,x)", env);
  CHECK(!r.warning.empty());
  CHECK(r.value.nonzero_count() == 0);
}

TEST_CASE("bayesian network: partition is one, conditionals renormalize") {
  // C -> S in junction-tree form, with all-ones evidence indicators.
  const char* src =
      "PC = [0.6, 0.4]\n"
      "PS = [[0.9, 0.1], [0.2, 0.8]]\n"
      "EC = [1, 1]\n"
      "ES = [1, 1]\n"
      "J[c,s] = PC[c] PS[c,s] EC[c] ES[s]\n"
      "Z = J[c,s]\n"
      "QS[s] = J[c,s]\n";
  Program p = analyze_program(src);
  Environment env;
  seed_environment(p, env);
  forward_chain(p, env);
  CHECK(env.find("Z")->at({}) == doctest::Approx(1.0).epsilon(1e-12));
  // marginal: P(S=1) = 0.6*0.1 + 0.4*0.8
  CHECK(env.find("QS")->at({1}) == doctest::Approx(0.38).epsilon(1e-12));
  // conditional: P(S=1 | C=1) = 0.8
  Environment env2;
  seed_environment(p, env2);
  QueryResult r = answer_query(p, "QS[s] | EC(1)", env2, /*forward=*/true);
  CHECK(r.value.at({1}) == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(r.value.at({0}) == doctest::Approx(0.2).epsilon(1e-12));
}

TEST_CASE("impossible evidence raises an inconsistent-evidence error") {
  const char* src =
      "PC = [1, 0]\n"
      "EC = [1, 1]\n"
      "J[c] = PC[c] EC[c]\n"
      "Z = J[c]\n"
      "Q[c] = J[c]\n";
  Program p = analyze_program(src);
  Environment env;
  seed_environment(p, env);
  CHECK_THROWS_WITH_AS(answer_query(p, "Q[c] | EC(1)", env, true),
                       doctest::Contains("inconsistent evidence"),
                       std::runtime_error);
}

TEST_CASE("evidence clamps are non-destructive") {
  const char* src =
      "PC = [0.5, 0.5]\n"
      "EC = [1, 1]\n"
      "J[c] = PC[c] EC[c]\n"
      "Z = J[c]\n"
      "Q[c] = J[c]\n";
  Program p = analyze_program(src);
  Environment env;
  seed_environment(p, env);
  answer_query(p, "Q[c] | EC(0)", env, true);
  Environment env2;
  seed_environment(p, env2);
  forward_chain(p, env2);
  QueryResult plain = answer_query(p, "Q[c]", env, true);
  CHECK(plain.value.at({1}) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(approx_equal(*env2.find("Z"), *env.find("Z"), 1e-12));
}

TEST_CASE("max= projection with several terms takes the elementwise max") {
  Environment env = run(
      "A = [[1, 9], [4, 2]]\n"
      "B = [3, 3]\n"
      "M[i] max= A[i,j]\n"
      "M[i] max= B[i]\n");
  CHECK(env.find("M")->at({0}) == 9.0);
  CHECK(env.find("M")->at({1}) == 4.0);
}

TEST_CASE("avg= divides by the reduction count") {
  Environment env = run(
      "A = [[1, 2, 3], [4, 5, 6]]\n"
      "V[i] avg= A[i,j]\n");
  CHECK(env.find("V")->at({0}) == doctest::Approx(2.0));
  CHECK(env.find("V")->at({1}) == doctest::Approx(5.0));
}

TEST_CASE("integer-division index pools blocks") {
  Environment env = run(
      "const S = 2\n"
      "X = [1, 2, 3, 4]\n"
      "P[i/S] = X[i]\n");
  const TensorValue& pv = *env.find("P");
  CHECK(pv.at({0}) == 3.0);
  CHECK(pv.at({1}) == 7.0);
}

TEST_CASE("x+dx convolution matches the hand-rolled result") {
  Environment env = run(
      "domain x = 4\n"
      "K = [1, -1]\n"
      "X = [5, 3, 8, 1]\n"
      "Y[x] = K[dx] X[x+dx]\n");
  const TensorValue& y = *env.find("Y");
  CHECK(y.at({0}) == 2.0);   // 5 - 3
  CHECK(y.at({1}) == -5.0);  // 3 - 8
  CHECK(y.at({2}) == 7.0);   // 8 - 1
  CHECK(y.at({3}) == 1.0);   // 1 - 0 (zero padded)
}

TEST_CASE("slices read subranges") {
  Environment env = run(
      "X = [0, 1, 2, 3, 4, 5, 6, 7]\n"
      "S = X[2:5]\n");
  CHECK(scalar(env, "S") == 9.0);  // 2+3+4
}

TEST_CASE("scalar consts and index functions evaluate") {
  Environment env = run(
      "const L = 4\n"
      "domain p = 2\n"
      "domain d = 2\n"
      "PE[p,d] = sin(p / L^(d/2))\n");
  const TensorValue& pe = *env.find("PE");
  CHECK(pe.at({0, 0}) == doctest::Approx(0.0));
  CHECK(pe.at({1, 0}) == doctest::Approx(std::sin(1.0)).epsilon(1e-12));
  CHECK(pe.at({1, 1}) == doctest::Approx(std::sin(0.5)).epsilon(1e-12));
}

TEST_CASE("epsilon fixpoint stops early; exact fixpoint needs more sweeps") {
  const char* src =
      "V[0] = 1\n"
      "domain i = 40\n"
      "V[i+1] = 0.5 V[i]\n";
  FixpointConfig loose;
  loose.epsilon = 1e-3;
  Program p = analyze_program(src);
  Environment env;
  seed_environment(p, env);
  ChainReport rep = forward_chain(p, env, loose);
  CHECK(rep.converged);
  CHECK(rep.sweeps <= 3);
}

TEST_CASE("contract_sum matches join+project, dense and sparse") {
  auto dense = TensorValue::dense_zeros(
      Dtype::Real, {{"i", make_domain("i", 3)}, {"j", make_domain("j", 4)}});
  auto dense2 = TensorValue::dense_zeros(
      Dtype::Real, {{"j", make_domain("j", 4)}, {"k", make_domain("k", 2)}});
  int c = 0;
  for (auto& v : dense.dense_data()) v = 0.1 * (c++) - 0.4;
  for (auto& v : dense2.dense_data()) v = 0.3 * (c++) - 2.0;
  TensorValue expect = tensor_project(tensor_join(dense, dense2), {"i", "k"});
  TensorValue got = contract_sum(dense, dense2, {"i", "k"});
  CHECK(approx_equal(expect, got, 1e-12));

  TensorValue sp = TensorValue::sparse_zeros(
      Dtype::Real, {{"j", make_domain("j", 4)}, {"k", make_domain("k", 2)}});
  sp.set({0, 1}, 2.0);
  sp.set({3, 0}, -1.5);
  TensorValue expect2 = tensor_project(tensor_join(dense, sp), {"i", "k"});
  TensorValue got2 = contract_sum(dense, sp, {"i", "k"});
  CHECK(approx_equal(expect2, got2, 1e-12));
}

TEST_CASE("large dense contraction (blas path) matches the naive oracle") {
  const int m = 80, kk = 70, n = 90;  // 504k flops: above the dgemm cutoff
  auto a = TensorValue::dense_zeros(
      Dtype::Real, {{"i", make_domain("i", m)}, {"j", make_domain("j", kk)}});
  auto b = TensorValue::dense_zeros(
      Dtype::Real, {{"j", make_domain("j", kk)}, {"k", make_domain("k", n)}});
  std::uint64_t s = 1234567;
  auto rnd = [&] {
    s = s * 6364136223846793005ULL + 1442695040888963407ULL;
    return (double)(s >> 11) / (double)(1ULL << 53) - 0.5;
  };
  for (auto& v : a.dense_data()) v = rnd();
  for (auto& v : b.dense_data()) v = rnd();
  TensorValue got = contract_sum(a, b, {"i", "k"});
  for (int i = 0; i < m; i += 17)
    for (int k2 = 0; k2 < n; k2 += 23) {
      double acc = 0;
      for (int j = 0; j < kk; ++j) acc += a.at({i, j}) * b.at({j, k2});
      CHECK(got.at({i, k2}) == doctest::Approx(acc).epsilon(1e-10));
    }
}

TEST_CASE("sample_project is exact for k >= group size and unbiased below") {
  auto t = TensorValue::dense_zeros(
      Dtype::Real, {{"i", make_domain("i", 2)}, {"j", make_domain("j", 100)}});
  int c = 0;
  for (auto& v : t.dense_data()) v = (c++ % 7) - 3.0;
  TensorValue exact = tensor_project(t, {"i"});
  CHECK(approx_equal(sample_project(t, {"i"}, 100, 42), exact, 1e-12));
  CHECK(approx_equal(sample_project(t, {"i"}, 1000, 42), exact, 1e-12));

  // mean of many independent estimates approaches the exact sum
  double mean0 = 0;
  const int trials = 2000;
  for (int r = 0; r < trials; ++r)
    mean0 += sample_project(t, {"i"}, 25, 1000 + r).at({0});
  mean0 /= trials;
  // one estimate has sd ~35; the mean of 2000 has se ~0.8, so 2.4 is 3 se
  CHECK(std::abs(mean0 - exact.at({0})) < 2.4);
}

TEST_CASE("sample_project is deterministic per seed") {
  auto t = TensorValue::dense_zeros(Dtype::Real,
                                    {{"j", make_domain("j", 50)}});
  int c = 0;
  for (auto& v : t.dense_data()) v = 0.01 * (c++);
  TensorValue a = sample_project(t, {}, 10, 7);
  TensorValue b = sample_project(t, {}, 10, 7);
  TensorValue d = sample_project(t, {}, 10, 8);
  CHECK(a.at({}) == b.at({}));
  CHECK(a.at({}) != d.at({}));
}

TEST_CASE("normalizer over a joined expression (attention-style)") {
  Environment env = run(
      "Q = [[1, 0], [0, 2]]\n"
      "K = [[1, 1], [0, 1]]\n"
      "C[p,p2.] = softmax(Q[p,d] K[p2,d])\n");
  const TensorValue& cmp = *env.find("C");
  for (int pp = 0; pp < 2; ++pp) {
    double z = 0;
    for (int p2 = 0; p2 < 2; ++p2) z += cmp.at({pp, p2});
    CHECK(z == doctest::Approx(1.0).epsilon(1e-12));
  }
  // scores row 0: [1, 0] -> softmax
  CHECK(cmp.at({0, 0}) ==
        doctest::Approx(std::exp(1.0) / (std::exp(1.0) + 1)).epsilon(1e-12));
}

TEST_CASE("render_result formats booleans as tuple sets and scalars bare") {
  Program p = analyze_program(
      "Edge(A, B)\n"
      "Edge(B, C)\n"
      "Path(x,y) <- Edge(x,y)\n"
      "Path(x,y) <- Edge(x,z), Path(z,y)\n"
      "Total = 2.5\n");
  Environment env;
  seed_environment(p, env);
  QueryResult r = answer_query(p, "Path(A,x)", env);
  std::string s = render_result(r);
  CHECK(s.find("B") != std::string::npos);
  CHECK(s.find("C") != std::string::npos);
  QueryResult r2 = answer_query(p, "Total", env);
  CHECK(render_result(r2) == "2.5");
}
