#include <doctest.h>

#include <cmath>
#include <random>

#include "tl/analyze.hpp"
#include "tl/autodiff.hpp"
#include "tl/engine.hpp"
#include "tl/parser.hpp"
#include "tl/printer.hpp"

using namespace tl;

namespace {

Environment with_learned(const Program& p, const LossSpec& loss,
                         std::uint64_t seed) {
  Environment env;
  seed_environment(p, env);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-0.8, 0.8);
  for (const std::string& name : learned_tensors(p, loss)) {
    TensorValue t = zeros_for(p, name).to_dense();
    for (auto& v : t.dense_data()) v = u(rng);
    env.bind(name, std::move(t), Environment::Provenance::Learned);
  }
  return env;
}

double check_fd(const std::string& src, const LossSpec& loss,
                std::uint64_t seed = 1) {
  Program p = analyze_program(src);
  Environment env = with_learned(p, loss, seed);
  return finite_diff_check(p, loss, env, 1e-5);
}

}  // namespace

TEST_CASE("learned tensors are exactly the undefined ones") {
  Program p = analyze_program(
      "X = [[0,1],[1,0]]\n"
      "T = [1, 0]\n"
      "constant X, T\n"
      "domain i = 3\n"
      "H[n,i] = sig(W[i,j] X[n,j] + B[i])\n"
      "P[n] = V[i] H[n,i]\n"
      "D[n] = P[n] - T[n]\n"
      "Loss = D[n] D[n]\n");
  LossSpec loss;
  auto learned = learned_tensors(p, loss);
  CHECK(learned == std::set<std::string>{"W", "B", "V"});
}

TEST_CASE("gradient program closure: output reparses and re-analyzes") {
  Program p = analyze_program(
      "X = [[0,1],[1,0]]\n"
      "T = [1, 0]\n"
      "constant X, T\n"
      "P[n] = sig(W[j] X[n,j] + B)\n"
      "D[n] = P[n] - T[n]\n"
      "Loss = D[n] D[n]\n");
  LossSpec loss;
  GradientProgram g = differentiate(p, loss);
  std::string printed = print_program(g.program);
  Program back = parse_program(printed);
  infer_domains(back);
  back.same_signature = g.program.same_signature;
  // the gradient of a program is a program: it must round-trip as source
  CHECK(back.equations.size() == g.program.equations.size());
  CHECK(g.adjoint_name.count("W"));
  CHECK(g.adjoint_name.count("B"));

  // and running the reparsed text gives the same gradients
  Environment e1 = with_learned(p, loss, 7);
  Environment e2 = e1;
  Program reb = back;
  desugar(reb);
  forward_chain(g.program, e1);
  forward_chain(reb, e2);
  for (auto& [prim, adj] : g.adjoint_name) {
    if (!e1.has(adj)) continue;
    CHECK(approx_equal(*e1.find(adj), *e2.find(adj), 1e-12));
  }
}

TEST_CASE("finite differences: linear regression") {
  double err = check_fd(
      "X = [[1, 2], [3, 4], [5, 6]]\n"
      "T = [1, 2, 3]\n"
      "constant X, T\n"
      "P[n] = W[j] X[n,j] + B\n"
      "D[n] = P[n] - T[n]\n"
      "Loss = D[n] D[n]\n",
      LossSpec{});
  CHECK(err < 1e-6);
}

TEST_CASE("finite differences: sigmoid MLP with shared weights twice used") {
  double err = check_fd(
      "X = [[0,0],[0,1],[1,0],[1,1]]\n"
      "T = [0, 1, 1, 0]\n"
      "constant X, T\n"
      "H[n,i] = sig(W1[i,j] X[n,j] + B1[i])\n"
      "P[n] = sig(W2[i] H[n,i] + W1[0,0] + B2)\n"
      "D[n] = P[n] - T[n]\n"
      "Loss = D[n] D[n]\n",
      LossSpec{});
  CHECK(err < 1e-5);
}

TEST_CASE("finite differences: relu, exp and power chains") {
  double err = check_fd(
      "X = [[0.3, -0.2], [0.1, 0.5]]\n"
      "constant X\n"
      "domain i = 3\n"
      "H[n,i] = relu(W[i,j] X[n,j] + 0.05)\n"
      "E[n] = exp(-V[i] H[n,i])\n"
      "Q[n] = pow(E[n] + 1, 2)\n"
      "Loss = Q[n]\n",
      LossSpec{});
  CHECK(err < 1e-5);
}

TEST_CASE("finite differences: softmax cross-entropy-style loss") {
  double err = check_fd(
      "X = [[0.2, 0.7], [0.9, -0.1], [0.4, 0.4]]\n"
      "T = [[1, 0], [0, 1], [1, 0]]\n"
      "constant X, T\n"
      "P[n,c.] = softmax(W[c,j] X[n,j] + B[c])\n"
      "D[n,c] = P[n,c] - T[n,c]\n"
      "Loss = D[n,c] D[n,c]\n",
      LossSpec{});
  CHECK(err < 1e-5);
}

TEST_CASE("finite differences: layer normalization") {
  double err = check_fd(
      "X = [[0.2, 0.7, -0.3], [0.9, -0.1, 0.4]]\n"
      "constant X\n"
      "domain i = 4\n"
      "H[n,i.] = lnorm(W[i,j] X[n,j])\n"
      "Y[n] = V[i] H[n,i]\n"
      "Loss = Y[n] Y[n]\n",
      LossSpec{});
  CHECK(err < 1e-4);
}

TEST_CASE("finite differences: max pooling backward routes to the argmax") {
  double err = check_fd(
      "X = [[0.3, -0.2, 0.8], [0.1, 0.5, -0.4]]\n"
      "constant X\n"
      "domain i = 3\n"
      "H[n,i] = W[i,j] X[n,j]\n"
      "M[n] max= H[n,i]\n"
      "Loss = M[n] M[n]\n",
      LossSpec{});
  CHECK(err < 1e-5);
}

TEST_CASE("finite differences: grouped pointwise expression (gaussian kernel)") {
  double err = check_fd(
      "X = [[0.3, -0.2], [0.1, 0.5], [0.7, 0.4]]\n"
      "constant X\n"
      "K[n,n2] = exp(-(X[n,j] - X[n2,j])^2 / 2)\n"
      "P[n] = A[n2] K[n,n2] + B\n"
      "Loss = P[n] P[n]\n",
      LossSpec{});
  CHECK(err < 1e-5);
}

TEST_CASE("finite differences: avg projection scales by the dropped count") {
  double err = check_fd(
      "X = [[0.3, -0.2, 0.5], [0.1, 0.5, -0.1]]\n"
      "constant X\n"
      "domain i = 3\n"
      "H[n,i] = W[i,j] X[n,j]\n"
      "A[n] avg= H[n,i]\n"
      "Loss = A[n] A[n]\n",
      LossSpec{});
  CHECK(err < 1e-6);
}

TEST_CASE("finite differences: recurrence through time (BPTT)") {
  double err = check_fd(
      "U = [[0.2], [0.5], [-0.3], [0.1]]\n"
      "constant U\n"
      "domain t = 4\n"
      "H[0] = 0.1\n"
      "H[t+1] = sig(W H[t] + V U[t,0])\n"
      "Loss = H[3] H[3]\n",
      LossSpec{});
  CHECK(err < 1e-5);
}

TEST_CASE("step without a surrogate is rejected; with one it differentiates") {
  const char* src =
      "X = [[0.3, -0.2], [0.1, 0.5]]\n"
      "constant X\n"
      "Y[n] = step(W[j] X[n,j])\n"
      "Loss = Y[n]\n";
  Program p = analyze_program(src);
  LossSpec hard;
  CHECK_THROWS_WITH_AS(differentiate(p, hard), doctest::Contains("surrogate"),
                       std::runtime_error);
  LossSpec soft;
  soft.surrogate = true;
  soft.surrogate_T = 0.5;
  GradientProgram g = differentiate(p, soft);
  Environment env = with_learned(p, soft, 3);
  forward_chain(g.program, env);
  const TensorValue& dw = *env.find(g.adjoint_name.at("W"));
  // surrogate gradient: d step(u) -> sigmoid'(u; T), nonzero at finite u
  bool any = false;
  for (double v : dw.to_dense().dense_data()) any |= (v != 0.0);
  CHECK(any);
}

TEST_CASE("training linear regression recovers the planted model") {
  // T = 2 x0 - 1 x1 + 0.5, 8 points
  Program p = analyze_program(
      "X = [[0,0],[0,1],[1,0],[1,1],[0.5,0.2],[0.3,0.8],[0.9,0.4],[0.2,0.6]]\n"
      "T = [0.5,-0.5,2.5,1.5,1.3,0.3,1.9,0.3]\n"
      "constant X, T\n"
      "P[n] = W[j] X[n,j] + B\n"
      "D[n] = P[n] - T[n]\n"
      "Loss = 0.125 D[n] D[n]\n");
  LossSpec loss;
  OptimizerConfig opt;
  opt.alg = OptimizerConfig::Alg::Adam;
  opt.lr = 0.05;
  opt.epochs = 400;
  opt.seed = 0;
  TrainReport rep;
  Environment data;
  Environment out = train(p, loss, data, opt, &rep);
  CHECK(!rep.diverged);
  CHECK(rep.final_loss < 1e-4);
  const TensorValue& w = *out.find("W");
  CHECK(w.at({0}) == doctest::Approx(2.0).epsilon(0.02));
  CHECK(w.at({1}) == doctest::Approx(-1.0).epsilon(0.02));
  CHECK(out.find("B")->at({}) == doctest::Approx(0.5).epsilon(0.05));
}

TEST_CASE("training XOR with a hidden layer converges (frozen seed)") {
  Program p = analyze_program(
      "X = [[0,0],[0,1],[1,0],[1,1]]\n"
      "T = [0, 1, 1, 0]\n"
      "constant X, T\n"
      "domain i = 3\n"
      "H[n,i] = sig(W1[i,j] X[n,j] + B1[i])\n"
      "P[n] = sig(W2[i] H[n,i] + B2)\n"
      "D[n] = P[n] - T[n]\n"
      "Loss = 0.25 D[n] D[n]\n");
  LossSpec loss;
  OptimizerConfig opt;
  opt.lr = 0.05;
  opt.epochs = 2000;
  opt.seed = 0;
  TrainReport rep;
  Environment data;
  Environment out = train(p, loss, data, opt, &rep);
  CHECK(!rep.diverged);
  CHECK(rep.final_loss < 1e-3);
  // the trained net classifies all four points correctly
  forward_chain(p, out);
  const TensorValue& pv = *out.find("P");
  CHECK(pv.at({0}) < 0.5);
  CHECK(pv.at({1}) > 0.5);
  CHECK(pv.at({2}) > 0.5);
  CHECK(pv.at({3}) < 0.5);
}

TEST_CASE("optimizers: sgd and momentum also fit the linear problem") {
  const char* src =
      "X = [[0,0],[0,1],[1,0],[1,1]]\n"
      "T = [0.5, -0.5, 2.5, 1.5]\n"
      "constant X, T\n"
      "P[n] = W[j] X[n,j] + B\n"
      "D[n] = P[n] - T[n]\n"
      "Loss = 0.25 D[n] D[n]\n";
  Program p = analyze_program(src);
  for (auto alg :
       {OptimizerConfig::Alg::Sgd, OptimizerConfig::Alg::Momentum}) {
    OptimizerConfig opt;
    opt.alg = alg;
    opt.lr = alg == OptimizerConfig::Alg::Sgd ? 0.2 : 0.05;
    opt.epochs = 800;
    opt.seed = 2;
    TrainReport rep;
    Environment data;
    train(p, LossSpec{}, data, opt, &rep);
    CHECK(!rep.diverged);
    CHECK(rep.final_loss < 1e-4);
  }
}

TEST_CASE("training is deterministic per seed") {
  const char* src =
      "X = [[0,1],[1,0]]\n"
      "T = [1, 0]\n"
      "constant X, T\n"
      "P[n] = sig(W[j] X[n,j] + B)\n"
      "D[n] = P[n] - T[n]\n"
      "Loss = D[n] D[n]\n";
  Program p = analyze_program(src);
  OptimizerConfig opt;
  opt.epochs = 50;
  opt.seed = 11;
  TrainReport r1, r2;
  Environment d1, d2;
  Environment o1 = train(p, LossSpec{}, d1, opt, &r1);
  Environment o2 = train(p, LossSpec{}, d2, opt, &r2);
  CHECK(r1.final_loss == r2.final_loss);
  CHECK(approx_equal(*o1.find("W"), *o2.find("W"), 0.0));
}

TEST_CASE("divergence is detected and flagged") {
  const char* src =
      "X = [[1, 1], [2, 2]]\n"
      "T = [1, 2]\n"
      "constant X, T\n"
      "P[n] = W[j] X[n,j]\n"
      "D[n] = P[n] - T[n]\n"
      "E[n] = exp(D[n] D[n])\n"
      "Loss = E[n] E[n]\n";
  Program p = analyze_program(src);
  OptimizerConfig opt;
  opt.alg = OptimizerConfig::Alg::Sgd;
  opt.lr = 50.0;  // overshoots immediately
  opt.epochs = 200;
  opt.seed = 0;
  TrainReport rep;
  Environment data;
  train(p, LossSpec{}, data, opt, &rep);
  CHECK(rep.diverged);
}

TEST_CASE("tucker decomposition recovers a planted low-rank tensor") {
  // planted: A[i,j,k] = F0[i,p] F1[j,q] F2[k,r] C[p,q,r], core 2x2x2 in 5x4x3
  std::mt19937_64 rng(9);
  std::normal_distribution<double> nd(0.0, 1.0);
  auto mk = [&](const std::string& ax, int n, const std::string& px, int r) {
    TensorValue t = TensorValue::dense_zeros(
        Dtype::Real, {{ax, make_domain(ax, n)}, {px, make_domain(px, r)}});
    for (auto& v : t.dense_data()) v = nd(rng);
    return t;
  };
  TensorValue f0 = mk("i", 5, "p", 2), f1 = mk("j", 4, "q", 2),
              f2 = mk("k", 3, "r", 2);
  TensorValue core = TensorValue::dense_zeros(
      Dtype::Real, {{"p", make_domain("p", 2)},
                    {"q", make_domain("q", 2)},
                    {"r", make_domain("r", 2)}});
  for (auto& v : core.dense_data()) v = nd(rng);
  TensorValue a = contract_sum(
      contract_sum(contract_sum(core, f0, {"i", "q", "r"}), f1, {"i", "j", "r"}),
      f2, {"i", "j", "k"});

  OptimizerConfig opt;
  opt.lr = 0.02;
  opt.epochs = 2000;
  opt.seed = 3;
  TuckerResult res = tucker_fit(a, {2, 2, 2}, opt);
  CHECK(!res.report.diverged);
  double mse = 0;
  int n = 0;
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 4; ++j)
      for (int k = 0; k < 3; ++k) {
        double d = res.reconstruction.at({i, j, k}) - a.at({i, j, k});
        mse += d * d;
        ++n;
      }
  mse /= n;
  CHECK(mse < 1e-3);
  CHECK(res.factors.size() == 3);
  CHECK(res.core.total_size() == 8);
}
