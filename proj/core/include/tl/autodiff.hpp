#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "tl/ast.hpp"
#include "tl/engine.hpp"

namespace tl {

struct LossSpec {
  std::string loss_name = "Loss";
  std::set<std::string> data_tensors;      // supplied as training data
  std::set<std::string> constant_tensors;  // excluded from learning
  bool surrogate = false;      // substitute the sigmoid derivative for step
  double surrogate_T = 1.0;    // temperature of the surrogate
};

// The gradient of a program is a program: the primal equations, auxiliary
// equations materializing pre-activations and nonlinearity derivatives, and
// one adjoint equation per (equation, RHS tensor occurrence), accumulated
// into one gradient tensor per primal tensor.
struct GradientProgram {
  Program program;  // analyzed (domains inferred, groups built)
  std::map<std::string, std::string> adjoint_name;  // tensor -> gradient tensor
};

// Tensors with no defining equations that are not data, constants, facts,
// literals, or file inputs: the free parameters.
std::set<std::string> learned_tensors(const Program& p, const LossSpec& loss);

GradientProgram differentiate(const Program& p, const LossSpec& loss);

// Central-difference verification of the gradient program on the bound
// environment (env must bind every learned tensor). Returns the worst
// relative error over all learned elements.
double finite_diff_check(const Program& p, const LossSpec& loss,
                         const Environment& env, double h);

struct OptimizerConfig {
  enum class Alg { Sgd, Momentum, Adam };
  enum class Init { Uniform, Gaussian, Zeros, Keep };
  Alg alg = Alg::Adam;
  double lr = 1e-2;
  int epochs = 100;
  std::uint64_t seed = 0;
  Init init = Init::Uniform;
  double init_a = 0.0, init_b = 0.0;  // uniform bounds; (0,0) = +-1/sqrt(fan-in)
  double init_sigma = 0.1;            // gaussian
};

struct TrainReport {
  std::vector<double> loss_curve;  // one entry per epoch
  bool diverged = false;
  double final_loss = 0.0;
};

// Full-batch gradient descent on the learned tensors. `data` binds the data
// tensors (and any pre-initialized parameters, kept when init == Keep).
// Returns the environment of the final epoch (learned tensors updated).
Environment train(const Program& p, const LossSpec& loss, const Environment& data,
                  const OptimizerConfig& opt, TrainReport* report = nullptr);

struct TuckerResult {
  TensorValue core;
  std::vector<TensorValue> factors;  // one per axis of the input
  TensorValue reconstruction;
  TrainReport report;
};

// Fits A[i,j,...] = F0[i,p] F1[j,q] ... C[p,q,...] by building the
// decomposition program with squared reconstruction loss and training it.
TuckerResult tucker_fit(const TensorValue& a, const std::vector<int>& core_shape,
                        const OptimizerConfig& opt);

}  // namespace tl
