#include <cmath>
#include <random>
#include <sstream>

#include "tl/analyze.hpp"
#include "tl/autodiff.hpp"
#include "tl/parser.hpp"

namespace tl {

namespace {

double fan_in(const std::vector<DomainPtr>& sig) {
  if (sig.empty()) return 1.0;
  double n = 1.0;
  for (size_t i = 1; i < sig.size(); ++i) n *= (double)sig[i]->cardinality();
  if (sig.size() == 1) n = (double)sig[0]->cardinality();
  return std::max(1.0, n);
}

TensorValue init_tensor(const Program& p, const std::string& name,
                        const OptimizerConfig& opt, std::mt19937_64& rng) {
  TensorValue t = zeros_for(p, name).to_dense();
  auto& sig = p.signatures.at(name);
  auto& data = t.dense_data();
  switch (opt.init) {
    case OptimizerConfig::Init::Zeros:
    case OptimizerConfig::Init::Keep:
      break;
    case OptimizerConfig::Init::Uniform: {
      double a = opt.init_a, b = opt.init_b;
      if (a == 0.0 && b == 0.0) {
        b = 1.0 / std::sqrt(fan_in(sig));
        a = -b;
      }
      std::uniform_real_distribution<double> dist(a, b);
      for (auto& v : data) v = dist(rng);
      break;
    }
    case OptimizerConfig::Init::Gaussian: {
      std::normal_distribution<double> dist(0.0, opt.init_sigma);
      for (auto& v : data) v = dist(rng);
      break;
    }
  }
  return t;
}

struct OptState {
  std::vector<double> m, v;  // momentum / first and second moments
};

void apply_update(TensorValue& w, const TensorValue& g, OptState& st,
                  const OptimizerConfig& opt, int step) {
  auto& wd = w.dense_data();
  TensorValue gd = g.to_dense();
  const auto& gv = gd.dense_data();
  if (st.m.empty()) st.m.assign(wd.size(), 0.0);
  switch (opt.alg) {
    case OptimizerConfig::Alg::Sgd:
      for (size_t i = 0; i < wd.size(); ++i) wd[i] -= opt.lr * gv[i];
      break;
    case OptimizerConfig::Alg::Momentum:
      for (size_t i = 0; i < wd.size(); ++i) {
        st.m[i] = 0.9 * st.m[i] + gv[i];
        wd[i] -= opt.lr * st.m[i];
      }
      break;
    case OptimizerConfig::Alg::Adam: {
      if (st.v.empty()) st.v.assign(wd.size(), 0.0);
      const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
      double c1 = 1.0 - std::pow(b1, step), c2 = 1.0 - std::pow(b2, step);
      for (size_t i = 0; i < wd.size(); ++i) {
        st.m[i] = b1 * st.m[i] + (1.0 - b1) * gv[i];
        st.v[i] = b2 * st.v[i] + (1.0 - b2) * gv[i] * gv[i];
        wd[i] -= opt.lr * (st.m[i] / c1) / (std::sqrt(st.v[i] / c2) + eps);
      }
      break;
    }
  }
}

}  // namespace

Environment train(const Program& p, const LossSpec& loss, const Environment& data,
                  const OptimizerConfig& opt, TrainReport* report) {
  GradientProgram gp = differentiate(p, loss);
  std::set<std::string> learned = learned_tensors(p, loss);

  std::mt19937_64 rng(opt.seed);
  Environment env = data;
  seed_environment(gp.program, env);
  for (auto& name : learned) {
    if (opt.init == OptimizerConfig::Init::Keep && env.has(name)) {
      env.provenance[name] = Environment::Provenance::Learned;
      continue;
    }
    env.bind(name, init_tensor(gp.program, name, opt, rng),
             Environment::Provenance::Learned);
  }

  TrainReport local;
  TrainReport& rep = report ? *report : local;
  std::map<std::string, OptState> states;
  FixpointConfig cfg;

  for (int epoch = 1; epoch <= opt.epochs; ++epoch) {
    Environment run = env;
    forward_chain(gp.program, run, cfg);
    const TensorValue* l = run.find(loss.loss_name);
    if (!l) throw std::runtime_error("training: loss was not computed");
    double lv = l->scalar_value();
    rep.loss_curve.push_back(lv);
    if (!std::isfinite(lv) || std::fabs(lv) > 1e12) {
      rep.diverged = true;
      rep.final_loss = lv;
      return env;
    }
    for (auto& name : learned) {
      const TensorValue* g = run.find(gp.adjoint_name.at(name));
      if (!g) continue;  // unreachable parameter: zero gradient
      TensorValue w = env.bindings.at(name).to_dense();
      apply_update(w, *g, states[name], opt, epoch);
      env.bind(name, std::move(w), Environment::Provenance::Learned);
    }
  }
  {
    Environment run = env;
    forward_chain(p, run, cfg);
    const TensorValue* l = run.find(loss.loss_name);
    rep.final_loss = l ? l->scalar_value() : 0.0;
  }
  return env;
}

TuckerResult tucker_fit(const TensorValue& a, const std::vector<int>& core_shape,
                        const OptimizerConfig& opt) {
  int r = a.rank();
  if ((int)core_shape.size() != r)
    throw std::runtime_error("tucker_fit: core rank must match the input rank");

  std::ostringstream src;
  for (int k = 0; k < r; ++k)
    src << "domain p" << k << " = " << core_shape[k] << "\n";
  src << "const invN = " << (1.0 / (double)a.total_size()) << "\n";
  src << "A = \"<bound>\"\n";
  auto ivars = [&](std::ostream& os) {
    for (int k = 0; k < r; ++k) os << (k ? "," : "") << "i" << k;
  };
  src << "R[";
  ivars(src);
  src << "] = ";
  for (int k = 0; k < r; ++k) src << "F" << k << "[i" << k << ",p" << k << "] ";
  src << "C[";
  for (int k = 0; k < r; ++k) src << (k ? "," : "") << "p" << k;
  src << "]\n";
  src << "D[";
  ivars(src);
  src << "] = R[";
  ivars(src);
  src << "] - A[";
  ivars(src);
  src << "]\n";
  src << "Loss = invN D[";
  ivars(src);
  src << "] D[";
  ivars(src);
  src << "]\n";

  Program p = parse_program(src.str());
  p.file_tensors["A"] = a;  // preloaded in place of the read directive
  infer_domains(p);
  desugar(p);

  LossSpec loss;
  loss.data_tensors = {"A"};
  Environment data;
  data.bind("A", a, Environment::Provenance::File);

  TuckerResult out;
  Environment trained = train(p, loss, data, opt, &out.report);

  Environment run = trained;
  forward_chain(p, run);
  out.core = run.bindings.at("C");
  for (int k = 0; k < r; ++k)
    out.factors.push_back(run.bindings.at("F" + std::to_string(k)));
  out.reconstruction = run.bindings.at("R");
  return out;
}

}  // namespace tl
