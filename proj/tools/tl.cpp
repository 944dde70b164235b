// tl: command-line driver for the tensor logic interpreter.
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "tl/analyze.hpp"
#include "tl/autodiff.hpp"
#include "tl/embed.hpp"
#include "tl/engine.hpp"
#include "tl/io.hpp"
#include "tl/parser.hpp"
#include "tl/printer.hpp"

namespace {

struct Flags {
  std::string file;
  std::string query;
  std::uint64_t seed = 0;
  int sweeps = 0;          // 0 = module default
  double epsilon = 0.0;
  std::string mode = "forward";
  std::string out;
  double T = 0.0;
  int D = 1024;
  std::string surrogate;
};

tl::FixpointConfig fixpoint(const Flags& f) {
  tl::FixpointConfig cfg;
  if (f.sweeps > 0) cfg.max_sweeps = f.sweeps;
  cfg.epsilon = f.epsilon;
  return cfg;
}

tl::Program load(const Flags& f) {
  std::ifstream in(f.file);
  if (!in) throw std::runtime_error("cannot open " + f.file);
  std::stringstream ss;
  ss << in.rdbuf();
  std::string dir = std::filesystem::path(f.file).parent_path().string();
  if (dir.empty()) dir = ".";
  return tl::analyze_program(ss.str(), dir);
}

tl::LossSpec loss_spec(const Flags& f) {
  tl::LossSpec loss;
  if (!f.surrogate.empty()) {
    if (f.surrogate.rfind("sigmoid", 0) != 0)
      throw std::runtime_error("unsupported surrogate '" + f.surrogate +
                               "' (expected sigmoid:T)");
    loss.surrogate = true;
    auto colon = f.surrogate.find(':');
    if (colon != std::string::npos)
      loss.surrogate_T = std::stod(f.surrogate.substr(colon + 1));
  }
  return loss;
}

void run_directives(const tl::Program& p, tl::Environment& env, const Flags& f) {
  bool forward = f.mode != "backward";
  for (auto& d : p.directives) {
    if (d.kind == tl::Directive::Kind::Query) {
      tl::QueryResult r = tl::answer_query(p, d.query, env, forward, fixpoint(f));
      if (!r.warning.empty()) std::cerr << "warning: " << r.warning << "\n";
      std::cout << d.query << " = " << tl::render_result(r) << "\n";
    } else if (d.kind == tl::Directive::Kind::WriteFile) {
      const tl::TensorValue* t = env.find(d.tensor);
      if (!t) throw std::runtime_error("write: tensor '" + d.tensor +
                                       "' was never computed");
      std::string path = d.path;
      if (!f.out.empty()) path = f.out;
      tl::save_tensor_file(path, d.tensor, *t);
    }
  }
}

int cmd_run(const Flags& f) {
  tl::Program p = load(f);
  tl::Environment env;
  tl::seed_environment(p, env);
  tl::forward_chain(p, env, fixpoint(f));
  bool any = false;
  for (auto& d : p.directives)
    any |= d.kind == tl::Directive::Kind::Query ||
           d.kind == tl::Directive::Kind::WriteFile;
  run_directives(p, env, f);
  if (!any) {
    // no directives: report every computed tensor
    for (auto& [name, t] : env.bindings) {
      if (env.provenance[name] != tl::Environment::Provenance::Computed) continue;
      tl::QueryResult r = tl::answer_query(p, name, env, true, fixpoint(f));
      std::cout << name << " = " << tl::render_result(r) << "\n";
    }
  }
  return 0;
}

int cmd_query(const Flags& f) {
  tl::Program p = load(f);
  tl::Environment env;
  tl::seed_environment(p, env);
  bool forward = f.mode != "backward";
  if (forward) tl::forward_chain(p, env, fixpoint(f));
  tl::QueryResult r = tl::answer_query(p, f.query, env, forward, fixpoint(f));
  if (!r.warning.empty()) std::cerr << "warning: " << r.warning << "\n";
  std::cout << tl::render_result(r) << "\n";
  return 0;
}

int cmd_grad(const Flags& f) {
  tl::Program p = load(f);
  tl::GradientProgram gp = tl::differentiate(p, loss_spec(f));
  std::string text = tl::print_program(gp.program);
  if (!f.out.empty()) {
    std::ofstream os(f.out);
    os << text;
  } else {
    std::cout << text;
  }
  return 0;
}

int cmd_train(const Flags& f) {
  tl::Program p = load(f);
  tl::LossSpec loss = loss_spec(f);
  tl::OptimizerConfig opt;
  opt.seed = f.seed;
  if (f.sweeps > 0) opt.epochs = f.sweeps;
  tl::Environment data;
  tl::seed_environment(p, data);
  tl::TrainReport report;
  tl::Environment trained = tl::train(p, loss, data, opt, &report);
  std::cout << "epochs " << report.loss_curve.size() << "\n";
  if (!report.loss_curve.empty())
    std::cout << "initial_loss " << report.loss_curve.front() << "\n";
  std::cout << "final_loss " << report.final_loss << "\n";
  if (report.diverged) std::cout << "diverged\n";
  if (!f.out.empty()) {
    for (auto& name : tl::learned_tensors(p, loss)) {
      std::filesystem::path dir(f.out);
      std::filesystem::create_directories(dir);
      tl::save_tensor_file((dir / (name + ".tns")).string(), name,
                           trained.bindings.at(name));
    }
  }
  return 0;
}

int cmd_embed(const Flags& f) {
  tl::Program p = load(f);
  tl::DomainPtr objects = tl::object_domain(p);
  tl::EmbeddingSpace e = tl::make_embedding_space(objects, f.D, f.seed);
  tl::EmbeddedProgram ep = tl::embed_program(p, e);
  std::cout << tl::print_program(ep.program);
  if (!f.out.empty()) {
    std::filesystem::path dir(f.out);
    std::filesystem::create_directories(dir);
    tl::save_tensor_file((dir / "Emb.tns").string(), "Emb", e.emb);
    for (auto& [name, t] : ep.program.file_tensors)
      tl::save_tensor_file((dir / (name + ".tns")).string(), name, t);
  }
  return 0;
}

int cmd_reason(const Flags& f) {
  tl::Program p = load(f);
  tl::DomainPtr objects = tl::object_domain(p);
  tl::EmbeddingSpace e = tl::make_embedding_space(objects, f.D, f.seed);
  tl::EmbeddedProgram ep = tl::embed_program(p, e);
  tl::ReasonerConfig cfg;
  cfg.temperature = f.T;
  if (f.sweeps > 0) cfg.max_sweeps = f.sweeps;
  cfg.forward = f.mode != "backward";
  tl::Environment env = tl::reason_embedded(ep, e, cfg);
  for (auto& name : ep.derived) {
    const tl::TensorValue* t = env.find(name);
    if (!t) continue;
    tl::TensorValue scores = tl::decode(*t, e).to_dense();
    std::string rel = ep.symbolic_name.count(name) ? ep.symbolic_name.at(name) : name;
    std::cout << rel << " = {";
    bool first = true;
    scores.for_each([&](const tl::Coord& c, double v) {
      bool in = f.T > 0.0
                    ? 1.0 / (1.0 + std::exp(-(v - cfg.threshold) / f.T)) > 0.5
                    : v > cfg.threshold;
      if (!in) return;
      if (!first) std::cout << ", ";
      first = false;
      std::cout << "(";
      for (size_t k = 0; k < c.size(); ++k)
        std::cout << (k ? "," : "") << e.domain->label(c[k]);
      std::cout << ")";
    });
    std::cout << "}\n";
  }
  return 0;
}

int cmd_repl(const Flags& f) {
  std::string accumulated;
  std::string line;
  std::cout << "tensor logic repl; blank line to quit\n";
  while (true) {
    std::cout << "tl> " << std::flush;
    if (!std::getline(std::cin, line)) break;
    if (line.empty()) break;
    try {
      std::string trimmed = line;
      while (!trimmed.empty() && trimmed.back() == ' ') trimmed.pop_back();
      if (!trimmed.empty() && trimmed.back() == '?') {
        tl::Program p = tl::analyze_program(accumulated);
        tl::Environment env;
        tl::seed_environment(p, env);
        bool forward = f.mode != "backward";
        if (forward) tl::forward_chain(p, env, fixpoint(f));
        tl::QueryResult r = tl::answer_query(
            p, trimmed.substr(0, trimmed.size() - 1), env, forward, fixpoint(f));
        if (!r.warning.empty()) std::cout << "warning: " << r.warning << "\n";
        std::cout << tl::render_result(r) << "\n";
      } else {
        // validate the statement before accepting it
        tl::analyze_program(accumulated + line + "\n");
        accumulated += line + "\n";
      }
    } catch (const std::exception& ex) {
      std::cout << "error: " << ex.what() << "\n";
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tensor logic interpreter"};
  app.require_subcommand(1);
  Flags f;

  auto add_common = [&](CLI::App* c, bool needs_file = true) {
    if (needs_file) c->add_option("file", f.file, "program file")->required();
    c->add_option("--seed", f.seed, "random seed");
    c->add_option("--sweeps", f.sweeps, "sweep / epoch budget");
    c->add_option("--epsilon", f.epsilon, "fixpoint convergence threshold");
    c->add_option("--mode", f.mode, "forward|backward")
        ->check(CLI::IsMember({"forward", "backward"}));
    c->add_option("--out", f.out, "output path");
    c->add_option("--T", f.T, "temperature");
    c->add_option("--D", f.D, "embedding dimension");
    c->add_option("--surrogate", f.surrogate, "step surrogate, e.g. sigmoid:1");
  };

  auto* run = app.add_subcommand("run", "evaluate a program's directives");
  add_common(run);
  auto* query = app.add_subcommand("query", "answer one query");
  add_common(query);
  query->add_option("query", f.query, "query text, e.g. 'Ancestor(Alice,x)'")
      ->required();
  auto* train = app.add_subcommand("train", "fit the program's free tensors");
  add_common(train);
  auto* grad = app.add_subcommand("grad", "emit the gradient program");
  add_common(grad);
  auto* embed = app.add_subcommand("embed", "embed a Datalog program");
  add_common(embed);
  auto* reason = app.add_subcommand("reason", "reason in embedding space");
  add_common(reason);
  auto* repl = app.add_subcommand("repl", "interactive session");
  add_common(repl, false);

  CLI11_PARSE(app, argc, argv);

  try {
    if (app.got_subcommand(run)) return cmd_run(f);
    if (app.got_subcommand(query)) return cmd_query(f);
    if (app.got_subcommand(train)) return cmd_train(f);
    if (app.got_subcommand(grad)) return cmd_grad(f);
    if (app.got_subcommand(embed)) return cmd_embed(f);
    if (app.got_subcommand(reason)) return cmd_reason(f);
    if (app.got_subcommand(repl)) return cmd_repl(f);
  } catch (const tl::ParseError& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 2;
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 1;
  }
  return 0;
}
