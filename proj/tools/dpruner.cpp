// Command-line front end: one pipeline stage per subcommand.
//
//   dpruner pretrain --config run.conf
//   dpruner prune --config run.conf --method magnitude --sparsity 0.5
//   dpruner masksim out/a/mask.mask out/b/mask.mask
//
// Settings are applied in order: built-in defaults, the --config file, the
// DPRUNER_OUT_DIR environment variable, then individual flags.

#include <cstdlib>
#include <iostream>
#include <map>
#include <string>

#include <CLI11.hpp>

#include "dpruner/pipeline.hpp"

namespace {

std::string flag_name(std::string key) {
  for (auto& c : key) {
    if (c == '_') c = '-';
  }
  return "--" + key;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual-importance pruning for small transformer language models"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_file;
  app.add_option("-c,--config", config_file, "key = value config file")->check(CLI::ExistingFile);

  std::map<std::string, std::string> overrides;
  for (const auto& key : dpruner::RunConfig::keys()) {
    app.add_option(flag_name(key), overrides[key], "config key " + key)
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  }

  auto* pretrain = app.add_subcommand("pretrain", "train the toy model, write model.ckpt and pretrain_loss.csv");
  auto* calibrate = app.add_subcommand("calibrate", "sample the open, domain and test corpora into caches");
  auto* general = app.add_subcommand("general-importance", "score weights on the open corpus, write general.scores");
  auto* prune = app.add_subcommand("prune", "score on the domain corpus, write dual.scores, mask.mask, pruned.ckpt");
  auto* eval = app.add_subcommand("eval", "perplexity of --checkpoint on a corpus");
  std::string eval_corpus = "test";
  eval->add_option("--corpus", eval_corpus, "open, domain or test")->check(CLI::IsMember({"open", "domain", "test"}));
  auto* masksim = app.add_subcommand("masksim", "similarity of two mask files");
  std::string mask_a, mask_b;
  masksim->add_option("mask_a", mask_a)->required();
  masksim->add_option("mask_b", mask_b)->required();
  auto* sweep = app.add_subcommand("sweep", "perplexity over sweep_sparsities with stored scores");
  auto* show = app.add_subcommand("show-config", "print the effective configuration");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    dpruner::RunConfig config;
    if (!config_file.empty()) dpruner::load_config_file(config_file, config);
    if (const char* env = std::getenv(dpruner::kOutDirEnv); env && *env) config.set("out_dir", env);
    for (const auto& [key, value] : overrides) {
      if (app.count(flag_name(key)) > 0) config.set(key, value);
    }

    auto& log = std::cerr;
    std::vector<std::filesystem::path> written;
    if (pretrain->parsed()) written = dpruner::cmd_pretrain(config, log);
    if (calibrate->parsed()) written = dpruner::cmd_calibrate(config, log);
    if (general->parsed()) written = dpruner::cmd_general_importance(config, log);
    if (prune->parsed()) written = dpruner::cmd_prune(config, log);
    if (eval->parsed()) written = dpruner::cmd_eval(config, dpruner::parse_corpus_role(eval_corpus), log);
    if (masksim->parsed()) written = dpruner::cmd_masksim(config, mask_a, mask_b, log);
    if (sweep->parsed()) written = dpruner::cmd_sweep(config, log);
    if (show->parsed()) {
      config.validate();
      std::cout << config.to_text();
    }
    for (const auto& p : written) std::cout << p.string() << "\n";
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "dpruner: " << e.what() << "\n";
    return dpruner::exit_code_for(e);
  }
}
