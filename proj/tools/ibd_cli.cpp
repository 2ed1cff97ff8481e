#include <CLI11.hpp>

#include <iostream>

#include "ibd/binio.hpp"
#include "ibd/error.hpp"
#include "ibd/pipeline.hpp"

namespace {

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  bool force = false;
  bool quiet = false;
};

ibd::PipelineConfig load(const Common& c) {
  ibd::PipelineConfig cfg = c.config.empty() ? ibd::PipelineConfig{} : ibd::load_config(c.config);
  for (const auto& o : c.overrides) ibd::apply_override(cfg, o);
  cfg.validate();
  return cfg;
}

void print_file(const std::filesystem::path& p) {
  const auto bytes = ibd::read_file(p);
  std::cout.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ibd: imperceptible backdoor attacks and detection"};
  app.require_subcommand(1);
  Common common;

  auto add = [&](const std::string& name, const std::string& help) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("-c,--config", common.config, "INI configuration file")->check(CLI::ExistingFile);
    sub->add_option("-s,--set", common.overrides, "override, section.key=value (repeatable)");
    sub->add_flag("-f,--force", common.force, "accept artifacts produced under a different configuration");
    sub->add_flag("-q,--quiet", common.quiet, "no progress on stderr");
    return sub;
  };
  auto* pretrain = add("pretrain", "build the dataset and train the clean model");
  auto* trigger = add("gen-trigger", "generate the stego payload or additive triggers");
  auto* poison = add("poison", "build the poisoned training and validation sets");
  auto* retrain = add("retrain", "retrain the clean model on the poisoned set");
  auto* eval = add("eval", "compute attack metrics into report.txt");
  auto* detect = add("detect", "reverse-engineer per-label triggers and flag outliers");
  auto* sweep = add("sweep", "trigger-size sweep and/or source-target grid");
  auto* run = add("run", "every stage in order");
  auto* show = add("show-config", "print the effective configuration");

  CLI11_PARSE(app, argc, argv);

  try {
    const ibd::PipelineConfig cfg = load(common);
    const ibd::StageOptions opt{common.force, !common.quiet};
    if (pretrain->parsed()) {
      ibd::stage_pretrain(cfg, opt);
      print_file(cfg.out / "pretrain.txt");
    } else if (trigger->parsed()) {
      ibd::stage_trigger(cfg, opt);
    } else if (poison->parsed()) {
      ibd::stage_poison(cfg, opt);
    } else if (retrain->parsed()) {
      ibd::stage_retrain(cfg, opt);
      print_file(cfg.out / ibd::artifact::kRetrainLog);
    } else if (eval->parsed()) {
      ibd::stage_eval(cfg, opt);
      print_file(cfg.out / ibd::artifact::kReport);
    } else if (detect->parsed()) {
      ibd::stage_detect(cfg, opt);
      print_file(cfg.out / ibd::artifact::kDetection);
    } else if (sweep->parsed()) {
      ibd::stage_sweep(cfg, opt);
      if (!cfg.sweep_sizes.empty()) print_file(cfg.out / ibd::artifact::kSweep);
      if (cfg.sweep_pairs) print_file(cfg.out / ibd::artifact::kGrid);
    } else if (run->parsed()) {
      ibd::stage_run(cfg, opt);
      print_file(cfg.out / ibd::artifact::kReport);
      if (cfg.detect) print_file(cfg.out / ibd::artifact::kDetection);
    } else if (show->parsed()) {
      std::cout << cfg.canonical();
    }
  } catch (const ibd::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return ibd::exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
