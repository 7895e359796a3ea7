// Command-line front end for the prompt-memory detection lab. Every verb is
// a thin wrapper over the library; errors exit nonzero with a JSON record on
// stderr.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "pmdet/common.hpp"
#include "pmdet/config.hpp"
#include "pmdet/data.hpp"
#include "pmdet/plots.hpp"
#include "pmdet/trainer.hpp"

namespace {

using nlohmann::json;

struct ConfigFlags {
  std::string config_file;
  std::map<std::string, std::string> overrides;

  // Registers --config plus one flag per config key so any key can be set on
  // the command line with its own dotted name.
  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_file, "flat key=value config file");
    for (const std::string& key : pmdet::Config::defaults().keys())
      cmd->add_option_function<std::string>(
          "--" + key,
          [this, key](const std::string& value) { overrides[key] = value; });
  }

  pmdet::Config resolve() const {
    pmdet::Config cfg = config_file.empty()
                            ? pmdet::Config::defaults()
                            : pmdet::Config::from_file(config_file);
    for (const auto& [k, v] : overrides) cfg.set(k, v);
    return cfg;
  }
};

pmdet::SceneSpec scene_spec_from(const pmdet::Config& cfg) {
  pmdet::SceneSpec spec;
  spec.height = spec.width = cfg.get_int("data.canvas");
  spec.min_objects = cfg.get_int("data.min_objects");
  spec.max_objects = cfg.get_int("data.max_objects");
  spec.num_classes = cfg.get_int("data.classes");
  spec.corruption = pmdet::corruption_from_name(cfg.get("data.corruption"));
  spec.strength = cfg.get_double("data.corruption_strength");
  return spec;
}

std::vector<int> parse_int_list(const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stoi(item));
  return out;
}

std::vector<std::string> parse_str_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(item);
  return out;
}

int fail(const std::string& kind, const std::string& detail) {
  json rec;
  rec["error"] = kind;
  rec["detail"] = detail;
  std::cerr << rec.dump() << "\n";
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale domain-adaptive detection with prompt memory"};
  app.require_subcommand(1);

  ConfigFlags gen_cfg, burn_cfg, adapt_cfg, eval_cfg, sweep_cfg, sel_cfg;

  // generate-data
  auto* gen = app.add_subcommand("generate-data",
                                 "render the synthetic two-domain benchmark");
  std::string gen_out;
  gen->add_option("--out", gen_out, "output root directory")->required();
  gen_cfg.attach(gen);

  // burn-in
  auto* burn = app.add_subcommand("burn-in",
                                  "stage 1: supervised source-only training");
  pmdet::RunPaths burn_paths;
  burn->add_option("--data", burn_paths.data_root)->required();
  burn->add_option("--val", burn_paths.val_root);
  burn->add_option("--out", burn_paths.out_dir)->required();
  burn->add_option("--resume", burn_paths.resume);
  burn_cfg.attach(burn);

  // adapt
  auto* adapt = app.add_subcommand(
      "adapt", "stage 2: cross-domain adaptation with prompt memory");
  pmdet::RunPaths adapt_paths;
  std::string adapt_burn_in;
  adapt->add_option("--data", adapt_paths.data_root)->required();
  adapt->add_option("--val", adapt_paths.val_root);
  adapt->add_option("--out", adapt_paths.out_dir)->required();
  adapt->add_option("--burn-in", adapt_burn_in)->required();
  adapt->add_option("--resume", adapt_paths.resume);
  adapt_cfg.attach(adapt);

  // eval
  auto* eval = app.add_subcommand("eval", "mAP@IoU on a labeled domain dir");
  std::string eval_ckpt, eval_data, eval_domain = "target", eval_out;
  double eval_iou = 0.5, eval_score = 0.0;
  eval->add_option("--ckpt", eval_ckpt)->required();
  eval->add_option("--data", eval_data, "domain dir with annotations.json")
      ->required();
  eval->add_option("--domain", eval_domain, "pools to use: source|target");
  eval->add_option("--iou", eval_iou);
  eval->add_option("--score-threshold", eval_score);
  eval->add_option("--out", eval_out, "append a metrics JSON line here");

  // export-features
  auto* exp = app.add_subcommand("export-features",
                                 "dump per-image or per-query features");
  std::string exp_ckpt, exp_src, exp_tgt, exp_layer = "encoder_mean", exp_out;
  exp->add_option("--ckpt", exp_ckpt)->required();
  exp->add_option("--source-data", exp_src)->required();
  exp->add_option("--target-data", exp_tgt)->required();
  exp->add_option("--layer", exp_layer, "encoder_mean|decoder_queries");
  exp->add_option("--out", exp_out)->required();

  // probe
  auto* probe = app.add_subcommand(
      "probe", "empirical H-divergence on two feature dumps");
  std::string probe_src_only, probe_adapted, probe_out;
  int probe_seeds = 3, probe_epochs = 200;
  probe->add_option("--source-only", probe_src_only)->required();
  probe->add_option("--adapted", probe_adapted)->required();
  probe->add_option("--out", probe_out)->required();
  probe->add_option("--seeds", probe_seeds);
  probe->add_option("--epochs", probe_epochs);

  // sweep-memory
  auto* sweep = app.add_subcommand("sweep-memory",
                                   "adapt once per memory size, report mAP");
  pmdet::RunPaths sweep_paths;
  std::string sweep_sizes = "1,4,10,16", sweep_burn_in, sweep_report;
  sweep->add_option("--sizes", sweep_sizes, "comma-separated pool sizes");
  sweep->add_option("--data", sweep_paths.data_root)->required();
  sweep->add_option("--val", sweep_paths.val_root);
  sweep->add_option("--out", sweep_paths.out_dir)->required();
  sweep->add_option("--burn-in", sweep_burn_in)->required();
  sweep->add_option("--report", sweep_report)->required();
  sweep_cfg.attach(sweep);

  // compare-selection
  auto* compare = app.add_subcommand(
      "compare-selection", "adapt once per selection strategy, report mAP");
  pmdet::RunPaths sel_paths;
  std::string sel_strategies = "random,kmeans,distribution";
  std::string sel_burn_in, sel_report;
  compare->add_option("--strategies", sel_strategies);
  compare->add_option("--data", sel_paths.data_root)->required();
  compare->add_option("--val", sel_paths.val_root);
  compare->add_option("--out", sel_paths.out_dir)->required();
  compare->add_option("--burn-in", sel_burn_in)->required();
  compare->add_option("--report", sel_report)->required();
  sel_cfg.attach(compare);

  // plot
  auto* plot = app.add_subcommand("plot", "render charts from JSON-lines");
  std::string plot_input, plot_out_dir;
  plot->add_option("--input", plot_input)->required();
  plot->add_option("--out-dir", plot_out_dir)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      const pmdet::Config cfg = gen_cfg.resolve();
      pmdet::generate_domain_pair(
          scene_spec_from(cfg), cfg.get_int("data.n_source"),
          cfg.get_int("data.n_target"),
          static_cast<std::uint64_t>(cfg.get_i64("data.seed")), gen_out);
      std::cout << "wrote " << gen_out << "/{source,target}\n";
    } else if (burn->parsed()) {
      const std::string ckpt =
          pmdet::burn_in_train(burn_cfg.resolve(), burn_paths);
      std::cout << "burn-in checkpoint: " << ckpt << "\n";
    } else if (adapt->parsed()) {
      const std::string ckpt =
          pmdet::adapt_train(adapt_cfg.resolve(), adapt_paths, adapt_burn_in);
      std::cout << "adapt checkpoint: " << ckpt << "\n";
    } else if (eval->parsed()) {
      const pmdet::EvalSummary summary = pmdet::evaluate_map(
          eval_ckpt, eval_data, pmdet::domain_from_name(eval_domain), eval_iou,
          eval_score);
      json rec;
      rec["format_version"] = 1;
      rec["map50"] = summary.result.map;
      json per_class = json::object();
      for (const auto& [cls, ap] : summary.result.ap_per_class)
        per_class[std::to_string(cls)] = ap;
      rec["map_per_class"] = per_class;
      rec["images"] = summary.images;
      std::cout << rec.dump() << "\n";
      if (!eval_out.empty()) {
        std::ofstream out(eval_out, std::ios::app);
        out << rec.dump() << "\n";
      }
    } else if (exp->parsed()) {
      pmdet::export_features(exp_ckpt, exp_src, exp_tgt,
                             pmdet::feature_layer_from_name(exp_layer),
                             exp_out);
      std::cout << "wrote " << exp_out << "\n";
    } else if (probe->parsed()) {
      pmdet::run_probe(probe_src_only, probe_adapted, probe_out, probe_seeds,
                       probe_epochs);
      std::cout << "wrote " << probe_out << "\n";
    } else if (sweep->parsed()) {
      pmdet::sweep_memory_size(sweep_cfg.resolve(), parse_int_list(sweep_sizes),
                               sweep_paths, sweep_burn_in, sweep_report);
      std::cout << "wrote " << sweep_report << "\n";
    } else if (compare->parsed()) {
      pmdet::compare_selection_strategies(
          sel_cfg.resolve(), parse_str_list(sel_strategies), sel_paths,
          sel_burn_in, sel_report);
      std::cout << "wrote " << sel_report << "\n";
    } else if (plot->parsed()) {
      const int n = pmdet::emit_plots(plot_input, plot_out_dir);
      if (n == 0) {
        std::cerr << json{{"error", "empty_input"},
                          {"detail", "no records to plot"}}
                         .dump()
                  << "\n";
        return 3;
      }
      std::cout << "wrote " << n << " charts to " << plot_out_dir << "\n";
    }
  } catch (const pmdet::ConfigError& e) {
    return fail("config_error", e.what());
  } catch (const pmdet::DomainError& e) {
    return fail("domain_error", e.what());
  } catch (const pmdet::DataError& e) {
    return fail("data_error", e.what());
  } catch (const pmdet::StateError& e) {
    return fail("state_error", e.what());
  } catch (const pmdet::IoError& e) {
    return fail("io_error", e.what());
  } catch (const pmdet::ParseError& e) {
    return fail("parse_error", e.what());
  } catch (const pmdet::NumericError& e) {
    return fail("numeric_error", e.what());
  } catch (const std::exception& e) {
    return fail("error", e.what());
  }
  return 0;
}
