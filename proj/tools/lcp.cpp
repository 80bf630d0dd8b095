// Command-line front end: data generation, training, pruning, evaluation
// and gradient reporting. Exit codes: 0 success, 1 runtime/numerical
// failure, 2 usage error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "lcp/checkpoint.hpp"
#include "lcp/dataset.hpp"
#include "lcp/eval.hpp"
#include "lcp/parallel.hpp"
#include "lcp/pruning.hpp"
#include "lcp/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Flat `key = value` config file; returned as --key=value tokens injected
// between the subcommand and the user's flags so explicit flags win.
std::vector<std::string> config_tokens(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw CLI::ValidationError("--config", "cannot open " + path);
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(is, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r");
      const auto b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (!key.empty()) tokens.push_back("--" + key + "=" + value);
  }
  return tokens;
}

void echo_config(const std::string& command, const json& values) {
  json j{{"record", "config"}, {"command", command}};
  for (auto it = values.begin(); it != values.end(); ++it) j[it.key()] = it.value();
  std::cout << j.dump() << "\n";
}

void require_input(const fs::path& p, const std::string& what) {
  if (!fs::exists(p))
    throw CLI::ValidationError(what, "missing input: " + p.string());
}

struct CommonFlags {
  std::uint64_t seed = 0;
  int threads = 0;
  std::string config_path;

  void attach(CLI::App* cmd) {
    cmd->add_option("--seed", seed, "master random seed");
    cmd->add_option("--threads", threads, "worker cap (0 = hardware)");
    cmd->add_option("--config", config_path, "flat key=value config file");
    cmd->parse_complete_callback([this]() { lcp::set_thread_cap(threads); });
  }
};

int cmd_gen_data(CLI::App* cmd, CommonFlags& common) {
  auto count = std::make_shared<std::int64_t>(500);
  auto out = std::make_shared<std::string>();
  auto min_size = std::make_shared<double>(12.0);
  auto max_size = std::make_shared<double>(28.0);
  auto max_objects = std::make_shared<std::int64_t>(3);
  auto max_overlap = std::make_shared<double>(0.2);
  cmd->add_option("--count", *count, "number of images");
  cmd->add_option("--out", *out, "output directory")->required();
  cmd->add_option("--min-size", *min_size, "smallest shape extent (px)");
  cmd->add_option("--max-size", *max_size, "largest shape extent (px)");
  cmd->add_option("--max-objects", *max_objects, "objects per image cap");
  cmd->add_option("--max-overlap", *max_overlap, "max pairwise box IoU");

  cmd->callback([=, &common]() {
    lcp::DatasetManifest m;
    m.seed = common.seed;
    m.count = *count;
    m.min_shape_size = *min_size;
    m.max_shape_size = *max_size;
    m.max_objects = *max_objects;
    m.max_overlap = *max_overlap;
    echo_config("gen-data", {{"seed", m.seed},
                             {"threads", common.threads},
                             {"count", m.count},
                             {"out", *out},
                             {"min_size", m.min_shape_size},
                             {"max_size", m.max_shape_size},
                             {"max_objects", m.max_objects},
                             {"max_overlap", m.max_overlap}});
    lcp::generate(m, *out);
    std::cout << json{{"record", "gen_data"},
                      {"count", m.count},
                      {"images", lcp::images_path(*out).string()},
                      {"annotations", lcp::annotations_path(*out).string()}}
                     .dump()
              << "\n";
  });
  return 0;
}

int cmd_train(CLI::App* cmd, CommonFlags& common) {
  auto data = std::make_shared<std::string>();
  auto out = std::make_shared<std::string>();
  auto init = std::make_shared<std::string>();
  auto epochs = std::make_shared<std::int64_t>(24);
  auto lr = std::make_shared<double>(5e-3);
  auto batch = std::make_shared<std::int64_t>(16);
  auto m_coef = std::make_shared<double>(50.0);
  auto match_threshold = std::make_shared<double>(0.5);
  auto regression_balance = std::make_shared<double>(0.1);
  cmd->add_option("--data", *data, "dataset directory")->required();
  cmd->add_option("--out", *out, "checkpoint path to write")->required();
  cmd->add_option("--init", *init,
                  "start from an existing checkpoint (masks are preserved)");
  cmd->add_option("--epochs", *epochs, "training epochs");
  cmd->add_option("--lr", *lr, "initial learning rate (x0.1 at 2/3)");
  cmd->add_option("--batch", *batch, "mini-batch size");
  cmd->add_option("--m", *m_coef, "GIoU loss coefficient");
  cmd->add_option("--match-threshold", *match_threshold, "positive IoU threshold");
  cmd->add_option("--regression-balance", *regression_balance,
                  "weight of L_r inside the optimized training objective");

  cmd->callback([=, &common]() {
    require_input(*data, "--data");
    require_input(lcp::images_path(*data), "--data");
    echo_config("train", {{"seed", common.seed},
                          {"threads", common.threads},
                          {"data", *data},
                          {"out", *out},
                          {"init", *init},
                          {"epochs", *epochs},
                          {"lr", *lr},
                          {"batch", *batch},
                          {"m", *m_coef},
                          {"match_threshold", *match_threshold},
                          {"regression_balance", *regression_balance}});
    auto samples = lcp::load_dataset(*data);
    lcp::ModelGraph model;
    if (init->empty()) {
      model = lcp::make_toy_detector(5, common.seed);
    } else {
      require_input(*init, "--init");
      model = lcp::load_model(*init);
    }
    lcp::TrainConfig cfg;
    cfg.epochs = *epochs;
    cfg.lr = *lr;
    cfg.batch_size = *batch;
    cfg.seed = common.seed;
    cfg.det.m = *m_coef;
    cfg.det.match_threshold = *match_threshold;
    cfg.regression_balance = *regression_balance;
    cfg.checkpoint_path = *out;
    cfg.log = &std::cout;
    lcp::TrainReport report = lcp::train(model, samples, cfg);
    lcp::save_model(model, *out);
    std::cout << json{{"record", "train_done"},
                      {"checkpoint", *out},
                      {"final_train_map", report.final_map}}
                     .dump()
              << "\n";
  });
  return 0;
}

int cmd_prune(CLI::App* cmd, CommonFlags& common) {
  auto data = std::make_shared<std::string>();
  auto model_path = std::make_shared<std::string>();
  auto out = std::make_shared<std::string>();
  auto eta = std::make_shared<double>(0.5);
  auto alpha = std::make_shared<double>(1.0);
  auto m_coef = std::make_shared<double>(50.0);
  auto gamma = std::make_shared<double>(1e-3);
  auto epochs_per_layer = std::make_shared<std::int64_t>(10);
  auto finetune_subset = std::make_shared<std::int64_t>(0);
  auto finetune_lr = std::make_shared<double>(1e-3);
  auto match_threshold = std::make_shared<double>(0.5);
  auto batch = std::make_shared<std::int64_t>(16);
  auto scoring_batches = std::make_shared<std::int64_t>(8);
  auto refine_steps = std::make_shared<std::int64_t>(8);
  auto baseline = std::make_shared<bool>(false);
  cmd->add_option("--data", *data, "dataset directory")->required();
  cmd->add_option("--model", *model_path, "trained checkpoint")->required();
  cmd->add_option("--out", *out, "output directory")->required();
  cmd->add_option("--eta", *eta, "pruning rate (fraction removed per layer)");
  cmd->add_option("--alpha", *alpha, "joint-loss weight of the auxiliary loss");
  cmd->add_option("--m", *m_coef, "GIoU loss coefficient");
  cmd->add_option("--gamma", *gamma, "refinement learning rate");
  cmd->add_option("--epochs-per-layer", *epochs_per_layer,
                  "fine-tune epochs per pruned layer");
  cmd->add_option("--finetune-subset", *finetune_subset,
                  "fine-tune on the first N of a seeded shuffle (0 = all)");
  cmd->add_option("--finetune-lr", *finetune_lr, "fine-tune learning rate");
  cmd->add_option("--match-threshold", *match_threshold, "positive IoU threshold");
  cmd->add_option("--batch", *batch, "mini-batch size");
  cmd->add_option("--scoring-batches", *scoring_batches,
                  "batches in the fixed scoring set");
  cmd->add_option("--refine-steps", *refine_steps, "SGD steps after selection");
  cmd->add_flag("--baseline", *baseline,
                "reconstruction-only baseline (alias for --alpha 0)");

  cmd->callback([=, &common]() {
    require_input(*data, "--data");
    require_input(*model_path, "--model");
    if (*baseline) *alpha = 0.0;
    fs::create_directories(*out);
    const fs::path report_path = fs::path(*out) / "prune_report.jsonl";
    const fs::path pruned_path = fs::path(*out) / "pruned.lcpm";
    std::ofstream report(report_path, std::ios::trunc);
    if (!report)
      throw std::runtime_error("cannot write " + report_path.string());

    json config{{"seed", common.seed},
                {"threads", common.threads},
                {"data", *data},
                {"model", *model_path},
                {"out", *out},
                {"eta", *eta},
                {"alpha", *alpha},
                {"m", *m_coef},
                {"gamma", *gamma},
                {"epochs_per_layer", *epochs_per_layer},
                {"finetune_subset", *finetune_subset},
                {"finetune_lr", *finetune_lr},
                {"match_threshold", *match_threshold},
                {"batch", *batch},
                {"scoring_batches", *scoring_batches},
                {"refine_steps", *refine_steps},
                {"mode", *alpha == 0.0 ? "reconstruction-only-baseline" : "lcp"}};
    echo_config("prune", config);
    json config_record{{"record", "config"}, {"command", "prune"}};
    for (auto it = config.begin(); it != config.end(); ++it)
      config_record[it.key()] = it.value();
    report << config_record.dump() << "\n";

    auto samples = lcp::load_dataset(*data);
    lcp::ModelGraph model = lcp::load_model(*model_path);
    const lcp::ModelGraph original = model.clone();
    lcp::PruneConfig cfg;
    cfg.eta = *eta;
    cfg.alpha = *alpha;
    cfg.m = *m_coef;
    cfg.gamma = *gamma;
    cfg.epochs_per_layer = *epochs_per_layer;
    cfg.finetune_subset = *finetune_subset;
    cfg.finetune_lr = *finetune_lr;
    cfg.match_threshold = *match_threshold;
    cfg.seed = common.seed;
    cfg.batch_size = *batch;
    cfg.scoring_batches = *scoring_batches;
    cfg.refine_steps = *refine_steps;
    cfg.checkpoint_path = (fs::path(*out) / "last_consistent.lcpm").string();
    cfg.log = &report;
    lcp::PruneResult result = lcp::prune_model(model, original, samples, cfg);
    report << result.ledger.to_json().dump() << "\n";
    lcp::save_model(model, pruned_path);
    std::cout << json{{"record", "prune_done"},
                      {"pruned_checkpoint", pruned_path.string()},
                      {"report", report_path.string()},
                      {"layers_pruned", result.masks.size()}}
                     .dump()
              << "\n";
  });
  return 0;
}

int cmd_eval(CLI::App* cmd, CommonFlags& common) {
  auto data = std::make_shared<std::string>();
  auto model_path = std::make_shared<std::string>();
  auto table = std::make_shared<bool>(false);
  cmd->add_option("--data", *data, "dataset directory")->required();
  cmd->add_option("--model", *model_path, "checkpoint to evaluate")->required();
  cmd->add_flag("--table", *table, "also print an aligned text table");

  cmd->callback([=, &common]() {
    require_input(*data, "--data");
    require_input(*model_path, "--model");
    echo_config("eval", {{"seed", common.seed},
                         {"threads", common.threads},
                         {"data", *data},
                         {"model", *model_path}});
    auto samples = lcp::load_dataset(*data);
    lcp::ModelGraph model = lcp::load_model(*model_path);
    lcp::EvalResult r = lcp::evaluate(model, samples);
    std::cout << r.to_json().dump() << "\n";
    if (*table) std::cout << r.table();
  });
  return 0;
}

int cmd_report_gradients(CLI::App* cmd) {
  auto report_path = std::make_shared<std::string>();
  cmd->add_option("--report", *report_path,
                  "prune_report.jsonl produced by the prune command")
      ->required();

  cmd->callback([=]() {
    require_input(*report_path, "--report");
    std::ifstream is(*report_path);
    std::string line;
    json ledger;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      json j = json::parse(line, nullptr, false);
      if (!j.is_discarded() && j.value("record", "") == "ledger") ledger = j;
    }
    if (ledger.is_null())
      throw std::runtime_error("no ledger record in " + *report_path);
    std::printf("layer   %%L_re   %%L_ac   %%L_ar\n");
    for (const auto& row : ledger["layers"]) {
      std::printf("%5lld %7.2f %7.2f %7.2f\n",
                  static_cast<long long>(row["layer"].get<std::int64_t>()),
                  row["pct_re"].get<double>(), row["pct_ac"].get<double>(),
                  row["pct_ar"].get<double>());
    }
  });
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"localization-aware channel pruning toolkit"};
  app.require_subcommand(1);

  std::map<std::string, CommonFlags> common;
  CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  CLI::App* train = app.add_subcommand("train", "train the toy detector");
  CLI::App* prune = app.add_subcommand("prune", "prune a trained detector layer by layer");
  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  CLI::App* report = app.add_subcommand("report-gradients",
                                        "render per-layer gradient percentages");
  for (CLI::App* cmd : {gen, train, prune, eval, report}) {
    cmd->option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    common[cmd->get_name()].attach(cmd);
  }
  cmd_gen_data(gen, common["gen-data"]);
  cmd_train(train, common["train"]);
  cmd_prune(prune, common["prune"]);
  cmd_eval(eval, common["eval"]);
  cmd_report_gradients(report);

  // Inject flat-config entries between the subcommand token and user flags;
  // TakeLast makes explicit flags override the file.
  std::vector<std::string> args(argv + 1, argv + argc);
  try {
    for (std::size_t i = 0; i < args.size(); ++i) {
      std::string value;
      if (args[i] == "--config" && i + 1 < args.size()) value = args[i + 1];
      else if (args[i].rfind("--config=", 0) == 0) value = args[i].substr(9);
      if (!value.empty()) {
        auto injected = config_tokens(value);
        args.insert(args.begin() + 1, injected.begin(), injected.end());
        break;
      }
    }
  } catch (const CLI::Error& e) {
    std::cerr << e.what() << "\n";
    return 2;
  }
  std::vector<const char*> cargv{argv[0]};
  for (const auto& a : args) cargv.push_back(a.c_str());

  try {
    app.parse(static_cast<int>(cargv.size()), cargv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  } catch (const lcp::NumericError& e) {
    std::cerr << "numerical abort: " << e.what() << "\n";
    if (!e.last_checkpoint.empty())
      std::cerr << "last consistent checkpoint: " << e.last_checkpoint << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
