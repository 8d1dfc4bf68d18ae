// Command-line front end: dataset generation, training, evaluation, the
// ablation grid, condition-weight reports and a gradient self-check.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "condfuse/harness.hpp"

namespace fs = std::filesystem;
using namespace cf;

namespace {

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw TensorError("cannot open '" + path + "' for writing");
  f << text;
}

KeyValueConfig gather_config(const std::string& config_path,
                             const std::vector<std::string>& overrides) {
  KeyValueConfig kv;
  if (!config_path.empty()) kv = KeyValueConfig::parse_file(config_path);
  for (const std::string& kvpair : overrides) {
    const size_t eq = kvpair.find('=');
    if (eq == std::string::npos)
      throw TensorError("--set expects key=value, got '" + kvpair + "'");
    kv.set(kvpair.substr(0, eq), kvpair.substr(eq + 1));
  }
  return kv;
}

int cmd_gen_data(const std::string& out_dir, int n_train, int n_val, int n_test, uint64_t seed,
                 int64_t hw) {
  fs::create_directories(out_dir);
  GeneratedSplits splits = generate_benchmark(n_train, n_val, n_test, seed, hw);
  write_dataset(splits.train, out_dir + "/train.cfd");
  if (!splits.val.scenes.empty()) write_dataset(splits.val, out_dir + "/val.cfd");
  if (!splits.test.scenes.empty()) write_dataset(splits.test, out_dir + "/test.cfd");
  Vocabulary::template_lexicon().write(out_dir + "/vocab.txt");
  std::cout << "wrote " << n_train << "/" << n_val << "/" << n_test << " scenes to " << out_dir
            << " (seed " << seed << ")\n";
  return 0;
}

int cmd_train(const std::string& data_dir, const std::string& out_dir, const KeyValueConfig& kv) {
  TrainConfig cfg = train_config_from(kv);
  fs::create_directories(out_dir);
  BenchmarkData data = load_benchmark(data_dir);
  std::ofstream log(out_dir + "/train.log");
  TrainOutcome outcome = train(cfg, data, &log);
  outcome.model->save(out_dir + "/checkpoint.cfw");
  write_text(out_dir + "/report.json", outcome.report.to_json_string() + "\n");
  // resolved configuration, so eval and report-weights can rebuild the model
  std::ostringstream resolved;
  for (const auto& [k, v] : to_key_values(cfg).values) resolved << k << " = " << v << "\n";
  write_text(out_dir + "/config.cfg", resolved.str());
  std::cout << "test mIoU " << outcome.report.miou_test << " (val " << outcome.report.miou_val
            << ", train " << outcome.report.miou_train << ")\n"
            << "checkpoint: " << out_dir << "/checkpoint.cfw\n";
  return 0;
}

std::unique_ptr<FusionModel> load_model(const std::string& checkpoint, const KeyValueConfig& kv) {
  TrainConfig cfg = train_config_from(kv);
  auto model = std::make_unique<FusionModel>(cfg.model_config(), cfg.seed);
  model->load(checkpoint);
  return model;
}

const std::vector<Scene>& pick_split(const BenchmarkData& data, const std::string& split) {
  if (split == "train") return data.train;
  if (split == "val") return data.val;
  if (split == "test") return data.test;
  throw TensorError("unknown split '" + split + "'");
}

int cmd_eval(const std::string& data_dir, const std::string& checkpoint, const KeyValueConfig& kv,
             const std::string& split) {
  BenchmarkData data = load_benchmark(data_dir);
  auto model = load_model(checkpoint, kv);
  Rng rng(train_config_from(kv).seed);
  EvalResult r = evaluate_miou(*model, pick_split(data, split), rng);
  std::cout << split << " mIoU " << r.miou << "\n";
  for (int c = 0; c < kNumClasses; ++c)
    if (r.per_class_iou[static_cast<size_t>(c)] >= 0.0)
      std::cout << "  iou[" << class_name(c) << "] " << r.per_class_iou[static_cast<size_t>(c)] << "\n";
  for (int cell = 0; cell < 8; ++cell)
    if (r.per_cell_scenes[static_cast<size_t>(cell)] > 0)
      std::cout << "  " << ConditionAttributes::cell_name(cell) << " "
                << r.per_cell_miou[static_cast<size_t>(cell)] << " ("
                << r.per_cell_scenes[static_cast<size_t>(cell)] << " scenes)\n";
  return 0;
}

int cmd_ablate(const std::string& data_dir, const std::string& out_csv, const KeyValueConfig& kv,
               const std::string& seeds_arg, int workers, const std::string& axes_filter) {
  TrainConfig base = train_config_from(kv);
  BenchmarkData data = load_benchmark(data_dir);
  std::vector<uint64_t> seeds;
  std::istringstream ss(seeds_arg);
  std::string item;
  while (std::getline(ss, item, ',')) seeds.push_back(std::stoull(item));
  if (seeds.empty()) throw TensorError("--seeds must list at least one seed");
  std::vector<AblationCell> grid = paper_ablation_grid(base);
  if (!axes_filter.empty()) {
    std::vector<AblationCell> filtered;
    std::istringstream as(axes_filter);
    std::vector<std::string> wanted;
    while (std::getline(as, item, ',')) wanted.push_back(item);
    for (const auto& cell : grid)
      if (std::find(wanted.begin(), wanted.end(), cell.axis) != wanted.end()) filtered.push_back(cell);
    grid = std::move(filtered);
  }
  std::cout << grid.size() << " grid cells x " << seeds.size() << " seeds\n";
  auto rows = run_ablation(grid, data, seeds, workers, &std::cout);
  write_text(out_csv, ablation_csv(rows));
  std::cout << "wrote " << out_csv << "\n";
  return 0;
}

int cmd_report_weights(const std::string& data_dir, const std::string& checkpoint,
                       const KeyValueConfig& kv, const std::string& split,
                       const std::string& out_prefix) {
  BenchmarkData data = load_benchmark(data_dir);
  auto model = load_model(checkpoint, kv);
  Rng rng(train_config_from(kv).seed);
  CaaWeightReport rep = report_caa_weights(*model, pick_split(data, split), rng);
  write_text(out_prefix + ".csv", caa_weights_csv(rep));
  write_text(out_prefix + ".svg", caa_weights_svg(rep));
  for (int c = 0; c < 8; ++c)
    std::cout << ConditionAttributes::cell_name(c) << " rgb " << rep.percent[static_cast<size_t>(c)][0]
              << "% lidar " << rep.percent[static_cast<size_t>(c)][1] << "% radar "
              << rep.percent[static_cast<size_t>(c)][2] << "% event "
              << rep.percent[static_cast<size_t>(c)][3] << "%\n";
  std::cout << "wrote " << out_prefix << ".csv and " << out_prefix << ".svg\n";
  return 0;
}

// Compact finite-difference self-check over the main trainable pieces.
int cmd_check_grad(uint64_t seed) {
  Rng rng(seed);
  double worst = 0.0;
  auto check_param = [&](const std::function<Tensor()>& fwd, Tensor param, int samples) {
    param.zero_grad();
    Tensor loss = fwd();
    backward(loss);
    std::vector<double> analytic = param.has_grad()
                                       ? param.grad()
                                       : std::vector<double>(static_cast<size_t>(param.numel()), 0.0);
    for (int s = 0; s < samples; ++s) {
      const int64_t i = rng.randint(param.numel());
      const double orig = param.data()[i];
      const double h = 1e-5;
      param.data()[i] = orig + h;
      const double f1 = fwd().item();
      param.data()[i] = orig - h;
      const double f2 = fwd().item();
      param.data()[i] = orig;
      const double numeric = (f1 - f2) / (2.0 * h);
      const double a = analytic[static_cast<size_t>(i)];
      worst = std::max(worst, std::fabs(a - numeric) / std::max({1e-3, std::fabs(a), std::fabs(numeric)}));
    }
  };

  // a small condition-aware stack end to end
  ModelConfig mc;
  mc.fusion = FusionKind::kCa2;
  FusionModel model(mc, seed);
  GeneratedSplits gen = generate_benchmark(2, 0, 0, seed);
  for (Scene& s : gen.train.scenes) normalize_scene(s, gen.train.stats);
  Rng frng(seed);
  auto model_loss = [&]() {
    std::vector<Tensor> logits;
    std::vector<const std::vector<uint8_t>*> gts;
    std::vector<Tensor> cts;
    std::vector<Tensor> texts;
    for (Scene& s : gen.train.scenes) {
      auto out = model.forward(s.images, frng);
      logits.push_back(out.logits);
      gts.push_back(&s.semantic);
      cts.push_back(reshape(out.ct, {1, 64}));
      texts.push_back(reshape(
          model.text_encoder().encode(build_condition_prompt(s.attrs).text, model.vocab()).pooled,
          {1, 64}));
    }
    return total_loss(logits, gts, concat(cts, 0), concat(texts, 0), model.temperature(), 0.5);
  };
  std::cout << "checking model-level gradients (sampled parameters)...\n";
  check_param(model_loss, model.params().get("backbone/shared/stem/w"), 6);
  check_param(model_loss, model.params().get("adapter/lidar/l1/mlp/fc1/w"), 4);
  check_param(model_loss, model.params().get("adapter/rgb/l2/blend"), 1);
  check_param(model_loss, model.params().get("fusion/ca2/l1/lidar/attn/k/w"), 4);
  check_param(model_loss, model.params().get("fusion/ca2/l2/ct_proj/w"), 4);
  check_param(model_loss, model.params().get("ct/query"), 4);
  check_param(model_loss, model.params().get("text/ctx"), 4);
  check_param(model_loss, model.params().get("cond/log_tau"), 1);
  check_param(model_loss, model.params().get("head/mix/w"), 4);

  std::cout << "max relative error " << worst << " (bound 1e-4)\n";
  if (worst > 1e-4) {
    std::cout << "FAIL\n";
    return 1;
  }
  std::cout << "OK\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"condition-aware multimodal fusion benchmark"};
  app.require_subcommand(1);

  std::string out_dir = "data", data_dir = "data", config_path, checkpoint, split = "test";
  std::string out_csv = "ablation.csv", out_prefix = "caa_weights", seeds_arg = "1,2,3", axes;
  std::vector<std::string> overrides;
  int n_train = 800, n_val = 160, n_test = 160, workers = 2;
  int64_t hw = 32;
  uint64_t seed = 2026;

  auto add_config_opts = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "key=value configuration file");
    cmd->add_option("--set", overrides, "override a configuration key (key=value)");
  };

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic benchmark");
  gen->add_option("--out", out_dir, "output directory")->required();
  gen->add_option("--train", n_train, "training scenes");
  gen->add_option("--val", n_val, "validation scenes");
  gen->add_option("--test", n_test, "test scenes");
  gen->add_option("--seed", seed, "generator seed");
  gen->add_option("--hw", hw, "scene height/width (divisible by 32)");

  auto* tr = app.add_subcommand("train", "train a model");
  tr->add_option("--data", data_dir, "dataset directory")->required();
  tr->add_option("--out", out_dir, "run output directory")->required();
  add_config_opts(tr);

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  ev->add_option("--data", data_dir, "dataset directory")->required();
  ev->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  ev->add_option("--split", split, "train|val|test");
  add_config_opts(ev);

  auto* ab = app.add_subcommand("ablate", "run the ablation grid");
  ab->add_option("--data", data_dir, "dataset directory")->required();
  ab->add_option("--out", out_csv, "output CSV path");
  ab->add_option("--seeds", seeds_arg, "comma-separated seeds");
  ab->add_option("--workers", workers, "parallel runs");
  ab->add_option("--axes", axes, "comma-separated axis filter");
  add_config_opts(ab);

  auto* rw = app.add_subcommand("report-weights", "per-condition CAA weight table and chart");
  rw->add_option("--data", data_dir, "dataset directory")->required();
  rw->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  rw->add_option("--split", split, "train|val|test");
  rw->add_option("--out-prefix", out_prefix, "output path prefix (.csv/.svg)");
  add_config_opts(rw);

  auto* cg = app.add_subcommand("check-grad", "finite-difference gradient self-check");
  cg->add_option("--seed", seed, "probe seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(out_dir, n_train, n_val, n_test, seed, hw);
    if (tr->parsed()) return cmd_train(data_dir, out_dir, gather_config(config_path, overrides));
    if (ev->parsed())
      return cmd_eval(data_dir, checkpoint, gather_config(config_path, overrides), split);
    if (ab->parsed())
      return cmd_ablate(data_dir, out_csv, gather_config(config_path, overrides), seeds_arg, workers,
                        axes);
    if (rw->parsed())
      return cmd_report_weights(data_dir, checkpoint, gather_config(config_path, overrides), split,
                                out_prefix);
    if (cg->parsed()) return cmd_check_grad(seed);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
