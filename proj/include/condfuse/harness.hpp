#pragma once

// Training loop, mIoU evaluation, parameter accounting, the ablation grid,
// and condition-weight reporting. Whole runs are deterministic in
// (config, seed, dataset); parallelism only spans independent runs.

#include <atomic>
#include <cstdio>
#include <iomanip>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "condfuse/model.hpp"

namespace cf {

// ---------------------------------------------------------------------------
// config
// ---------------------------------------------------------------------------

struct TrainConfig {
  FusionKind fusion = FusionKind::kCa2;
  CtTarget ct_target = CtTarget::kQ;
  bool shared_backbone = true;
  bool use_adapters = true;
  uint32_t modality_mask = 0b1111;
  int64_t input_hw = 32;
  double lambda_cond = 0.5;
  bool prompt_detailed = true;
  int epochs = 40;
  int batch_size = 8;
  double lr = 3e-4;
  double weight_decay = 0.01;
  double dropout_p = 0.2;
  uint64_t seed = 1;

  ModelConfig model_config() const {
    ModelConfig mc;
    mc.fusion = fusion;
    mc.ct_target = ct_target;
    mc.shared_backbone = shared_backbone;
    mc.use_adapters = use_adapters;
    mc.modality_mask = modality_mask;
    mc.input_hw = input_hw;
    return mc;
  }
  void validate() const {
    model_config().validate();
    require(epochs >= 1 && batch_size >= 1, "TrainConfig", "epochs and batch size must be positive");
    require(lr > 0.0 && weight_decay >= 0.0, "TrainConfig", "bad optimizer settings");
    require(dropout_p >= 0.0 && dropout_p <= 1.0, "TrainConfig", "bad dropout rate");
    require(lambda_cond >= 0.0, "TrainConfig", "lambda_cond must be non-negative");
  }
};

inline uint32_t modality_mask_from(const std::string& letters) {
  uint32_t mask = 0;
  for (char c : letters) {
    switch (std::tolower(static_cast<unsigned char>(c))) {
      case 'c': mask |= 1u << 0; break;
      case 'l': mask |= 1u << 1; break;
      case 'r': mask |= 1u << 2; break;
      case 'e': mask |= 1u << 3; break;
      default: op_fail("modalities", std::string("unknown modality letter '") + c + "'");
    }
  }
  return mask;
}

inline std::string modality_letters(uint32_t mask) {
  std::string s;
  const char* letters = "clre";
  for (int m = 0; m < 4; ++m)
    if (mask & (1u << m)) s += letters[m];
  return s;
}

// key=value configuration file; '#' starts a comment.
struct KeyValueConfig {
  std::map<std::string, std::string> values;

  static KeyValueConfig parse(std::istream& in) {
    KeyValueConfig cfg;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const size_t hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return std::string();
        const auto e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
      };
      line = trim(line);
      if (line.empty()) continue;
      const size_t eq = line.find('=');
      if (eq == std::string::npos)
        op_fail("config", "line " + std::to_string(lineno) + " is not key=value: '" + line + "'");
      cfg.values[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    return cfg;
  }
  static KeyValueConfig parse_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) op_fail("config", "cannot open '" + path + "'");
    return parse(f);
  }

  void set(const std::string& key, const std::string& value) { values[key] = value; }
  bool has(const std::string& key) const { return values.count(key) != 0; }
  std::string get(const std::string& key, const std::string& fallback) const {
    auto it = values.find(key);
    return it == values.end() ? fallback : it->second;
  }
};

inline KeyValueConfig to_key_values(const TrainConfig& cfg) {
  KeyValueConfig kv;
  kv.set("fusion.kind", to_string(cfg.fusion));
  kv.set("fusion.ct_target", to_string(cfg.ct_target));
  kv.set("model.shared_backbone", cfg.shared_backbone ? "true" : "false");
  kv.set("model.adapters", cfg.use_adapters ? "true" : "false");
  kv.set("model.modalities", modality_letters(cfg.modality_mask));
  kv.set("model.input_hw", std::to_string(cfg.input_hw));
  kv.set("train.lambda_cond", std::to_string(cfg.lambda_cond));
  kv.set("prompt.detailed", cfg.prompt_detailed ? "true" : "false");
  kv.set("train.epochs", std::to_string(cfg.epochs));
  kv.set("train.batch_size", std::to_string(cfg.batch_size));
  kv.set("train.lr", std::to_string(cfg.lr));
  kv.set("train.weight_decay", std::to_string(cfg.weight_decay));
  kv.set("train.dropout", std::to_string(cfg.dropout_p));
  kv.set("train.seed", std::to_string(cfg.seed));
  return kv;
}

inline TrainConfig train_config_from(const KeyValueConfig& kv) {
  TrainConfig cfg;
  cfg.fusion = fusion_kind_from(kv.get("fusion.kind", to_string(cfg.fusion)));
  cfg.ct_target = ct_target_from(kv.get("fusion.ct_target", to_string(cfg.ct_target)));
  cfg.shared_backbone = kv.get("model.shared_backbone", "true") == "true";
  cfg.use_adapters = kv.get("model.adapters", "true") == "true";
  cfg.modality_mask = modality_mask_from(kv.get("model.modalities", "clre"));
  cfg.input_hw = std::stoll(kv.get("model.input_hw", "32"));
  cfg.lambda_cond = std::stod(kv.get("train.lambda_cond", std::to_string(cfg.lambda_cond)));
  cfg.prompt_detailed = kv.get("prompt.detailed", "true") == "true";
  cfg.epochs = std::stoi(kv.get("train.epochs", std::to_string(cfg.epochs)));
  cfg.batch_size = std::stoi(kv.get("train.batch_size", std::to_string(cfg.batch_size)));
  cfg.lr = std::stod(kv.get("train.lr", std::to_string(cfg.lr)));
  cfg.weight_decay = std::stod(kv.get("train.weight_decay", std::to_string(cfg.weight_decay)));
  cfg.dropout_p = std::stod(kv.get("train.dropout", std::to_string(cfg.dropout_p)));
  cfg.seed = std::stoull(kv.get("train.seed", std::to_string(cfg.seed)));
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

// AdamW with decoupled weight decay on matrix-shaped parameters.
class AdamW {
 public:
  AdamW(ParamStore& ps, double lr, double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
        double eps = 1e-8)
      : lr_(lr), wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& [name, t] : ps.entries()) {
      State s;
      s.param = t;
      s.m.assign(static_cast<size_t>(t.numel()), 0.0);
      s.v.assign(static_cast<size_t>(t.numel()), 0.0);
      s.decay = t.ndim() >= 2;
      states_.push_back(std::move(s));
    }
  }

  void zero_grad() {
    for (auto& s : states_) s.param.zero_grad();
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (auto& s : states_) {
      const bool has_grad = s.param.has_grad();
      double* p = s.param.data();
      for (int64_t i = 0; i < s.param.numel(); ++i) {
        const double g = has_grad ? s.param.grad()[static_cast<size_t>(i)] : 0.0;
        s.m[static_cast<size_t>(i)] = beta1_ * s.m[static_cast<size_t>(i)] + (1.0 - beta1_) * g;
        s.v[static_cast<size_t>(i)] = beta2_ * s.v[static_cast<size_t>(i)] + (1.0 - beta2_) * g * g;
        const double mhat = s.m[static_cast<size_t>(i)] / bc1;
        const double vhat = s.v[static_cast<size_t>(i)] / bc2;
        p[i] -= lr_ * (mhat / (std::sqrt(vhat) + eps_) + (s.decay ? wd_ * p[i] : 0.0));
      }
    }
  }

 private:
  struct State {
    Tensor param;
    std::vector<double> m, v;
    bool decay = false;
  };
  std::vector<State> states_;
  int64_t t_ = 0;
  double lr_, wd_, beta1_, beta2_, eps_;
};

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

struct ConfusionMatrix {
  int num_classes = kNumClasses;
  std::vector<int64_t> cells;  // [gt * K + pred]

  explicit ConfusionMatrix(int k = kNumClasses)
      : num_classes(k), cells(static_cast<size_t>(k * k), 0) {}

  void add(int pred, int gt) { ++cells[static_cast<size_t>(gt * num_classes + pred)]; }

  int64_t gt_count(int c) const {
    int64_t n = 0;
    for (int p = 0; p < num_classes; ++p) n += cells[static_cast<size_t>(c * num_classes + p)];
    return n;
  }
  int64_t pred_count(int c) const {
    int64_t n = 0;
    for (int g = 0; g < num_classes; ++g) n += cells[static_cast<size_t>(g * num_classes + c)];
    return n;
  }
  // IoU per class; classes absent from the ground truth report -1.
  double iou(int c) const {
    const int64_t gt = gt_count(c);
    if (gt == 0) return -1.0;
    const int64_t inter = cells[static_cast<size_t>(c * num_classes + c)];
    const int64_t uni = gt + pred_count(c) - inter;
    return static_cast<double>(inter) / static_cast<double>(uni);
  }
  double miou() const {
    double sum = 0.0;
    int present = 0;
    for (int c = 0; c < num_classes; ++c) {
      const double v = iou(c);
      if (v >= 0.0) {
        sum += v;
        ++present;
      }
    }
    return present ? sum / present : 0.0;
  }
};

struct EvalResult {
  double miou = 0.0;
  std::vector<double> per_class_iou;            // -1 for absent classes
  std::array<double, 8> per_cell_miou{};        // weather x time cells
  std::array<int, 8> per_cell_scenes{};
  bool has_weights = false;
  std::array<std::array<double, 4>, 8> mean_weights{};  // CAA softmax weights per cell
};

inline EvalResult evaluate_miou(const FusionModel& model, const std::vector<Scene>& split,
                                Rng& fusion_rng) {
  require(!split.empty(), "evaluate_miou", "empty split");
  ConfusionMatrix global;
  std::array<ConfusionMatrix, 8> per_cell;
  std::array<std::array<double, 4>, 8> weight_sum{};
  std::array<int, 8> counts{};
  for (const Scene& s : split) {
    auto out = model.forward(s.images, fusion_rng);
    const auto pred = predict_classes(out.logits);
    const int cell = s.attrs.cell_index();
    ++counts[static_cast<size_t>(cell)];
    for (size_t i = 0; i < s.semantic.size(); ++i) {
      global.add(pred[i], s.semantic[i]);
      per_cell[static_cast<size_t>(cell)].add(pred[i], s.semantic[i]);
    }
    if (out.weights) {
      for (int m = 0; m < 4; ++m)
        weight_sum[static_cast<size_t>(cell)][static_cast<size_t>(m)] +=
            out.weights->w[static_cast<size_t>(m)];
    }
  }
  EvalResult r;
  r.miou = global.miou();
  for (int c = 0; c < kNumClasses; ++c) r.per_class_iou.push_back(global.iou(c));
  for (int cell = 0; cell < 8; ++cell) {
    r.per_cell_scenes[static_cast<size_t>(cell)] = counts[static_cast<size_t>(cell)];
    r.per_cell_miou[static_cast<size_t>(cell)] =
        counts[static_cast<size_t>(cell)] ? per_cell[static_cast<size_t>(cell)].miou() : -1.0;
  }
  if (model.config().fusion == FusionKind::kCaa) {
    r.has_weights = true;
    for (int cell = 0; cell < 8; ++cell)
      for (int m = 0; m < 4; ++m)
        r.mean_weights[static_cast<size_t>(cell)][static_cast<size_t>(m)] =
            counts[static_cast<size_t>(cell)]
                ? weight_sum[static_cast<size_t>(cell)][static_cast<size_t>(m)] /
                      counts[static_cast<size_t>(cell)]
                : 0.0;
  }
  return r;
}

// ---------------------------------------------------------------------------
// reports
// ---------------------------------------------------------------------------

struct RunReport {
  uint64_t seed = 0;
  double miou_train = 0.0, miou_val = 0.0, miou_test = 0.0;
  std::vector<double> per_class_iou_test;
  std::array<double, 8> per_cell_miou_test{};
  bool has_caa_weights = false;
  std::array<std::array<double, 4>, 8> caa_weights{};  // mean softmax weights per cell
  int64_t param_count = 0;
  std::vector<double> loss_curve;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["seed"] = seed;
    j["miou"] = {{"train", miou_train}, {"val", miou_val}, {"test", miou_test}};
    j["per_class_iou_test"] = per_class_iou_test;
    nlohmann::json cells;
    for (int c = 0; c < 8; ++c)
      cells[ConditionAttributes::cell_name(c)] = per_cell_miou_test[static_cast<size_t>(c)];
    j["per_cell_miou_test"] = cells;
    if (has_caa_weights) {
      nlohmann::json wc;
      for (int c = 0; c < 8; ++c)
        wc[ConditionAttributes::cell_name(c)] = caa_weights[static_cast<size_t>(c)];
      j["caa_weights"] = wc;
    }
    j["param_count"] = param_count;
    j["loss_curve"] = loss_curve;
    return j;
  }
  std::string to_json_string() const { return to_json().dump(2); }
};

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

struct BenchmarkData {
  std::vector<Scene> train, val, test;  // normalized in place
  NormStats stats;
};

inline BenchmarkData prepare_benchmark(GeneratedSplits splits) {
  BenchmarkData data;
  data.stats = splits.train.stats;
  auto norm_move = [&data](std::vector<Scene>& from, std::vector<Scene>& to) {
    to = std::move(from);
    for (Scene& s : to) normalize_scene(s, data.stats);
  };
  norm_move(splits.train.scenes, data.train);
  norm_move(splits.val.scenes, data.val);
  norm_move(splits.test.scenes, data.test);
  return data;
}

inline BenchmarkData load_benchmark(const std::string& dir) {
  GeneratedSplits splits;
  splits.train = read_dataset(dir + "/train.cfd");
  splits.val = read_dataset(dir + "/val.cfd");
  splits.test = read_dataset(dir + "/test.cfd");
  return prepare_benchmark(std::move(splits));
}

struct TrainOutcome {
  std::unique_ptr<FusionModel> model;
  RunReport report;
};

// Deterministic in (cfg, dataset): every random stream forks from cfg.seed.
inline TrainOutcome train(const TrainConfig& cfg, const BenchmarkData& data,
                          std::ostream* log = nullptr) {
  cfg.validate();
  require(!data.train.empty(), "train", "training split is empty");
  auto model = std::make_unique<FusionModel>(cfg.model_config(), cfg.seed);
  AdamW opt(model->params(), cfg.lr, cfg.weight_decay);
  Rng shuffle_rng = Rng(cfg.seed).fork("shuffle");
  Rng dropout_rng = Rng(cfg.seed).fork("dropout");
  Rng fusion_rng = Rng(cfg.seed).fork("fusion");
  const std::vector<int> active = cfg.model_config().active_modalities();
  const bool condition_aware = cfg.model_config().condition_aware();
  const bool use_cond_loss = condition_aware && cfg.lambda_cond > 0.0;
  const Vocabulary& vocab = model->vocab();

  RunReport report;
  report.seed = cfg.seed;
  report.param_count = count_parameters(*model).total;

  std::vector<size_t> order(data.train.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  int64_t step_index = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng.engine());
    double epoch_loss = 0.0;
    int64_t batches = 0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
      const size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
      std::vector<Tensor> logits;
      std::vector<const std::vector<uint8_t>*> gts;
      std::vector<Tensor> ct_rows;
      std::vector<std::string> prompt_texts;
      std::vector<std::array<std::string, 5>> attr_texts;
      for (size_t bi = start; bi < end; ++bi) {
        const Scene& scene = data.train[order[bi]];
        auto inputs = modality_dropout(scene.images, cfg.dropout_p, dropout_rng, active);
        auto out = model->forward(inputs, fusion_rng);
        logits.push_back(out.logits);
        gts.push_back(&scene.semantic);
        if (use_cond_loss) {
          ct_rows.push_back(reshape(out.ct, {1, out.ct.numel()}));
          ConditionPrompt prompt = build_condition_prompt(scene.attrs);
          if (cfg.prompt_detailed) {
            prompt_texts.push_back(prompt.text);
            std::array<std::string, 5> slots;
            for (int s = 0; s < 5; ++s) slots[static_cast<size_t>(s)] = prompt.attribute_tokens[static_cast<size_t>(s)];
            attr_texts.push_back(slots);
          } else {
            // high-level single-token prompt, the paper's ablation row 1
            prompt_texts.push_back(weather_adjective(scene.attrs.weather));
          }
        }
      }

      Tensor loss;
      if (use_cond_loss) {
        // encode each distinct string once per step; rows share the node
        std::map<std::string, Tensor> encoded;
        auto pooled_row = [&](const std::string& text) {
          auto it = encoded.find(text);
          if (it == encoded.end()) {
            Tensor row =
                reshape(model->text_encoder().encode(text, vocab).pooled, {1, model->config().d_ct});
            it = encoded.emplace(text, row).first;
          }
          return it->second;
        };
        std::vector<Tensor> prompt_rows;
        for (const std::string& t : prompt_texts) prompt_rows.push_back(pooled_row(t));
        Tensor texts = prompt_rows.size() == 1 ? prompt_rows[0] : concat(prompt_rows, 0);
        Tensor cts = ct_rows.size() == 1 ? ct_rows[0] : concat(ct_rows, 0);
        std::vector<Tensor> slots;
        if (cfg.prompt_detailed) {
          for (int s = 0; s < 5; ++s) {
            std::vector<Tensor> rows;
            for (const auto& a : attr_texts) rows.push_back(pooled_row(a[static_cast<size_t>(s)]));
            slots.push_back(rows.size() == 1 ? rows[0] : concat(rows, 0));
          }
        }
        loss = total_loss(logits, gts, cts, texts, model->temperature(), cfg.lambda_cond, slots);
      } else {
        loss = total_loss(logits, gts, Tensor(), Tensor(), Tensor(), 0.0);
      }

      if (!std::isfinite(loss.item()))
        op_fail("train", "non-finite loss at step " + std::to_string(step_index));
      opt.zero_grad();
      backward(loss);
      opt.step();
      epoch_loss += loss.item();
      ++batches;
      ++step_index;
    }
    report.loss_curve.push_back(epoch_loss / static_cast<double>(batches));
    if (log)
      (*log) << "epoch " << epoch + 1 << "/" << cfg.epochs << " loss " << std::setprecision(8)
             << report.loss_curve.back() << "\n";
  }

  Rng eval_rng = Rng(cfg.seed).fork("eval_fusion");
  report.miou_train = evaluate_miou(*model, data.train, eval_rng).miou;
  report.miou_val = data.val.empty() ? -1.0 : evaluate_miou(*model, data.val, eval_rng).miou;
  if (!data.test.empty()) {
    EvalResult test = evaluate_miou(*model, data.test, eval_rng);
    report.miou_test = test.miou;
    report.per_class_iou_test = test.per_class_iou;
    report.per_cell_miou_test = test.per_cell_miou;
    report.has_caa_weights = test.has_weights;
    report.caa_weights = test.mean_weights;
  } else {
    report.miou_test = -1.0;
  }
  return {std::move(model), std::move(report)};
}

// ---------------------------------------------------------------------------
// parameter reduction accounting
// ---------------------------------------------------------------------------

struct ParamComparison {
  int64_t shared_total = 0;       // shared backbone + adapters, as configured
  int64_t reference_total = 0;    // per-modality backbones, no adapters
  int64_t shared_backbone_fusion = 0;
  int64_t reference_backbone_fusion = 0;
  int64_t shared_base_total = 0;     // both sides without the condition head
  int64_t reference_base_total = 0;

  double total_ratio() const {
    return static_cast<double>(shared_total) / static_cast<double>(reference_total);
  }
  // the reduction the sharing+adapter design buys on the stack it changes
  double backbone_fusion_ratio() const {
    return static_cast<double>(shared_backbone_fusion) / static_cast<double>(reference_backbone_fusion);
  }
  double base_total_ratio() const {
    return static_cast<double>(shared_base_total) / static_cast<double>(reference_base_total);
  }
};

inline ParamComparison compare_with_reference(const TrainConfig& cfg) {
  TrainConfig shared_cfg = cfg;
  shared_cfg.shared_backbone = true;
  shared_cfg.use_adapters = true;
  TrainConfig ref_cfg = cfg;
  ref_cfg.shared_backbone = false;
  ref_cfg.use_adapters = false;
  FusionModel shared_model(shared_cfg.model_config(), cfg.seed);
  FusionModel ref_model(ref_cfg.model_config(), cfg.seed);
  ParamComparison out;
  out.shared_total = count_parameters(shared_model).total;
  out.reference_total = count_parameters(ref_model).total;
  auto backbone_fusion = [](const FusionModel& m) {
    const ParamStore& ps = m.params();
    return ps.elements_with_prefix("backbone") + ps.elements_with_prefix("adapter") +
           ps.elements_with_prefix("fusion");
  };
  out.shared_backbone_fusion = backbone_fusion(shared_model);
  out.reference_backbone_fusion = backbone_fusion(ref_model);
  // the condition head (CT generator, text encoder) is identical in both
  // designs; the base comparison removes it from each side
  auto condition_head = [](const FusionModel& m) {
    const ParamStore& ps = m.params();
    return ps.elements_with_prefix("ct") + ps.elements_with_prefix("text") +
           ps.elements_with_prefix("cond");
  };
  out.shared_base_total = out.shared_total - condition_head(shared_model);
  out.reference_base_total = out.reference_total - condition_head(ref_model);
  return out;
}

// ---------------------------------------------------------------------------
// ablation grid
// ---------------------------------------------------------------------------

struct AblationCell {
  std::string axis, value;
  TrainConfig cfg;
};

struct AblationRow {
  std::string axis, value;
  std::string seed_label;  // seed number, or "mean"/"std" summary rows
  bool failed = false;
  std::string error;
  double miou = 0.0;
  std::array<double, 8> per_cell{};
};

// The six ablation axes at toy scale.
inline std::vector<AblationCell> paper_ablation_grid(const TrainConfig& base) {
  std::vector<AblationCell> grid;
  for (FusionKind kind : {FusionKind::kMean, FusionKind::kRandom, FusionKind::kLearnedStatic,
                          FusionKind::kCaa, FusionKind::kCa2}) {
    AblationCell c{"fusion_kind", to_string(kind), base};
    c.cfg.fusion = kind;
    grid.push_back(c);
  }
  for (CtTarget t : {CtTarget::kQ, CtTarget::kKv, CtTarget::kQkv, CtTarget::kNone}) {
    AblationCell c{"ct_target", to_string(t), base};
    c.cfg.fusion = FusionKind::kCa2;
    c.cfg.ct_target = t;
    grid.push_back(c);
  }
  for (double lambda : {0.0, base.lambda_cond}) {
    AblationCell c{"lambda_cond", lambda == 0.0 ? "0" : "default", base};
    c.cfg.lambda_cond = lambda;
    grid.push_back(c);
  }
  for (bool detailed : {false, true}) {
    AblationCell c{"prompt", detailed ? "detailed" : "single_attribute", base};
    c.cfg.prompt_detailed = detailed;
    grid.push_back(c);
  }
  for (const char* mods : {"c", "cl", "clr", "clre"}) {
    AblationCell c{"modalities", mods, base};
    c.cfg.modality_mask = modality_mask_from(mods);
    grid.push_back(c);
  }
  for (bool shared : {true, false}) {
    AblationCell c{"backbone", shared ? "shared" : "per_modality", base};
    c.cfg.shared_backbone = shared;
    grid.push_back(c);
  }
  return grid;
}

// Runs grid x seeds on a small worker pool; failed runs are recorded and the
// grid continues. Appends mean/std summary rows per cell.
inline std::vector<AblationRow> run_ablation(const std::vector<AblationCell>& grid,
                                             const BenchmarkData& data,
                                             const std::vector<uint64_t>& seeds, int workers = 2,
                                             std::ostream* progress = nullptr) {
  struct Task {
    size_t cell;
    uint64_t seed;
  };
  std::vector<Task> tasks;
  for (size_t c = 0; c < grid.size(); ++c)
    for (uint64_t s : seeds) tasks.push_back({c, s});
  std::vector<AblationRow> rows(tasks.size());
  std::atomic<size_t> next{0};
  std::mutex log_mutex;
  auto worker = [&] {
    for (;;) {
      const size_t i = next.fetch_add(1);
      if (i >= tasks.size()) return;
      const Task& t = tasks[i];
      AblationRow row;
      row.axis = grid[t.cell].axis;
      row.value = grid[t.cell].value;
      row.seed_label = std::to_string(t.seed);
      try {
        TrainConfig cfg = grid[t.cell].cfg;
        cfg.seed = t.seed;
        TrainOutcome outcome = train(cfg, data);
        row.miou = outcome.report.miou_test;
        row.per_cell = outcome.report.per_cell_miou_test;
      } catch (const std::exception& e) {
        row.failed = true;
        row.error = e.what();
      }
      if (progress) {
        std::lock_guard<std::mutex> lock(log_mutex);
        (*progress) << row.axis << "=" << row.value << " seed " << row.seed_label
                    << (row.failed ? " FAILED: " + row.error
                                   : " mIoU " + std::to_string(row.miou))
                    << "\n";
      }
      rows[i] = std::move(row);
    }
  };
  std::vector<std::thread> pool;
  const int n = std::max(1, workers);
  for (int i = 0; i < n; ++i) pool.emplace_back(worker);
  for (auto& th : pool) th.join();

  // mean/std per grid cell over its seeds
  std::vector<AblationRow> out;
  for (size_t c = 0; c < grid.size(); ++c) {
    std::vector<const AblationRow*> cell_rows;
    for (size_t i = 0; i < tasks.size(); ++i)
      if (tasks[i].cell == c) {
        out.push_back(rows[i]);
        if (!rows[i].failed) cell_rows.push_back(&rows[i]);
      }
    if (cell_rows.empty()) continue;
    AblationRow mean_row, std_row;
    mean_row.axis = std_row.axis = grid[c].axis;
    mean_row.value = std_row.value = grid[c].value;
    mean_row.seed_label = "mean";
    std_row.seed_label = "std";
    const double n_runs = static_cast<double>(cell_rows.size());
    for (const AblationRow* r : cell_rows) {
      mean_row.miou += r->miou / n_runs;
      for (int cell = 0; cell < 8; ++cell)
        mean_row.per_cell[static_cast<size_t>(cell)] += r->per_cell[static_cast<size_t>(cell)] / n_runs;
    }
    for (const AblationRow* r : cell_rows) {
      std_row.miou += (r->miou - mean_row.miou) * (r->miou - mean_row.miou) / n_runs;
      for (int cell = 0; cell < 8; ++cell) {
        const double d =
            r->per_cell[static_cast<size_t>(cell)] - mean_row.per_cell[static_cast<size_t>(cell)];
        std_row.per_cell[static_cast<size_t>(cell)] += d * d / n_runs;
      }
    }
    std_row.miou = std::sqrt(std_row.miou);
    for (int cell = 0; cell < 8; ++cell)
      std_row.per_cell[static_cast<size_t>(cell)] = std::sqrt(std_row.per_cell[static_cast<size_t>(cell)]);
    out.push_back(mean_row);
    out.push_back(std_row);
  }
  return out;
}

// Fixed column order: axis, value, seed, mIoU, then the eight condition cells.
inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "axis,value,seed,miou";
  for (int c = 0; c < 8; ++c) os << ",miou_" << ConditionAttributes::cell_name(c);
  os << "\n";
  os.precision(17);
  for (const AblationRow& r : rows) {
    os << r.axis << ',' << r.value << ',' << r.seed_label << ',';
    if (r.failed) {
      os << "failed";
      for (int c = 0; c < 8; ++c) os << ",failed";
    } else {
      os << r.miou;
      for (int c = 0; c < 8; ++c) os << ',' << r.per_cell[static_cast<size_t>(c)];
    }
    os << "\n";
  }
  return os.str();
}

inline std::vector<AblationRow> parse_ablation_csv(const std::string& csv) {
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);  // header
  std::vector<AblationRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::istringstream ls(line);
    std::string item;
    while (std::getline(ls, item, ',')) fields.push_back(item);
    require(fields.size() == 12, "parse_ablation_csv", "expected 12 columns, got " +
                                                            std::to_string(fields.size()));
    AblationRow r;
    r.axis = fields[0];
    r.value = fields[1];
    r.seed_label = fields[2];
    if (fields[3] == "failed") {
      r.failed = true;
    } else {
      r.miou = std::stod(fields[3]);
      for (int c = 0; c < 8; ++c) r.per_cell[static_cast<size_t>(c)] = std::stod(fields[static_cast<size_t>(4 + c)]);
    }
    rows.push_back(r);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// CAA weight report
// ---------------------------------------------------------------------------

struct CaaWeightReport {
  std::array<std::array<double, 4>, 8> percent{};  // mean weights x100 per cell
  std::array<int, 8> scenes{};
};

inline CaaWeightReport report_caa_weights(const FusionModel& model, const std::vector<Scene>& split,
                                          Rng& fusion_rng) {
  require(model.config().fusion == FusionKind::kCaa, "report_caa_weights",
          "model fusion kind is " + to_string(model.config().fusion) + ", expected caa");
  EvalResult r = evaluate_miou(model, split, fusion_rng);
  CaaWeightReport rep;
  for (int c = 0; c < 8; ++c) {
    rep.scenes[static_cast<size_t>(c)] = r.per_cell_scenes[static_cast<size_t>(c)];
    for (int m = 0; m < 4; ++m)
      rep.percent[static_cast<size_t>(c)][static_cast<size_t>(m)] =
          100.0 * r.mean_weights[static_cast<size_t>(c)][static_cast<size_t>(m)];
  }
  return rep;
}

inline std::string caa_weights_csv(const CaaWeightReport& rep) {
  std::ostringstream os;
  os << "cell,scenes,rgb,lidar,radar,event\n";
  os.precision(17);
  for (int c = 0; c < 8; ++c) {
    os << ConditionAttributes::cell_name(c) << ',' << rep.scenes[static_cast<size_t>(c)];
    for (int m = 0; m < 4; ++m) os << ',' << rep.percent[static_cast<size_t>(c)][static_cast<size_t>(m)];
    os << "\n";
  }
  return os.str();
}

// Stacked horizontal bars, one row per condition cell, one segment per
// modality, matching the weight-analysis figure layout.
inline std::string caa_weights_svg(const CaaWeightReport& rep) {
  const int bar_h = 26, gap = 10, left = 110, top = 30, bar_w = 460;
  const int height = top + 8 * (bar_h + gap) + 40;
  const char* colors[4] = {"#4878a8", "#e0a030", "#70ad70", "#c05050"};
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << left + bar_w + 40 << "\" height=\""
     << height << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<text x=\"" << left << "\" y=\"18\" font-size=\"14\">Mean fusion weights per condition (%)"
     << "</text>\n";
  os << std::fixed << std::setprecision(0);
  for (int c = 0; c < 8; ++c) {
    const int y = top + c * (bar_h + gap);
    os << "<text x=\"4\" y=\"" << y + bar_h - 8 << "\">" << ConditionAttributes::cell_name(c)
       << "</text>\n";
    double x = left;
    for (int m = 0; m < 4; ++m) {
      const double w = rep.percent[static_cast<size_t>(c)][static_cast<size_t>(m)] / 100.0 * bar_w;
      os << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << w << "\" height=\"" << bar_h
         << "\" fill=\"" << colors[m] << "\"/>\n";
      if (w > 24.0)
        os << "<text x=\"" << x + w / 2 - 8 << "\" y=\"" << y + bar_h - 8
           << "\" fill=\"white\">" << rep.percent[static_cast<size_t>(c)][static_cast<size_t>(m)]
           << "</text>\n";
      x += w;
    }
  }
  const int ly = top + 8 * (bar_h + gap) + 16;
  double lx = left;
  for (int m = 0; m < 4; ++m) {
    os << "<rect x=\"" << lx << "\" y=\"" << ly - 11 << "\" width=\"12\" height=\"12\" fill=\""
       << colors[m] << "\"/>\n";
    os << "<text x=\"" << lx + 16 << "\" y=\"" << ly << "\">" << modality_name(m) << "</text>\n";
    lx += 100;
  }
  os << "</svg>\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// condition probe
// ---------------------------------------------------------------------------

// Trains an 8-way logistic regression on the model's CT embeddings of the
// probe split and reports accuracy on the eval split.
inline double condition_probe_accuracy(const FusionModel& model, const std::vector<Scene>& probe_split,
                                       const std::vector<Scene>& eval_split, uint64_t seed = 17) {
  require(model.config().condition_aware(), "condition_probe_accuracy",
          "model has no condition token");
  Rng fusion_rng = Rng(seed).fork("probe_fusion");
  auto collect = [&](const std::vector<Scene>& split, std::vector<double>& x,
                     std::vector<int64_t>& y) {
    for (const Scene& s : split) {
      Tensor ct = model.forward(s.images, fusion_rng).ct;
      x.insert(x.end(), ct.vec().begin(), ct.vec().end());
      y.push_back(s.attrs.cell_index());
    }
  };
  std::vector<double> xtr_v, xte_v;
  std::vector<int64_t> ytr, yte;
  collect(probe_split, xtr_v, ytr);
  collect(eval_split, xte_v, yte);
  const int64_t d = model.config().d_ct;
  Tensor xtr = Tensor::from(std::move(xtr_v), {static_cast<int64_t>(ytr.size()), d});
  Tensor xte = Tensor::from(std::move(xte_v), {static_cast<int64_t>(yte.size()), d});

  Tensor w = Tensor::zeros({d, 8}, true);
  Tensor b = Tensor::zeros({8}, true);
  std::vector<double> mw(static_cast<size_t>(d * 8), 0.0), vw(mw), mb(8, 0.0), vb(8, 0.0);
  for (int step = 1; step <= 300; ++step) {
    w.zero_grad();
    b.zero_grad();
    Tensor loss = cross_entropy_mean(add_rows(matmul(xtr, w), b), ytr);
    backward(loss);
    auto adam = [&](Tensor& p, std::vector<double>& m, std::vector<double>& v) {
      for (int64_t i = 0; i < p.numel(); ++i) {
        const double g = p.grad()[static_cast<size_t>(i)];
        m[static_cast<size_t>(i)] = 0.9 * m[static_cast<size_t>(i)] + 0.1 * g;
        v[static_cast<size_t>(i)] = 0.999 * v[static_cast<size_t>(i)] + 0.001 * g * g;
        const double mh = m[static_cast<size_t>(i)] / (1.0 - std::pow(0.9, step));
        const double vh = v[static_cast<size_t>(i)] / (1.0 - std::pow(0.999, step));
        p.data()[i] -= 0.05 * mh / (std::sqrt(vh) + 1e-8);
      }
    };
    adam(w, mw, vw);
    adam(b, mb, vb);
  }
  Tensor logits = add_rows(matmul(xte, w), b);
  int64_t hit = 0;
  for (int64_t i = 0; i < logits.dim(0); ++i) {
    const double* row = logits.data() + i * 8;
    int best = 0;
    for (int c = 1; c < 8; ++c)
      if (row[c] > row[best]) best = c;
    if (best == yte[static_cast<size_t>(i)]) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(logits.dim(0));
}

}  // namespace cf
