#pragma once

// Environmental conditions end to end: the attribute schema, the natural
// language prompt template, a closed-lexicon tokenizer, the text encoder with
// context tokens, Condition Token generation from RGB features, and the
// symmetric contrastive loss that ties the two embeddings together.

#include <cctype>
#include <fstream>
#include <optional>
#include <regex>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "condfuse/nn.hpp"

namespace cf {

enum class Weather : uint8_t { kClear = 0, kFog, kRain, kSnow };
enum class TimeOfDay : uint8_t { kDay = 0, kNight };
enum class PrecipType : uint8_t { kRain = 0, kSnow };
enum class PrecipLevel : uint8_t { kLight = 0, kHeavy };
enum class GroundCondition : uint8_t { kDry = 0, kWet, kSnowy };
enum class SkyCondition : uint8_t { kSunny = 0, kOvercast, kDark };

inline const char* weather_adjective(Weather w) {
  switch (w) {
    case Weather::kClear: return "clear";
    case Weather::kFog: return "foggy";
    case Weather::kRain: return "rainy";
    case Weather::kSnow: return "snowy";
  }
  return "";
}
inline const char* time_word(TimeOfDay t) { return t == TimeOfDay::kDay ? "day" : "night"; }
inline const char* precip_type_word(PrecipType p) { return p == PrecipType::kRain ? "rain" : "snow"; }
inline const char* precip_level_word(PrecipLevel p) { return p == PrecipLevel::kLight ? "light" : "heavy"; }
inline const char* ground_word(GroundCondition g) {
  switch (g) {
    case GroundCondition::kDry: return "dry";
    case GroundCondition::kWet: return "wet";
    case GroundCondition::kSnowy: return "snowy";
  }
  return "";
}
inline const char* sky_word(SkyCondition s) {
  switch (s) {
    case SkyCondition::kSunny: return "sunny";
    case SkyCondition::kOvercast: return "overcast";
    case SkyCondition::kDark: return "dark";
  }
  return "";
}

struct ConditionAttributes {
  Weather weather = Weather::kClear;
  TimeOfDay time_of_day = TimeOfDay::kDay;
  std::optional<PrecipType> precipitation_type;
  std::optional<PrecipLevel> precipitation_level;
  GroundCondition ground_condition = GroundCondition::kDry;
  std::optional<SkyCondition> sky_condition;

  void validate() const {
    if (precipitation_type.has_value() != precipitation_level.has_value())
      op_fail("ConditionAttributes", "precipitation type and level must both be present or absent");
    if (weather == Weather::kRain &&
        (!precipitation_type || *precipitation_type != PrecipType::kRain))
      op_fail("ConditionAttributes", "rain weather requires rain precipitation");
    if (weather == Weather::kSnow &&
        (!precipitation_type || *precipitation_type != PrecipType::kSnow))
      op_fail("ConditionAttributes", "snow weather requires snow precipitation");
  }

  // 8 evaluation cells: weather x time of day.
  static constexpr int kNumCells = 8;
  int cell_index() const {
    return static_cast<int>(weather) * 2 + static_cast<int>(time_of_day);
  }
  static std::string cell_name(int index) {
    static const char* weather_names[4] = {"clear", "fog", "rain", "snow"};
    return std::string(weather_names[index / 2]) + (index % 2 == 0 ? "_day" : "_night");
  }
};

struct ConditionPrompt {
  std::string text;
  std::vector<std::string> attribute_tokens;  // raw filled values, template order
};

namespace detail {

inline std::string with_article(const std::string& word, bool capitalize) {
  const bool vowel = !word.empty() && std::string("aeiou").find(word[0]) != std::string::npos;
  std::string art = capitalize ? (vowel ? "An" : "A") : (vowel ? "an" : "a");
  return art + " " + word;
}

}  // namespace detail

// Fill the sentence template. Missing sky condition falls back to "dark" at
// night and "overcast" by day; absent precipitation reads "no precipitation".
inline ConditionPrompt build_condition_prompt(const ConditionAttributes& attrs) {
  attrs.validate();
  const std::string weather = weather_adjective(attrs.weather);
  const std::string time = time_word(attrs.time_of_day);
  std::string precip = "no precipitation";
  if (attrs.precipitation_type)
    precip = std::string(precip_level_word(*attrs.precipitation_level)) + " " +
             precip_type_word(*attrs.precipitation_type);
  const std::string ground = ground_word(attrs.ground_condition);
  const SkyCondition sky = attrs.sky_condition.value_or(
      attrs.time_of_day == TimeOfDay::kNight ? SkyCondition::kDark : SkyCondition::kOvercast);
  const std::string sky_adj = sky_word(sky);

  ConditionPrompt prompt;
  prompt.text = detail::with_article(weather, true) + " driving scene at " + time + "time with " +
                precip + ", " + detail::with_article(ground, false) + " ground and " +
                detail::with_article(sky_adj, false) + " sky.";
  prompt.attribute_tokens = {weather, time, precip, ground, sky_adj};
  return prompt;
}

// Every attribute combination the invariants allow; finite, so the prompt
// language and the tokenizer round-trip can be checked exhaustively.
inline std::vector<ConditionAttributes> all_valid_attributes() {
  std::vector<ConditionAttributes> out;
  const std::optional<SkyCondition> skies[4] = {std::nullopt, SkyCondition::kSunny,
                                                SkyCondition::kOvercast, SkyCondition::kDark};
  for (int w = 0; w < 4; ++w)
    for (int t = 0; t < 2; ++t) {
      const Weather weather = static_cast<Weather>(w);
      std::vector<std::pair<std::optional<PrecipType>, std::optional<PrecipLevel>>> precips;
      if (weather == Weather::kRain)
        precips = {{PrecipType::kRain, PrecipLevel::kLight}, {PrecipType::kRain, PrecipLevel::kHeavy}};
      else if (weather == Weather::kSnow)
        precips = {{PrecipType::kSnow, PrecipLevel::kLight}, {PrecipType::kSnow, PrecipLevel::kHeavy}};
      else
        precips = {{std::nullopt, std::nullopt}};
      for (const auto& [pt, pl] : precips)
        for (int g = 0; g < 3; ++g)
          for (const auto& sky : skies) {
            ConditionAttributes a;
            a.weather = weather;
            a.time_of_day = static_cast<TimeOfDay>(t);
            a.precipitation_type = pt;
            a.precipitation_level = pl;
            a.ground_condition = static_cast<GroundCondition>(g);
            a.sky_condition = sky;
            out.push_back(a);
          }
    }
  return out;
}

// Regular language of the filled template, for property checks.
inline bool matches_prompt_template(const std::string& text) {
  static const std::regex re(
      "A (clear|foggy|rainy|snowy) driving scene at (day|night)time with "
      "(no precipitation|light rain|heavy rain|light snow|heavy snow), "
      "a (dry|wet|snowy) ground and an? (sunny|overcast|dark) sky\\.");
  return std::regex_match(text, re);
}

// ---------------------------------------------------------------------------
// tokenizer
// ---------------------------------------------------------------------------

// Lowercase and split '.'/',' into standalone tokens.
inline std::string normalize_text(const std::string& text) {
  std::string spaced;
  spaced.reserve(text.size() + 8);
  for (char c : text) {
    if (c == '.' || c == ',') {
      spaced += ' ';
      spaced += c;
      spaced += ' ';
    } else {
      spaced += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    }
  }
  std::istringstream ss(spaced);
  std::string word, out;
  while (ss >> word) {
    if (!out.empty()) out += ' ';
    out += word;
  }
  return out;
}

// Closed lexicon: every word producible by the template, punctuation, and a
// trailing out-of-vocabulary id. Ids are line numbers in the shipped file.
class Vocabulary {
 public:
  static Vocabulary template_lexicon() {
    Vocabulary v;
    auto absorb = [&v](const std::string& text) {
      std::istringstream ss(normalize_text(text));
      std::string word;
      while (ss >> word) v.intern(word);
    };
    for (const ConditionAttributes& attrs : all_valid_attributes()) {
      ConditionPrompt p = build_condition_prompt(attrs);
      absorb(p.text);
      for (const std::string& t : p.attribute_tokens) absorb(t);
    }
    v.intern(".");
    v.intern(",");
    v.oov_ = static_cast<int64_t>(v.words_.size());
    v.words_.push_back("<oov>");
    return v;
  }

  int64_t id(const std::string& word) const {
    auto it = index_.find(word);
    return it == index_.end() ? oov_ : it->second;
  }
  int64_t oov_id() const { return oov_; }
  int64_t size() const { return static_cast<int64_t>(words_.size()); }
  const std::string& word(int64_t id) const { return words_[static_cast<size_t>(id)]; }
  const std::vector<std::string>& words() const { return words_; }

  void write(const std::string& path) const {
    std::ofstream f(path, std::ios::trunc);
    if (!f) op_fail("Vocabulary::write", "cannot open '" + path + "'");
    for (const std::string& w : words_) f << w << '\n';
  }
  static Vocabulary read(const std::string& path) {
    std::ifstream f(path);
    if (!f) op_fail("Vocabulary::read", "cannot open '" + path + "'");
    Vocabulary v;
    std::string line;
    while (std::getline(f, line))
      if (!line.empty()) {
        v.index_[line] = static_cast<int64_t>(v.words_.size());
        v.words_.push_back(line);
      }
    if (v.words_.empty() || v.words_.back() != "<oov>")
      op_fail("Vocabulary::read", "missing <oov> terminator in '" + path + "'");
    v.oov_ = static_cast<int64_t>(v.words_.size()) - 1;
    return v;
  }

 private:
  void intern(const std::string& word) {
    if (!index_.count(word)) {
      index_[word] = static_cast<int64_t>(words_.size());
      words_.push_back(word);
    }
  }
  std::vector<std::string> words_;
  std::unordered_map<std::string, int64_t> index_;
  int64_t oov_ = 0;
};

inline std::vector<int64_t> tokenize(const std::string& text, const Vocabulary& vocab) {
  std::vector<int64_t> ids;
  std::istringstream ss(normalize_text(text));
  std::string word;
  while (ss >> word) ids.push_back(vocab.id(word));
  return ids;
}

inline std::string detokenize(const std::vector<int64_t>& ids, const Vocabulary& vocab) {
  std::string out;
  for (int64_t id : ids) {
    if (!out.empty()) out += ' ';
    out += vocab.word(id);
  }
  return out;
}

// ---------------------------------------------------------------------------
// text encoder
// ---------------------------------------------------------------------------

struct TextQueries {
  Tensor tokens;  // [T+4, D]: encoded prompt tokens stacked with context tokens
  Tensor pooled;  // [D]: mean over all rows, the contrastive-side embedding
};

struct TextEncoder {
  static constexpr int kNumLayers = 6;
  static constexpr int kNumContext = 4;
  int64_t dim = 64;
  int64_t max_tokens = 32;
  Tensor embed;  // [V, D]
  Tensor pos;    // [max_tokens, D]
  Tensor ctx;    // [4, D]
  std::vector<EncoderLayer> layers;

  static TextEncoder create(ParamStore& ps, const std::string& prefix, int64_t vocab_size,
                            int64_t dim, Rng& rng, int num_heads = 2) {
    TextEncoder t;
    t.dim = dim;
    t.embed = ps.add_normal(prefix + "/embed", {vocab_size, dim}, rng, 0.02);
    t.pos = ps.add_normal(prefix + "/pos", {t.max_tokens, dim}, rng, 0.02);
    t.ctx = ps.add_normal(prefix + "/ctx", {kNumContext, dim}, rng, 0.02);
    for (int i = 0; i < kNumLayers; ++i)
      t.layers.push_back(
          EncoderLayer::create(ps, prefix + "/enc" + std::to_string(i), {dim, num_heads}, rng));
    return t;
  }

  TextQueries encode_ids(const std::vector<int64_t>& ids) const {
    require(!ids.empty(), "encode_text", "prompt tokenized to zero tokens");
    const int64_t t_len = static_cast<int64_t>(ids.size());
    require(t_len <= max_tokens, "encode_text",
            "prompt of " + std::to_string(t_len) + " tokens exceeds capacity " +
                std::to_string(max_tokens));
    Tensor x = take_rows(embed, ids);
    x = add(x, slice(pos, {0, 0}, {t_len, dim}));
    for (const auto& layer : layers) x = layer.forward(x);
    Tensor stacked = concat({x, ctx}, 0);
    TextQueries out;
    out.tokens = stacked;
    out.pooled = mean_axes(stacked, {0});
    return out;
  }

  TextQueries encode(const std::string& text, const Vocabulary& vocab) const {
    return encode_ids(tokenize(text, vocab));
  }
};

// ---------------------------------------------------------------------------
// condition token
// ---------------------------------------------------------------------------

// Flattens the top pyramid level, projects to the token dimension, adds
// learned positional embeddings, and runs a 2-encoder/2-decoder transformer
// with one learnable query. Consumes RGB features only.
struct CtGenerator {
  static constexpr int kEncLayers = 2;
  static constexpr int kDecLayers = 2;
  int64_t d_ct = 64;
  int64_t level_channels = 128;
  int64_t grid = 1;  // H4*W4 the positional table was built for
  bool use_positional = true;
  Linear proj;
  Tensor pos;    // [grid, D]
  Tensor query;  // [1, D]
  std::vector<EncoderLayer> encs;
  std::vector<DecoderLayer> decs;

  static CtGenerator create(ParamStore& ps, const std::string& prefix, int64_t level_channels,
                            int64_t grid, int64_t d_ct, Rng& rng, int num_heads = 2) {
    CtGenerator g;
    g.d_ct = d_ct;
    g.level_channels = level_channels;
    g.grid = grid;
    g.proj = Linear::create(ps, prefix + "/proj", level_channels, d_ct, rng);
    g.pos = ps.add_normal(prefix + "/pos", {grid, d_ct}, rng, 0.02);
    g.query = ps.add_normal(prefix + "/query", {1, d_ct}, rng, 0.02);
    for (int i = 0; i < kEncLayers; ++i)
      g.encs.push_back(EncoderLayer::create(ps, prefix + "/enc" + std::to_string(i), {d_ct, num_heads}, rng));
    for (int i = 0; i < kDecLayers; ++i)
      g.decs.push_back(DecoderLayer::create(ps, prefix + "/dec" + std::to_string(i), {d_ct, num_heads}, rng));
    return g;
  }

  Tensor generate(const Tensor& rgb_level4) const {
    require(rgb_level4.ndim() == 3 && rgb_level4.dim(0) == level_channels, "generate_condition_token",
            "expected [" + std::to_string(level_channels) + ",H,W], got " + shape_str(rgb_level4.shape()));
    const int64_t hw = rgb_level4.dim(1) * rgb_level4.dim(2);
    require(hw == grid, "generate_condition_token",
            "grid " + std::to_string(hw) + " does not match positional table " + std::to_string(grid));
    Tensor tokens = transpose(reshape(rgb_level4, {level_channels, hw}), {1, 0});
    tokens = proj.forward(tokens);
    if (use_positional) tokens = add(tokens, pos);
    Tensor ct = transformer_encode_decode(tokens, encs, decs, query);
    return reshape(ct, {d_ct});
  }
};

// ---------------------------------------------------------------------------
// contrastive loss
// ---------------------------------------------------------------------------

inline Tensor l2_normalize_rows(const Tensor& x) {
  require(x.ndim() == 2, "l2_normalize_rows", "expects [N,D], got " + shape_str(x.shape()));
  Tensor ss = sum_lastdim(mul(x, x));
  for (int64_t i = 0; i < ss.numel(); ++i)
    if (ss.data()[i] < 1e-24)
      op_fail("l2_normalize_rows", "zero-norm embedding in row " + std::to_string(i));
  return rows_scale(x, rsqrt(ss));
}

// Symmetric InfoNCE over matched rows. Temperature is a positive 1-element
// tensor; gradients flow into it.
inline Tensor condition_contrastive_loss(const Tensor& cts, const Tensor& pooled_texts,
                                         const Tensor& temperature) {
  require_same_shape("condition_contrastive_loss", cts.shape(), pooled_texts.shape());
  require(cts.ndim() == 2 && cts.dim(0) >= 1, "condition_contrastive_loss",
          "expects [B,D], got " + shape_str(cts.shape()));
  const int64_t b = cts.dim(0);
  Tensor ct_n = l2_normalize_rows(cts);
  Tensor tx_n = l2_normalize_rows(pooled_texts);
  Tensor inv_tau = exp_op(scale(log_op(temperature), -1.0));
  Tensor sims = mul_scalar(matmul(ct_n, transpose(tx_n, {1, 0})), inv_tau);
  std::vector<int64_t> diag(static_cast<size_t>(b));
  for (int64_t i = 0; i < b; ++i) diag[static_cast<size_t>(i)] = i;
  Tensor fwd = cross_entropy_mean(sims, diag);
  Tensor bwd = cross_entropy_mean(transpose(sims, {1, 0}), diag);
  return scale(add(fwd, bwd), 0.5);
}

inline constexpr double kDefaultTemperature = 0.07;
inline constexpr double kAttributeLossWeight = 0.25;

// Detailed-prompt InfoNCE plus per-attribute auxiliary terms: every attribute
// slot contributes its own contrastive pairing, averaged and weighted.
inline Tensor full_condition_loss(const Tensor& cts, const Tensor& prompt_pooled,
                                  const std::vector<Tensor>& attr_pooled_slots,
                                  const Tensor& temperature,
                                  double attribute_weight = kAttributeLossWeight) {
  Tensor loss = condition_contrastive_loss(cts, prompt_pooled, temperature);
  if (!attr_pooled_slots.empty() && attribute_weight > 0.0) {
    Tensor aux = condition_contrastive_loss(cts, attr_pooled_slots[0], temperature);
    for (size_t s = 1; s < attr_pooled_slots.size(); ++s)
      aux = add(aux, condition_contrastive_loss(cts, attr_pooled_slots[s], temperature));
    loss = add(loss, scale(aux, attribute_weight / static_cast<double>(attr_pooled_slots.size())));
  }
  return loss;
}

}  // namespace cf
