#pragma once

// Synthetic condition-dependent multimodal scenes and the CFD1 dataset file.
//
// Each scene is a procedural driving layout (sky band, road trapezoid,
// buildings, vehicles, persons, vegetation) rendered as four 3-channel
// observations whose quality depends on the environmental condition:
//   rgb    - clean class-color render; heavily darkened and noisy at night,
//            haze-blended and blurred in fog, streaked in rain, speckled in snow
//   lidar  - sparse depth/reflectivity/boundary channels; degraded under
//            precipitation and fog, unaffected by darkness
//   radar  - 4x coarser blocky reflectivity; the same small noise in every
//            condition
//   event  - class-contrast edge map; robust to darkness, degraded under
//            precipitation, softened by fog
//
// Degradation has two layers. Photometric artifacts (darkening, haze, streaks,
// speckle) make the condition identifiable from RGB statistics. The
// information loss itself is a phantom blend: the corrupted modality drifts
// toward a rendering of a *different* random layout, so the texture stays
// locally plausible — per-pixel filtering cannot reject it — while the content
// systematically disagrees with the ground truth. Fusion that cannot
// downweight a modality per condition pays for that disagreement.
// The corruption constants below are the benchmark's physics and are frozen
// per dataset version.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "condfuse/checkpoint.hpp"
#include "condfuse/condition.hpp"
#include "condfuse/rng.hpp"
#include "condfuse/tensor.hpp"

namespace cf {

inline constexpr int kNumClasses = 6;

enum SceneClass : uint8_t {
  kRoad = 0,
  kSky = 1,
  kVehicle = 2,
  kPerson = 3,
  kVegetation = 4,
  kBuilding = 5,
};

inline const char* class_name(int c) {
  static const char* names[kNumClasses] = {"road", "sky", "vehicle", "person", "vegetation", "building"};
  return names[c];
}

struct Rgb {
  double r, g, b;
};

// Canonical clear-day palette; also the reference for the color-threshold
// oracle used in tests.
inline std::array<Rgb, kNumClasses> clear_day_palette() {
  return {{{0.45, 0.45, 0.48},   // road
           {0.55, 0.75, 0.95},   // sky
           {0.75, 0.12, 0.12},   // vehicle
           {0.95, 0.55, 0.25},   // person
           {0.13, 0.52, 0.18},   // vegetation
           {0.55, 0.42, 0.30}}};  // building
}

struct CorruptionConfig {
  // rgb photometrics
  double rgb_pixel_noise = 0.015;
  double rgb_color_jitter = 0.02;
  double night_brightness = 0.16;
  double night_noise = 0.08;
  double fog_blend_day = 0.60;
  double fog_blend_night = 0.55;
  int fog_blur_passes = 2;
  double rain_streak_fraction_light = 0.25;  // of image columns
  double rain_streak_fraction_heavy = 0.45;
  double snow_speckle_light = 0.03;
  double snow_speckle_heavy = 0.06;
  // rgb phantom content: night blinds the camera, fog obscures it, daytime
  // precipitation barely touches it
  double rgb_phantom_night = 0.80;
  double rgb_phantom_fog = 0.50;
  double rgb_phantom_precip_day_light = 0.08;
  double rgb_phantom_precip_day_heavy = 0.18;
  // lidar
  double lidar_base_noise = 0.05;
  double lidar_base_dropout = 0.06;
  double lidar_phantom_base = 0.05;
  double lidar_phantom_precip_light = 0.55;
  double lidar_phantom_precip_heavy = 0.80;
  double lidar_phantom_fog = 0.15;  // added on top, capped below 1
  double lidar_precip_speckle_light = 0.10;
  double lidar_precip_speckle_heavy = 0.20;
  // radar: condition-independent by design
  double radar_noise = 0.06;
  int radar_block = 4;
  // event
  double event_noise = 0.02;
  double event_phantom_base = 0.10;
  double event_phantom_precip_light = 0.45;
  double event_phantom_precip_heavy = 0.70;
  double event_phantom_fog = 0.20;
  double event_precip_salt_light = 0.08;
  double event_precip_salt_heavy = 0.16;
  double event_fog_attenuation = 0.65;
};

struct Scene {
  int64_t height = 32, width = 32;
  std::vector<uint8_t> semantic;  // [H*W]
  std::array<Tensor, 4> images;   // rgb, lidar, radar, event; raw, float32-quantized
  ConditionAttributes attrs;
  uint64_t seed = 0;
};

// ---------------------------------------------------------------------------
// condition sampling
// ---------------------------------------------------------------------------

// Dependent attributes for a fixed weather/time cell; exercises the
// missing-sky fill-in rules.
inline ConditionAttributes sample_condition_in_cell(int cell, Rng& rng) {
  ConditionAttributes a;
  a.weather = static_cast<Weather>(cell / 2);
  a.time_of_day = static_cast<TimeOfDay>(cell % 2);
  const bool night = a.time_of_day == TimeOfDay::kNight;
  switch (a.weather) {
    case Weather::kClear:
      a.ground_condition = GroundCondition::kDry;
      if (night)
        a.sky_condition = rng.bernoulli(0.5) ? std::optional<SkyCondition>(SkyCondition::kDark)
                                             : std::nullopt;
      else
        a.sky_condition = rng.bernoulli(0.7) ? SkyCondition::kSunny : SkyCondition::kOvercast;
      break;
    case Weather::kFog:
      a.ground_condition = rng.bernoulli(0.5) ? GroundCondition::kWet : GroundCondition::kDry;
      if (night)
        a.sky_condition = rng.bernoulli(0.5) ? std::optional<SkyCondition>(SkyCondition::kDark)
                                             : std::nullopt;
      else
        a.sky_condition = rng.bernoulli(0.5) ? std::optional<SkyCondition>(SkyCondition::kOvercast)
                                             : std::nullopt;
      break;
    case Weather::kRain:
      a.precipitation_type = PrecipType::kRain;
      a.precipitation_level = rng.bernoulli(0.5) ? PrecipLevel::kLight : PrecipLevel::kHeavy;
      a.ground_condition = GroundCondition::kWet;
      if (night)
        a.sky_condition = rng.bernoulli(0.5) ? std::optional<SkyCondition>(SkyCondition::kDark)
                                             : std::nullopt;
      else
        a.sky_condition = rng.bernoulli(0.7) ? std::optional<SkyCondition>(SkyCondition::kOvercast)
                                             : std::nullopt;
      break;
    case Weather::kSnow:
      a.precipitation_type = PrecipType::kSnow;
      a.precipitation_level = rng.bernoulli(0.5) ? PrecipLevel::kLight : PrecipLevel::kHeavy;
      a.ground_condition = GroundCondition::kSnowy;
      if (night)
        a.sky_condition = rng.bernoulli(0.5) ? std::optional<SkyCondition>(SkyCondition::kDark)
                                             : std::nullopt;
      else
        a.sky_condition = rng.bernoulli(0.7) ? std::optional<SkyCondition>(SkyCondition::kOvercast)
                                             : std::nullopt;
      break;
  }
  a.validate();
  return a;
}

// Uniform over the 8 weather x time cells.
inline ConditionAttributes sample_condition(Rng& rng) {
  return sample_condition_in_cell(static_cast<int>(rng.randint(ConditionAttributes::kNumCells)), rng);
}

// ---------------------------------------------------------------------------
// rendering
// ---------------------------------------------------------------------------

namespace scene_detail {

struct Layout {
  int64_t h = 32, w = 32;
  std::vector<uint8_t> cls;
  int horizon = 12;

  uint8_t& at(int64_t y, int64_t x) { return cls[static_cast<size_t>(y * w + x)]; }
  uint8_t at(int64_t y, int64_t x) const { return cls[static_cast<size_t>(y * w + x)]; }
};

inline Layout make_layout(int64_t h, int64_t w, Rng& rng) {
  Layout lay;
  lay.h = h;
  lay.w = w;
  lay.cls.assign(static_cast<size_t>(h * w), kSky);
  lay.horizon = static_cast<int>(rng.randint(7)) + 10;  // [10,16]
  for (int64_t y = lay.horizon; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) lay.at(y, x) = kVegetation;

  // road trapezoid
  const double center = 13.0 + static_cast<double>(rng.randint(7));
  const double wb = 6.0 + static_cast<double>(rng.randint(5));
  const double wt = 1.0 + static_cast<double>(rng.randint(3));
  for (int64_t y = lay.horizon; y < h; ++y) {
    const double t = static_cast<double>(y - lay.horizon) /
                     std::max(1.0, static_cast<double>(h - 1 - lay.horizon));
    const double half = wt + (wb - wt) * t;
    for (int64_t x = 0; x < w; ++x)
      if (std::fabs(static_cast<double>(x) - center) <= half) lay.at(y, x) = kRoad;
  }

  // buildings stand on the horizon
  const int nb = 1 + static_cast<int>(rng.randint(3));
  for (int b = 0; b < nb; ++b) {
    const int64_t bw = 4 + rng.randint(5);
    const int64_t x0 = rng.randint(std::max<int64_t>(1, w - bw));
    const int64_t top = 1 + rng.randint(std::max<int64_t>(1, lay.horizon - 4));
    for (int64_t y = top; y < lay.horizon; ++y)
      for (int64_t x = x0; x < x0 + bw; ++x) lay.at(y, x) = kBuilding;
  }

  // tree canopies over the skyline
  const int ng = 1 + static_cast<int>(rng.randint(3));
  for (int g = 0; g < ng; ++g) {
    const int64_t cx = rng.randint(w);
    const int64_t cy = lay.horizon - 1 - rng.randint(3);
    const int64_t r = 2 + rng.randint(3);
    for (int64_t y = std::max<int64_t>(0, cy - r); y <= std::min(lay.horizon - 1 + r / 2, h - 1); ++y)
      for (int64_t x = std::max<int64_t>(0, cx - r); x <= std::min(cx + r, w - 1); ++x)
        if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r) lay.at(y, x) = kVegetation;
  }

  // vehicles on the road
  const int nv = static_cast<int>(rng.randint(4));
  for (int v = 0; v < nv; ++v) {
    const int64_t vw = 4 + rng.randint(3);
    const int64_t vh = 2 + rng.randint(2);
    const int64_t y0 = lay.horizon + 2 + rng.randint(std::max<int64_t>(1, h - lay.horizon - vh - 2));
    const int64_t x0 =
        std::clamp<int64_t>(static_cast<int64_t>(center) + rng.randint(9) - 4 - vw / 2, 0, w - vw);
    for (int64_t y = y0; y < std::min(y0 + vh, h); ++y)
      for (int64_t x = x0; x < x0 + vw; ++x) lay.at(y, x) = kVehicle;
  }

  // persons near the road edges
  const int np = static_cast<int>(rng.randint(4));
  for (int p = 0; p < np; ++p) {
    const int64_t ph = 2 + rng.randint(2);
    const int64_t pw = 1 + rng.randint(2);
    const int64_t y0 = lay.horizon + 1 + rng.randint(std::max<int64_t>(1, h - lay.horizon - ph - 1));
    const double t = static_cast<double>(y0 - lay.horizon) /
                     std::max(1.0, static_cast<double>(h - 1 - lay.horizon));
    const double half = wt + (wb - wt) * t;
    const int64_t side = rng.bernoulli(0.5) ? 1 : -1;
    const int64_t x0 = std::clamp<int64_t>(
        static_cast<int64_t>(center + side * (half + 1.0 + static_cast<double>(rng.randint(3)))), 0,
        w - pw);
    for (int64_t y = y0; y < std::min(y0 + ph, h); ++y)
      for (int64_t x = x0; x < x0 + pw; ++x) lay.at(y, x) = kPerson;
  }
  return lay;
}

inline double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

inline void box_blur3(std::vector<double>& img, int64_t c, int64_t h, int64_t w) {
  std::vector<double> out(img.size());
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        double acc = 0.0;
        int cnt = 0;
        for (int64_t dy = -1; dy <= 1; ++dy)
          for (int64_t dx = -1; dx <= 1; ++dx) {
            const int64_t yy = y + dy, xx = x + dx;
            if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
            acc += img[static_cast<size_t>((ch * h + yy) * w + xx)];
            ++cnt;
          }
        out[static_cast<size_t>((ch * h + y) * w + x)] = acc / cnt;
      }
  img = std::move(out);
}

}  // namespace scene_detail

namespace scene_detail {

// Clean class-color render under the condition's palette.
inline std::vector<double> render_rgb_clean(const Layout& lay, const ConditionAttributes& attrs,
                                            const std::array<Rgb, kNumClasses>& jittered) {
  (void)attrs;
  const size_t n = static_cast<size_t>(lay.h * lay.w);
  std::vector<double> rgb(3 * n);
  for (size_t i = 0; i < n; ++i) {
    const Rgb& c = jittered[lay.cls[i]];
    rgb[i] = c.r;
    rgb[n + i] = c.g;
    rgb[2 * n + i] = c.b;
  }
  return rgb;
}

// Depth ramp, per-class reflectivity and boundary channels.
inline std::vector<double> render_lidar_clean(const Layout& lay) {
  static constexpr double reflect[kNumClasses] = {0.25, 0.0, 0.90, 0.70, 0.45, 0.60};
  const int64_t h = lay.h, w = lay.w;
  const size_t n = static_cast<size_t>(h * w);
  std::vector<double> lidar(3 * n, 0.0);
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      const size_t i = static_cast<size_t>(y * w + x);
      const uint8_t c = lay.cls[i];
      double depth = 0.0;
      if (y >= lay.horizon)
        depth = static_cast<double>(y - lay.horizon) /
                std::max(1.0, static_cast<double>(h - 1 - lay.horizon));
      else if (c != kSky)
        depth = 0.25;  // skyline structures read as far returns
      lidar[i] = depth;
      lidar[n + i] = reflect[c];
      bool boundary = false;
      if (y + 1 < h && lay.at(y + 1, x) != c) boundary = true;
      if (x + 1 < w && lay.at(y, x + 1) != c) boundary = true;
      lidar[2 * n + i] = boundary ? 1.0 : (c == kSky ? 0.0 : 0.1);
    }
  return lidar;
}

// Radar separates strong reflectors (vehicles, buildings) but confuses soft
// targets: persons and vegetation return like the road.
inline std::vector<double> render_radar_clean(const Layout& lay, int block) {
  static constexpr double reflect[kNumClasses] = {0.10, 0.0, 1.00, 0.15, 0.15, 0.55};
  const int64_t h = lay.h, w = lay.w;
  const size_t n = static_cast<size_t>(h * w);
  std::vector<double> radar(3 * n, 0.0);
  for (int64_t by = 0; by < h; by += block)
    for (int64_t bx = 0; bx < w; bx += block) {
      double acc = 0.0;
      int cnt = 0;
      for (int64_t y = by; y < std::min<int64_t>(by + block, h); ++y)
        for (int64_t x = bx; x < std::min<int64_t>(bx + block, w); ++x) {
          acc += reflect[lay.at(y, x)];
          ++cnt;
        }
      const double val = acc / cnt;
      for (int64_t y = by; y < std::min<int64_t>(by + block, h); ++y)
        for (int64_t x = bx; x < std::min<int64_t>(bx + block, w); ++x) {
          const size_t i = static_cast<size_t>(y * w + x);
          radar[i] = val * 0.9;
          radar[n + i] = val;
          radar[2 * n + i] = val * 1.1;
        }
    }
  return radar;
}

inline std::vector<double> render_event_clean(const Layout& lay) {
  static constexpr double contrast[kNumClasses] = {0.40, 0.90, 0.20, 0.60, 0.30, 0.70};
  const int64_t h = lay.h, w = lay.w;
  const size_t n = static_cast<size_t>(h * w);
  std::vector<double> event(3 * n, 0.0);
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      const size_t i = static_cast<size_t>(y * w + x);
      const double c0 = contrast[lay.at(y, x)];
      const double gx = x + 1 < w ? std::fabs(contrast[lay.at(y, x + 1)] - c0) : 0.0;
      const double gy = y + 1 < h ? std::fabs(contrast[lay.at(y + 1, x)] - c0) : 0.0;
      event[i] = gx;
      event[n + i] = gy;
      event[2 * n + i] = 0.5 * (gx + gy);
    }
  return event;
}

inline void phantom_blend(std::vector<double>& img, const std::vector<double>& phantom,
                          double gamma) {
  if (gamma <= 0.0) return;
  for (size_t i = 0; i < img.size(); ++i) img[i] = (1.0 - gamma) * img[i] + gamma * phantom[i];
}

}  // namespace scene_detail

inline Scene render_scene(const ConditionAttributes& attrs, uint64_t seed, int64_t hw = 32,
                          const CorruptionConfig& cfg = {}) {
  attrs.validate();
  const int64_t h = hw, w = hw;
  Rng layout_rng = Rng(seed).fork("layout");
  Rng phantom_rng = Rng(seed).fork("phantom");
  Rng noise_rng = Rng(seed).fork("noise");

  Scene scene;
  scene.height = h;
  scene.width = w;
  scene.attrs = attrs;
  scene.seed = seed;
  scene_detail::Layout lay = scene_detail::make_layout(h, w, layout_rng);
  scene_detail::Layout ghost = scene_detail::make_layout(h, w, phantom_rng);
  scene.semantic = lay.cls;

  const bool night = attrs.time_of_day == TimeOfDay::kNight;
  const bool has_precip = attrs.precipitation_type.has_value();
  const bool heavy =
      attrs.precipitation_level && *attrs.precipitation_level == PrecipLevel::kHeavy;
  const size_t n = static_cast<size_t>(h * w);

  // ---- rgb ----
  auto palette = clear_day_palette();
  switch (attrs.weather) {  // sky tint by weather
    case Weather::kClear: break;
    case Weather::kFog: palette[kSky] = {0.70, 0.72, 0.75}; break;
    case Weather::kRain: palette[kSky] = {0.50, 0.55, 0.62}; break;
    case Weather::kSnow: palette[kSky] = {0.75, 0.78, 0.82}; break;
  }
  if (night) palette[kSky] = {0.04, 0.05, 0.10};
  if (attrs.ground_condition == GroundCondition::kWet) {
    palette[kRoad] = {0.27, 0.27, 0.31};
  } else if (attrs.ground_condition == GroundCondition::kSnowy) {
    auto whiten = [](Rgb c) {
      return Rgb{c.r * 0.35 + 0.60, c.g * 0.35 + 0.60, c.b * 0.35 + 0.60};
    };
    palette[kRoad] = whiten(palette[kRoad]);
    palette[kVegetation] = whiten(palette[kVegetation]);
  }
  std::array<Rgb, kNumClasses> jittered = palette;
  for (auto& c : jittered) {
    c.r += noise_rng.uniform(-cfg.rgb_color_jitter, cfg.rgb_color_jitter);
    c.g += noise_rng.uniform(-cfg.rgb_color_jitter, cfg.rgb_color_jitter);
    c.b += noise_rng.uniform(-cfg.rgb_color_jitter, cfg.rgb_color_jitter);
  }
  std::vector<double> rgb = scene_detail::render_rgb_clean(lay, attrs, jittered);
  {
    double gamma = 0.0;
    if (night) gamma = std::max(gamma, cfg.rgb_phantom_night);
    if (attrs.weather == Weather::kFog) gamma = std::max(gamma, cfg.rgb_phantom_fog);
    if (has_precip && !night)
      gamma = std::max(gamma, heavy ? cfg.rgb_phantom_precip_day_heavy
                                    : cfg.rgb_phantom_precip_day_light);
    scene_detail::phantom_blend(rgb, scene_detail::render_rgb_clean(ghost, attrs, jittered), gamma);
  }
  for (double& v : rgb) v += noise_rng.normal(0, cfg.rgb_pixel_noise);
  if (night) {
    for (double& v : rgb) v = v * cfg.night_brightness + noise_rng.normal(0, cfg.night_noise);
  }
  if (attrs.weather == Weather::kFog) {
    const double blend = night ? cfg.fog_blend_night : cfg.fog_blend_day;
    const double fog_gray = night ? 0.10 : 0.72;
    for (double& v : rgb) v = (1.0 - blend) * v + blend * fog_gray;
    for (int pass = 0; pass < cfg.fog_blur_passes; ++pass) scene_detail::box_blur3(rgb, 3, h, w);
  }
  if (attrs.weather == Weather::kRain) {
    const double frac = heavy ? cfg.rain_streak_fraction_heavy : cfg.rain_streak_fraction_light;
    const int streaks = static_cast<int>(frac * static_cast<double>(w));
    for (int s = 0; s < streaks; ++s) {
      const int64_t x = noise_rng.randint(w);
      const int64_t y0 = noise_rng.randint(h / 2);
      const int64_t len = 4 + noise_rng.randint(h / 2);
      for (int64_t y = y0; y < std::min(y0 + len, h); ++y)
        for (int64_t ch = 0; ch < 3; ++ch) {
          double& v = rgb[static_cast<size_t>((ch * h + y) * w + x)];
          v = night ? 0.25 : v * 0.70;
        }
    }
  }
  if (attrs.weather == Weather::kSnow) {
    const double p = heavy ? cfg.snow_speckle_heavy : cfg.snow_speckle_light;
    for (size_t i = 0; i < n; ++i)
      if (noise_rng.bernoulli(p)) {
        const double bright = 0.85 + noise_rng.uniform(0.0, 0.15);
        rgb[i] = bright;
        rgb[n + i] = bright;
        rgb[2 * n + i] = bright;
      }
  }
  for (double& v : rgb) v = scene_detail::clamp01(v);

  // ---- lidar ----
  std::vector<double> lidar = scene_detail::render_lidar_clean(lay);
  {
    double gamma = cfg.lidar_phantom_base;
    if (has_precip)
      gamma = std::max(gamma, heavy ? cfg.lidar_phantom_precip_heavy : cfg.lidar_phantom_precip_light);
    if (attrs.weather == Weather::kFog) gamma = std::min(0.95, gamma + cfg.lidar_phantom_fog);
    scene_detail::phantom_blend(lidar, scene_detail::render_lidar_clean(ghost), gamma);
    const double speckle =
        has_precip ? (heavy ? cfg.lidar_precip_speckle_heavy : cfg.lidar_precip_speckle_light) : 0.0;
    for (size_t i = 0; i < n; ++i) {
      if (noise_rng.bernoulli(cfg.lidar_base_dropout)) {
        lidar[i] = lidar[n + i] = lidar[2 * n + i] = 0.0;
        continue;
      }
      if (speckle > 0.0 && noise_rng.bernoulli(speckle)) {
        lidar[i] = noise_rng.uniform();
        lidar[n + i] = noise_rng.uniform();
        lidar[2 * n + i] = noise_rng.uniform();
        continue;
      }
      lidar[n + i] += noise_rng.normal(0, cfg.lidar_base_noise);
    }
  }
  for (double& v : lidar) v = scene_detail::clamp01(v);

  // ---- radar ----
  std::vector<double> radar = scene_detail::render_radar_clean(lay, cfg.radar_block);
  for (double& v : radar) v = scene_detail::clamp01(v + noise_rng.normal(0, cfg.radar_noise));

  // ---- event ----
  std::vector<double> event = scene_detail::render_event_clean(lay);
  {
    double gamma = cfg.event_phantom_base;
    if (has_precip)
      gamma = std::max(gamma, heavy ? cfg.event_phantom_precip_heavy : cfg.event_phantom_precip_light);
    if (attrs.weather == Weather::kFog) gamma = std::min(0.95, gamma + cfg.event_phantom_fog);
    scene_detail::phantom_blend(event, scene_detail::render_event_clean(ghost), gamma);
    const double atten = attrs.weather == Weather::kFog ? cfg.event_fog_attenuation : 1.0;
    for (double& v : event) v = atten * v + noise_rng.normal(0, cfg.event_noise);
    if (has_precip) {
      const double p = heavy ? cfg.event_precip_salt_heavy : cfg.event_precip_salt_light;
      for (size_t i = 0; i < n; ++i)
        if (noise_rng.bernoulli(p)) {
          event[i] = noise_rng.uniform(0.5, 1.0);
          event[n + i] = noise_rng.uniform(0.5, 1.0);
          event[2 * n + i] = noise_rng.uniform(0.5, 1.0);
        }
    }
    for (double& v : event) v = scene_detail::clamp01(v);
  }

  // quantize to float32 so the stored file round-trips bit-exactly
  auto quantize = [](std::vector<double>& img) {
    for (double& v : img) v = static_cast<double>(static_cast<float>(v));
  };
  quantize(rgb);
  quantize(lidar);
  quantize(radar);
  quantize(event);
  scene.images[0] = Tensor::from(std::move(rgb), {3, h, w});
  scene.images[1] = Tensor::from(std::move(lidar), {3, h, w});
  scene.images[2] = Tensor::from(std::move(radar), {3, h, w});
  scene.images[3] = Tensor::from(std::move(event), {3, h, w});
  return scene;
}

// ---------------------------------------------------------------------------
// dataset files (CFD1)
// ---------------------------------------------------------------------------

struct NormStats {
  // [modality][channel]
  std::array<std::array<double, 3>, 4> mean{};
  std::array<std::array<double, 3>, 4> stddev{};
};

struct Dataset {
  std::string split;
  std::vector<Scene> scenes;
  NormStats stats;  // computed over the training split
};

// Population statistics per modality channel over the whole split.
inline NormStats compute_stats(const std::vector<Scene>& scenes) {
  require(!scenes.empty(), "compute_stats", "empty scene list");
  NormStats stats;
  for (int m = 0; m < 4; ++m)
    for (int c = 0; c < 3; ++c) {
      double sum = 0.0, sum2 = 0.0;
      int64_t count = 0;
      for (const Scene& s : scenes) {
        const int64_t plane = s.height * s.width;
        const double* p = s.images[static_cast<size_t>(m)].data() + c * plane;
        for (int64_t i = 0; i < plane; ++i) {
          sum += p[i];
          sum2 += p[i] * p[i];
        }
        count += plane;
      }
      const double mean = sum / static_cast<double>(count);
      const double var = std::max(sum2 / static_cast<double>(count) - mean * mean, 1e-12);
      stats.mean[static_cast<size_t>(m)][static_cast<size_t>(c)] = mean;
      stats.stddev[static_cast<size_t>(m)][static_cast<size_t>(c)] = std::sqrt(var);
    }
  return stats;
}

inline void normalize_scene(Scene& s, const NormStats& stats) {
  for (int m = 0; m < 4; ++m) {
    const int64_t plane = s.height * s.width;
    double* p = s.images[static_cast<size_t>(m)].data();
    for (int c = 0; c < 3; ++c) {
      const double mu = stats.mean[static_cast<size_t>(m)][static_cast<size_t>(c)];
      const double sd = stats.stddev[static_cast<size_t>(m)][static_cast<size_t>(c)];
      for (int64_t i = 0; i < plane; ++i) p[c * plane + i] = (p[c * plane + i] - mu) / sd;
    }
  }
}

inline constexpr char kDatasetMagic[5] = "CFD1";
inline constexpr uint32_t kDatasetVersion = 1;

namespace detail {

inline std::string csv_doubles(const double* v, size_t count) {
  std::ostringstream os;
  os.precision(17);
  for (size_t i = 0; i < count; ++i) {
    if (i) os << ',';
    os << v[i];
  }
  return os.str();
}

inline std::vector<double> parse_csv_doubles(const std::string& s) {
  std::vector<double> out;
  std::istringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stod(item));
  return out;
}

}  // namespace detail

inline void write_dataset(const Dataset& ds, const std::string& path) {
  require(!ds.scenes.empty(), "write_dataset", "dataset has no scenes");
  const int64_t h = ds.scenes[0].height, w = ds.scenes[0].width;
  // fixed-width blocks: seed u64 | attrs 8 bytes | semantic u8[HW] | 4x3xHW f32
  const uint64_t block =
      8 + 8 + static_cast<uint64_t>(h * w) + 4ull * 3ull * static_cast<uint64_t>(h * w) * 4ull;

  std::ostringstream manifest;
  manifest << "version=" << kDatasetVersion << "\n";
  manifest << "split=" << ds.split << "\n";
  manifest << "count=" << ds.scenes.size() << "\n";
  manifest << "height=" << h << "\nwidth=" << w << "\n";
  std::array<double, 12> mean_flat{}, std_flat{};
  for (int m = 0; m < 4; ++m)
    for (int c = 0; c < 3; ++c) {
      mean_flat[static_cast<size_t>(m * 3 + c)] = ds.stats.mean[static_cast<size_t>(m)][static_cast<size_t>(c)];
      std_flat[static_cast<size_t>(m * 3 + c)] = ds.stats.stddev[static_cast<size_t>(m)][static_cast<size_t>(c)];
    }
  manifest << "stats_mean=" << detail::csv_doubles(mean_flat.data(), 12) << "\n";
  manifest << "stats_std=" << detail::csv_doubles(std_flat.data(), 12) << "\n";
  // offsets are relative to the start of the scene payload section
  for (size_t i = 0; i < ds.scenes.size(); ++i)
    manifest << "offset_" << i << "=" << block * i << "\n";
  const std::string mtext = manifest.str();

  std::string out;
  out.append(kDatasetMagic, 4);
  detail::put_u32_le(out, kDatasetVersion);
  detail::put_u64_le(out, mtext.size());
  out += mtext;
  for (const Scene& s : ds.scenes) {
    require(s.height == h && s.width == w, "write_dataset", "mixed scene dimensions");
    detail::put_u64_le(out, s.seed);
    const ConditionAttributes& a = s.attrs;
    out.push_back(static_cast<char>(a.weather));
    out.push_back(static_cast<char>(a.time_of_day));
    out.push_back(a.precipitation_type ? 1 : 0);
    out.push_back(a.precipitation_type ? static_cast<char>(*a.precipitation_type) : 0);
    out.push_back(a.precipitation_level ? static_cast<char>(*a.precipitation_level) : 0);
    out.push_back(static_cast<char>(a.ground_condition));
    out.push_back(a.sky_condition ? 1 : 0);
    out.push_back(a.sky_condition ? static_cast<char>(*a.sky_condition) : 0);
    out.append(reinterpret_cast<const char*>(s.semantic.data()), s.semantic.size());
    for (const Tensor& img : s.images)
      for (int64_t i = 0; i < img.numel(); ++i)
        detail::put_u32_le(out, std::bit_cast<uint32_t>(static_cast<float>(img.data()[i])));
  }
  detail::write_file_bytes(path, out, "write_dataset");
}

inline Dataset read_dataset(const std::string& path) {
  const std::string buf = detail::read_file_bytes(path, "read_dataset");
  detail::ByteReader r{buf, 0, "read_dataset"};
  if (r.bytes(4, "magic") != std::string(kDatasetMagic, 4))
    throw TensorError("read_dataset: bad magic at byte offset 0 in '" + path + "'");
  const uint32_t version = r.u32("version");
  if (version != kDatasetVersion)
    throw TensorError("read_dataset: unsupported version " + std::to_string(version) +
                      " at byte offset 4");
  const uint64_t mlen = r.u64("manifest length");
  std::istringstream manifest(r.bytes(mlen, "manifest"));
  const size_t payload_start = r.pos;

  Dataset ds;
  size_t count = 0;
  int64_t h = 0, w = 0;
  std::vector<uint64_t> offsets;
  std::string line;
  while (std::getline(manifest, line)) {
    const size_t eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    if (key == "split") ds.split = value;
    else if (key == "count") count = std::stoull(value);
    else if (key == "height") h = std::stoll(value);
    else if (key == "width") w = std::stoll(value);
    else if (key == "stats_mean") {
      auto v = detail::parse_csv_doubles(value);
      require(v.size() == 12, "read_dataset", "stats_mean must list 12 values");
      for (int m = 0; m < 4; ++m)
        for (int c = 0; c < 3; ++c)
          ds.stats.mean[static_cast<size_t>(m)][static_cast<size_t>(c)] = v[static_cast<size_t>(m * 3 + c)];
    } else if (key == "stats_std") {
      auto v = detail::parse_csv_doubles(value);
      require(v.size() == 12, "read_dataset", "stats_std must list 12 values");
      for (int m = 0; m < 4; ++m)
        for (int c = 0; c < 3; ++c)
          ds.stats.stddev[static_cast<size_t>(m)][static_cast<size_t>(c)] = v[static_cast<size_t>(m * 3 + c)];
    } else if (key.rfind("offset_", 0) == 0) {
      offsets.push_back(std::stoull(value));
    }
  }
  require(h >= 1 && w >= 1, "read_dataset", "manifest lacks scene dimensions");
  if (offsets.size() != count)
    throw TensorError("read_dataset: manifest lists " + std::to_string(offsets.size()) +
                      " offsets for " + std::to_string(count) + " scenes");

  for (size_t si = 0; si < count; ++si) {
    r.pos = payload_start + offsets[si];
    Scene s;
    s.height = h;
    s.width = w;
    s.seed = r.u64("scene seed");
    auto need_byte = [&r]() -> uint8_t {
      r.need(1, "attrs");
      return static_cast<uint8_t>(r.buf[r.pos++]);
    };
    s.attrs.weather = static_cast<Weather>(need_byte());
    s.attrs.time_of_day = static_cast<TimeOfDay>(need_byte());
    const bool has_precip = need_byte() != 0;
    const uint8_t ptype = need_byte();
    const uint8_t plevel = need_byte();
    if (has_precip) {
      s.attrs.precipitation_type = static_cast<PrecipType>(ptype);
      s.attrs.precipitation_level = static_cast<PrecipLevel>(plevel);
    }
    s.attrs.ground_condition = static_cast<GroundCondition>(need_byte());
    const bool has_sky = need_byte() != 0;
    const uint8_t sky = need_byte();
    if (has_sky) s.attrs.sky_condition = static_cast<SkyCondition>(sky);
    s.attrs.validate();
    const size_t plane = static_cast<size_t>(h * w);
    r.need(plane, "semantic map");
    s.semantic.assign(buf.begin() + static_cast<std::ptrdiff_t>(r.pos),
                      buf.begin() + static_cast<std::ptrdiff_t>(r.pos + plane));
    r.pos += plane;
    for (int m = 0; m < 4; ++m) {
      std::vector<double> img(3 * plane);
      for (size_t i = 0; i < 3 * plane; ++i) img[i] = static_cast<double>(r.f32("image payload"));
      s.images[static_cast<size_t>(m)] = Tensor::from(std::move(img), {3, h, w});
    }
    ds.scenes.push_back(std::move(s));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// benchmark generation
// ---------------------------------------------------------------------------

struct GeneratedSplits {
  Dataset train, val, test;
};

// Train scenes sample conditions uniformly; eval splits are balanced per cell.
// Normalization statistics come from the training split and are embedded in
// all three files.
inline GeneratedSplits generate_benchmark(int n_train, int n_val, int n_test, uint64_t seed,
                                          int64_t hw = 32, const CorruptionConfig& cfg = {}) {
  require(n_train >= 1, "generate_benchmark", "need at least one training scene");
  GeneratedSplits out;
  out.train.split = "train";
  out.val.split = "val";
  out.test.split = "test";
  Rng rng(seed);
  Rng train_rng = rng.fork("train");
  for (int i = 0; i < n_train; ++i) {
    ConditionAttributes attrs = sample_condition(train_rng);
    out.train.scenes.push_back(render_scene(attrs, train_rng.bits(), hw, cfg));
  }
  auto gen_balanced = [&](Dataset& ds, int count, const char* tag) {
    Rng split_rng = rng.fork(tag);
    for (int i = 0; i < count; ++i) {
      ConditionAttributes attrs =
          sample_condition_in_cell(i % ConditionAttributes::kNumCells, split_rng);
      ds.scenes.push_back(render_scene(attrs, split_rng.bits(), hw, cfg));
    }
  };
  gen_balanced(out.val, n_val, "val");
  gen_balanced(out.test, n_test, "test");
  out.train.stats = compute_stats(out.train.scenes);
  out.val.stats = out.train.stats;
  out.test.stats = out.train.stats;
  return out;
}

}  // namespace cf
