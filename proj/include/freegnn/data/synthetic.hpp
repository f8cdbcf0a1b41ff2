#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "freegnn/data/dataset.hpp"
#include "freegnn/rng.hpp"

namespace freegnn {

enum class DriftType { abrupt, gradual };
enum class DriftChannel {
  signal,  // the generated power (and hence the target) moves
  sensor,  // only the weather reading fed to the model moves
};

struct DriftEvent {
  std::size_t start = 0;
  DriftType type = DriftType::abrupt;
  double magnitude = 0.0;
  std::size_t duration = 0;        // gradual ramp length; 0 = until the end of the stream
  std::vector<std::size_t> sites{};  // empty = all sites
  DriftChannel channel = DriftChannel::signal;

  bool affects(std::size_t site) const {
    if (sites.empty()) return true;
    for (auto s : sites)
      if (s == site) return true;
    return false;
  }

  /// Offset contributed at step t.
  double offset(std::size_t t, std::size_t length) const {
    if (t < start) return 0.0;
    if (type == DriftType::abrupt) return magnitude;
    const std::size_t span = duration ? duration : length - start;
    const double frac = std::min(1.0, static_cast<double>(t - start + 1) / static_cast<double>(span));
    return magnitude * frac;
  }

  std::size_t end(std::size_t length) const {
    if (type == DriftType::abrupt) return start;
    return std::min(length - 1, start + (duration ? duration : length - start) - 1);
  }
};

struct SynthSpec {
  std::size_t sites = 5;
  std::size_t length = 2000;
  double period = 24.0;              // seasonal period in steps
  std::vector<DriftEvent> drift;
  double noise = 0.05;               // observation noise sigma
  double coupling = 0.8;             // 1 = all sites share one weather factor and one seasonal shape
  std::uint64_t seed = 0;

  double amplitude = 1.0;            // seasonal amplitude
  double base = 2.0;                 // mean level
  double weather_sigma = 0.0;        // stationary std of the latent weather factor
  double weather_ar = 0.9;           // AR(1) coefficient of the weather factor
  double weather_gain = 1.0;         // power response to weather
  double step_seconds = 3600.0;

  void validate() const {
    if (sites == 0) throw std::invalid_argument("synthetic spec: sites must be positive");
    if (length < 2) throw std::invalid_argument("synthetic spec: length must be at least 2");
    if (!(period > 0.0)) throw std::invalid_argument("synthetic spec: period must be positive");
    if (!(noise >= 0.0) || !(weather_sigma >= 0.0)) throw std::invalid_argument("synthetic spec: noise levels must be non-negative");
    if (!(coupling >= 0.0 && coupling <= 1.0)) throw std::invalid_argument("synthetic spec: coupling must be in [0, 1]");
    if (!(std::abs(weather_ar) < 1.0)) throw std::invalid_argument("synthetic spec: weather_ar must be in (-1, 1)");
    for (const auto& e : drift) {
      if (e.start >= length) throw std::invalid_argument("synthetic spec: drift start " + std::to_string(e.start) + " outside [0, length)");
      for (auto s : e.sites)
        if (s >= sites) throw std::invalid_argument("synthetic spec: drift site " + std::to_string(s) + " out of range");
    }
  }
};

inline std::string to_string(DriftType t) { return t == DriftType::abrupt ? "abrupt" : "gradual"; }
inline std::string to_string(DriftChannel c) { return c == DriftChannel::signal ? "signal" : "sensor"; }

inline void to_json(nlohmann::json& j, const DriftEvent& e) {
  j = {{"start", e.start}, {"type", to_string(e.type)}, {"magnitude", e.magnitude},
       {"duration", e.duration}, {"sites", e.sites}, {"channel", to_string(e.channel)}};
}

inline void from_json(const nlohmann::json& j, DriftEvent& e) {
  static const char* keys[] = {"start", "type", "magnitude", "duration", "sites", "channel"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (std::find_if(std::begin(keys), std::end(keys), [&](const char* k) { return it.key() == k; }) == std::end(keys))
      throw std::invalid_argument("drift event: unknown key '" + it.key() + "'");
  e.start = j.at("start").get<std::size_t>();
  const auto type = j.at("type").get<std::string>();
  if (type == "abrupt") e.type = DriftType::abrupt;
  else if (type == "gradual") e.type = DriftType::gradual;
  else throw std::invalid_argument("drift event: type must be abrupt or gradual, got '" + type + "'");
  e.magnitude = j.at("magnitude").get<double>();
  e.duration = j.value("duration", std::size_t{0});
  e.sites = j.value("sites", std::vector<std::size_t>{});
  const auto channel = j.value("channel", std::string("signal"));
  if (channel == "signal") e.channel = DriftChannel::signal;
  else if (channel == "sensor") e.channel = DriftChannel::sensor;
  else throw std::invalid_argument("drift event: channel must be signal or sensor, got '" + channel + "'");
}

inline void to_json(nlohmann::json& j, const SynthSpec& s) {
  j = {{"sites", s.sites}, {"length", s.length}, {"period", s.period}, {"drift", s.drift},
       {"noise", s.noise}, {"coupling", s.coupling}, {"seed", s.seed}, {"amplitude", s.amplitude},
       {"base", s.base}, {"weather_sigma", s.weather_sigma}, {"weather_ar", s.weather_ar},
       {"weather_gain", s.weather_gain}, {"step_seconds", s.step_seconds}};
}

inline void from_json(const nlohmann::json& j, SynthSpec& s) {
  const nlohmann::json defaults = SynthSpec{};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!defaults.contains(it.key())) throw std::invalid_argument("synthetic spec: unknown key '" + it.key() + "'");
  SynthSpec d;
  s.sites = j.value("sites", d.sites);
  s.length = j.value("length", d.length);
  s.period = j.value("period", d.period);
  s.drift = j.value("drift", d.drift);
  s.noise = j.value("noise", d.noise);
  s.coupling = j.value("coupling", d.coupling);
  s.seed = j.value("seed", d.seed);
  s.amplitude = j.value("amplitude", d.amplitude);
  s.base = j.value("base", d.base);
  s.weather_sigma = j.value("weather_sigma", d.weather_sigma);
  s.weather_ar = j.value("weather_ar", d.weather_ar);
  s.weather_gain = j.value("weather_gain", d.weather_gain);
  s.step_seconds = j.value("step_seconds", d.step_seconds);
  s.validate();
}

inline SynthSpec load_synth_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open synthetic spec '" + path + "'");
  return nlohmann::json::parse(in).get<SynthSpec>();
}

struct SyntheticStream {
  Dataset dataset;
  std::vector<DriftEvent> drift;  // ground truth, as scheduled
  SynthSpec spec;

  nlohmann::json drift_sidecar() const {
    nlohmann::json events = nlohmann::json::array();
    for (const auto& e : drift) {
      nlohmann::json j = e;
      j["end"] = e.end(spec.length);
      events.push_back(j);
    }
    return {{"seed", spec.seed}, {"length", spec.length}, {"events", events}};
  }
};

/// Feature layout per site: [power, weather, season_sin, season_cos].
/// The target is the power series itself; windows pair X[..t] with Y[t+h].
inline SyntheticStream generate_synthetic(const SynthSpec& spec) {
  spec.validate();
  const std::size_t N = spec.sites, T = spec.length;
  Rng rng(spec.seed);
  const double spread = 1.0 - spec.coupling;
  const double two_pi = 2.0 * std::numbers::pi;

  std::vector<double> phase(N), amp(N), level(N);
  for (std::size_t v = 0; v < N; ++v) {
    phase[v] = spread * rng.uniform(-0.5, 0.5) * two_pi * 0.25;
    amp[v] = spec.amplitude * (1.0 + spread * rng.uniform(-0.3, 0.3));
    level[v] = spec.base * (1.0 + spread * rng.uniform(-0.2, 0.2));
  }

  // Unit-variance AR(1) factors, scaled by weather_sigma.
  const double phi = spec.weather_ar;
  const double innov = std::sqrt(1.0 - phi * phi);
  double common = spec.weather_sigma > 0.0 ? rng.normal() : 0.0;
  std::vector<double> own(N, 0.0);
  if (spec.weather_sigma > 0.0)
    for (auto& o : own) o = rng.normal();
  const double mix_norm = std::sqrt(spec.coupling * spec.coupling + spread * spread);

  Tensor X({T, N, 4});
  Mat Y(static_cast<Eigen::Index>(T), static_cast<Eigen::Index>(N));
  std::vector<double> times(T);
  for (std::size_t t = 0; t < T; ++t) {
    times[t] = static_cast<double>(t) * spec.step_seconds;
    if (spec.weather_sigma > 0.0 && t > 0) {
      common = phi * common + innov * rng.normal();
      for (auto& o : own) o = phi * o + innov * rng.normal();
    }
    const double angle = two_pi * static_cast<double>(t) / spec.period;
    for (std::size_t v = 0; v < N; ++v) {
      double weather = 0.0;
      if (spec.weather_sigma > 0.0) weather = spec.weather_sigma * (spec.coupling * common + spread * own[v]) / mix_norm;
      double power = level[v] + amp[v] * std::sin(angle + phase[v]) + spec.weather_gain * weather;
      double reading = weather;
      for (const auto& e : spec.drift) {
        if (!e.affects(v)) continue;
        const double off = e.offset(t, T);
        if (e.channel == DriftChannel::signal) power += off;
        else reading += off;
      }
      if (spec.noise > 0.0) power += spec.noise * rng.normal();
      Y(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(v)) = power;
      X.at(t, v, 0) = power;
      X.at(t, v, 1) = reading;
      X.at(t, v, 2) = std::sin(angle);
      X.at(t, v, 3) = std::cos(angle);
    }
  }

  SyntheticStream out;
  out.spec = spec;
  out.drift = spec.drift;
  out.dataset.name = "synthetic";
  out.dataset.timestamps = std::move(times);
  out.dataset.frequency_seconds = spec.step_seconds;
  for (std::size_t v = 0; v < N; ++v) out.dataset.site_names.push_back("site" + std::to_string(v));
  out.dataset.feature_names = {"power", "weather", "season_sin", "season_cos"};
  out.dataset.feature_kinds = {FeatureKind::power, FeatureKind::numeric, FeatureKind::passthrough, FeatureKind::passthrough};
  out.dataset.set_values(std::move(X), std::move(Y));
  return out;
}

}  // namespace freegnn
