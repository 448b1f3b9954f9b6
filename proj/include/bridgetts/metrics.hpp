#pragma once

#include <cstdint>
#include <cstdlib>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "bridgetts/ar_generator.hpp"
#include "bridgetts/error.hpp"

namespace bridgetts {

// ------------------------------------------------------------------ logging

enum class LogLevel { error = 0, info = 1, debug = 2 };

inline LogLevel parse_log_level(std::string_view s) {
  if (s == "error") return LogLevel::error;
  if (s == "info") return LogLevel::info;
  if (s == "debug") return LogLevel::debug;
  fail(ErrorCode::invalid_argument, "BRIDGE_LOG must be error, info or debug, got '" + std::string(s) + "'");
}

// Level from BRIDGE_LOG, read once; unset means info.
inline LogLevel log_level() {
  static const LogLevel level = [] {
    const char* env = std::getenv("BRIDGE_LOG");
    return env && *env ? parse_log_level(env) : LogLevel::info;
  }();
  return level;
}

inline void log_message(LogLevel level, std::string_view msg) {
  if (static_cast<int>(level) > static_cast<int>(log_level())) return;
  static constexpr const char* tags[] = {"error", "info", "debug"};
  std::cerr << "[" << tags[static_cast<int>(level)] << "] " << msg << "\n";
}

inline void log_error(std::string_view msg) { log_message(LogLevel::error, msg); }
inline void log_info(std::string_view msg) { log_message(LogLevel::info, msg); }
inline void log_debug(std::string_view msg) { log_message(LogLevel::debug, msg); }

// ------------------------------------------------------------------ metrics

struct CurvePoint {
  std::uint64_t step = 0;
  double value = 0.0;
};

// Summary of a run. Fields that a command did not measure stay null in JSON
// so the key set is the same for every command.
struct MetricsReport {
  double frame_rate_hz = 50.0;
  std::size_t frames_per_token = 5;
  std::optional<double> rtf_ratio;
  std::optional<double> bridged_seconds_per_second;
  std::optional<double> baseline_seconds_per_second;
  std::optional<double> bridged_forward_passes_per_second;
  std::optional<double> baseline_forward_passes_per_second;
  std::optional<double> reconstruction_mse;
  std::optional<double> teacher_forced_accuracy;
  std::optional<double> feature_mse;
  std::map<std::string, std::vector<CurvePoint>> curves;  // l_code, l_feat, l_token, l_features, ...

  double token_rate_hz() const { return frame_rate_hz / static_cast<double>(frames_per_token); }
  double ar_steps_per_second_of_speech() const { return token_rate_hz(); }
};

inline const std::vector<std::string>& metric_curve_names() {
  static const std::vector<std::string> names{"l_code", "l_feat", "dev_roundtrip_mse", "l_token", "l_features",
                                               "accuracy"};
  return names;
}

inline nlohmann::json to_json(const MetricsReport& m) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  nlohmann::json curves = nlohmann::json::object();
  for (const auto& name : metric_curve_names()) curves[name] = nlohmann::json::array();
  for (const auto& [name, pts] : m.curves) {
    require(curves.contains(name), ErrorCode::invalid_argument, "unknown metrics curve '" + name + "'");
    for (const auto& p : pts) curves[name].push_back({{"step", p.step}, {"value", p.value}});
  }
  return {{"token_rate_hz", m.token_rate_hz()},
          {"ar_steps_per_second_of_speech", m.ar_steps_per_second_of_speech()},
          {"frame_rate_hz", m.frame_rate_hz},
          {"frames_per_token", m.frames_per_token},
          {"rtf_ratio", opt(m.rtf_ratio)},
          {"bridged_seconds_per_second", opt(m.bridged_seconds_per_second)},
          {"baseline_seconds_per_second", opt(m.baseline_seconds_per_second)},
          {"bridged_forward_passes_per_second", opt(m.bridged_forward_passes_per_second)},
          {"baseline_forward_passes_per_second", opt(m.baseline_forward_passes_per_second)},
          {"reconstruction_mse", opt(m.reconstruction_mse)},
          {"teacher_forced_accuracy", opt(m.teacher_forced_accuracy)},
          {"feature_mse", opt(m.feature_mse)},
          {"curves", curves}};
}

// Key -> JSON type name, recursing into objects. Null counts as a number
// (unmeasured metric) and arrays are not descended into, so the result is the
// same for every report; a golden file pins it.
inline nlohmann::json json_schema_of(const nlohmann::json& j) {
  if (j.is_object()) {
    nlohmann::json out = nlohmann::json::object();
    for (auto it = j.begin(); it != j.end(); ++it) out[it.key()] = json_schema_of(it.value());
    return out;
  }
  if (j.is_array()) return "array";
  if (j.is_null() || j.is_number()) return "number";
  if (j.is_boolean()) return "boolean";
  return "string";
}

// ------------------------------------------------------------------ transcripts

inline nlohmann::json to_json(const TranscriptRecord& r) {
  nlohmann::json token = r.token.eos ? nlohmann::json("EOS") : nlohmann::json(r.token.first_level);
  return {{"step", r.step}, {"token", token}, {"head_entropies", r.head_entropies}, {"ms_elapsed", r.ms_elapsed}};
}

// One JSON object per line.
inline std::string transcript_jsonl(const std::vector<TranscriptRecord>& records) {
  std::string out;
  for (const auto& r : records) out += to_json(r).dump() + "\n";
  return out;
}

}  // namespace bridgetts
