#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "apdt/common.hpp"

namespace apdt {

enum class Precision { f32, f64 };

// All hyperparameters, defaults at production values; every dimension can be
// overridden for desk-scale runs. Serialized as flat key=value text.
struct TrainConfig {
  // model
  int d_model = 512;
  int ffn_dim = 1024;
  int enc_layers = 6;
  int dec_layers = 6;
  int heads = 8;
  double dropout = 0.1;
  double label_smoothing = 0.1;
  std::string ffn_activation = "gelu";  // or "relu"
  bool sinusoidal_positions = false;
  bool share_encoder_stack = true;
  bool share_teacher_decoder = true;

  // distillation
  int distill_layer = 6;  // selector L, 1-based
  double gamma1 = 0.5;
  bool learn_gamma1 = false;
  bool teacher_stopgrad = false;

  // objectives
  double beta = 0.4;
  double alpha = 0.5;
  bool coe_sampled_prefix = false;

  // optimization
  double learning_rate = 0.001;  // base factor of the warmup/decay schedule
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.998;
  double adam_eps = 1e-9;
  int warmup_steps = 8000;
  double grad_clip = 1.0;
  int batch_size = 32;
  int max_steps = 10000;
  int valid_every = 200;
  int valid_sample_cap = 100;
  std::uint64_t seed = 1;
  std::string precision = "fp32";  // or "fp64"

  // sequence limits
  int title_max = 64;
  int attr_total_max = 96;
  int review_total_max = 192;
  int desc_max = 96;
  int attr_seg_max = 32;
  int rev_seg_max = 16;

  // ablations
  bool no_copy = false;
  bool no_distill = false;
  bool no_coe = false;

  int pos_max() const {
    int m = title_max;
    m = std::max(m, attr_total_max);
    m = std::max(m, review_total_max);
    m = std::max(m, desc_max + 1);  // BOS-framed decoder input
    return m;
  }

  void validate() const {
    auto bad = [](const std::string& m) { throw ValidationError("config: " + m); };
    if (alpha < 0 || alpha > 1) bad("alpha must be in [0,1]");
    if (beta < 0 || beta > 1) bad("beta must be in [0,1]");
    if (gamma1 < 0 || gamma1 > 1) bad("gamma1 must be in [0,1]");
    if (distill_layer < 1 || distill_layer > enc_layers)
      bad("distill_layer must be in [1, enc_layers]");
    if (d_model % heads != 0) bad("d_model must be divisible by heads");
    if (precision != "fp32" && precision != "fp64") bad("precision must be fp32 or fp64");
    if (ffn_activation != "gelu" && ffn_activation != "relu")
      bad("ffn_activation must be gelu or relu");
    if (dropout < 0 || dropout >= 1) bad("dropout must be in [0,1)");
    if (label_smoothing < 0 || label_smoothing >= 1) bad("label_smoothing must be in [0,1)");
    if (batch_size < 1) bad("batch_size must be >= 1");
    if (warmup_steps < 1) bad("warmup_steps must be >= 1");
  }
};

namespace detail {

template <class T>
struct ConfigField {
  const char* name;
  T TrainConfig::*ptr;
};

inline const auto& int_fields() {
  static const std::vector<ConfigField<int>> f = {
      {"d_model", &TrainConfig::d_model},
      {"ffn_dim", &TrainConfig::ffn_dim},
      {"enc_layers", &TrainConfig::enc_layers},
      {"dec_layers", &TrainConfig::dec_layers},
      {"heads", &TrainConfig::heads},
      {"distill_layer", &TrainConfig::distill_layer},
      {"warmup_steps", &TrainConfig::warmup_steps},
      {"batch_size", &TrainConfig::batch_size},
      {"max_steps", &TrainConfig::max_steps},
      {"valid_every", &TrainConfig::valid_every},
      {"valid_sample_cap", &TrainConfig::valid_sample_cap},
      {"title_max", &TrainConfig::title_max},
      {"attr_total_max", &TrainConfig::attr_total_max},
      {"review_total_max", &TrainConfig::review_total_max},
      {"desc_max", &TrainConfig::desc_max},
      {"attr_seg_max", &TrainConfig::attr_seg_max},
      {"rev_seg_max", &TrainConfig::rev_seg_max},
  };
  return f;
}

inline const auto& double_fields() {
  static const std::vector<ConfigField<double>> f = {
      {"dropout", &TrainConfig::dropout},
      {"label_smoothing", &TrainConfig::label_smoothing},
      {"gamma1", &TrainConfig::gamma1},
      {"beta", &TrainConfig::beta},
      {"alpha", &TrainConfig::alpha},
      {"learning_rate", &TrainConfig::learning_rate},
      {"adam_beta1", &TrainConfig::adam_beta1},
      {"adam_beta2", &TrainConfig::adam_beta2},
      {"adam_eps", &TrainConfig::adam_eps},
      {"grad_clip", &TrainConfig::grad_clip},
  };
  return f;
}

inline const auto& bool_fields() {
  static const std::vector<ConfigField<bool>> f = {
      {"sinusoidal_positions", &TrainConfig::sinusoidal_positions},
      {"share_encoder_stack", &TrainConfig::share_encoder_stack},
      {"share_teacher_decoder", &TrainConfig::share_teacher_decoder},
      {"learn_gamma1", &TrainConfig::learn_gamma1},
      {"teacher_stopgrad", &TrainConfig::teacher_stopgrad},
      {"coe_sampled_prefix", &TrainConfig::coe_sampled_prefix},
      {"no_copy", &TrainConfig::no_copy},
      {"no_distill", &TrainConfig::no_distill},
      {"no_coe", &TrainConfig::no_coe},
  };
  return f;
}

inline const auto& string_fields() {
  static const std::vector<ConfigField<std::string>> f = {
      {"ffn_activation", &TrainConfig::ffn_activation},
      {"precision", &TrainConfig::precision},
  };
  return f;
}

}  // namespace detail

inline std::string config_to_text(const TrainConfig& c) {
  std::string out;
  auto emit = [&out](const std::string& k, const std::string& v) {
    out += k;
    out += '=';
    out += v;
    out += '\n';
  };
  for (const auto& f : detail::int_fields()) emit(f.name, std::to_string(c.*(f.ptr)));
  for (const auto& f : detail::double_fields()) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", c.*(f.ptr));
    emit(f.name, buf);
  }
  for (const auto& f : detail::bool_fields()) emit(f.name, c.*(f.ptr) ? "true" : "false");
  for (const auto& f : detail::string_fields()) emit(f.name, c.*(f.ptr));
  emit("seed", std::to_string(c.seed));
  return out;
}

// Applies one key=value assignment; unknown keys are rejected so typos fail
// loudly instead of silently training with defaults.
inline void config_set(TrainConfig& c, const std::string& key, const std::string& value) {
  auto parse_fail = [&](const char* what) {
    throw ValidationError("config: bad " + std::string(what) + " value for '" + key +
                          "': " + value);
  };
  for (const auto& f : detail::int_fields())
    if (key == f.name) {
      try {
        c.*(f.ptr) = std::stoi(value);
      } catch (...) {
        parse_fail("integer");
      }
      return;
    }
  for (const auto& f : detail::double_fields())
    if (key == f.name) {
      try {
        c.*(f.ptr) = std::stod(value);
      } catch (...) {
        parse_fail("number");
      }
      return;
    }
  for (const auto& f : detail::bool_fields())
    if (key == f.name) {
      if (value == "true" || value == "1")
        c.*(f.ptr) = true;
      else if (value == "false" || value == "0")
        c.*(f.ptr) = false;
      else
        parse_fail("boolean");
      return;
    }
  for (const auto& f : detail::string_fields())
    if (key == f.name) {
      c.*(f.ptr) = value;
      return;
    }
  if (key == "seed") {
    try {
      c.seed = std::stoull(value);
    } catch (...) {
      parse_fail("integer");
    }
    return;
  }
  throw ValidationError("config: unknown key '" + key + "'");
}

inline TrainConfig config_from_text(const std::string& text) {
  TrainConfig c;
  size_t pos = 0, line_no = 0;
  while (pos < text.size()) {
    size_t nl = text.find('\n', pos);
    if (nl == std::string::npos) nl = text.size();
    std::string line = text.substr(pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    size_t h = line.find('#');
    if (h != std::string::npos) line = line.substr(0, h);
    size_t b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) continue;
    size_t e = line.find_last_not_of(" \t\r");
    line = line.substr(b, e - b + 1);
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ValidationError("config line " + std::to_string(line_no) + ": expected key=value");
    std::string key = line.substr(0, eq);
    std::string value = line.substr(eq + 1);
    auto strip = [](std::string s) {
      size_t b2 = s.find_first_not_of(" \t");
      if (b2 == std::string::npos) return std::string();
      size_t e2 = s.find_last_not_of(" \t");
      return s.substr(b2, e2 - b2 + 1);
    };
    config_set(c, strip(key), strip(value));
  }
  return c;
}

}  // namespace apdt
