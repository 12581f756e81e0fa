#include "parshare/model_config.hpp"

#include "parshare/errors.hpp"

namespace parshare {

void ModelConfig::validate() const {
  if (num_layers < 0) throw ConfigError("num_layers must be non-negative");
  if (d_model < 2) throw ConfigError("d_model must be at least 2");
  if (d_ff < 1) throw ConfigError("d_ff must be positive");
  if (heads < 1) throw ConfigError("heads must be positive");
  if (d_model % heads != 0) {
    throw ConfigError("heads (" + std::to_string(heads) + ") must divide d_model (" + std::to_string(d_model) + ")");
  }
  if (vocab_size < 1) throw ConfigError("vocab_size must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must be in [0, 1)");
  if (max_position < 1) throw ConfigError("max_position must be positive");
}

std::string to_string(NormPlacement placement) {
  return placement == NormPlacement::kPre ? "pre" : "post";
}

NormPlacement parse_norm_placement(const std::string& text) {
  if (text == "pre") return NormPlacement::kPre;
  if (text == "post") return NormPlacement::kPost;
  throw ConfigError("unknown norm placement '" + text + "' (expected pre or post)");
}

std::string to_string(ScoreScaling scaling) {
  return scaling == ScoreScaling::kPerHead ? "per_head" : "model_width";
}

ScoreScaling parse_score_scaling(const std::string& text) {
  if (text == "per_head") return ScoreScaling::kPerHead;
  if (text == "model_width") return ScoreScaling::kModelWidth;
  throw ConfigError("unknown score scaling '" + text + "' (expected per_head or model_width)");
}

}  // namespace parshare
