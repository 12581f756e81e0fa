#pragma once

#include <string>

namespace parshare {

enum class NormPlacement { kPre, kPost };

// Attention logits are divided by sqrt(d_model / heads) (per-head width) or,
// for fidelity experiments, by sqrt(d_model).
enum class ScoreScaling { kPerHead, kModelWidth };

struct ModelConfig {
  int num_layers = 6;
  int d_model = 512;
  int d_ff = 2048;
  int heads = 8;
  int vocab_size = 0;
  double dropout = 0.1;
  int max_position = 1024;
  NormPlacement norm = NormPlacement::kPre;
  ScoreScaling scaling = ScoreScaling::kPerHead;

  int head_width() const { return d_model / heads; }

  // Throws ConfigError when an extent is non-positive, heads does not divide
  // d_model, or dropout is outside [0, 1).
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

std::string to_string(NormPlacement placement);
NormPlacement parse_norm_placement(const std::string& text);
std::string to_string(ScoreScaling scaling);
ScoreScaling parse_score_scaling(const std::string& text);

}  // namespace parshare
