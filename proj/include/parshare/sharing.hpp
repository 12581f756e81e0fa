#pragma once

#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "parshare/model_config.hpp"
#include "parshare/tensor.hpp"

namespace parshare {

enum class Component { kEmbedding, kEncoder, kDecoder };
enum class Sublayer { kNone, kSelfAttn, kEncDecAttn, kFfn, kNormFinal };
enum class Role { kK, kQ, kV, kF, kL1, kL2, kB1, kB2, kGain, kBias, kE };

// Address of one weight tensor of one target language's translation model,
// e.g. "decoder.L3.self_attn.K@de" or "embedding.E@de". Layers are 1-based;
// layer 0 means "no layer".
struct SlotId {
  Component component = Component::kEmbedding;
  int layer = 0;
  Sublayer sublayer = Sublayer::kNone;
  Role role = Role::kE;
  std::string target;

  std::string to_string() const;
  static SlotId parse(std::string_view text);
  // Same address with a different target language.
  SlotId retarget(std::string target_lang) const;

  auto operator<=>(const SlotId&) const = default;
};

// Matrices (W_E, W_K, W_Q, W_V, W_F, W_L1, W_L2) as opposed to biases and
// layer-norm gains/offsets.
bool is_weight_matrix(Role role);

Shape slot_shape(const SlotId& slot, const ModelConfig& config);

// Every slot of one bilingual model for `target`, in canonical order:
// embedding, encoder layers, encoder final norm, decoder layers, decoder final
// norm.
std::vector<SlotId> model_slots(const ModelConfig& config, const std::string& target);

// The canonical slot universe of a one-to-many system: model_slots for each
// target in order.
std::vector<SlotId> enumerate_slots(const ModelConfig& config, const std::vector<std::string>& targets);

enum class Strategy {
  kNone,
  kEmbed,
  kEmbedEnc,
  kFfn,
  kSelfAttn,
  kEncDecAttn,
  kKvBoth,
  kKqBoth,
  kAttnBoth,
  kFull,
  kExplicit,
};

std::string_view strategy_name(Strategy strategy);
Strategy parse_strategy(std::string_view name);
// The ten named strategies, from fully separate models to one unified model.
const std::vector<Strategy>& builtin_strategies();

// Target name of a single-decoder model that serves every language; routes all
// language tags to one decoder.
inline constexpr std::string_view kUnifiedTarget = "*";

// Partition of the slot universe into groups; every group is backed by one
// storage cell.
struct SharingPlan {
  Strategy strategy = Strategy::kNone;
  std::vector<std::string> targets;
  std::vector<std::vector<SlotId>> groups;

  // Maps a language tag to the decoder target that serves it.
  const std::string& route(std::string_view language) const;
  bool serves(std::string_view language) const;

  // Structured text: "strategy = NAME", "targets = a b", and for EXPLICIT plans
  // one "group = slot slot ..." line per shared group.
  std::string serialize() const;
  static SharingPlan parse(std::string_view text, const ModelConfig& config);

  bool operator==(const SharingPlan&) const = default;
};

// Built-in strategy -> partition. Strategies beyond NONE and EMBED share the
// embedding and the whole encoder; decoder choices apply in every layer.
// Biases and layer-norm parameters follow their sublayer: they are shared only
// when every matrix of that sublayer is shared.
SharingPlan plan_from_strategy(Strategy strategy, const std::vector<std::string>& targets,
                               const ModelConfig& config);

// Explicit plan: the listed groups are shared, every other slot stands alone.
// Shapes are not checked here; see verify_plan.
SharingPlan explicit_plan(const std::vector<std::string>& targets,
                          const std::vector<std::vector<SlotId>>& shared_groups, const ModelConfig& config);

struct PlanFinding {
  enum class Kind { kUnknownSlot, kDuplicateSlot, kMissingSlot, kShapeConflict, kValueMismatch };
  Kind kind;
  std::string detail;
};

// Partition validity and shape agreement.
std::vector<PlanFinding> verify_plan(const SharingPlan& plan, const ModelConfig& config);

struct GroupCount {
  std::string name;
  std::size_t slots = 0;
  std::size_t size = 0;
  bool weights = false;
};

struct ParameterCount {
  std::uint64_t total = 0;
  std::uint64_t weights_only = 0;
  std::vector<GroupCount> groups;
};

ParameterCount count_parameters(const ModelConfig& config, const SharingPlan& plan);

// Canonical name of a group: its first slot with the target replaced by the
// '+'-joined targets of all members.
std::string group_name(const std::vector<SlotId>& group);

// Storage cells plus the slot -> cell map. Slots in one group alias the same
// Tensor, so writes through any of them are visible through all, and gradient
// contributions from every decoder sum into one buffer.
template <typename T>
class ParameterTable {
 public:
  // Throws PlanError on a shape conflict inside a group or an invalid
  // partition. Cells start at zero; see init_parameters.
  static ParameterTable resolve(const ModelConfig& config, const SharingPlan& plan);

  const ModelConfig& config() const { return config_; }
  const SharingPlan& plan() const { return plan_; }

  const Tensor<T>& slot(const SlotId& id) const;
  std::size_t cell_of(const SlotId& id) const;
  bool has_slot(const SlotId& id) const { return slot_to_cell_.count(id) != 0; }

  std::size_t slot_count() const { return slot_to_cell_.size(); }
  std::size_t cell_count() const { return cells_.size(); }
  const std::vector<Tensor<T>>& cells() const { return cells_; }
  std::vector<Tensor<T>>& cells() { return cells_; }
  const std::string& cell_name(std::size_t cell) const { return names_[cell]; }
  const std::vector<SlotId>& cell_slots(std::size_t cell) const { return plan_.groups[cell]; }

  void zero_grad();
  // Copies every cell value from another table with the same cell layout.
  void copy_values_from(const ParameterTable& other);

 private:
  ModelConfig config_;
  SharingPlan plan_;
  std::vector<Tensor<T>> cells_;
  std::vector<std::string> names_;
  std::map<SlotId, std::size_t> slot_to_cell_;
};

extern template class ParameterTable<float>;
extern template class ParameterTable<double>;

// verify_plan plus bitwise equality of every slot read within each group.
template <typename T>
std::vector<PlanFinding> verify_table(const ParameterTable<T>& table);

}  // namespace parshare
