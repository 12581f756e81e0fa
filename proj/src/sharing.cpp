#include "parshare/sharing.hpp"

#include <algorithm>
#include <cctype>
#include <cstring>
#include <set>
#include <sstream>

#include "parshare/errors.hpp"

namespace parshare {

namespace {

constexpr std::string_view component_name(Component c) {
  switch (c) {
    case Component::kEmbedding: return "embedding";
    case Component::kEncoder: return "encoder";
    case Component::kDecoder: return "decoder";
  }
  return "?";
}

constexpr std::string_view sublayer_name(Sublayer s) {
  switch (s) {
    case Sublayer::kNone: return "";
    case Sublayer::kSelfAttn: return "self_attn";
    case Sublayer::kEncDecAttn: return "encdec_attn";
    case Sublayer::kFfn: return "ffn";
    case Sublayer::kNormFinal: return "norm_final";
  }
  return "?";
}

constexpr std::string_view role_name(Role r) {
  switch (r) {
    case Role::kK: return "K";
    case Role::kQ: return "Q";
    case Role::kV: return "V";
    case Role::kF: return "F";
    case Role::kL1: return "L1";
    case Role::kL2: return "L2";
    case Role::kB1: return "b1";
    case Role::kB2: return "b2";
    case Role::kGain: return "gain";
    case Role::kBias: return "bias";
    case Role::kE: return "E";
  }
  return "?";
}

template <typename Enum, std::size_t N>
Enum lookup(std::string_view text, const std::pair<std::string_view, Enum> (&table)[N], const char* what) {
  for (const auto& [name, value] : table) {
    if (name == text) return value;
  }
  throw PlanError(std::string("unknown ") + what + " '" + std::string(text) + "'");
}

constexpr std::pair<std::string_view, Component> kComponents[] = {
    {"embedding", Component::kEmbedding}, {"encoder", Component::kEncoder}, {"decoder", Component::kDecoder}};
constexpr std::pair<std::string_view, Sublayer> kSublayers[] = {{"self_attn", Sublayer::kSelfAttn},
                                                                {"encdec_attn", Sublayer::kEncDecAttn},
                                                                {"ffn", Sublayer::kFfn},
                                                                {"norm_final", Sublayer::kNormFinal}};
constexpr std::pair<std::string_view, Role> kRoles[] = {
    {"K", Role::kK},   {"Q", Role::kQ},   {"V", Role::kV},       {"F", Role::kF},
    {"L1", Role::kL1}, {"L2", Role::kL2}, {"b1", Role::kB1},     {"b2", Role::kB2},
    {"gain", Role::kGain}, {"bias", Role::kBias}, {"E", Role::kE}};

constexpr std::pair<Strategy, std::string_view> kStrategyNames[] = {
    {Strategy::kNone, "NONE"},         {Strategy::kEmbed, "EMBED"},
    {Strategy::kEmbedEnc, "EMBED_ENC"}, {Strategy::kFfn, "FFN"},
    {Strategy::kSelfAttn, "SELF_ATTN"}, {Strategy::kEncDecAttn, "ENCDEC_ATTN"},
    {Strategy::kKvBoth, "KV_BOTH"},    {Strategy::kKqBoth, "KQ_BOTH"},
    {Strategy::kAttnBoth, "ATTN_BOTH"}, {Strategy::kFull, "FULL"},
    {Strategy::kExplicit, "EXPLICIT"}};

std::vector<std::string_view> split_ws(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i) out.push_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

void append_attention(std::vector<SlotId>& out, Component c, int layer, Sublayer s, const std::string& target) {
  for (Role r : {Role::kK, Role::kQ, Role::kV, Role::kF, Role::kGain, Role::kBias}) {
    out.push_back({c, layer, s, r, target});
  }
}

void append_ffn(std::vector<SlotId>& out, Component c, int layer, const std::string& target) {
  for (Role r : {Role::kL1, Role::kB1, Role::kL2, Role::kB2, Role::kGain, Role::kBias}) {
    out.push_back({c, layer, Sublayer::kFfn, r, target});
  }
}

bool decoder_slot_shared(Strategy strategy, const SlotId& slot) {
  const bool attention = slot.sublayer == Sublayer::kSelfAttn || slot.sublayer == Sublayer::kEncDecAttn;
  switch (strategy) {
    case Strategy::kFfn: return slot.sublayer == Sublayer::kFfn;
    case Strategy::kSelfAttn: return slot.sublayer == Sublayer::kSelfAttn;
    case Strategy::kEncDecAttn: return slot.sublayer == Sublayer::kEncDecAttn;
    case Strategy::kKvBoth: return attention && (slot.role == Role::kK || slot.role == Role::kV);
    case Strategy::kKqBoth: return attention && (slot.role == Role::kK || slot.role == Role::kQ);
    case Strategy::kAttnBoth: return attention;
    case Strategy::kFull: return true;
    default: return false;
  }
}

bool slot_shared(Strategy strategy, const SlotId& slot) {
  switch (slot.component) {
    case Component::kEmbedding: return strategy != Strategy::kNone;
    case Component::kEncoder: return strategy != Strategy::kNone && strategy != Strategy::kEmbed;
    case Component::kDecoder: return decoder_slot_shared(strategy, slot);
  }
  return false;
}

void require_targets(const std::vector<std::string>& targets) {
  if (targets.empty()) throw PlanError("a sharing plan needs at least one target language");
  std::set<std::string> seen;
  for (const auto& t : targets) {
    if (t.empty() || t.find_first_of("@+ \t") != std::string::npos) {
      throw PlanError("invalid target language name '" + t + "'");
    }
    if (!seen.insert(t).second) throw PlanError("duplicate target language '" + t + "'");
  }
}

}  // namespace

std::string SlotId::to_string() const {
  std::string out(component_name(component));
  if (layer > 0) out += ".L" + std::to_string(layer);
  if (sublayer != Sublayer::kNone) {
    out += '.';
    out += sublayer_name(sublayer);
  }
  out += '.';
  out += role_name(role);
  out += '@';
  out += target;
  return out;
}

SlotId SlotId::parse(std::string_view text) {
  const auto at = text.rfind('@');
  if (at == std::string_view::npos || at + 1 == text.size()) {
    throw PlanError("slot '" + std::string(text) + "' lacks an @target suffix");
  }
  SlotId id;
  id.target = std::string(text.substr(at + 1));
  std::vector<std::string_view> parts;
  std::string_view body = text.substr(0, at);
  std::size_t start = 0;
  while (true) {
    auto dot = body.find('.', start);
    parts.push_back(body.substr(start, dot == std::string_view::npos ? dot : dot - start));
    if (dot == std::string_view::npos) break;
    start = dot + 1;
  }
  if (parts.size() < 2) throw PlanError("malformed slot '" + std::string(text) + "'");
  id.component = lookup(parts.front(), kComponents, "component");
  id.role = lookup(parts.back(), kRoles, "role");
  std::size_t i = 1;
  if (i < parts.size() - 1 && parts[i].size() > 1 && parts[i][0] == 'L' &&
      std::all_of(parts[i].begin() + 1, parts[i].end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); })) {
    id.layer = std::stoi(std::string(parts[i].substr(1)));
    if (id.layer < 1) throw PlanError("layer numbers start at 1 in slot '" + std::string(text) + "'");
    ++i;
  }
  if (i < parts.size() - 1) {
    id.sublayer = lookup(parts[i], kSublayers, "sublayer");
    ++i;
  }
  if (i != parts.size() - 1) throw PlanError("malformed slot '" + std::string(text) + "'");
  if (id.to_string() != text) throw PlanError("malformed slot '" + std::string(text) + "'");
  return id;
}

SlotId SlotId::retarget(std::string target_lang) const {
  SlotId copy = *this;
  copy.target = std::move(target_lang);
  return copy;
}

bool is_weight_matrix(Role role) {
  switch (role) {
    case Role::kK:
    case Role::kQ:
    case Role::kV:
    case Role::kF:
    case Role::kL1:
    case Role::kL2:
    case Role::kE: return true;
    default: return false;
  }
}

Shape slot_shape(const SlotId& slot, const ModelConfig& config) {
  const auto d = static_cast<std::size_t>(config.d_model);
  const auto h = static_cast<std::size_t>(config.d_ff);
  switch (slot.role) {
    case Role::kE: return {static_cast<std::size_t>(config.vocab_size), d};
    case Role::kK:
    case Role::kQ:
    case Role::kV:
    case Role::kF: return {d, d};
    case Role::kL1: return {d, h};
    case Role::kL2: return {h, d};
    case Role::kB1: return {h};
    case Role::kB2:
    case Role::kGain:
    case Role::kBias: return {d};
  }
  return {};
}

std::vector<SlotId> model_slots(const ModelConfig& config, const std::string& target) {
  std::vector<SlotId> out;
  out.push_back({Component::kEmbedding, 0, Sublayer::kNone, Role::kE, target});
  for (int l = 1; l <= config.num_layers; ++l) {
    append_attention(out, Component::kEncoder, l, Sublayer::kSelfAttn, target);
    append_ffn(out, Component::kEncoder, l, target);
  }
  if (config.norm == NormPlacement::kPre) {
    out.push_back({Component::kEncoder, 0, Sublayer::kNormFinal, Role::kGain, target});
    out.push_back({Component::kEncoder, 0, Sublayer::kNormFinal, Role::kBias, target});
  }
  for (int l = 1; l <= config.num_layers; ++l) {
    append_attention(out, Component::kDecoder, l, Sublayer::kSelfAttn, target);
    append_attention(out, Component::kDecoder, l, Sublayer::kEncDecAttn, target);
    append_ffn(out, Component::kDecoder, l, target);
  }
  if (config.norm == NormPlacement::kPre) {
    out.push_back({Component::kDecoder, 0, Sublayer::kNormFinal, Role::kGain, target});
    out.push_back({Component::kDecoder, 0, Sublayer::kNormFinal, Role::kBias, target});
  }
  return out;
}

std::vector<SlotId> enumerate_slots(const ModelConfig& config, const std::vector<std::string>& targets) {
  std::vector<SlotId> out;
  for (const auto& t : targets) {
    auto slots = model_slots(config, t);
    out.insert(out.end(), slots.begin(), slots.end());
  }
  return out;
}

std::string_view strategy_name(Strategy strategy) {
  for (const auto& [s, name] : kStrategyNames) {
    if (s == strategy) return name;
  }
  return "?";
}

Strategy parse_strategy(std::string_view name) {
  for (const auto& [s, n] : kStrategyNames) {
    if (n == name) return s;
  }
  throw ConfigError("unknown sharing strategy '" + std::string(name) + "'");
}

const std::vector<Strategy>& builtin_strategies() {
  static const std::vector<Strategy> all = {Strategy::kNone,     Strategy::kEmbed,      Strategy::kEmbedEnc,
                                            Strategy::kFfn,      Strategy::kSelfAttn,   Strategy::kEncDecAttn,
                                            Strategy::kKvBoth,   Strategy::kKqBoth,     Strategy::kAttnBoth,
                                            Strategy::kFull};
  return all;
}

const std::string& SharingPlan::route(std::string_view language) const {
  for (const auto& t : targets) {
    if (t == language) return t;
  }
  if (targets.size() == 1 && targets.front() == kUnifiedTarget) return targets.front();
  std::string known;
  for (const auto& t : targets) known += (known.empty() ? "" : " ") + t;
  throw PlanError("language '" + std::string(language) + "' is not served by this plan (targets: " + known + ")");
}

bool SharingPlan::serves(std::string_view language) const {
  if (targets.size() == 1 && targets.front() == kUnifiedTarget) return true;
  return std::find(targets.begin(), targets.end(), language) != targets.end();
}

std::string SharingPlan::serialize() const {
  std::ostringstream out;
  out << "strategy = " << strategy_name(strategy) << '\n';
  out << "targets =";
  for (const auto& t : targets) out << ' ' << t;
  out << '\n';
  if (strategy == Strategy::kExplicit) {
    for (const auto& group : groups) {
      if (group.size() < 2) continue;
      out << "group =";
      for (const auto& s : group) out << ' ' << s.to_string();
      out << '\n';
    }
  }
  return out.str();
}

SharingPlan SharingPlan::parse(std::string_view text, const ModelConfig& config) {
  std::optional<Strategy> strategy;
  std::vector<std::string> targets;
  std::vector<std::vector<SlotId>> groups;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto end = text.find('\n', pos);
    auto line = trim(text.substr(pos, end == std::string_view::npos ? std::string_view::npos : end - pos));
    pos = end == std::string_view::npos ? text.size() + 1 : end + 1;
    ++line_no;
    if (line.empty() || line.front() == '#') continue;
    auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("plan line " + std::to_string(line_no) + ": expected key = value");
    }
    auto key = trim(line.substr(0, eq));
    auto value = trim(line.substr(eq + 1));
    if (key == "strategy") {
      strategy = parse_strategy(value);
    } else if (key == "targets") {
      for (auto t : split_ws(value)) targets.emplace_back(t);
    } else if (key == "group") {
      std::vector<SlotId> group;
      for (auto s : split_ws(value)) group.push_back(SlotId::parse(s));
      groups.push_back(std::move(group));
    } else {
      throw ConfigError("plan line " + std::to_string(line_no) + ": unknown key '" + std::string(key) + "'");
    }
  }
  if (!strategy) throw ConfigError("plan has no strategy line");
  if (*strategy == Strategy::kExplicit) return explicit_plan(targets, groups, config);
  if (!groups.empty()) throw ConfigError("group lines are only valid in EXPLICIT plans");
  return plan_from_strategy(*strategy, targets, config);
}

SharingPlan plan_from_strategy(Strategy strategy, const std::vector<std::string>& targets,
                               const ModelConfig& config) {
  if (strategy == Strategy::kExplicit) throw PlanError("EXPLICIT plans need group lists; use explicit_plan");
  require_targets(targets);
  SharingPlan plan;
  plan.strategy = strategy;
  plan.targets = targets;
  std::map<SlotId, std::size_t> shared_index;
  for (const auto& slot : enumerate_slots(config, targets)) {
    if (slot_shared(strategy, slot)) {
      auto key = slot.retarget("");
      auto [it, inserted] = shared_index.emplace(key, plan.groups.size());
      if (inserted) {
        plan.groups.push_back({slot});
      } else {
        plan.groups[it->second].push_back(slot);
      }
    } else {
      plan.groups.push_back({slot});
    }
  }
  return plan;
}

SharingPlan explicit_plan(const std::vector<std::string>& targets,
                          const std::vector<std::vector<SlotId>>& shared_groups, const ModelConfig& config) {
  require_targets(targets);
  auto universe = enumerate_slots(config, targets);
  std::map<SlotId, std::size_t> order;
  for (std::size_t i = 0; i < universe.size(); ++i) order.emplace(universe[i], i);
  std::map<SlotId, std::size_t> membership;
  for (std::size_t g = 0; g < shared_groups.size(); ++g) {
    for (const auto& slot : shared_groups[g]) {
      if (!order.count(slot)) throw PlanError("slot " + slot.to_string() + " does not exist in this model");
      if (!membership.emplace(slot, g).second) {
        throw PlanError("slot " + slot.to_string() + " appears in more than one group");
      }
    }
  }
  SharingPlan plan;
  plan.strategy = Strategy::kExplicit;
  plan.targets = targets;
  std::set<std::size_t> emitted;
  for (const auto& slot : universe) {
    auto it = membership.find(slot);
    if (it == membership.end()) {
      plan.groups.push_back({slot});
    } else if (emitted.insert(it->second).second) {
      auto group = shared_groups[it->second];
      std::sort(group.begin(), group.end(),
                [&](const SlotId& a, const SlotId& b) { return order.at(a) < order.at(b); });
      plan.groups.push_back(std::move(group));
    }
  }
  return plan;
}

std::vector<PlanFinding> verify_plan(const SharingPlan& plan, const ModelConfig& config) {
  std::vector<PlanFinding> findings;
  auto universe = enumerate_slots(config, plan.targets);
  std::set<SlotId> known(universe.begin(), universe.end());
  std::set<SlotId> seen;
  for (const auto& group : plan.groups) {
    if (group.empty()) continue;
    const Shape first = slot_shape(group.front(), config);
    for (const auto& slot : group) {
      if (!known.count(slot)) {
        findings.push_back({PlanFinding::Kind::kUnknownSlot, slot.to_string()});
        continue;
      }
      if (!seen.insert(slot).second) findings.push_back({PlanFinding::Kind::kDuplicateSlot, slot.to_string()});
      const Shape shape = slot_shape(slot, config);
      if (shape != first) {
        findings.push_back({PlanFinding::Kind::kShapeConflict, group.front().to_string() + " " +
                                                                  shape_string(first) + " vs " + slot.to_string() +
                                                                  " " + shape_string(shape)});
      }
    }
  }
  for (const auto& slot : universe) {
    if (!seen.count(slot)) findings.push_back({PlanFinding::Kind::kMissingSlot, slot.to_string()});
  }
  return findings;
}

std::string group_name(const std::vector<SlotId>& group) {
  if (group.empty()) return {};
  std::vector<std::string> targets;
  for (const auto& s : group) {
    if (std::find(targets.begin(), targets.end(), s.target) == targets.end()) targets.push_back(s.target);
  }
  std::string joined;
  for (const auto& t : targets) joined += (joined.empty() ? "" : "+") + t;
  return group.front().retarget("").to_string() + joined;
}

ParameterCount count_parameters(const ModelConfig& config, const SharingPlan& plan) {
  ParameterCount count;
  for (const auto& group : plan.groups) {
    if (group.empty()) continue;
    GroupCount g;
    g.name = group_name(group);
    g.slots = group.size();
    g.size = shape_size(slot_shape(group.front(), config));
    g.weights = is_weight_matrix(group.front().role);
    count.total += g.size;
    if (g.weights) count.weights_only += g.size;
    count.groups.push_back(std::move(g));
  }
  return count;
}

template <typename T>
ParameterTable<T> ParameterTable<T>::resolve(const ModelConfig& config, const SharingPlan& plan) {
  config.validate();
  auto findings = verify_plan(plan, config);
  if (!findings.empty()) throw PlanError("invalid sharing plan: " + findings.front().detail);
  ParameterTable table;
  table.config_ = config;
  table.plan_ = plan;
  for (std::size_t g = 0; g < plan.groups.size(); ++g) {
    const auto& group = plan.groups[g];
    table.cells_.push_back(Tensor<T>::zeros(slot_shape(group.front(), config), true));
    table.names_.push_back(group_name(group));
    for (const auto& slot : group) table.slot_to_cell_.emplace(slot, g);
  }
  return table;
}

template <typename T>
const Tensor<T>& ParameterTable<T>::slot(const SlotId& id) const {
  return cells_[cell_of(id)];
}

template <typename T>
std::size_t ParameterTable<T>::cell_of(const SlotId& id) const {
  auto it = slot_to_cell_.find(id);
  if (it == slot_to_cell_.end()) throw PlanError("no parameter slot " + id.to_string());
  return it->second;
}

template <typename T>
void ParameterTable<T>::zero_grad() {
  for (auto& c : cells_) c.zero_grad();
}

template <typename T>
void ParameterTable<T>::copy_values_from(const ParameterTable& other) {
  if (other.cells_.size() != cells_.size()) throw PlanError("parameter tables have different cell counts");
  for (std::size_t i = 0; i < cells_.size(); ++i) {
    if (cells_[i].shape() != other.cells_[i].shape()) {
      throw PlanError("cell " + names_[i] + " has a different shape in the source table");
    }
    auto dst = cells_[i].mutable_data();
    std::copy(other.cells_[i].data().begin(), other.cells_[i].data().end(), dst.begin());
  }
}

template class ParameterTable<float>;
template class ParameterTable<double>;

template <typename T>
std::vector<PlanFinding> verify_table(const ParameterTable<T>& table) {
  auto findings = verify_plan(table.plan(), table.config());
  for (const auto& group : table.plan().groups) {
    if (group.size() < 2) continue;
    const auto& first = table.slot(group.front());
    for (std::size_t i = 1; i < group.size(); ++i) {
      const auto& other = table.slot(group[i]);
      if (other.shape() != first.shape() ||
          !std::equal(first.data().begin(), first.data().end(), other.data().begin(),
                      [](T a, T b) { return std::memcmp(&a, &b, sizeof(T)) == 0; })) {
        findings.push_back({PlanFinding::Kind::kValueMismatch,
                            group.front().to_string() + " differs from " + group[i].to_string()});
      }
    }
  }
  return findings;
}

template std::vector<PlanFinding> verify_table(const ParameterTable<float>&);
template std::vector<PlanFinding> verify_table(const ParameterTable<double>&);

}  // namespace parshare
