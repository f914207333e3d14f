#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "taseg/params.hpp"

namespace taseg {

/// Component group of a parameter, derived from its registered name.
inline std::string param_group(std::string_view name) {
  auto starts = [&](std::string_view p) { return name.starts_with(p); };
  const bool adapter = name.find(".lora_") != std::string_view::npos;
  if (starts("encoder.thermal_embed.")) return "thermal-patch-embed";
  if (starts("encoder.rgb_embed.")) return "rgb-patch-embed";
  if (starts("encoder.dffm.")) return "dffm";
  if (starts("encoder.concat_fuse.")) return "concat-fusion";
  if (starts("encoder.") && adapter) return "encoder-lora";
  if (starts("encoder.blocks.")) return "encoder-backbone";
  if (starts("decoder.") && adapter) return "decoder-lora";
  if (starts("decoder.transformer.")) return "decoder-transformer";
  if (starts("decoder.upscale.") || starts("decoder.head.")) return "decoder-heads";
  if (starts("decoder.text_attn.")) return "text-attention";
  if (starts("prompt.pe_gaussian")) return "positional-encoding";
  if (starts("prompt.") || starts("decoder.iou_token") || starts("decoder.mask_tokens")) {
    return "prompt-embeddings";
  }
  return "other";
}

struct LedgerRow {
  std::string group;
  bool frozen = false;
  std::size_t count = 0;
};

struct ParamLedger {
  std::vector<LedgerRow> rows;  // first-seen order
  std::size_t trainable = 0;
  std::size_t frozen = 0;

  std::size_t count(const std::string& group, bool is_frozen = false) const {
    for (const auto& r : rows) {
      if (r.group == group && r.frozen == is_frozen) return r.count;
    }
    return 0;
  }
};

inline ParamLedger param_ledger(const ParamRegistry& reg) {
  ParamLedger out;
  for (std::size_t i = 0; i < reg.size(); ++i) {
    const Parameter& p = reg[i];
    const std::string g = param_group(p.name);
    LedgerRow* row = nullptr;
    for (auto& r : out.rows) {
      if (r.group == g && r.frozen == p.frozen) row = &r;
    }
    if (row == nullptr) {
      out.rows.push_back({g, p.frozen, 0});
      row = &out.rows.back();
    }
    row->count += p.count();
    (p.frozen ? out.frozen : out.trainable) += p.count();
  }
  return out;
}

inline nlohmann::json to_json(const ParamLedger& l) {
  nlohmann::json groups = nlohmann::json::array();
  for (const auto& r : l.rows) {
    groups.push_back({{"group", r.group}, {"frozen", r.frozen}, {"count", r.count}});
  }
  return {{"groups", groups}, {"trainable", l.trainable}, {"frozen", l.frozen}};
}

}  // namespace taseg
