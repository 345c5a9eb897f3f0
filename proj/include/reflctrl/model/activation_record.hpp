#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "reflctrl/core_types.hpp"

namespace reflctrl {

// One captured block output (z_attn or z_mlp) at one token position.
struct ActivationRecord {
  std::string trace_id;
  std::int64_t token_index = 0;
  int layer = 0;
  Site site = Site::attn;
  std::vector<float> vector;

  friend bool operator==(const ActivationRecord&, const ActivationRecord&) = default;
};

struct HeadActivationRecord {
  std::string trace_id;
  std::int64_t token_index = 0;
  int layer = 0;
  int head = 0;
  std::vector<float> vector;  // embedded into model space
};

struct ResidualRecord {
  std::string trace_id;
  std::int64_t token_index = 0;
  std::vector<float> vector;
};

struct ActivationKey {
  std::string trace_id;
  std::int64_t token_index = 0;
  int layer = 0;
  Site site = Site::attn;
  friend auto operator<=>(const ActivationKey&, const ActivationKey&) = default;
};

inline ActivationKey key_of(const ActivationRecord& r) { return {r.trace_id, r.token_index, r.layer, r.site}; }

}  // namespace reflctrl
