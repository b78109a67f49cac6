#pragma once

#include <string>
#include <utility>
#include <vector>

#include "mafenn/tensor.hpp"

namespace mafenn {

// Weight checkpoint: magic "MAFW", version u32, then per tensor
// (name length u16, name bytes, rank u8, dims u32[], f64 data),
// little-endian throughout.  Tensors keep their write order on load.
void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, Tensor>>& items);
std::vector<std::pair<std::string, Tensor>> load_checkpoint(
    const std::string& path);

// ParamSet helpers: names are stored as "<prefix>.<param name>".
void append_checkpoint_items(
    std::vector<std::pair<std::string, Tensor>>& items,
    const std::string& prefix, const ParamSet& params);
// Fills matching tensors of `params` from loaded items; throws if any
// "<prefix>.*" entry is missing or has a different shape.
void restore_params(const std::vector<std::pair<std::string, Tensor>>& items,
                    const std::string& prefix, ParamSet& params);

}  // namespace mafenn
