#ifndef GCI_CHECKPOINT_HPP_
#define GCI_CHECKPOINT_HPP_

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "gci/model.hpp"
#include "gci/tensor.hpp"

namespace gci {

/// Binary checkpoint: magic "GCI1", then a u64 record count, then per record
/// a length-prefixed name, a length-prefixed shape, and the payload as
/// little-endian f64. Records are written in the order given, so an identical
/// model always serializes to identical bytes.
void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, const Tensor*>>& entries);

/// Saves every model parameter plus `meta.*` records (pool plan, activation
/// slope, predefined-attention distribution) so the architecture can be
/// rebuilt from the file alone.
void save_model_checkpoint(const std::string& path, const GciModel& model);

std::map<std::string, Tensor> load_checkpoint(const std::string& path);

/// Copies entries into matching model parameters. Non-meta names that match
/// no parameter are rejected, as are shape mismatches. Missing parameters are
/// rejected too, except for the counterfactual generator (`gen_cf.*`), which
/// may be stripped from inference-only checkpoints.
void apply_checkpoint(GciModel& model, const std::map<std::string, Tensor>& entries);

/// Rebuilds the architecture recorded in a checkpoint and loads its weights.
GciModel model_from_checkpoint(const std::map<std::string, Tensor>& entries);

}  // namespace gci

#endif  // GCI_CHECKPOINT_HPP_
