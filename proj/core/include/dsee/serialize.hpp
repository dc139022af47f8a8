#pragma once

#include "dsee/archive.hpp"
#include "dsee/model.hpp"

namespace dsee {

/// Full model state (weights, adapters, supports, masks, gates) as a tensor
/// archive; round-trips bit-exactly.
TensorArchive model_to_archive(const ToyTransformer& model);

/// Rebuilds a model from model_to_archive output. Throws CorruptionError on
/// missing tensors or inconsistent shapes.
ToyTransformer model_from_archive(const TensorArchive& archive);

/// Deployment archive: every adapted projection replaced by its merged dense
/// weights (w (.) mask + uv + s2); adapter and mask tensors dropped. Tensor
/// names match the dense checkpoint layout, so before/after weight-change
/// reports line up.
TensorArchive merged_model_archive(const ToyTransformer& model);

} // namespace dsee
