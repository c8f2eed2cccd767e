#pragma once

#include "calora/io/checkpoint.hpp"
#include "calora/model/transformer.hpp"

namespace calora {

// Backbone records: config scalars, embeddings, norms, every slot (i8 codes
// plus row scales for quantized slots), head masks, MoE layouts and the head.
// Adapters are not included.
template <typename T>
Checkpoint model_to_checkpoint(const TransformerModel<T>& model);

// Rebuilds a backbone, including quantized storage, pruning masks, shrunken
// FFNs and MoE layouts. Throws IoError on missing or inconsistent records.
template <typename T>
TransformerModel<T> model_from_checkpoint(const Checkpoint& ckpt);

TransformerConfig config_from_checkpoint(const Checkpoint& ckpt);

}  // namespace calora
