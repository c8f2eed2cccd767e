#include "calora/model/serialize.hpp"

#include <cmath>

namespace calora {

namespace {

std::string layer_prefix(std::size_t l) { return "layer" + std::to_string(l); }

template <typename T>
void put_param(Checkpoint& ck, const ParamPtr<T>& p, const std::string& name) {
  ck.put(name, p->value);
}

template <typename T>
void load_into(const Checkpoint& ck, const std::string& name, const ParamPtr<T>& p) {
  Tensor<T> t = ck.tensor<T>(name);
  if (!p->value.empty() && t.shape() != p->value.shape()) {
    throw IoError("record '" + name + "' has shape " + shape_to_string(t.shape()) + ", expected " +
                  shape_to_string(p->value.shape()));
  }
  p->value = std::move(t);
}

std::size_t as_size(double v, const std::string& name) {
  if (!(v >= 0) || v != std::floor(v)) throw IoError("record '" + name + "' is not a count");
  return static_cast<std::size_t>(v);
}

}  // namespace

template <typename T>
Checkpoint model_to_checkpoint(const TransformerModel<T>& model) {
  Checkpoint ck;
  const TransformerConfig& c = model.config();
  ck.put_scalar("config/n_layers", static_cast<double>(c.n_layers));
  ck.put_scalar("config/d_model", static_cast<double>(c.d_model));
  ck.put_scalar("config/n_heads", static_cast<double>(c.n_heads));
  ck.put_scalar("config/d_ff", static_cast<double>(c.d_ff));
  ck.put_scalar("config/vocab_size", static_cast<double>(c.vocab_size));
  ck.put_scalar("config/max_seq_len", static_cast<double>(c.max_seq_len));
  ck.put_scalar("config/activation", static_cast<double>(c.activation));
  put_param(ck, model.token_embedding(), "embed/tokens");
  put_param(ck, model.position_embedding(), "embed/positions");
  for (std::size_t l = 0; l < model.n_layers(); ++l) {
    const TransformerLayer<T>& layer = model.layer(l);
    const std::string p = layer_prefix(l);
    put_param(ck, layer.ln1_gamma, p + "/ln1/gamma");
    put_param(ck, layer.ln1_beta, p + "/ln1/beta");
    put_param(ck, layer.ln2_gamma, p + "/ln2/gamma");
    put_param(ck, layer.ln2_beta, p + "/ln2/beta");
    for (SlotKind kind : kAllSlotKinds) {
      const LinearSlot<T>& s = layer.slot(kind);
      const std::string base = s.path();
      if (s.quantized()) {
        const QuantizedWeight& q = s.quant();
        ck.put_i8(base + "/weight", Shape{q.rows, q.cols}, q.codes, q.scale);
        if (q.bits != 8) ck.put_scalar(base + "/weight_bits", q.bits);
      } else {
        put_param(ck, s.weight(), base + "/weight");
      }
      if (s.bias()) put_param(ck, s.bias(), base + "/bias");
      if (s.masked()) ck.put_scalar(base + "/pruned", 1.0);
    }
    bool all_heads = true;
    for (bool k : layer.head_keep) all_heads = all_heads && k;
    if (!all_heads) {
      Tensor<T> keep(Shape{layer.head_keep.size()});
      for (std::size_t h = 0; h < layer.head_keep.size(); ++h) keep[h] = layer.head_keep[h] ? T{1} : T{0};
      ck.put(p + "/attn/head_keep", keep);
    }
    if (layer.moe) {
      const MoELayout<T>& moe = *layer.moe;
      Tensor<double> assign(Shape{moe.assignment.size()});
      for (std::size_t j = 0; j < moe.assignment.size(); ++j) assign[j] = static_cast<double>(moe.assignment[j]);
      ck.put(p + "/moe/assignment", assign);
      ck.put_scalar(p + "/moe/n_experts", static_cast<double>(moe.n_experts));
      ck.put_scalar(p + "/moe/top_k", static_cast<double>(moe.top_k));
      ck.put_scalar(p + "/moe/router_mode", static_cast<double>(moe.router));
      if (moe.router_weight) put_param(ck, moe.router_weight, p + "/moe/router");
    }
  }
  put_param(ck, model.final_gamma(), "final_ln/gamma");
  put_param(ck, model.final_beta(), "final_ln/beta");
  put_param(ck, model.head(), "head/weight");
  return ck;
}

TransformerConfig config_from_checkpoint(const Checkpoint& ck) {
  TransformerConfig c;
  auto get = [&](const char* key) {
    const std::string name = std::string("config/") + key;
    return as_size(ck.scalar(name), name);
  };
  c.n_layers = get("n_layers");
  c.d_model = get("d_model");
  c.n_heads = get("n_heads");
  c.d_ff = get("d_ff");
  c.vocab_size = get("vocab_size");
  c.max_seq_len = get("max_seq_len");
  const std::size_t act = get("activation");
  if (act > static_cast<std::size_t>(ag::Activation::kIdentity)) throw IoError("unknown activation code");
  c.activation = static_cast<ag::Activation>(act);
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw IoError(std::string("checkpoint config invalid: ") + e.what());
  }
  return c;
}

template <typename T>
TransformerModel<T> model_from_checkpoint(const Checkpoint& ck) {
  TransformerModel<T> model = TransformerModel<T>::zeros(config_from_checkpoint(ck));
  load_into(ck, "embed/tokens", model.token_embedding());
  load_into(ck, "embed/positions", model.position_embedding());
  for (std::size_t l = 0; l < model.n_layers(); ++l) {
    TransformerLayer<T>& layer = model.layer(l);
    const std::string p = layer_prefix(l);
    load_into(ck, p + "/ln1/gamma", layer.ln1_gamma);
    load_into(ck, p + "/ln1/beta", layer.ln1_beta);
    load_into(ck, p + "/ln2/gamma", layer.ln2_gamma);
    load_into(ck, p + "/ln2/beta", layer.ln2_beta);
    for (SlotKind kind : kAllSlotKinds) {
      LinearSlot<T>& s = layer.slot(kind);
      const std::string base = s.path();
      const Record& w = ck.at(base + "/weight");
      if (w.shape.size() != 2) throw IoError("record '" + base + "/weight' is not a matrix");
      // Shrunken FFNs change shapes, so slot tensors take the stored shape.
      s.weight()->value = Tensor<T>(w.shape);
      if (s.bias()) {
        s.bias()->value = Tensor<T>(Shape{w.shape[0]});
        load_into(ck, base + "/bias", s.bias());
      }
      if (w.dtype == DType::kI8) {
        QuantizedWeight q;
        q.bits = ck.contains(base + "/weight_bits") ? static_cast<int>(ck.scalar(base + "/weight_bits")) : 8;
        q.rows = w.shape[0];
        q.cols = w.shape[1];
        q.codes = w.i8;
        q.scale = w.scale;
        s.set_quantized(std::move(q));
      } else {
        load_into(ck, base + "/weight", s.weight());
      }
      if (ck.contains(base + "/pruned")) {
        Tensor<T> mask(w.shape);
        for (std::size_t i = 0; i < mask.numel(); ++i) mask[i] = s.weight()->value[i] != T{0} ? T{1} : T{0};
        s.set_mask(std::move(mask));
      }
    }
    if (layer.ffn_out.d_in() != layer.ffn_in.d_out()) {
      throw IoError(p + ": ffn_in/ffn_out widths disagree");
    }
    if (ck.contains(p + "/attn/head_keep")) {
      const std::vector<double> keep = ck.at(p + "/attn/head_keep").as_f64();
      if (keep.size() != layer.head_keep.size()) throw IoError(p + ": head mask length mismatch");
      for (std::size_t h = 0; h < keep.size(); ++h) layer.head_keep[h] = keep[h] != 0.0;
    }
    if (ck.contains(p + "/moe/assignment")) {
      MoELayout<T> moe;
      moe.n_experts = as_size(ck.scalar(p + "/moe/n_experts"), p + "/moe/n_experts");
      moe.top_k = as_size(ck.scalar(p + "/moe/top_k"), p + "/moe/top_k");
      const std::size_t mode = as_size(ck.scalar(p + "/moe/router_mode"), p + "/moe/router_mode");
      if (mode > 1) throw IoError(p + ": unknown router mode");
      moe.router = static_cast<RouterMode>(mode);
      for (double a : ck.at(p + "/moe/assignment").as_f64()) {
        const std::size_t e = as_size(a, p + "/moe/assignment");
        if (e >= moe.n_experts) throw IoError(p + ": expert index out of range");
        moe.assignment.push_back(e);
      }
      if (moe.assignment.size() != layer.d_ff() || moe.top_k == 0 || moe.top_k > moe.n_experts) {
        throw IoError(p + ": inconsistent MoE layout");
      }
      if (ck.contains(p + "/moe/router")) {
        moe.router_weight = make_param<T>(p + "/moe/router", ck.tensor<T>(p + "/moe/router"), false);
      } else if (moe.router == RouterMode::kLearned) {
        throw IoError(p + ": learned router without weights");
      }
      layer.moe = std::move(moe);
    }
  }
  load_into(ck, "final_ln/gamma", model.final_gamma());
  load_into(ck, "final_ln/beta", model.final_beta());
  load_into(ck, "head/weight", model.head());
  return model;
}

template Checkpoint model_to_checkpoint(const TransformerModel<float>&);
template Checkpoint model_to_checkpoint(const TransformerModel<double>&);
template TransformerModel<float> model_from_checkpoint(const Checkpoint&);
template TransformerModel<double> model_from_checkpoint(const Checkpoint&);

}  // namespace calora
