#include "calora/model/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_set>

namespace calora {

const char* to_string(RouterMode mode) {
  return mode == RouterMode::kOracle ? "oracle" : "learned";
}

RouterMode router_mode_from_string(const std::string& name) {
  if (name == "oracle") return RouterMode::kOracle;
  if (name == "learned") return RouterMode::kLearned;
  throw ConfigError("unknown router mode '" + name + "'");
}

template <typename T>
std::vector<std::vector<std::size_t>> MoELayout<T>::experts() const {
  std::vector<std::vector<std::size_t>> out(n_experts);
  for (std::size_t j = 0; j < assignment.size(); ++j) out.at(assignment[j]).push_back(j);
  return out;
}

template <typename T>
std::vector<std::vector<std::size_t>> moe_select(const MoELayout<T>& moe, const Tensor<T>& h,
                                                 const Tensor<T>& x) {
  const std::size_t rows = h.rows(), d_ff = h.cols(), e_count = moe.n_experts;
  std::vector<std::vector<std::size_t>> selected(rows);
  std::vector<double> score(e_count);
  std::vector<std::size_t> order(e_count);
  for (std::size_t r = 0; r < rows; ++r) {
    std::fill(score.begin(), score.end(), 0.0);
    if (moe.router == RouterMode::kOracle) {
      for (std::size_t j = 0; j < d_ff; ++j) {
        const T a = h[r * d_ff + j];
        if (a > T{0}) score[moe.assignment[j]] += static_cast<double>(a);
      }
    } else {
      const Tensor<T>& w = moe.router_weight->value;
      const std::size_t d = x.cols();
      for (std::size_t e = 0; e < e_count; ++e) {
        const T* we = &w[e * (d + 1)];
        double s = static_cast<double>(we[d]);
        for (std::size_t c = 0; c < d; ++c) s += static_cast<double>(we[c]) * x[r * d + c];
        score[e] = s;
      }
    }
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
    selected[r].assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(moe.top_k));
    std::sort(selected[r].begin(), selected[r].end());
  }
  return selected;
}

template <typename T>
LinearSlot<T>& TransformerLayer<T>::slot(SlotKind kind) {
  switch (kind) {
    case SlotKind::kQuery: return q;
    case SlotKind::kKey: return k;
    case SlotKind::kValue: return v;
    case SlotKind::kOutput: return o;
    case SlotKind::kFfnIn: return ffn_in;
    case SlotKind::kFfnOut: return ffn_out;
  }
  return q;
}

template <typename T>
const LinearSlot<T>& TransformerLayer<T>::slot(SlotKind kind) const {
  return const_cast<TransformerLayer*>(this)->slot(kind);
}

namespace {

template <typename T>
Tensor<T> normal_tensor(Shape shape, Rng& rng, double stddev) {
  Tensor<T> t(std::move(shape));
  for (T& x : t.data()) x = static_cast<T>(rng.normal(0.0, stddev));
  return t;
}

}  // namespace

template <typename T>
TransformerModel<T>::TransformerModel(TransformerConfig config, Rng& rng) : config_(config) {
  config_.validate();
  const std::size_t d = config_.d_model, dff = config_.d_ff;
  const double proj_std = 1.0 / std::sqrt(static_cast<double>(d));
  const double ffn_out_std = 1.0 / std::sqrt(static_cast<double>(dff));
  const double residual_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(config_.n_layers));
  auto ones = [](std::size_t n) { return Tensor<T>::full(Shape{n}, T{1}); };

  tok_emb_ = make_param<T>("embed/tokens", normal_tensor<T>(Shape{config_.vocab_size, d}, rng, 0.5));
  pos_emb_ = make_param<T>("embed/positions", normal_tensor<T>(Shape{config_.max_seq_len, d}, rng, 0.1));
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    TransformerLayer<T> layer;
    const std::string p = "layer" + std::to_string(l);
    layer.ln1_gamma = make_param<T>(p + "/ln1/gamma", ones(d));
    layer.ln1_beta = make_param<T>(p + "/ln1/beta", Tensor<T>(Shape{d}));
    layer.ln2_gamma = make_param<T>(p + "/ln2/gamma", ones(d));
    layer.ln2_beta = make_param<T>(p + "/ln2/beta", Tensor<T>(Shape{d}));
    auto make_slot = [&](SlotKind kind, std::size_t d_out, std::size_t d_in, double stddev) {
      const std::string path = slot_path(l, kind);
      return LinearSlot<T>(path, make_param<T>(path + "/weight", normal_tensor<T>(Shape{d_out, d_in}, rng, stddev)),
                           make_param<T>(path + "/bias", Tensor<T>(Shape{d_out})));
    };
    layer.q = make_slot(SlotKind::kQuery, d, d, proj_std);
    layer.k = make_slot(SlotKind::kKey, d, d, proj_std);
    layer.v = make_slot(SlotKind::kValue, d, d, proj_std);
    layer.o = make_slot(SlotKind::kOutput, d, d, proj_std * residual_scale);
    layer.ffn_in = make_slot(SlotKind::kFfnIn, dff, d, proj_std);
    layer.ffn_out = make_slot(SlotKind::kFfnOut, d, dff, ffn_out_std * residual_scale);
    layer.head_keep.assign(config_.n_heads, true);
    layers_.push_back(std::move(layer));
  }
  lnf_gamma_ = make_param<T>("final_ln/gamma", ones(d));
  lnf_beta_ = make_param<T>("final_ln/beta", Tensor<T>(Shape{d}));
  head_ = make_param<T>("head/weight", normal_tensor<T>(Shape{config_.vocab_size, d}, rng, proj_std));
}

template <typename T>
TransformerModel<T> TransformerModel<T>::zeros(TransformerConfig config) {
  Rng rng(0);
  TransformerModel m(config, rng);
  for (const auto& p : m.backbone_params()) p->value.fill(T{0});
  return m;
}

template <typename T>
ForwardResult<T> TransformerModel<T>::forward(Tape<T>& tape, const TokenBatch& tokens) const {
  const std::size_t batch = tokens.batch, seq = tokens.seq;
  if (batch == 0 || seq == 0 || tokens.ids.size() != batch * seq) {
    throw DimensionError("forward: token batch must be non-empty batch×seq ids");
  }
  if (seq > config_.max_seq_len) {
    throw DimensionError("forward: sequence length " + std::to_string(seq) + " exceeds max_seq_len " +
                         std::to_string(config_.max_seq_len));
  }
  std::vector<std::size_t> positions(batch * seq);
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i % seq;

  Var<T> x = ag::add(ag::embedding(tape.parameter(tok_emb_), tokens.ids),
                     ag::embedding(tape.parameter(pos_emb_), positions));
  for (const TransformerLayer<T>& layer : layers_) {
    Var<T> h = ag::layer_norm(x, tape.parameter(layer.ln1_gamma), tape.parameter(layer.ln1_beta));
    Var<T> q = layer.q.forward(tape, h);
    Var<T> k = layer.k.forward(tape, h);
    Var<T> v = layer.v.forward(tape, h);
    Var<T> a = ag::causal_attention(q, k, v, batch, seq, config_.n_heads, layer.head_keep);
    x = ag::add(x, layer.o.forward(tape, a));

    Var<T> h2 = ag::layer_norm(x, tape.parameter(layer.ln2_gamma), tape.parameter(layer.ln2_beta));
    Var<T> pre = layer.ffn_in.forward(tape, h2);
    if (layer.moe) {
      const auto selected = moe_select(*layer.moe, pre.value(), h2.value());
      const std::size_t d_ff = pre.value().cols();
      Tensor<T> keep(pre.shape());
      for (std::size_t r = 0; r < selected.size(); ++r) {
        for (std::size_t j = 0; j < d_ff; ++j) {
          const std::size_t e = layer.moe->assignment[j];
          if (std::binary_search(selected[r].begin(), selected[r].end(), e)) keep[r * d_ff + j] = T{1};
        }
      }
      pre = ag::mul(pre, tape.constant(std::move(keep)));
    }
    Var<T> act = ag::activation(pre, config_.activation);
    x = ag::add(x, layer.ffn_out.forward(tape, act));
  }
  Var<T> hidden = ag::layer_norm(x, tape.parameter(lnf_gamma_), tape.parameter(lnf_beta_));
  Var<T> logits = ag::linear(hidden, tape.parameter(head_));
  return {logits, hidden};
}

template <typename T>
Tensor<T> TransformerModel<T>::logits(const TokenBatch& tokens) const {
  Tape<T> tape(false);
  return forward(tape, tokens).logits.value().reshaped(Shape{tokens.batch, tokens.seq, config_.vocab_size});
}

template <typename T>
std::vector<std::string> TransformerModel<T>::slot_paths() const {
  std::vector<std::string> out;
  for (std::size_t l = 0; l < layers_.size(); ++l)
    for (SlotKind k : kAllSlotKinds) out.push_back(slot_path(l, k));
  return out;
}

template <typename T>
LinearSlot<T>& TransformerModel<T>::slot(const std::string& path) {
  const auto [layer, kind] = parse_slot_path(path);
  if (layer >= layers_.size()) throw ConfigError("no slot '" + path + "' in a " + std::to_string(layers_.size()) + "-layer model");
  return layers_[layer].slot(kind);
}

template <typename T>
const LinearSlot<T>& TransformerModel<T>::slot(const std::string& path) const {
  return const_cast<TransformerModel*>(this)->slot(path);
}

template <typename T>
void TransformerModel<T>::attach_adapter(const std::string& path, AdapterPtr<T> adapter) {
  slot(path).attach(std::move(adapter));
}

template <typename T>
void TransformerModel<T>::detach_adapters() {
  for (auto& layer : layers_)
    for (SlotKind k : kAllSlotKinds) layer.slot(k).detach_all();
}

template <typename T>
bool TransformerModel<T>::has_adapters() const {
  for (const auto& layer : layers_)
    for (SlotKind k : kAllSlotKinds)
      if (!layer.slot(k).adapters().empty()) return true;
  return false;
}

template <typename T>
std::vector<ParamPtr<T>> TransformerModel<T>::backbone_params() const {
  std::vector<ParamPtr<T>> out{tok_emb_, pos_emb_};
  for (const auto& layer : layers_) {
    out.insert(out.end(), {layer.ln1_gamma, layer.ln1_beta});
    for (SlotKind k : {SlotKind::kQuery, SlotKind::kKey, SlotKind::kValue, SlotKind::kOutput}) {
      out.push_back(layer.slot(k).weight());
      if (layer.slot(k).bias()) out.push_back(layer.slot(k).bias());
    }
    out.insert(out.end(), {layer.ln2_gamma, layer.ln2_beta});
    for (SlotKind k : {SlotKind::kFfnIn, SlotKind::kFfnOut}) {
      out.push_back(layer.slot(k).weight());
      if (layer.slot(k).bias()) out.push_back(layer.slot(k).bias());
    }
    if (layer.moe && layer.moe->router_weight) out.push_back(layer.moe->router_weight);
  }
  out.insert(out.end(), {lnf_gamma_, lnf_beta_, head_});
  return out;
}

template <typename T>
std::vector<ParamPtr<T>> TransformerModel<T>::adapter_params() const {
  std::vector<ParamPtr<T>> out;
  std::unordered_set<const Parameter<T>*> seen;
  for (const auto& layer : layers_) {
    for (SlotKind k : kAllSlotKinds) {
      for (const auto& a : layer.slot(k).adapters()) {
        for (const auto& p : a->params()) {
          if (seen.insert(p.get()).second) out.push_back(p);
        }
      }
    }
  }
  return out;
}

template <typename T>
void TransformerModel<T>::set_backbone_trainable(bool trainable) {
  for (const auto& p : backbone_params()) p->requires_grad = trainable;
  for (auto& layer : layers_) {
    for (SlotKind k : kAllSlotKinds) {
      if (layer.slot(k).quantized()) layer.slot(k).weight()->requires_grad = false;
    }
    if (layer.moe && layer.moe->router_weight) layer.moe->router_weight->requires_grad = false;
  }
}

template <typename T>
std::size_t TransformerModel<T>::param_count(bool trainable_only) const {
  std::size_t n = 0;
  for (const auto& p : backbone_params())
    if (!trainable_only || p->requires_grad) n += p->value.numel();
  for (const auto& p : adapter_params())
    if (!trainable_only || p->requires_grad) n += p->value.numel();
  return n;
}

template <typename T>
TransformerModel<T> TransformerModel<T>::clone() const {
  auto copy = [](const ParamPtr<T>& p) {
    if (!p) return p;
    auto c = std::make_shared<Parameter<T>>(*p);
    c->zero_grad();
    return c;
  };
  TransformerModel out;
  out.config_ = config_;
  out.tok_emb_ = copy(tok_emb_);
  out.pos_emb_ = copy(pos_emb_);
  for (const auto& layer : layers_) {
    TransformerLayer<T> l;
    l.ln1_gamma = copy(layer.ln1_gamma);
    l.ln1_beta = copy(layer.ln1_beta);
    l.ln2_gamma = copy(layer.ln2_gamma);
    l.ln2_beta = copy(layer.ln2_beta);
    for (SlotKind k : kAllSlotKinds) l.slot(k) = layer.slot(k).clone();
    l.head_keep = layer.head_keep;
    if (layer.moe) {
      l.moe = *layer.moe;
      l.moe->router_weight = copy(layer.moe->router_weight);
    }
    out.layers_.push_back(std::move(l));
  }
  out.lnf_gamma_ = copy(lnf_gamma_);
  out.lnf_beta_ = copy(lnf_beta_);
  out.head_ = copy(head_);
  return out;
}

template struct MoELayout<float>;
template struct MoELayout<double>;
template std::vector<std::vector<std::size_t>> moe_select(const MoELayout<float>&, const Tensor<float>&, const Tensor<float>&);
template std::vector<std::vector<std::size_t>> moe_select(const MoELayout<double>&, const Tensor<double>&, const Tensor<double>&);
template struct TransformerLayer<float>;
template struct TransformerLayer<double>;
template class TransformerModel<float>;
template class TransformerModel<double>;

}  // namespace calora
