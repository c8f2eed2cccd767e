#include "calora/compression/compression.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace calora {

namespace {

std::string trim(std::string s) {
  s.erase(0, s.find_first_not_of(" \t\r\n"));
  s.erase(s.find_last_not_of(" \t\r\n") + 1);
  return s;
}

double parse_number(const std::string& key, const std::string& value) {
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(value, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != value.size()) throw ConfigError("bad number '" + value + "' for " + key);
  return v;
}

std::size_t parse_count(const std::string& key, const std::string& value) {
  const double v = parse_number(key, value);
  if (v < 0 || v != std::floor(v)) throw ConfigError(key + " must be a non-negative integer");
  return static_cast<std::size_t>(v);
}

template <typename T>
Tensor<T> ones_like_mask(const LinearSlot<T>& slot) {
  return slot.masked() ? slot.mask() : Tensor<T>::full(slot.weight()->value.shape(), T{1});
}

std::size_t keep_count(double fraction, std::size_t n, const std::string& what) {
  const auto k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  if (k == 0) throw ConfigError("structured pruning would remove every " + what);
  return std::min(k, n);
}

// Indices of the `keep` largest scores, ascending; ties keep the lower index.
std::vector<std::size_t> top_indices(const std::vector<double>& score, std::size_t keep) {
  std::vector<std::size_t> order(score.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
  order.resize(keep);
  std::sort(order.begin(), order.end());
  return order;
}

bool is_ffn(SlotKind k) { return k == SlotKind::kFfnIn || k == SlotKind::kFfnOut; }

}  // namespace

std::string step_to_string(const CompressionStep& step) {
  std::ostringstream os;
  std::visit(
      [&](const auto& s) {
        using S = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<S, QuantizeStep>) {
          os << "quantize(bits=" << s.bits << ")";
        } else if constexpr (std::is_same_v<S, PruneUnstructuredStep>) {
          os << "prune_unstructured(sparsity=" << s.sparsity << ")";
        } else if constexpr (std::is_same_v<S, PruneStructuredStep>) {
          os << "prune_structured(ffn_keep=" << s.ffn_keep << ",heads_keep=" << s.heads_keep << ")";
        } else {
          os << "moefy(experts=" << s.n_experts << ",top_k=" << s.top_k << ",router=" << to_string(s.router)
             << ")";
        }
      },
      step);
  return os.str();
}

void CompressionSpec::validate() const {
  bool quantized = false;
  for (std::size_t i = 0; i < steps.size(); ++i) {
    const std::string where = "compression step " + std::to_string(i) + " " + step_to_string(steps[i]);
    if (const auto* q = std::get_if<QuantizeStep>(&steps[i])) {
      if (q->bits != 8 && q->bits != 4) throw ConfigError(where + ": bits must be 8 or 4");
      if (quantized) throw ConfigError(where + ": weights are already quantized");
      quantized = true;
    } else if (const auto* u = std::get_if<PruneUnstructuredStep>(&steps[i])) {
      if (!(u->sparsity > 0.0 && u->sparsity < 1.0)) throw ConfigError(where + ": sparsity must be in (0,1)");
    } else if (const auto* s = std::get_if<PruneStructuredStep>(&steps[i])) {
      if (!(s->ffn_keep > 0.0 && s->ffn_keep <= 1.0) || !(s->heads_keep > 0.0 && s->heads_keep <= 1.0)) {
        throw ConfigError(where + ": keep fractions must be in (0,1]");
      }
    } else if (const auto* m = std::get_if<MoEfyStep>(&steps[i])) {
      if (m->n_experts == 0 || m->top_k == 0 || m->top_k > m->n_experts) {
        throw ConfigError(where + ": need 1 <= top_k <= experts");
      }
      if (quantized) throw ConfigError(where + ": MoEfy must precede Quantize");
    }
  }
}

CompressionSpec CompressionSpec::parse(const std::string& text) {
  CompressionSpec spec;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ';')) {
    item = trim(item);
    if (item.empty() || item == "none") continue;
    const auto open = item.find('(');
    const auto close = item.rfind(')');
    const std::string name = trim(item.substr(0, open));
    std::vector<std::pair<std::string, std::string>> args;
    if (open != std::string::npos) {
      if (close == std::string::npos || close < open || trim(item.substr(close + 1)) != "") {
        throw ConfigError("malformed compression step '" + item + "'");
      }
      std::stringstream as(item.substr(open + 1, close - open - 1));
      std::string kv;
      while (std::getline(as, kv, ',')) {
        kv = trim(kv);
        if (kv.empty()) continue;
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("expected key=value in '" + item + "'");
        args.emplace_back(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
      }
    }
    auto unknown = [&](const std::string& key) { throw ConfigError("unknown argument '" + key + "' for " + name); };
    if (name == "quantize") {
      QuantizeStep s;
      for (const auto& [k, v] : args) k == "bits" ? void(s.bits = static_cast<int>(parse_count(k, v))) : unknown(k);
      spec.steps.emplace_back(s);
    } else if (name == "prune_unstructured") {
      PruneUnstructuredStep s;
      for (const auto& [k, v] : args) k == "sparsity" ? void(s.sparsity = parse_number(k, v)) : unknown(k);
      spec.steps.emplace_back(s);
    } else if (name == "prune_structured") {
      PruneStructuredStep s;
      for (const auto& [k, v] : args) {
        if (k == "ffn_keep") {
          s.ffn_keep = parse_number(k, v);
        } else if (k == "heads_keep") {
          s.heads_keep = parse_number(k, v);
        } else {
          unknown(k);
        }
      }
      spec.steps.emplace_back(s);
    } else if (name == "moefy") {
      MoEfyStep s;
      for (const auto& [k, v] : args) {
        if (k == "experts") {
          s.n_experts = parse_count(k, v);
        } else if (k == "top_k") {
          s.top_k = parse_count(k, v);
        } else if (k == "router") {
          s.router = router_mode_from_string(v);
        } else {
          unknown(k);
        }
      }
      spec.steps.emplace_back(s);
    } else {
      throw ConfigError("unknown compression step '" + name + "'");
    }
  }
  spec.validate();
  return spec;
}

std::string CompressionSpec::to_string() const {
  if (steps.empty()) return "none";
  std::string out;
  for (const auto& s : steps) out += (out.empty() ? "" : "; ") + step_to_string(s);
  return out;
}

template <typename T>
static QuantizedWeight quantize_impl(const Tensor<T>& w, int bits) {
  if (bits != 8 && bits != 4) throw ConfigError("quantization bits must be 8 or 4");
  if (w.rank() != 2) throw DimensionError("quantize: weight must be a matrix");
  const int qmax = (1 << (bits - 1)) - 1;
  QuantizedWeight q;
  q.bits = bits;
  q.rows = w.dim(0);
  q.cols = w.dim(1);
  q.codes.assign(q.rows * q.cols, 0);
  q.scale.assign(q.rows, 0.0f);
  for (std::size_t r = 0; r < q.rows; ++r) {
    double maxabs = 0.0;
    for (std::size_t c = 0; c < q.cols; ++c) maxabs = std::max(maxabs, std::abs(static_cast<double>(w.at(r, c))));
    if (maxabs == 0.0) continue;
    const double exact = maxabs / qmax;
    const float scale = static_cast<float>(exact);
    const double s = scale;
    q.scale[r] = scale;
    for (std::size_t c = 0; c < q.cols; ++c) {
      const double x = w.at(r, c);
      // Nearest code under the exact scale (ties to even), then corrected
      // against the stored f32 scale so the half-step bound holds exactly.
      double code = std::clamp(std::nearbyint(x / exact), -double(qmax), double(qmax));
      if (std::abs(x - code * s) > s / 2) {
        for (double cand : {code - 1, code + 1}) {
          if (cand < -qmax || cand > qmax) continue;
          if (std::abs(x - cand * s) < std::abs(x - code * s)) code = cand;
        }
      }
      q.codes[r * q.cols + c] = static_cast<std::int8_t>(code);
    }
  }
  return q;
}

QuantizedWeight quantize_weight(const Tensor<float>& w, int bits) { return quantize_impl(w, bits); }
QuantizedWeight quantize_weight(const Tensor<double>& w, int bits) { return quantize_impl(w, bits); }

template <typename T>
void quantize_slot(LinearSlot<T>& slot, int bits) {
  if (slot.quantized()) throw ConfigError(slot.path() + ": already quantized");
  slot.set_quantized(quantize_weight(slot.weight()->value, bits));
}

template <typename T>
void prune_unstructured(TransformerModel<T>& model, double sparsity) {
  if (!(sparsity > 0.0 && sparsity < 1.0)) throw ConfigError("sparsity must be in (0,1)");
  struct Entry {
    T mag;
    std::uint32_t slot;
    std::uint32_t index;
  };
  std::vector<LinearSlot<T>*> slots;
  for (const std::string& path : model.slot_paths()) slots.push_back(&model.slot(path));
  std::vector<Entry> entries;
  for (std::size_t s = 0; s < slots.size(); ++s) {
    const Tensor<T>& w = slots[s]->effective_weight();
    for (std::size_t i = 0; i < w.numel(); ++i) {
      entries.push_back({std::abs(w[i]), static_cast<std::uint32_t>(s), static_cast<std::uint32_t>(i)});
    }
  }
  const auto n_mask = static_cast<std::size_t>(std::floor(sparsity * static_cast<double>(entries.size())));
  if (n_mask == 0) return;
  auto less = [](const Entry& a, const Entry& b) {
    if (a.mag != b.mag) return a.mag < b.mag;
    if (a.slot != b.slot) return a.slot < b.slot;
    return a.index < b.index;
  };
  std::nth_element(entries.begin(), entries.begin() + static_cast<std::ptrdiff_t>(n_mask - 1), entries.end(), less);
  std::vector<Tensor<T>> masks;
  for (const auto* s : slots) masks.push_back(ones_like_mask(*s));
  // The comparator is a strict total order, so the first n_mask entries are
  // exactly the n_mask smallest.
  for (std::size_t i = 0; i < n_mask; ++i) masks[entries[i].slot][entries[i].index] = T{0};
  for (std::size_t s = 0; s < slots.size(); ++s) slots[s]->set_mask(std::move(masks[s]));
}

template <typename T>
std::vector<double> ffn_neuron_importance(const TransformerLayer<T>& layer) {
  const Tensor<T>& w_in = layer.ffn_in.effective_weight();
  const Tensor<T>& w_out = layer.ffn_out.effective_weight();
  const std::size_t d_ff = w_in.dim(0), d_in = w_in.dim(1), d_out = w_out.dim(0);
  std::vector<double> score(d_ff);
  for (std::size_t j = 0; j < d_ff; ++j) {
    double a = 0, b = 0;
    for (std::size_t c = 0; c < d_in; ++c) a += double(w_in.at(j, c)) * w_in.at(j, c);
    for (std::size_t r = 0; r < d_out; ++r) b += double(w_out.at(r, j)) * w_out.at(r, j);
    score[j] = std::sqrt(a) * std::sqrt(b);
  }
  return score;
}

template <typename T>
std::vector<double> head_importance(const TransformerLayer<T>& layer, std::size_t n_heads) {
  const std::size_t d = layer.q.d_out(), hd = d / n_heads;
  std::vector<double> score(n_heads, 0.0);
  for (std::size_t h = 0; h < n_heads; ++h) {
    double ss = 0;
    for (const LinearSlot<T>* s : {&layer.q, &layer.k, &layer.v}) {
      const Tensor<T>& w = s->effective_weight();
      for (std::size_t r = h * hd; r < (h + 1) * hd; ++r)
        for (std::size_t c = 0; c < w.dim(1); ++c) ss += double(w.at(r, c)) * w.at(r, c);
    }
    const Tensor<T>& o = layer.o.effective_weight();
    for (std::size_t r = 0; r < o.dim(0); ++r)
      for (std::size_t c = h * hd; c < (h + 1) * hd; ++c) ss += double(o.at(r, c)) * o.at(r, c);
    score[h] = std::sqrt(ss);
  }
  return score;
}

template <typename T>
void prune_structured(TransformerModel<T>& model, double ffn_keep, double heads_keep) {
  if (!(ffn_keep > 0.0 && ffn_keep <= 1.0) || !(heads_keep > 0.0 && heads_keep <= 1.0)) {
    throw ConfigError("keep fractions must be in (0,1]");
  }
  const std::size_t n_heads = model.config().n_heads;
  for (std::size_t l = 0; l < model.n_layers(); ++l) {
    TransformerLayer<T>& layer = model.layer(l);
    const std::string where = "layer" + std::to_string(l);
    const std::size_t d_ff = layer.d_ff();
    const std::size_t keep_ffn = keep_count(ffn_keep, d_ff, "FFN neuron of " + where);
    const std::size_t keep_heads = keep_count(heads_keep, n_heads, "attention head of " + where);
    if (keep_ffn < d_ff) {
      if (layer.moe) throw ConfigError(where + ": structured pruning after MoEfication is not supported");
      const std::vector<std::size_t> kept = top_indices(ffn_neuron_importance(layer), keep_ffn);
      std::vector<std::size_t> all_model(layer.ffn_in.d_in());
      std::iota(all_model.begin(), all_model.end(), std::size_t{0});
      layer.ffn_in.select(kept, all_model);
      std::vector<std::size_t> all_out(layer.ffn_out.d_out());
      std::iota(all_out.begin(), all_out.end(), std::size_t{0});
      layer.ffn_out.select(all_out, kept);
    }
    if (keep_heads < n_heads) {
      const std::vector<std::size_t> kept = top_indices(head_importance(layer, n_heads), keep_heads);
      const std::size_t hd = layer.q.d_out() / n_heads;
      std::vector<bool> keep(n_heads, false);
      for (std::size_t h : kept) keep[h] = true;
      for (LinearSlot<T>* s : {&layer.q, &layer.k, &layer.v}) {
        Tensor<T> mask = ones_like_mask(*s);
        for (std::size_t h = 0; h < n_heads; ++h)
          if (!keep[h])
            for (std::size_t r = h * hd; r < (h + 1) * hd; ++r)
              for (std::size_t c = 0; c < s->d_in(); ++c) mask.at(r, c) = T{0};
        s->set_mask(std::move(mask));
      }
      Tensor<T> mask = ones_like_mask(layer.o);
      for (std::size_t h = 0; h < n_heads; ++h)
        if (!keep[h])
          for (std::size_t r = 0; r < layer.o.d_out(); ++r)
            for (std::size_t c = h * hd; c < (h + 1) * hd; ++c) mask.at(r, c) = T{0};
      layer.o.set_mask(std::move(mask));
      for (std::size_t h = 0; h < n_heads; ++h) layer.head_keep[h] = layer.head_keep[h] && keep[h];
    }
  }
}

template <typename T>
std::vector<std::size_t> balanced_cluster(const Tensor<T>& w_in, std::size_t n_experts, Rng& rng,
                                          std::size_t max_iters) {
  const std::size_t n = w_in.dim(0), d = w_in.dim(1);
  if (n_experts == 0 || n % n_experts != 0) {
    throw ConfigError("d_ff " + std::to_string(n) + " not divisible by " + std::to_string(n_experts) + " experts");
  }
  const std::size_t cap = n / n_experts;
  std::vector<double> x(n * d);
  for (std::size_t j = 0; j < n; ++j) {
    double norm = 0;
    for (std::size_t c = 0; c < d; ++c) norm += double(w_in.at(j, c)) * w_in.at(j, c);
    norm = std::sqrt(norm);
    for (std::size_t c = 0; c < d; ++c) x[j * d + c] = norm > 0 ? w_in.at(j, c) / norm : 0.0;
  }
  std::vector<std::size_t> pick(n);
  std::iota(pick.begin(), pick.end(), std::size_t{0});
  for (std::size_t i = 0; i < n_experts; ++i) std::swap(pick[i], pick[i + rng.uniform_int(n - i)]);
  std::vector<double> centers(n_experts * d);
  for (std::size_t e = 0; e < n_experts; ++e)
    std::copy_n(&x[pick[e] * d], d, &centers[e * d]);

  struct Cand {
    double sim;
    std::uint32_t neuron, expert;
  };
  std::vector<std::size_t> assign(n, n_experts), prev;
  std::vector<Cand> cands(n * n_experts);
  for (std::size_t it = 0; it < max_iters; ++it) {
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t e = 0; e < n_experts; ++e) {
        double s = 0;
        for (std::size_t c = 0; c < d; ++c) s += x[j * d + c] * centers[e * d + c];
        cands[j * n_experts + e] = {s, static_cast<std::uint32_t>(j), static_cast<std::uint32_t>(e)};
      }
    }
    std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
      if (a.sim != b.sim) return a.sim > b.sim;
      if (a.neuron != b.neuron) return a.neuron < b.neuron;
      return a.expert < b.expert;
    });
    std::fill(assign.begin(), assign.end(), n_experts);
    std::vector<std::size_t> load(n_experts, 0);
    for (const Cand& c : cands) {
      if (assign[c.neuron] != n_experts || load[c.expert] == cap) continue;
      assign[c.neuron] = c.expert;
      ++load[c.expert];
    }
    for (std::size_t e = 0; e < n_experts; ++e) {
      if (load[e] == 0) throw InternalError("balanced clustering produced an empty expert");
    }
    if (assign == prev) break;
    prev = assign;
    std::vector<double> sum(n_experts * d, 0.0);
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t c = 0; c < d; ++c) sum[assign[j] * d + c] += x[j * d + c];
    for (std::size_t e = 0; e < n_experts; ++e) {
      double norm = 0;
      for (std::size_t c = 0; c < d; ++c) norm += sum[e * d + c] * sum[e * d + c];
      norm = std::sqrt(norm);
      if (norm == 0) continue;
      for (std::size_t c = 0; c < d; ++c) centers[e * d + c] = sum[e * d + c] / norm;
    }
  }
  return assign;
}

namespace {

// Per-expert linear scorer (with bias) fit by ridge regression to oracle
// top-k labels on synthetic layer-norm-shaped inputs.
template <typename T>
ParamPtr<T> fit_router(const TransformerLayer<T>& layer, const MoELayout<T>& moe, Rng& rng,
                       const std::string& name) {
  const std::size_t n = 2048, d = layer.ffn_in.d_in(), e_count = moe.n_experts;
  Tensor<T> x(Shape{n, d});
  const Tensor<T>& gamma = layer.ln2_gamma->value;
  const Tensor<T>& beta = layer.ln2_beta->value;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c) x.at(i, c) = static_cast<T>(gamma[c] * rng.normal() + beta[c]);
  Tape<T> tape(false);
  const Tensor<T> pre = layer.ffn_in.base_forward(tape, tape.constant(x)).value();
  MoELayout<T> oracle = moe;
  oracle.router = RouterMode::kOracle;
  const auto selected = moe_select(oracle, pre, x);

  Eigen::MatrixXd a(n, d + 1);
  Eigen::MatrixXd y = Eigen::MatrixXd::Zero(n, e_count);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < d; ++c) a(i, c) = x.at(i, c);
    a(i, d) = 1.0;
    for (std::size_t e : selected[i]) y(i, e) = 1.0;
  }
  Eigen::MatrixXd gram = a.transpose() * a;
  gram.diagonal().array() += 1.0;
  const Eigen::MatrixXd w = gram.ldlt().solve(a.transpose() * y);
  Tensor<T> router(Shape{e_count, d + 1});
  for (std::size_t e = 0; e < e_count; ++e)
    for (std::size_t c = 0; c <= d; ++c) router.at(e, c) = static_cast<T>(w(c, e));
  return make_param<T>(name, std::move(router), false);
}

}  // namespace

template <typename T>
void moefy(TransformerModel<T>& model, std::size_t n_experts, std::size_t top_k, RouterMode router,
           Rng& rng) {
  if (n_experts == 0 || top_k == 0 || top_k > n_experts) throw ConfigError("moefy: need 1 <= top_k <= experts");
  if (model.config().activation != ag::Activation::kRelu) throw ConfigError("moefy requires a ReLU FFN");
  for (std::size_t l = 0; l < model.n_layers(); ++l) {
    TransformerLayer<T>& layer = model.layer(l);
    const std::string where = "layer" + std::to_string(l);
    if (layer.moe) throw ConfigError(where + ": FFN is already MoEfied");
    if (layer.d_ff() % n_experts != 0) {
      throw ConfigError(where + ": d_ff " + std::to_string(layer.d_ff()) + " not divisible by " +
                        std::to_string(n_experts) + " experts");
    }
    MoELayout<T> moe;
    moe.n_experts = n_experts;
    moe.top_k = top_k;
    moe.router = router;
    Rng layer_rng = rng.fork(l);
    moe.assignment = balanced_cluster(layer.ffn_in.effective_weight(), n_experts, layer_rng);
    if (router == RouterMode::kLearned) moe.router_weight = fit_router(layer, moe, layer_rng, where + "/moe/router");
    layer.moe = std::move(moe);
  }
}

template <typename T>
std::size_t effective_param_count(const TransformerModel<T>& model) {
  std::size_t n = model.param_count(false);
  for (const std::string& path : model.slot_paths()) n -= model.slot(path).masked_count();
  return n;
}

template <typename T>
std::size_t storage_bytes16(const TransformerModel<T>& model) {
  std::size_t bytes = 0;
  auto add = [&](const ParamPtr<T>& p) { bytes += 2 * p->value.numel(); };
  add(model.token_embedding());
  add(model.position_embedding());
  for (std::size_t l = 0; l < model.n_layers(); ++l) {
    const TransformerLayer<T>& layer = model.layer(l);
    for (const auto& p : {layer.ln1_gamma, layer.ln1_beta, layer.ln2_gamma, layer.ln2_beta}) add(p);
    for (SlotKind k : kAllSlotKinds) {
      const LinearSlot<T>& s = layer.slot(k);
      if (s.quantized()) {
        bytes += s.quant().codes.size() + 4 * s.quant().scale.size();
      } else {
        add(s.weight());
      }
      if (s.bias()) add(s.bias());
    }
  }
  add(model.final_gamma());
  add(model.final_beta());
  add(model.head());
  return bytes;
}

template <typename T>
double mac_cost(const TransformerModel<T>& model) {
  double total = 0;
  for (std::size_t l = 0; l < model.n_layers(); ++l) {
    const TransformerLayer<T>& layer = model.layer(l);
    for (SlotKind k : kAllSlotKinds) {
      const LinearSlot<T>& s = layer.slot(k);
      const double n = static_cast<double>(s.d_in() * s.d_out());
      double cost = n - static_cast<double>(s.masked_count());
      if (s.quantized()) cost *= s.quant().bits / 16.0;
      if (layer.moe && is_ffn(k)) cost *= static_cast<double>(layer.moe->top_k) / static_cast<double>(layer.moe->n_experts);
      total += cost;
    }
  }
  return total;
}

std::string CompressionReport::to_json() const {
  nlohmann::ordered_json j;
  j["params_before"] = params_before;
  j["params_after"] = params_after;
  j["bytes_before"] = bytes_before;
  j["bytes_after"] = bytes_after;
  j["mac_fraction"] = mac_fraction;
  j["ideal_speedup"] = ideal_speedup();
  j["size_ratio"] = size_ratio();
  j["steps"] = nlohmann::ordered_json::array();
  for (const StepReport& s : steps) {
    j["steps"].push_back({{"step", s.step},
                          {"params_before", s.params_before},
                          {"params_after", s.params_after},
                          {"bytes_before", s.bytes_before},
                          {"bytes_after", s.bytes_after},
                          {"mac_fraction", s.mac_fraction}});
  }
  return j.dump(2);
}

template <typename T>
CompressionReport compress(TransformerModel<T>& model, const CompressionSpec& spec, std::uint64_t seed) {
  spec.validate();
  if (model.has_adapters()) throw ConfigError("compress: detach adapters before compressing");
  CompressionReport report;
  report.params_before = effective_param_count(model);
  report.bytes_before = storage_bytes16(model);
  Rng rng(seed, 0xC0);
  for (std::size_t i = 0; i < spec.steps.size(); ++i) {
    const CompressionStep& step = spec.steps[i];
    StepReport sr;
    sr.step = step_to_string(step);
    sr.params_before = effective_param_count(model);
    sr.bytes_before = storage_bytes16(model);
    const double mac_before = mac_cost(model);
    try {
      std::visit(
          [&](const auto& s) {
            using S = std::decay_t<decltype(s)>;
            if constexpr (std::is_same_v<S, QuantizeStep>) {
              for (const std::string& path : model.slot_paths()) quantize_slot(model.slot(path), s.bits);
            } else if constexpr (std::is_same_v<S, PruneUnstructuredStep>) {
              prune_unstructured(model, s.sparsity);
            } else if constexpr (std::is_same_v<S, PruneStructuredStep>) {
              prune_structured(model, s.ffn_keep, s.heads_keep);
            } else {
              Rng step_rng = rng.fork(i);
              moefy(model, s.n_experts, s.top_k, s.router, step_rng);
            }
          },
          step);
    } catch (const Error& e) {
      rethrow_with_context(e, "compression step " + std::to_string(i) + " " + sr.step);
    }
    sr.params_after = effective_param_count(model);
    sr.bytes_after = storage_bytes16(model);
    sr.mac_fraction = mac_before > 0 ? mac_cost(model) / mac_before : 1.0;
    report.mac_fraction *= sr.mac_fraction;
    report.steps.push_back(sr);
  }
  report.params_after = effective_param_count(model);
  report.bytes_after = storage_bytes16(model);
  return report;
}

#define CALORA_INSTANTIATE(T)                                                                          \
  template void quantize_slot(LinearSlot<T>&, int);                                                    \
  template void prune_unstructured(TransformerModel<T>&, double);                                      \
  template void prune_structured(TransformerModel<T>&, double, double);                                \
  template std::vector<double> ffn_neuron_importance(const TransformerLayer<T>&);                      \
  template std::vector<double> head_importance(const TransformerLayer<T>&, std::size_t);               \
  template std::vector<std::size_t> balanced_cluster(const Tensor<T>&, std::size_t, Rng&, std::size_t); \
  template void moefy(TransformerModel<T>&, std::size_t, std::size_t, RouterMode, Rng&);               \
  template std::size_t effective_param_count(const TransformerModel<T>&);                              \
  template std::size_t storage_bytes16(const TransformerModel<T>&);                                    \
  template double mac_cost(const TransformerModel<T>&);                                                \
  template CompressionReport compress(TransformerModel<T>&, const CompressionSpec&, std::uint64_t);

CALORA_INSTANTIATE(float)
CALORA_INSTANTIATE(double)
#undef CALORA_INSTANTIATE

}  // namespace calora
