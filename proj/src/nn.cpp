#include "pmdet/nn.hpp"

#include <cmath>

#include "pmdet/common.hpp"

namespace pmdet::nn {

namespace {

Tensor xavier_uniform(std::size_t out, std::size_t in, std::uint64_t seed,
                      const std::string& name) {
  Tensor w({out, in});
  RngStream rng = named_stream(seed, name);
  const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = rng.uniform(-bound, bound);
  return w;
}

}  // namespace

Linear Linear::init(std::size_t in, std::size_t out, std::uint64_t seed,
                    const std::string& name) {
  Linear l;
  l.w = ad::parameter(xavier_uniform(out, in, seed, name + "/w"), name + "/w");
  l.b = ad::parameter(Tensor::zeros({out}), name + "/b");
  return l;
}

Var Linear::forward(const Var& x) const {
  return ad::add_row(ad::mm_nt(x, w), b);
}

void Linear::collect(ParamMap& out_params) const {
  out_params[w->name] = w;
  out_params[b->name] = b;
}

LayerNormParams LayerNormParams::init(std::size_t dim,
                                      const std::string& name) {
  LayerNormParams p;
  p.gamma = ad::parameter(Tensor::full({dim}, 1.0), name + "/gamma");
  p.beta = ad::parameter(Tensor::zeros({dim}), name + "/beta");
  return p;
}

Var LayerNormParams::forward(const Var& x) const {
  return ad::layer_norm(x, gamma, beta);
}

void LayerNormParams::collect(ParamMap& out_params) const {
  out_params[gamma->name] = gamma;
  out_params[beta->name] = beta;
}

Mlp Mlp::init(std::size_t in, std::size_t hidden, std::size_t out,
              std::uint64_t seed, const std::string& name) {
  Mlp m;
  m.fc1 = Linear::init(in, hidden, seed, name + "/fc1");
  m.fc2 = Linear::init(hidden, out, seed, name + "/fc2");
  return m;
}

Var Mlp::forward(const Var& x) const {
  return fc2.forward(ad::relu(fc1.forward(x)));
}

void Mlp::collect(ParamMap& out_params) const {
  fc1.collect(out_params);
  fc2.collect(out_params);
}

MultiHeadAttention MultiHeadAttention::init(std::size_t dim, std::size_t heads,
                                            std::uint64_t seed,
                                            const std::string& name) {
  if (dim % heads != 0)
    throw ConfigError("attention: dim not divisible by head count");
  MultiHeadAttention a;
  a.heads = heads;
  a.wq = Linear::init(dim, dim, seed, name + "/wq");
  a.wk = Linear::init(dim, dim, seed, name + "/wk");
  a.wv = Linear::init(dim, dim, seed, name + "/wv");
  a.wo = Linear::init(dim, dim, seed, name + "/wo");
  return a;
}

Var MultiHeadAttention::forward(const Var& q_in, const Var& k_in,
                                const Var& v_in) const {
  const std::size_t dim = q_in->value.cols();
  const std::size_t dk = dim / heads;
  const double scl = 1.0 / std::sqrt(static_cast<double>(dk));
  Var q = wq.forward(q_in);
  Var k = wk.forward(k_in);
  Var v = wv.forward(v_in);
  std::vector<Var> head_outs;
  head_outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Var qh = ad::slice_cols(q, h * dk, (h + 1) * dk);
    Var kh = ad::slice_cols(k, h * dk, (h + 1) * dk);
    Var vh = ad::slice_cols(v, h * dk, (h + 1) * dk);
    Var scores = ad::scale(ad::mm_nt(qh, kh), scl);
    Var attn = ad::softmax_rows(scores);
    head_outs.push_back(ad::mm_nn(attn, vh));
  }
  return wo.forward(ad::concat_cols(head_outs));
}

void MultiHeadAttention::collect(ParamMap& out_params) const {
  wq.collect(out_params);
  wk.collect(out_params);
  wv.collect(out_params);
  wo.collect(out_params);
}

EncoderLayer EncoderLayer::init(std::size_t dim, std::size_t heads,
                                std::size_t ffn_dim, std::uint64_t seed,
                                const std::string& name) {
  EncoderLayer l;
  l.ln1 = LayerNormParams::init(dim, name + "/ln1");
  l.ln2 = LayerNormParams::init(dim, name + "/ln2");
  l.attn = MultiHeadAttention::init(dim, heads, seed, name + "/attn");
  l.ffn = Mlp::init(dim, ffn_dim, dim, seed, name + "/ffn");
  return l;
}

Var EncoderLayer::forward(const Var& x, const Var& pos) const {
  Var h = ln1.forward(x);
  Var hp = ad::add(h, pos);
  Var y = ad::add(x, attn.forward(hp, hp, h));
  return ad::add(y, ffn.forward(ln2.forward(y)));
}

void EncoderLayer::collect(ParamMap& out_params) const {
  ln1.collect(out_params);
  ln2.collect(out_params);
  attn.collect(out_params);
  ffn.collect(out_params);
}

DecoderLayer DecoderLayer::init(std::size_t dim, std::size_t heads,
                                std::size_t ffn_dim, std::uint64_t seed,
                                const std::string& name) {
  DecoderLayer l;
  l.ln1 = LayerNormParams::init(dim, name + "/ln1");
  l.ln2 = LayerNormParams::init(dim, name + "/ln2");
  l.ln3 = LayerNormParams::init(dim, name + "/ln3");
  l.self_attn = MultiHeadAttention::init(dim, heads, seed, name + "/self");
  l.cross_attn = MultiHeadAttention::init(dim, heads, seed, name + "/cross");
  l.ffn = Mlp::init(dim, ffn_dim, dim, seed, name + "/ffn");
  return l;
}

Var DecoderLayer::forward(const Var& slots, const Var& query_pos,
                          const Var& memory, const Var& memory_pos) const {
  Var h = ln1.forward(slots);
  Var hq = ad::add(h, query_pos);
  Var x = ad::add(slots, self_attn.forward(hq, hq, h));
  Var h2 = ad::add(ln2.forward(x), query_pos);
  Var y = ad::add(x, cross_attn.forward(h2, ad::add(memory, memory_pos),
                                        memory));
  return ad::add(y, ffn.forward(ln3.forward(y)));
}

void DecoderLayer::collect(ParamMap& out_params) const {
  ln1.collect(out_params);
  ln2.collect(out_params);
  ln3.collect(out_params);
  self_attn.collect(out_params);
  cross_attn.collect(out_params);
  ffn.collect(out_params);
}

}  // namespace pmdet::nn
