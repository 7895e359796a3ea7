#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "pmdet/autodiff.hpp"
#include "pmdet/rng.hpp"

namespace pmdet::nn {

using ad::Var;

using ParamMap = std::map<std::string, Var>;

// y = x W^T + b, weights stored (out, in).
struct Linear {
  Var w, b;

  static Linear init(std::size_t in, std::size_t out, std::uint64_t seed,
                     const std::string& name);
  Var forward(const Var& x) const;
  void collect(ParamMap& out_params) const;
};

struct LayerNormParams {
  Var gamma, beta;

  static LayerNormParams init(std::size_t dim, const std::string& name);
  Var forward(const Var& x) const;
  void collect(ParamMap& out_params) const;
};

// Two-layer perceptron with ReLU.
struct Mlp {
  Linear fc1, fc2;

  static Mlp init(std::size_t in, std::size_t hidden, std::size_t out,
                  std::uint64_t seed, const std::string& name);
  Var forward(const Var& x) const;
  void collect(ParamMap& out_params) const;
};

struct MultiHeadAttention {
  Linear wq, wk, wv, wo;
  std::size_t heads = 1;

  static MultiHeadAttention init(std::size_t dim, std::size_t heads,
                                 std::uint64_t seed, const std::string& name);
  // Separate query/key/value inputs so positional encodings can ride on the
  // attention inputs only (the DETR scheme), never on the values.
  Var forward(const Var& q_in, const Var& k_in, const Var& v_in) const;
  void collect(ParamMap& out_params) const;
};

// Pre-norm transformer blocks. Positional tensors are added to the
// query/key paths inside each attention, not to the residual stream.
struct EncoderLayer {
  LayerNormParams ln1, ln2;
  MultiHeadAttention attn;
  Mlp ffn;

  static EncoderLayer init(std::size_t dim, std::size_t heads,
                           std::size_t ffn_dim, std::uint64_t seed,
                           const std::string& name);
  Var forward(const Var& x, const Var& pos) const;
  void collect(ParamMap& out_params) const;
};

struct DecoderLayer {
  LayerNormParams ln1, ln2, ln3;
  MultiHeadAttention self_attn, cross_attn;
  Mlp ffn;

  static DecoderLayer init(std::size_t dim, std::size_t heads,
                           std::size_t ffn_dim, std::uint64_t seed,
                           const std::string& name);
  Var forward(const Var& slots, const Var& query_pos, const Var& memory,
              const Var& memory_pos) const;
  void collect(ParamMap& out_params) const;
};

}  // namespace pmdet::nn
