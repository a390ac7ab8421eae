#ifndef BCQ_NMT_MODEL_HPP
#define BCQ_NMT_MODEL_HPP

#include <cmath>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "bcq/types.hpp"

namespace bcq::nmt {

struct ToyModelConfig {
  Index d_model = 64;
  Index d_ffn = 256;
  Index n_layers_enc = 2;
  Index n_layers_dec = 2;
  Index n_heads = 4;
  Index vocab = 64;
  Index max_seq = 32;
};

using TokenSeq = std::vector<Index>;

// Activations are column-per-position matrices (d x T); weights are row-major
// so each quantization row is one output neuron of W in y = W*x.

template <typename S>
struct Param {
  RowMatrix<S> value;
  RowMatrix<S> grad;
  RowMatrix<S> adam_m;
  RowMatrix<S> adam_v;

  void init(Index rows, Index cols) {
    value.setZero(rows, cols);
    grad.setZero(rows, cols);
    adam_m.setZero(rows, cols);
    adam_v.setZero(rows, cols);
  }
};

template <typename S>
struct Linear {
  Param<S> w;  // out x in
  Param<S> b;  // 1 x out
};

template <typename S>
struct LayerNorm {
  Param<S> gamma;  // 1 x d
  Param<S> beta;   // 1 x d
};

template <typename S>
struct AttentionBlock {
  LayerNorm<S> ln;
  Linear<S> wq, wk, wv, wo;
};

template <typename S>
struct FfnBlock {
  LayerNorm<S> ln;
  Linear<S> w1;  // d_ffn x d
  Linear<S> w2;  // d x d_ffn
};

template <typename S>
struct EncoderLayer {
  AttentionBlock<S> self;
  FfnBlock<S> ffn;
};

template <typename S>
struct DecoderLayer {
  AttentionBlock<S> self;
  AttentionBlock<S> cross;
  FfnBlock<S> ffn;
};

/// Pre-norm encoder-decoder transformer with a shared embedding matrix used
/// both for token lookup and as the output projection.
template <typename S>
struct Model {
  ToyModelConfig cfg;
  Param<S> embedding;  // vocab x d_model
  std::vector<EncoderLayer<S>> enc;
  std::vector<DecoderLayer<S>> dec;
  LayerNorm<S> enc_final;
  LayerNorm<S> dec_final;
};

/// A model weight together with its plan group and role. Vector-shaped
/// parameters (biases, layer norm) are never quantization targets.
template <typename S>
struct ParamRef {
  std::string name;
  std::string group;  // embedding, enc_ee, enc_ffn, dec_dd, dec_ed, dec_ffn, or "" for untargeted
  bool quantizable;
  Param<S>* param;
};

template <typename S>
std::vector<ParamRef<S>> list_params(Model<S>& m);

template <typename S>
Model<S> make_model(const ToyModelConfig& cfg, std::uint64_t seed);

struct ForwardResult {
  Eigen::MatrixXf logits;  // vocab x T_dec (float path)
};

/// Per-token mean cross entropy of the dense model under teacher forcing.
template <typename S>
S sequence_loss(Model<S>& m, const TokenSeq& src, const TokenSeq& dec_in, const TokenSeq& targets,
                bool accumulate_grads);

/// Next-token logits for the dense model (last decoder position).
template <typename S>
Eigen::Vector<S, Eigen::Dynamic> forward_next_token(Model<S>& m, const TokenSeq& src,
                                                    const TokenSeq& tgt_prefix);

template <typename S>
void zero_grads(Model<S>& m);

// -- implementation --------------------------------------------------------

namespace detail {

template <typename S>
RowMatrix<S> positional_encoding(Index d, Index t_max) {
  RowMatrix<S> pe(d, t_max);
  for (Index t = 0; t < t_max; ++t) {
    for (Index i = 0; i < d; i += 2) {
      const double angle = t / std::pow(10000.0, static_cast<double>(i) / d);
      pe(i, t) = static_cast<S>(std::sin(angle));
      if (i + 1 < d) pe(i + 1, t) = static_cast<S>(std::cos(angle));
    }
  }
  return pe;
}

template <typename S>
struct LnCache {
  RowMatrix<S> x;      // input d x T
  RowMatrix<S> xhat;   // normalized
  Eigen::Vector<S, Eigen::Dynamic> inv_std;  // per column
};

constexpr double kLnEps = 1e-5;

template <typename S>
RowMatrix<S> ln_forward(const LayerNorm<S>& ln, const RowMatrix<S>& x, LnCache<S>& cache) {
  const Index d = x.rows();
  const Index t = x.cols();
  cache.x = x;
  cache.xhat.resize(d, t);
  cache.inv_std.resize(t);
  RowMatrix<S> y(d, t);
  for (Index c = 0; c < t; ++c) {
    const S mu = x.col(c).mean();
    const S var = (x.col(c).array() - mu).square().mean();
    const S inv = S(1) / std::sqrt(var + static_cast<S>(kLnEps));
    cache.inv_std[c] = inv;
    cache.xhat.col(c) = (x.col(c).array() - mu) * inv;
    y.col(c) = cache.xhat.col(c).array() * ln.gamma.value.row(0).transpose().array() +
               ln.beta.value.row(0).transpose().array();
  }
  return y;
}

template <typename S>
RowMatrix<S> ln_backward(LayerNorm<S>& ln, const LnCache<S>& cache, const RowMatrix<S>& dy) {
  const Index d = cache.x.rows();
  const Index t = cache.x.cols();
  RowMatrix<S> dx(d, t);
  for (Index c = 0; c < t; ++c) {
    auto xhat = cache.xhat.col(c).array();
    auto g = ln.gamma.value.row(0).transpose().array();
    Eigen::Array<S, Eigen::Dynamic, 1> dxhat = dy.col(c).array() * g;
    ln.gamma.grad.row(0).transpose().array() += dy.col(c).array() * xhat;
    ln.beta.grad.row(0).transpose().array() += dy.col(c).array();
    const S m1 = dxhat.mean();
    const S m2 = (dxhat * xhat).mean();
    dx.col(c) = ((dxhat - m1 - xhat * m2) * cache.inv_std[c]).matrix();
  }
  (void)d;
  return dx;
}

template <typename S>
struct LinCache {
  RowMatrix<S> x;
};

template <typename S>
RowMatrix<S> lin_forward(const Linear<S>& lin, const RowMatrix<S>& x, LinCache<S>& cache) {
  cache.x = x;
  RowMatrix<S> y = lin.w.value * x;
  y.colwise() += lin.b.value.row(0).transpose();
  return y;
}

template <typename S>
RowMatrix<S> lin_backward(Linear<S>& lin, const LinCache<S>& cache, const RowMatrix<S>& dy) {
  lin.w.grad += dy * cache.x.transpose();
  lin.b.grad.row(0).transpose() += dy.rowwise().sum();
  return lin.w.value.transpose() * dy;
}

template <typename S>
struct AttnCache {
  LnCache<S> ln;
  LinCache<S> q, k, v, o;
  RowMatrix<S> qm, km, vm;                // d x T
  std::vector<RowMatrix<S>> probs;        // per head, Tq x Tk
  RowMatrix<S> ctx;                       // d x Tq
};

/// Pre-norm attention sub-layer: x + Wo * MultiHead(LN(x) -> q, kv_src -> k,v).
/// For self attention kv_input == the normalized x; for cross attention it is
/// the encoder memory (already normalized by the encoder's final LN).
template <typename S>
RowMatrix<S> attn_forward(const AttentionBlock<S>& a, const RowMatrix<S>& x,
                          const RowMatrix<S>* memory, bool causal, Index n_heads,
                          AttnCache<S>& cache) {
  RowMatrix<S> xn = ln_forward(a.ln, x, cache.ln);
  const RowMatrix<S>& kv = memory ? *memory : xn;
  cache.qm = lin_forward(a.wq, xn, cache.q);
  cache.km = lin_forward(a.wk, kv, cache.k);
  cache.vm = lin_forward(a.wv, kv, cache.v);
  const Index d = x.rows();
  const Index dh = d / n_heads;
  const Index tq = x.cols();
  const Index tk = kv.cols();
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));
  cache.probs.assign(static_cast<size_t>(n_heads), {});
  cache.ctx.resize(d, tq);
  for (Index h = 0; h < n_heads; ++h) {
    auto qh = cache.qm.middleRows(h * dh, dh);
    auto kh = cache.km.middleRows(h * dh, dh);
    auto vh = cache.vm.middleRows(h * dh, dh);
    RowMatrix<S> scores = (qh.transpose() * kh) * scale;  // tq x tk
    if (causal) {
      for (Index r = 0; r < tq; ++r) {
        for (Index c = r + 1; c < tk; ++c) scores(r, c) = S(-1e9);
      }
    }
    RowMatrix<S>& p = cache.probs[static_cast<size_t>(h)];
    p.resize(tq, tk);
    for (Index r = 0; r < tq; ++r) {
      auto row = scores.row(r).array();
      const S mx = row.maxCoeff();
      Eigen::Array<S, 1, Eigen::Dynamic> e = (row - mx).exp();
      p.row(r) = (e / e.sum()).matrix();
    }
    cache.ctx.middleRows(h * dh, dh) = vh * p.transpose();
  }
  return x + lin_forward(a.wo, cache.ctx, cache.o);
}

/// Returns dx; when memory != nullptr also accumulates into *dmemory.
template <typename S>
RowMatrix<S> attn_backward(AttentionBlock<S>& a, const AttnCache<S>& cache, const RowMatrix<S>& dy,
                           bool has_memory, Index n_heads, RowMatrix<S>* dmemory) {
  const Index d = cache.qm.rows();
  const Index dh = d / n_heads;
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));
  RowMatrix<S> dctx = lin_backward(a.wo, cache.o, dy);
  RowMatrix<S> dq(d, cache.qm.cols()), dk(d, cache.km.cols()), dv(d, cache.vm.cols());
  for (Index h = 0; h < n_heads; ++h) {
    auto vh = cache.vm.middleRows(h * dh, dh);
    auto kh = cache.km.middleRows(h * dh, dh);
    auto qh = cache.qm.middleRows(h * dh, dh);
    const RowMatrix<S>& p = cache.probs[static_cast<size_t>(h)];
    auto dctxh = dctx.middleRows(h * dh, dh);
    dv.middleRows(h * dh, dh) = dctxh * p;
    RowMatrix<S> dp = dctxh.transpose() * vh;  // tq x tk
    RowMatrix<S> ds(p.rows(), p.cols());
    for (Index r = 0; r < p.rows(); ++r) {
      const S dot = dp.row(r).dot(p.row(r));
      ds.row(r) = (dp.row(r).array() - dot).matrix().cwiseProduct(p.row(r));
    }
    dq.middleRows(h * dh, dh) = kh * ds.transpose() * scale;
    dk.middleRows(h * dh, dh) = qh * ds * scale;
  }
  RowMatrix<S> dxn = lin_backward(a.wq, cache.q, dq);
  RowMatrix<S> dkv = lin_backward(a.wk, cache.k, dk) + lin_backward(a.wv, cache.v, dv);
  if (has_memory) {
    *dmemory += dkv;
  } else {
    dxn += dkv;
  }
  return dy + ln_backward(a.ln, cache.ln, dxn);
}

template <typename S>
struct FfnCache {
  LnCache<S> ln;
  LinCache<S> l1, l2;
  RowMatrix<S> hidden;  // post-relu
};

template <typename S>
RowMatrix<S> ffn_forward(const FfnBlock<S>& f, const RowMatrix<S>& x, FfnCache<S>& cache) {
  RowMatrix<S> xn = ln_forward(f.ln, x, cache.ln);
  RowMatrix<S> h = lin_forward(f.w1, xn, cache.l1);
  cache.hidden = h.cwiseMax(S(0));
  return x + lin_forward(f.w2, cache.hidden, cache.l2);
}

template <typename S>
RowMatrix<S> ffn_backward(FfnBlock<S>& f, const FfnCache<S>& cache, const RowMatrix<S>& dy) {
  RowMatrix<S> dh = lin_backward(f.w2, cache.l2, dy);
  dh = dh.cwiseProduct((cache.hidden.array() > S(0)).template cast<S>().matrix());
  RowMatrix<S> dxn = lin_backward(f.w1, cache.l1, dh);
  return dy + ln_backward(f.ln, cache.ln, dxn);
}

template <typename S>
struct EncCache {
  RowMatrix<S> embedded;
  std::vector<AttnCache<S>> self;
  std::vector<FfnCache<S>> ffn;
  LnCache<S> final_ln;
  RowMatrix<S> memory;
  TokenSeq src;
};

template <typename S>
struct DecCache {
  RowMatrix<S> embedded;
  std::vector<AttnCache<S>> self;
  std::vector<AttnCache<S>> cross;
  std::vector<FfnCache<S>> ffn;
  LnCache<S> final_ln;
  RowMatrix<S> hidden;  // d x T after final LN
  TokenSeq dec_in;
};

template <typename S>
RowMatrix<S> embed(const Model<S>& m, const TokenSeq& tokens) {
  const Index d = m.cfg.d_model;
  RowMatrix<S> x(d, static_cast<Index>(tokens.size()));
  static thread_local RowMatrix<S> pe;
  if (pe.rows() != d || pe.cols() < static_cast<Index>(tokens.size())) {
    pe = positional_encoding<S>(d, std::max<Index>(m.cfg.max_seq, static_cast<Index>(tokens.size())));
  }
  const S scale = std::sqrt(static_cast<S>(d));
  for (size_t t = 0; t < tokens.size(); ++t) {
    if (tokens[t] < 0 || tokens[t] >= m.cfg.vocab) throw std::invalid_argument("token id out of range");
    x.col(static_cast<Index>(t)) =
        m.embedding.value.row(tokens[t]).transpose() * scale + pe.col(static_cast<Index>(t));
  }
  return x;
}

template <typename S>
void encode(Model<S>& m, const TokenSeq& src, EncCache<S>& cache) {
  cache.src = src;
  cache.embedded = embed(m, src);
  RowMatrix<S> x = cache.embedded;
  cache.self.resize(m.enc.size());
  cache.ffn.resize(m.enc.size());
  for (size_t l = 0; l < m.enc.size(); ++l) {
    x = attn_forward(m.enc[l].self, x, static_cast<const RowMatrix<S>*>(nullptr), false,
                     m.cfg.n_heads, cache.self[l]);
    x = ffn_forward(m.enc[l].ffn, x, cache.ffn[l]);
  }
  cache.memory = ln_forward(m.enc_final, x, cache.final_ln);
}

template <typename S>
void decode(Model<S>& m, const RowMatrix<S>& memory, const TokenSeq& dec_in, DecCache<S>& cache) {
  cache.dec_in = dec_in;
  cache.embedded = embed(m, dec_in);
  RowMatrix<S> x = cache.embedded;
  cache.self.resize(m.dec.size());
  cache.cross.resize(m.dec.size());
  cache.ffn.resize(m.dec.size());
  for (size_t l = 0; l < m.dec.size(); ++l) {
    x = attn_forward(m.dec[l].self, x, static_cast<const RowMatrix<S>*>(nullptr), true,
                     m.cfg.n_heads, cache.self[l]);
    x = attn_forward(m.dec[l].cross, x, &memory, false, m.cfg.n_heads, cache.cross[l]);
    x = ffn_forward(m.dec[l].ffn, x, cache.ffn[l]);
  }
  cache.hidden = ln_forward(m.dec_final, x, cache.final_ln);
}

template <typename S>
void backprop_embedding(Model<S>& m, const TokenSeq& tokens, const RowMatrix<S>& dx) {
  const S scale = std::sqrt(static_cast<S>(m.cfg.d_model));
  for (size_t t = 0; t < tokens.size(); ++t) {
    m.embedding.grad.row(tokens[t]) += dx.col(static_cast<Index>(t)).transpose() * scale;
  }
}

}  // namespace detail

template <typename S>
Model<S> make_model(const ToyModelConfig& cfg, std::uint64_t seed) {
  if (cfg.d_model % cfg.n_heads != 0) throw std::invalid_argument("d_model must be divisible by n_heads");
  Model<S> m;
  m.cfg = cfg;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 0.02);
  auto init_lin = [&](Linear<S>& lin, Index out, Index in) {
    lin.w.init(out, in);
    for (auto& x : lin.w.value.reshaped()) x = static_cast<S>(dist(rng));
    lin.b.init(1, out);
  };
  auto init_ln = [&](LayerNorm<S>& ln) {
    ln.gamma.init(1, cfg.d_model);
    ln.gamma.value.setOnes();
    ln.beta.init(1, cfg.d_model);
  };
  auto init_attn = [&](AttentionBlock<S>& a) {
    init_ln(a.ln);
    init_lin(a.wq, cfg.d_model, cfg.d_model);
    init_lin(a.wk, cfg.d_model, cfg.d_model);
    init_lin(a.wv, cfg.d_model, cfg.d_model);
    init_lin(a.wo, cfg.d_model, cfg.d_model);
  };
  auto init_ffn = [&](FfnBlock<S>& f) {
    init_ln(f.ln);
    init_lin(f.w1, cfg.d_ffn, cfg.d_model);
    init_lin(f.w2, cfg.d_model, cfg.d_ffn);
  };

  m.embedding.init(cfg.vocab, cfg.d_model);
  for (auto& x : m.embedding.value.reshaped()) x = static_cast<S>(dist(rng));
  m.enc.resize(static_cast<size_t>(cfg.n_layers_enc));
  for (auto& layer : m.enc) {
    init_attn(layer.self);
    init_ffn(layer.ffn);
  }
  m.dec.resize(static_cast<size_t>(cfg.n_layers_dec));
  for (auto& layer : m.dec) {
    init_attn(layer.self);
    init_attn(layer.cross);
    init_ffn(layer.ffn);
  }
  init_ln(m.enc_final);
  init_ln(m.dec_final);
  return m;
}

template <typename S>
std::vector<ParamRef<S>> list_params(Model<S>& m) {
  std::vector<ParamRef<S>> out;
  auto add = [&](const std::string& name, const std::string& group, bool quantizable, Param<S>& p) {
    out.push_back({name, group, quantizable, &p});
  };
  auto add_lin = [&](const std::string& prefix, const std::string& group, Linear<S>& lin) {
    add(prefix + ".w", group, true, lin.w);
    add(prefix + ".b", "", false, lin.b);
  };
  auto add_ln = [&](const std::string& prefix, LayerNorm<S>& ln) {
    add(prefix + ".gamma", "", false, ln.gamma);
    add(prefix + ".beta", "", false, ln.beta);
  };
  auto add_attn = [&](const std::string& prefix, const std::string& group, AttentionBlock<S>& a) {
    add_ln(prefix + ".ln", a.ln);
    add_lin(prefix + ".wq", group, a.wq);
    add_lin(prefix + ".wk", group, a.wk);
    add_lin(prefix + ".wv", group, a.wv);
    add_lin(prefix + ".wo", group, a.wo);
  };
  auto add_ffn = [&](const std::string& prefix, const std::string& group, FfnBlock<S>& f) {
    add_ln(prefix + ".ln", f.ln);
    add_lin(prefix + ".w1", group, f.w1);
    add_lin(prefix + ".w2", group, f.w2);
  };

  add("embedding", "embedding", true, m.embedding);
  for (size_t l = 0; l < m.enc.size(); ++l) {
    const std::string p = "enc." + std::to_string(l);
    add_attn(p + ".ee", "enc_ee", m.enc[l].self);
    add_ffn(p + ".ffn", "enc_ffn", m.enc[l].ffn);
  }
  for (size_t l = 0; l < m.dec.size(); ++l) {
    const std::string p = "dec." + std::to_string(l);
    add_attn(p + ".dd", "dec_dd", m.dec[l].self);
    add_attn(p + ".ed", "dec_ed", m.dec[l].cross);
    add_ffn(p + ".ffn", "dec_ffn", m.dec[l].ffn);
  }
  add_ln("enc.final_ln", m.enc_final);
  add_ln("dec.final_ln", m.dec_final);
  return out;
}

template <typename S>
void zero_grads(Model<S>& m) {
  for (auto& p : list_params(m)) p.param->grad.setZero();
}

template <typename S>
S sequence_loss(Model<S>& m, const TokenSeq& src, const TokenSeq& dec_in, const TokenSeq& targets,
                bool accumulate_grads) {
  using namespace detail;
  if (dec_in.size() != targets.size()) throw std::invalid_argument("dec_in/targets length mismatch");
  EncCache<S> ec;
  DecCache<S> dc;
  encode(m, src, ec);
  decode(m, ec.memory, dec_in, dc);

  const Index t_dec = static_cast<Index>(dec_in.size());
  RowMatrix<S> logits = m.embedding.value * dc.hidden;  // vocab x T
  S loss = S(0);
  RowMatrix<S> dlogits;
  if (accumulate_grads) dlogits.setZero(m.cfg.vocab, t_dec);
  for (Index t = 0; t < t_dec; ++t) {
    auto col = logits.col(t).array();
    const S mx = col.maxCoeff();
    Eigen::Array<S, Eigen::Dynamic, 1> e = (col - mx).exp();
    const S z = e.sum();
    const Index y = targets[static_cast<size_t>(t)];
    loss += std::log(z) + mx - logits(y, t);
    if (accumulate_grads) {
      dlogits.col(t) = (e / z).matrix();
      dlogits(y, t) -= S(1);
    }
  }
  loss /= static_cast<S>(t_dec);
  if (!accumulate_grads) return loss;

  dlogits /= static_cast<S>(t_dec);
  // shared embedding: output-projection contribution
  m.embedding.grad += dlogits * dc.hidden.transpose();
  RowMatrix<S> dhidden = m.embedding.value.transpose() * dlogits;

  RowMatrix<S> dx = ln_backward(m.dec_final, dc.final_ln, dhidden);
  RowMatrix<S> dmemory = RowMatrix<S>::Zero(ec.memory.rows(), ec.memory.cols());
  for (size_t l = m.dec.size(); l-- > 0;) {
    dx = ffn_backward(m.dec[l].ffn, dc.ffn[l], dx);
    dx = attn_backward(m.dec[l].cross, dc.cross[l], dx, true, m.cfg.n_heads, &dmemory);
    dx = attn_backward(m.dec[l].self, dc.self[l], dx, false, m.cfg.n_heads,
                       static_cast<RowMatrix<S>*>(nullptr));
  }
  backprop_embedding(m, dec_in, dx);

  RowMatrix<S> dex = ln_backward(m.enc_final, ec.final_ln, dmemory);
  for (size_t l = m.enc.size(); l-- > 0;) {
    dex = ffn_backward(m.enc[l].ffn, ec.ffn[l], dex);
    dex = attn_backward(m.enc[l].self, ec.self[l], dex, false, m.cfg.n_heads,
                        static_cast<RowMatrix<S>*>(nullptr));
  }
  backprop_embedding(m, src, dex);
  return loss;
}

template <typename S>
Eigen::Vector<S, Eigen::Dynamic> forward_next_token(Model<S>& m, const TokenSeq& src,
                                                    const TokenSeq& tgt_prefix) {
  using namespace detail;
  EncCache<S> ec;
  DecCache<S> dc;
  encode(m, src, ec);
  decode(m, ec.memory, tgt_prefix, dc);
  return m.embedding.value * dc.hidden.col(dc.hidden.cols() - 1);
}

}  // namespace bcq::nmt

#endif  // BCQ_NMT_MODEL_HPP
