#include "citycond/backbones.hpp"

#include <cmath>

namespace citycond {

std::string to_string(BackboneKind k) {
  switch (k) {
    case BackboneKind::gru: return "gru";
    case BackboneKind::tcn: return "tcn";
    case BackboneKind::transformer: return "transformer";
    case BackboneKind::gnn: return "gnn";
    case BackboneKind::stgcn: return "stgcn";
    case BackboneKind::lstm_traj: return "lstm_traj";
  }
  return "gru";
}

BackboneKind backbone_from_string(const std::string& s) {
  if (s == "gru") return BackboneKind::gru;
  if (s == "tcn") return BackboneKind::tcn;
  if (s == "transformer") return BackboneKind::transformer;
  if (s == "gnn") return BackboneKind::gnn;
  if (s == "stgcn") return BackboneKind::stgcn;
  if (s == "lstm_traj") return BackboneKind::lstm_traj;
  throw ConfigError("unknown backbone '" + s +
                    "' (expected gru|tcn|transformer|gnn|stgcn|lstm_traj)");
}

bool is_graph_backbone(BackboneKind k) {
  return k == BackboneKind::gnn || k == BackboneKind::stgcn;
}

BackboneSpec BackboneSpec::defaults(BackboneKind kind) {
  BackboneSpec s;
  s.kind = kind;
  switch (kind) {
    case BackboneKind::gru: s.layers = 2; break;
    case BackboneKind::tcn: s.layers = 4; break;
    case BackboneKind::transformer: s.layers = 4; break;
    case BackboneKind::gnn: s.layers = 2; break;
    case BackboneKind::stgcn: s.layers = 1; break;
    case BackboneKind::lstm_traj: s.layers = 1; break;
  }
  return s;
}

void BackboneSpec::validate() const {
  if (d_h == 0) throw ConfigError("backbone hidden size must be positive");
  if (kind == BackboneKind::gru && layers != 2) {
    throw ConfigError("gru backbone is fixed at 2 layers, got " + std::to_string(layers));
  }
  if (kind == BackboneKind::transformer) {
    if (layers != 4) {
      throw ConfigError("transformer backbone is fixed at 4 layers, got " + std::to_string(layers));
    }
    if (heads == 0 || d_h % heads != 0) {
      throw ConfigError("transformer hidden size " + std::to_string(d_h) +
                        " must divide evenly into " + std::to_string(heads) + " heads");
    }
  }
  if (kind == BackboneKind::tcn && dilations.empty()) {
    throw ConfigError("tcn backbone needs a nonempty dilation schedule");
  }
  if ((kind == BackboneKind::tcn || kind == BackboneKind::stgcn) && kernel < 1) {
    throw ConfigError("temporal kernel size must be >= 1");
  }
}

Adjacency::Adjacency(Tensor weights) {
  if (weights.rank() != 2 || weights.dim(0) != weights.dim(1)) {
    throw TensorError("adjacency must be square, got " + shape_str(weights.shape()));
  }
  size_t n = weights.dim(0);
  for (double v : weights.data()) {
    if (v < 0.0) throw TensorError("adjacency weights must be nonnegative");
  }
  a = weights;
  std::vector<double> p(n * n);
  const auto& av = a.data();
  for (size_t i = 0; i < n; ++i) {
    double row_sum = 0.0;
    for (size_t j = 0; j < n; ++j) row_sum += av[i * n + j] + (i == j ? 1.0 : 0.0);
    for (size_t j = 0; j < n; ++j) p[i * n + j] = (av[i * n + j] + (i == j ? 1.0 : 0.0)) / row_sum;
  }
  prop = Tensor::from_data({n, n}, std::move(p));
}

Tensor gnn_layer(const Tensor& h, const Tensor& prop, const Tensor& w_n, const Tensor& w_s,
                 const Tensor& b) {
  return relu(add(add(matmul(prop, matmul(h, w_n)), matmul(h, w_s)), b));
}

void ModelConfig::validate() const {
  spec.validate();
  if (l_h < 1 || l_f < 1) throw ConfigError("history and horizon lengths must be >= 1");
  if (spec.kind == BackboneKind::lstm_traj) {
    if (citycond.variant == Variant::citymem) {
      throw ConfigError("citymem variant is not supported for the lstm_traj backbone");
    }
    if (d_x != 2) throw ConfigError("lstm_traj models 2-D positions; d_x must be 2");
    if (l_h < 2) throw ConfigError("lstm_traj needs at least 2 history steps for displacements");
    return;
  }
  if (city_nodes.empty()) throw ConfigError("traffic backbones need per-city node counts");
  for (size_t n : city_nodes) {
    if (n == 0) throw ConfigError("every city needs at least one node");
  }
  if (citycond.num_cities != city_nodes.size()) {
    throw ConfigError("citycond.num_cities (" + std::to_string(citycond.num_cities) +
                      ") must match the number of cities (" + std::to_string(city_nodes.size()) +
                      ")");
  }
  if (d_x == 0) throw ConfigError("d_x must be positive");
}

ModelConfig default_model_config(BackboneKind kind, Variant variant) {
  ModelConfig cfg;
  cfg.spec = BackboneSpec::defaults(kind);
  cfg.citycond.variant = variant;
  if (kind == BackboneKind::lstm_traj) {
    cfg.d_x = 2;
    cfg.l_h = 20;
    cfg.l_f = 10;
    cfg.citycond.num_cities = 2;
    return cfg;
  }
  cfg.city_nodes = {207, 325};
  cfg.citycond.num_cities = 2;
  cfg.d_x = 1;
  cfg.l_h = 12;
  cfg.l_f = 12;
  return cfg;
}

ParamList Model::parameters() const {
  ParamList out;
  collect(out);
  return out;
}

size_t Model::param_count() const { return citycond::param_count(parameters()); }

namespace {

void check_window(const Tensor& x, size_t l_h, const char* kind) {
  if (x.dim(0) != l_h) {
    throw ConfigError(std::string(kind) + ": window length " + std::to_string(x.dim(0)) +
                      " does not match configured history length " + std::to_string(l_h));
  }
}

void check_city_index(const ModelConfig& cfg, size_t city, const char* kind) {
  size_t limit = cfg.spec.kind == BackboneKind::lstm_traj ? cfg.citycond.num_cities
                                                          : cfg.city_nodes.size();
  if (city >= limit) {
    throw ConfigError(std::string(kind) + ": city index " + std::to_string(city) +
                      " out of range for " + std::to_string(limit) + " cities");
  }
}

// [T x N x d] -> [N x T*d]: each node's hidden states stacked over time.
Tensor nodes_major(const Tensor& h) {
  size_t t_len = h.dim(0), n = h.dim(1), d = h.dim(2);
  std::vector<Tensor> rows;
  rows.reserve(n);
  for (size_t i = 0; i < n; ++i) rows.push_back(reshape(slice(h, 1, i, 1), {1, t_len * d}));
  return concat(rows, 0);
}

// [N x L*d] -> [L x N x d]: undo nodes_major on decoder outputs.
Tensor time_major(const Tensor& y, size_t l, size_t d) {
  size_t n = y.dim(0);
  std::vector<Tensor> nodes;
  nodes.reserve(n);
  for (size_t i = 0; i < n; ++i) nodes.push_back(reshape(slice(y, 0, i, 1), {l, 1, d}));
  return concat(nodes, 1);
}

// Flatten [T x N x d] node features into per-step rows [T x N*d].
Tensor flatten_nodes(const Tensor& x) {
  return reshape(x, {x.dim(0), x.dim(1) * x.dim(2)});
}

Tensor conv_block(const Tensor& h, const Tensor& w, const Tensor& b, size_t dilation) {
  return relu(add(conv1d(h, w, dilation), b));
}

Tensor temporal_conv_nodes(const Tensor& h, const Tensor& w, const Tensor& b, size_t dilation) {
  size_t t_len = h.dim(0), n = h.dim(1), d = h.dim(2);
  std::vector<Tensor> cols;
  cols.reserve(n);
  for (size_t i = 0; i < n; ++i) {
    Tensor seq = reshape(slice(h, 1, i, 1), {t_len, d});
    cols.push_back(reshape(conv_block(seq, w, b, dilation), {t_len, 1, d}));
  }
  return concat(cols, 1);
}

Tensor conv_weight(size_t kernel, size_t c_in, size_t c_out, Rng& rng) {
  double bound = 1.0 / std::sqrt(static_cast<double>(kernel * c_in));
  return Tensor::uniform({kernel, c_in, c_out}, rng, -bound, bound, /*requires_grad=*/true);
}

// ------------------------------------------------------------ recurrent cells

struct GruLayer {
  Linear ih, hh;  // in -> 3*d_h, d_h -> 3*d_h
  size_t d_h = 0;

  GruLayer() = default;
  GruLayer(size_t in, size_t hidden, Rng& rng)
      : ih(in, 3 * hidden, rng), hh(hidden, 3 * hidden, rng), d_h(hidden) {}

  Tensor step(const Tensor& x, const Tensor& h) const {
    Tensor gi = ih.forward(x);
    Tensor gh = hh.forward(h);
    Tensor r = sigmoid(add(slice(gi, 1, 0, d_h), slice(gh, 1, 0, d_h)));
    Tensor z = sigmoid(add(slice(gi, 1, d_h, d_h), slice(gh, 1, d_h, d_h)));
    Tensor n = tanh(add(slice(gi, 1, 2 * d_h, d_h), mul(r, slice(gh, 1, 2 * d_h, d_h))));
    return add(n, mul(z, sub(h, n)));  // (1-z)n + z h
  }

  // Runs over all rows of x: [T x in] -> [T x d_h].
  Tensor run(const Tensor& x) const {
    size_t t_len = x.dim(0);
    Tensor h = Tensor::zeros({1, d_h});
    std::vector<Tensor> outs;
    outs.reserve(t_len);
    for (size_t t = 0; t < t_len; ++t) {
      h = step(slice(x, 0, t, 1), h);
      outs.push_back(h);
    }
    return concat(outs, 0);
  }

  void collect(ParamList& out, const std::string& prefix) const {
    ih.collect(out, prefix + ".ih");
    hh.collect(out, prefix + ".hh");
  }
};

struct LstmLayer {
  Linear ih, hh;  // in -> 4*d_h, d_h -> 4*d_h
  size_t d_h = 0;

  LstmLayer() = default;
  LstmLayer(size_t in, size_t hidden, Rng& rng)
      : ih(in, 4 * hidden, rng), hh(hidden, 4 * hidden, rng), d_h(hidden) {}

  // returns (h', c')
  std::pair<Tensor, Tensor> step(const Tensor& x, const Tensor& h, const Tensor& c) const {
    Tensor gates = add(ih.forward(x), hh.forward(h));
    Tensor i = sigmoid(slice(gates, 1, 0, d_h));
    Tensor f = sigmoid(slice(gates, 1, d_h, d_h));
    Tensor g = tanh(slice(gates, 1, 2 * d_h, d_h));
    Tensor o = sigmoid(slice(gates, 1, 3 * d_h, d_h));
    Tensor c2 = add(mul(f, c), mul(i, g));
    return {mul(o, tanh(c2)), c2};
  }

  void collect(ParamList& out, const std::string& prefix) const {
    ih.collect(out, prefix + ".ih");
    hh.collect(out, prefix + ".hh");
  }
};

// ----------------------------------------------------------- sequence models

// Shared plumbing for backbones that see one flattened feature row per step.
// The input patch and forecast head are shaped by the node count, so cities
// with equal N share them and the backbone stays city-agnostic; only cities
// with different N get their own projections.
struct SequenceCommon {
  std::vector<Linear> patch;  // N*d_x (+d_c) -> d_h, one per distinct N
  std::vector<Linear> head;   // d_h -> L_f*N*d_x, one per distinct N
  std::vector<size_t> slot;   // city -> index into patch/head

  void init(const ModelConfig& cfg, size_t extra, Rng& rng) {
    std::vector<size_t> sizes;  // distinct node counts, first-appearance order
    for (size_t n : cfg.city_nodes) {
      size_t s = 0;
      while (s < sizes.size() && sizes[s] != n) ++s;
      if (s == sizes.size()) sizes.push_back(n);
      slot.push_back(s);
    }
    for (size_t n : sizes) {
      patch.emplace_back(n * cfg.d_x + extra, cfg.spec.d_h, rng);
    }
    for (size_t n : sizes) {
      head.emplace_back(cfg.spec.d_h, cfg.l_f * n * cfg.d_x, rng);
    }
  }

  const Linear& patch_for(size_t city) const { return patch[slot[city]]; }
  const Linear& head_for(size_t city) const { return head[slot[city]]; }

  void collect(ParamList& out) const {
    for (size_t s = 0; s < patch.size(); ++s) patch[s].collect(out, "patch.n" + std::to_string(s));
    for (size_t s = 0; s < head.size(); ++s) head[s].collect(out, "head.n" + std::to_string(s));
  }
};

struct GruModel : Model {
  SequenceCommon io;
  GruLayer l0, l1;

  GruModel(const ModelConfig& config, Rng& bb, Rng& cc) {
    cfg = config;
    citycond = CityCondLayer(cfg.citycond, cfg.spec.d_h, cc);
    io.init(cfg, citycond.input_extra(), bb);
    l0 = GruLayer(cfg.spec.d_h, cfg.spec.d_h, bb);
    l1 = GruLayer(cfg.spec.d_h, cfg.spec.d_h, bb);
  }

  Tensor forward(size_t city, const Tensor& x, const Adjacency*, std::vector<AttentionRecord>* sink,
                 size_t time_base) override {
    check_window(x, cfg.l_h, "gru");
    check_city_index(cfg, city, "gru");
    size_t n = cfg.city_nodes.at(city);
    Tensor rows = io.patch_for(city).forward(citycond.augment_input(city, flatten_nodes(x)));
    Tensor h1 = citycond.apply(city, l0.run(rows), sink, time_base);
    Tensor h2 = l1.run(h1);
    Tensor last = slice(h2, 0, cfg.l_h - 1, 1);
    return reshape(io.head_for(city).forward(last), {cfg.l_f, n, cfg.d_x});
  }

  void collect(ParamList& out) const override {
    io.collect(out);
    l0.collect(out, "gru.l0");
    l1.collect(out, "gru.l1");
    citycond.collect(out, "citycond");
  }
};

struct TcnModel : Model {
  SequenceCommon io;
  std::vector<Tensor> conv_w;
  std::vector<Tensor> conv_b;

  TcnModel(const ModelConfig& config, Rng& bb, Rng& cc) {
    cfg = config;
    citycond = CityCondLayer(cfg.citycond, cfg.spec.d_h, cc);
    io.init(cfg, citycond.input_extra(), bb);
    for (size_t i = 0; i < cfg.spec.dilations.size(); ++i) {
      conv_w.push_back(conv_weight(cfg.spec.kernel, cfg.spec.d_h, cfg.spec.d_h, bb));
      conv_b.push_back(Tensor::zeros({cfg.spec.d_h}, /*requires_grad=*/true));
    }
  }

  Tensor forward(size_t city, const Tensor& x, const Adjacency*, std::vector<AttentionRecord>* sink,
                 size_t time_base) override {
    check_window(x, cfg.l_h, "tcn");
    check_city_index(cfg, city, "tcn");
    size_t n = cfg.city_nodes.at(city);
    Tensor h = io.patch_for(city).forward(citycond.augment_input(city, flatten_nodes(x)));
    for (size_t b = 0; b < conv_w.size(); ++b) {
      h = add(h, conv_block(h, conv_w[b], conv_b[b], cfg.spec.dilations[b]));  // residual
      if (b == 0) h = citycond.apply(city, h, sink, time_base);
    }
    Tensor last = slice(h, 0, cfg.l_h - 1, 1);
    return reshape(io.head_for(city).forward(last), {cfg.l_f, n, cfg.d_x});
  }

  void collect(ParamList& out) const override {
    io.collect(out);
    for (size_t b = 0; b < conv_w.size(); ++b) {
      out.push_back({"tcn.b" + std::to_string(b) + ".w", conv_w[b]});
      out.push_back({"tcn.b" + std::to_string(b) + ".b", conv_b[b]});
    }
    citycond.collect(out, "citycond");
  }
};

struct EncoderLayer {
  LayerNorm ln1, ln2;
  Linear wq, wk, wv, wo;
  Linear ff1, ff2;
  size_t heads = 1;

  EncoderLayer() = default;
  EncoderLayer(size_t d, size_t n_heads, Rng& rng)
      : ln1(d),
        ln2(d),
        wq(d, d, rng),
        wk(d, d, rng),
        wv(d, d, rng),
        wo(d, d, rng),
        ff1(d, 2 * d, rng),
        ff2(2 * d, d, rng),
        heads(n_heads) {}

  Tensor forward(const Tensor& x) const {
    size_t d = x.dim(1), dh = d / heads;
    Tensor xn = ln1.forward(x);
    Tensor q = wq.forward(xn), k = wk.forward(xn), v = wv.forward(xn);
    std::vector<Tensor> outs;
    outs.reserve(heads);
    for (size_t h = 0; h < heads; ++h) {
      Tensor qh = slice(q, 1, h * dh, dh);
      Tensor kh = slice(k, 1, h * dh, dh);
      Tensor vh = slice(v, 1, h * dh, dh);
      Tensor scores = mul_scalar(matmul(qh, transpose(kh)), 1.0 / std::sqrt(static_cast<double>(dh)));
      outs.push_back(matmul(softmax(scores), vh));
    }
    Tensor y = add(x, wo.forward(concat(outs, 1)));
    Tensor yn = ln2.forward(y);
    return add(y, ff2.forward(relu(ff1.forward(yn))));
  }

  void collect(ParamList& out, const std::string& prefix) const {
    ln1.collect(out, prefix + ".ln1");
    ln2.collect(out, prefix + ".ln2");
    wq.collect(out, prefix + ".wq");
    wk.collect(out, prefix + ".wk");
    wv.collect(out, prefix + ".wv");
    wo.collect(out, prefix + ".wo");
    ff1.collect(out, prefix + ".ff1");
    ff2.collect(out, prefix + ".ff2");
  }
};

Tensor sinusoidal_pe(size_t t_len, size_t d) {
  std::vector<double> pe(t_len * d);
  for (size_t t = 0; t < t_len; ++t) {
    for (size_t i = 0; i < d; ++i) {
      double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d));
      double angle = static_cast<double>(t) * freq;
      pe[t * d + i] = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return Tensor::from_data({t_len, d}, std::move(pe));
}

struct TransformerModel : Model {
  SequenceCommon io;
  std::vector<EncoderLayer> enc;
  LayerNorm ln_final;

  TransformerModel(const ModelConfig& config, Rng& bb, Rng& cc) {
    cfg = config;
    citycond = CityCondLayer(cfg.citycond, cfg.spec.d_h, cc);
    io.init(cfg, citycond.input_extra(), bb);
    for (size_t l = 0; l < cfg.spec.layers; ++l) {
      enc.emplace_back(cfg.spec.d_h, cfg.spec.heads, bb);
    }
    ln_final = LayerNorm(cfg.spec.d_h);
  }

  Tensor forward(size_t city, const Tensor& x, const Adjacency*, std::vector<AttentionRecord>* sink,
                 size_t time_base) override {
    check_window(x, cfg.l_h, "transformer");
    check_city_index(cfg, city, "transformer");
    size_t n = cfg.city_nodes.at(city);
    Tensor tokens = io.patch_for(city).forward(citycond.augment_input(city, flatten_nodes(x)));
    tokens = add(tokens, sinusoidal_pe(cfg.l_h, cfg.spec.d_h));
    for (size_t l = 0; l < enc.size(); ++l) {
      tokens = enc[l].forward(tokens);
      if (l == 0) tokens = citycond.apply(city, tokens, sink, time_base);
    }
    Tensor last = slice(ln_final.forward(tokens), 0, cfg.l_h - 1, 1);
    return reshape(io.head_for(city).forward(last), {cfg.l_f, n, cfg.d_x});
  }

  void collect(ParamList& out) const override {
    io.collect(out);
    for (size_t l = 0; l < enc.size(); ++l) enc[l].collect(out, "enc.l" + std::to_string(l));
    ln_final.collect(out, "enc.ln_final");
    citycond.collect(out, "citycond");
  }
};

// -------------------------------------------------------------- graph models

// Node-shared embed + per-node temporal decoder shared by GNN and STGCN.
struct GraphCommon {
  Linear embed;  // d_x (+d_c) -> d_h
  Mlp2 decoder;  // L_h*d_h -> head_hidden -> L_f*d_x

  void init(const ModelConfig& cfg, size_t extra, Rng& rng) {
    embed = Linear(cfg.d_x + extra, cfg.spec.d_h, rng);
    decoder = Mlp2(cfg.l_h * cfg.spec.d_h, cfg.spec.head_hidden, cfg.l_f * cfg.d_x, rng);
  }

  Tensor embed_nodes(const Tensor& x) const {  // [T x N x d'] -> [T x N x d_h]
    size_t t_len = x.dim(0), n = x.dim(1);
    Tensor flat = embed.forward(reshape(x, {t_len * n, x.dim(2)}));
    return reshape(flat, {t_len, n, flat.dim(1)});
  }

  Tensor decode(const Tensor& h, size_t l_f, size_t d_x) const {  // [T x N x d_h] -> [L_f x N x d_x]
    return time_major(decoder.forward(nodes_major(h)), l_f, d_x);
  }

  void collect(ParamList& out) const {
    embed.collect(out, "embed");
    decoder.collect(out, "decoder");
  }
};

void check_adjacency(const Adjacency* adj, size_t n, const char* kind) {
  if (!adj || !adj->a.defined()) {
    throw ConfigError(std::string(kind) + ": graph backbone requires an adjacency matrix");
  }
  if (adj->n() != n) {
    throw TensorError(std::string(kind) + ": adjacency for " + std::to_string(adj->n()) +
                      " nodes does not match input with " + std::to_string(n) + " nodes");
  }
}

// Applies fn to each time slice [N x d] of h: [T x N x d].
template <typename Fn>
Tensor map_time_slices(const Tensor& h, Fn&& fn) {
  size_t t_len = h.dim(0), n = h.dim(1), d = h.dim(2);
  std::vector<Tensor> outs;
  outs.reserve(t_len);
  for (size_t t = 0; t < t_len; ++t) {
    Tensor ht = reshape(slice(h, 0, t, 1), {n, d});
    outs.push_back(reshape(fn(ht), {1, n, d}));
  }
  return concat(outs, 0);
}

struct GnnModel : Model {
  GraphCommon io;
  std::vector<Tensor> w_n, w_s, b;

  GnnModel(const ModelConfig& config, Rng& bb, Rng& cc) {
    cfg = config;
    citycond = CityCondLayer(cfg.citycond, cfg.spec.d_h, cc);
    io.init(cfg, citycond.input_extra(), bb);
    for (size_t l = 0; l < cfg.spec.layers; ++l) {
      w_n.push_back(fanin_uniform(cfg.spec.d_h, cfg.spec.d_h, bb));
      w_s.push_back(fanin_uniform(cfg.spec.d_h, cfg.spec.d_h, bb));
      b.push_back(Tensor::zeros({cfg.spec.d_h}, /*requires_grad=*/true));
    }
  }

  Tensor forward(size_t city, const Tensor& x, const Adjacency* adj,
                 std::vector<AttentionRecord>* sink, size_t time_base) override {
    check_window(x, cfg.l_h, "gnn");
    check_city_index(cfg, city, "gnn");
    check_adjacency(adj, x.dim(1), "gnn");
    Tensor h = io.embed_nodes(citycond.augment_input(city, x));
    for (size_t l = 0; l < w_n.size(); ++l) {
      h = map_time_slices(h, [&](const Tensor& ht) {
        return gnn_layer(ht, adj->prop, w_n[l], w_s[l], b[l]);
      });
      if (l == 0) h = citycond.apply(city, h, sink, time_base);
    }
    return io.decode(h, cfg.l_f, cfg.d_x);
  }

  void collect(ParamList& out) const override {
    io.collect(out);
    for (size_t l = 0; l < w_n.size(); ++l) {
      std::string p = "gnn.l" + std::to_string(l);
      out.push_back({p + ".w_n", w_n[l]});
      out.push_back({p + ".w_s", w_s[l]});
      out.push_back({p + ".b", b[l]});
    }
    citycond.collect(out, "citycond");
  }
};

struct StgcnModel : Model {
  GraphCommon io;
  Tensor t1_w, t1_b;  // temporal conv before the graph hop
  Tensor gc_w, gc_b;  // graph convolution
  Tensor t2_w, t2_b;  // temporal conv after

  StgcnModel(const ModelConfig& config, Rng& bb, Rng& cc) {
    cfg = config;
    citycond = CityCondLayer(cfg.citycond, cfg.spec.d_h, cc);
    io.init(cfg, citycond.input_extra(), bb);
    size_t d = cfg.spec.d_h;
    t1_w = conv_weight(cfg.spec.kernel, d, d, bb);
    t1_b = Tensor::zeros({d}, /*requires_grad=*/true);
    gc_w = fanin_uniform(d, d, bb);
    gc_b = Tensor::zeros({d}, /*requires_grad=*/true);
    t2_w = conv_weight(cfg.spec.kernel, d, d, bb);
    t2_b = Tensor::zeros({d}, /*requires_grad=*/true);
  }

  Tensor forward(size_t city, const Tensor& x, const Adjacency* adj,
                 std::vector<AttentionRecord>* sink, size_t time_base) override {
    check_window(x, cfg.l_h, "stgcn");
    check_city_index(cfg, city, "stgcn");
    check_adjacency(adj, x.dim(1), "stgcn");
    Tensor h = io.embed_nodes(citycond.augment_input(city, x));
    h = temporal_conv_nodes(h, t1_w, t1_b, 1);
    h = citycond.apply(city, h, sink, time_base);
    h = map_time_slices(h, [&](const Tensor& ht) {
      return relu(add(matmul(adj->prop, matmul(ht, gc_w)), gc_b));
    });
    h = temporal_conv_nodes(h, t2_w, t2_b, 1);
    return io.decode(h, cfg.l_f, cfg.d_x);
  }

  void collect(ParamList& out) const override {
    io.collect(out);
    out.push_back({"stgcn.t1.w", t1_w});
    out.push_back({"stgcn.t1.b", t1_b});
    out.push_back({"stgcn.gc.w", gc_w});
    out.push_back({"stgcn.gc.b", gc_b});
    out.push_back({"stgcn.t2.w", t2_w});
    out.push_back({"stgcn.t2.b", t2_b});
    citycond.collect(out, "citycond");
  }
};

// ---------------------------------------------------------- trajectory model

// Encoder-decoder over displacement sequences, anchored on the last observed
// position so outputs live in world coordinates.
struct LstmTrajModel : Model {
  LstmLayer encoder, decoder;
  Linear out_head;  // d_h -> 2

  LstmTrajModel(const ModelConfig& config, Rng& bb, Rng& cc) {
    cfg = config;
    citycond = CityCondLayer(cfg.citycond, cfg.spec.d_h, cc);
    size_t in = 2 + citycond.input_extra();
    encoder = LstmLayer(in, cfg.spec.d_h, bb);
    decoder = LstmLayer(in, cfg.spec.d_h, bb);
    out_head = Linear(cfg.spec.d_h, 2, bb);
  }

  Tensor forward(size_t city, const Tensor& x, const Adjacency*, std::vector<AttentionRecord>*,
                 size_t) override {
    check_window(x, cfg.l_h, "lstm_traj");
    check_city_index(cfg, city, "lstm_traj");
    if (x.rank() != 2 || x.dim(1) != 2) {
      throw TensorError("lstm_traj expects [L_h x 2] positions, got " + shape_str(x.shape()));
    }
    // positions -> displacements (first step zero)
    Tensor prev = slice(x, 0, 0, cfg.l_h - 1);
    Tensor curr = slice(x, 0, 1, cfg.l_h - 1);
    Tensor disp = concat({Tensor::zeros({1, 2}), sub(curr, prev)}, 0);
    Tensor anchor = slice(x, 0, cfg.l_h - 1, 1);  // last observed position

    Tensor h = Tensor::zeros({1, cfg.spec.d_h});
    Tensor c = Tensor::zeros({1, cfg.spec.d_h});
    for (size_t t = 0; t < cfg.l_h; ++t) {
      Tensor step_in = citycond.augment_input(city, slice(disp, 0, t, 1));
      std::tie(h, c) = encoder.step(step_in, h, c);
    }

    Tensor step = slice(disp, 0, cfg.l_h - 1, 1);  // seed with last displacement
    Tensor pos = anchor;
    std::vector<Tensor> outs;
    outs.reserve(cfg.l_f);
    for (size_t t = 0; t < cfg.l_f; ++t) {
      std::tie(h, c) = decoder.step(citycond.augment_input(city, step), h, c);
      step = out_head.forward(h);  // predicted displacement
      pos = add(pos, step);
      outs.push_back(pos);
    }
    return concat(outs, 0);
  }

  void collect(ParamList& out) const override {
    encoder.collect(out, "traj.enc");
    decoder.collect(out, "traj.dec");
    out_head.collect(out, "traj.out");
    citycond.collect(out, "citycond");
  }
};

}  // namespace

std::unique_ptr<Model> build_model(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  // separate streams so backbone weights are identical across variants that
  // do not change backbone shapes (base vs citymem cold-start equivalence)
  Rng bb = rng.fork("backbone");
  Rng cc = rng.fork("citycond");
  switch (cfg.spec.kind) {
    case BackboneKind::gru: return std::make_unique<GruModel>(cfg, bb, cc);
    case BackboneKind::tcn: return std::make_unique<TcnModel>(cfg, bb, cc);
    case BackboneKind::transformer: return std::make_unique<TransformerModel>(cfg, bb, cc);
    case BackboneKind::gnn: return std::make_unique<GnnModel>(cfg, bb, cc);
    case BackboneKind::stgcn: return std::make_unique<StgcnModel>(cfg, bb, cc);
    case BackboneKind::lstm_traj: return std::make_unique<LstmTrajModel>(cfg, bb, cc);
  }
  throw ConfigError("unknown backbone kind");
}

}  // namespace citycond
