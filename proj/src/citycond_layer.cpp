#include "citycond/citycond_layer.hpp"

namespace citycond {

std::string to_string(Variant v) {
  switch (v) {
    case Variant::base: return "base";
    case Variant::cityid: return "cityid";
    case Variant::citymem: return "citymem";
  }
  return "base";
}

std::string to_string(Pooling p) { return p == Pooling::mean ? "mean" : "max"; }

Variant variant_from_string(const std::string& s) {
  if (s == "base") return Variant::base;
  if (s == "cityid") return Variant::cityid;
  if (s == "citymem") return Variant::citymem;
  throw TensorError("unknown variant '" + s + "' (expected base|cityid|citymem)");
}

Pooling pooling_from_string(const std::string& s) {
  if (s == "mean") return Pooling::mean;
  if (s == "max") return Pooling::max;
  throw TensorError("unknown pooling '" + s + "' (expected mean|max)");
}

Tensor pool_hidden(const Tensor& h, Pooling pooling) {
  if (h.rank() == 2) return h;  // sequence backbone: already one vector per step
  if (h.rank() != 3) {
    throw TensorError("pool_hidden: expected [T,N,d_h] or [T,d_h], got " + shape_str(h.shape()));
  }
  return pooling == Pooling::mean ? mean(h, 1) : max(h, 1);
}

std::pair<Tensor, Tensor> memory_read(const Tensor& e_c, const Tensor& pooled,
                                      const Tensor& memory, const Mlp2& query_net) {
  size_t t_len = pooled.dim(0);
  Tensor q_in = pooled;
  if (e_c.defined() && e_c.dim(1) > 0) {
    Tensor e_rows = broadcast_to(e_c, {t_len, e_c.dim(1)});
    q_in = concat({e_rows, pooled}, 1);
  }
  Tensor q = query_net.forward(q_in);            // [T x d_m]
  Tensor logits = matmul(q, transpose(memory));  // [T x K]
  Tensor alpha = softmax(logits);
  Tensor readout = matmul(alpha, memory);        // [T x d_m]
  return {readout, alpha};
}

Tensor gated_fuse(const Tensor& h, const Tensor& m, const Tensor& w_g, const Tensor& w_m) {
  if (h.dim(0) != m.dim(0)) {
    throw TensorError("gated_fuse: time lengths disagree, " + shape_str(h.shape()) + " vs " +
                      shape_str(m.shape()));
  }
  size_t t_len = h.dim(0);
  size_t d_m = m.dim(1);
  Shape in_shape = h.shape();
  Tensor h2 = h;
  Tensor m2 = m;
  if (h.rank() == 3) {
    size_t n = h.dim(1);
    h2 = reshape(h, {t_len * n, h.dim(2)});
    m2 = reshape(broadcast_to(reshape(m, {t_len, 1, d_m}), {t_len, n, d_m}), {t_len * n, d_m});
  } else if (h.rank() != 2) {
    throw TensorError("gated_fuse: expected [T,N,d_h] or [T,d_h], got " + shape_str(h.shape()));
  }
  Tensor gate = sigmoid(matmul(concat({h2, m2}, 1), w_g));
  Tensor fused = add(h2, mul(gate, matmul(m2, w_m)));
  return h.rank() == 3 ? reshape(fused, in_shape) : fused;
}

CityCondLayer::CityCondLayer(const CityCondConfig& config, size_t hidden, Rng& rng)
    : cfg(config), d_h(hidden) {
  if (cfg.variant == Variant::base) return;
  if (cfg.d_c > 0) {
    embedding = Tensor::uniform({cfg.num_cities, cfg.d_c}, rng, -0.1, 0.1, /*requires_grad=*/true);
  }
  if (cfg.variant != Variant::citymem) return;
  memory = Tensor::uniform({cfg.slots, cfg.d_m}, rng, -0.1, 0.1, /*requires_grad=*/true);
  query_net = Mlp2(cfg.d_c + d_h, cfg.d_m, cfg.d_m, rng);
  w_g = fanin_uniform(d_h + cfg.d_m, d_h, rng);
  w_m = Tensor::zeros({cfg.d_m, d_h}, /*requires_grad=*/true);
}

Tensor CityCondLayer::city_embedding(size_t city) const {
  if (!embedding.defined()) return Tensor();
  if (city >= cfg.num_cities) {
    throw TensorError("city index " + std::to_string(city) + " out of range for " +
                      std::to_string(cfg.num_cities) + " cities");
  }
  return embedding_lookup(embedding, {city});
}

Tensor CityCondLayer::augment_input(size_t city, const Tensor& x) const {
  if (cfg.variant != Variant::cityid || cfg.d_c == 0) return x;
  Tensor e = city_embedding(city);  // [1 x d_c]
  if (x.rank() == 2) {
    return concat({x, broadcast_to(e, {x.dim(0), cfg.d_c})}, 1);
  }
  if (x.rank() == 3) {
    size_t t_len = x.dim(0), n = x.dim(1), d_x = x.dim(2);
    Tensor flat = reshape(x, {t_len * n, d_x});
    Tensor cat = concat({flat, broadcast_to(e, {t_len * n, cfg.d_c})}, 1);
    return reshape(cat, {t_len, n, d_x + cfg.d_c});
  }
  throw TensorError("augment_input: expected rank 2 or 3 input, got " + shape_str(x.shape()));
}

Tensor CityCondLayer::apply(size_t city, const Tensor& h, std::vector<AttentionRecord>* sink,
                            size_t time_base) const {
  if (cfg.variant != Variant::citymem) return h;
  if (city >= cfg.num_cities) {
    throw TensorError("city index " + std::to_string(city) + " out of range for " +
                      std::to_string(cfg.num_cities) + " cities");
  }
  Tensor pooled = pool_hidden(h, cfg.pooling);
  Tensor e;
  if (cfg.d_c > 0) {
    // global-memory ablation: same query width, zeros in place of e_c
    e = cfg.use_city_embedding_in_query ? city_embedding(city) : Tensor::zeros({1, cfg.d_c});
  }
  auto [readout, alpha] = memory_read(e, pooled, memory, query_net);
  if (sink) {
    size_t t_len = alpha.dim(0), k = alpha.dim(1);
    for (size_t t = 0; t < t_len; ++t) {
      AttentionRecord rec;
      rec.city = city;
      rec.time = time_base + t;
      rec.alpha.assign(alpha.data().begin() + t * k, alpha.data().begin() + (t + 1) * k);
      sink->push_back(std::move(rec));
    }
  }
  return gated_fuse(h, readout, w_g, w_m);
}

size_t CityCondLayer::input_extra() const {
  return cfg.variant == Variant::cityid ? cfg.d_c : 0;
}

void CityCondLayer::collect(ParamList& out, const std::string& prefix) const {
  if (embedding.defined()) out.push_back({prefix + ".embedding", embedding});
  if (cfg.variant != Variant::citymem) return;
  out.push_back({prefix + ".memory", memory});
  query_net.collect(out, prefix + ".query");
  out.push_back({prefix + ".w_g", w_g});
  out.push_back({prefix + ".w_m", w_m});
}

size_t CityCondLayer::param_count() const {
  ParamList params;
  collect(params, "citycond");
  return citycond::param_count(params);
}

size_t CityCondLayer::expected_param_count(const CityCondConfig& config, size_t hidden) {
  switch (config.variant) {
    case Variant::base:
      return 0;
    case Variant::cityid:
      return config.num_cities * config.d_c;
    case Variant::citymem: {
      size_t q_in = config.d_c + hidden;
      size_t phi_q = q_in * config.d_m + config.d_m + config.d_m * config.d_m + config.d_m;
      return config.num_cities * config.d_c + config.slots * config.d_m + phi_q +
             (hidden + config.d_m) * hidden + config.d_m * hidden;
    }
  }
  return 0;
}

}  // namespace citycond
