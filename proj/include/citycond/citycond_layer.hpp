#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "citycond/nn.hpp"
#include "citycond/tensor.hpp"

namespace citycond {

enum class Variant { base, cityid, citymem };
enum class Pooling { mean, max };

std::string to_string(Variant v);
std::string to_string(Pooling p);
Variant variant_from_string(const std::string& s);
Pooling pooling_from_string(const std::string& s);

struct CityCondConfig {
  Variant variant = Variant::base;
  size_t num_cities = 2;
  size_t d_c = 16;
  size_t slots = 8;   // K
  size_t d_m = 32;
  Pooling pooling = Pooling::mean;
  bool use_city_embedding_in_query = true;
};

// One attention snapshot: which memory slots a city attended to at a step.
struct AttentionRecord {
  size_t city = 0;
  size_t time = 0;
  std::vector<double> alpha;
};

// Collapses the node axis of [T x N x d_h] to [T x d_h]; identity on rank-2.
Tensor pool_hidden(const Tensor& h, Pooling pooling);

// Attention readout against the memory bank for a whole window.
// e_c: [1 x d_c] (or undefined for d_c = 0), pooled: [T x d_h].
// Returns readout [T x d_m] and attention weights [T x K].
std::pair<Tensor, Tensor> memory_read(const Tensor& e_c, const Tensor& pooled,
                                      const Tensor& memory, const Mlp2& query_net);

// h̃ = h + g ⊙ (m W_m), g = σ(W_g [h; m]) computed per (t, node) with the
// readout broadcast over nodes. h: [T x N x d_h] or [T x d_h], m: [T x d_m].
Tensor gated_fuse(const Tensor& h, const Tensor& m, const Tensor& w_g, const Tensor& w_m);

// City conditioning layer: per-city embedding, optional shared memory bank
// with attention readout, and gated residual fusion at the host network's
// insertion point.
struct CityCondLayer {
  CityCondConfig cfg;
  size_t d_h = 0;  // hidden size at the insertion point

  Tensor embedding;  // [|C| x d_c], cityid & citymem
  Tensor memory;     // [K x d_m], citymem only
  Mlp2 query_net;    // (d_c + d_h) -> d_m -> d_m, citymem only
  Tensor w_g;        // [(d_h + d_m) x d_h], no bias
  Tensor w_m;        // [d_m x d_h], zero-init so the layer starts as identity

  CityCondLayer() = default;
  CityCondLayer(const CityCondConfig& config, size_t hidden, Rng& rng);

  // Embedding row for input augmentation; [1 x d_c], undefined when d_c = 0.
  Tensor city_embedding(size_t city) const;

  // Concatenates e_c onto the trailing feature axis of [T x d_x] or
  // [T x N x d_x] inputs. Identity for the base variant or d_c = 0.
  Tensor augment_input(size_t city, const Tensor& x) const;

  // Hook applied to hidden states; base/cityid pass through untouched,
  // citymem runs pool -> memory_read -> gated_fuse. `sink`, when non-null,
  // receives one AttentionRecord per time step (time_base + t).
  Tensor apply(size_t city, const Tensor& h, std::vector<AttentionRecord>* sink = nullptr,
               size_t time_base = 0) const;

  // Width added to the input feature axis by augment_input.
  size_t input_extra() const;

  void collect(ParamList& out, const std::string& prefix) const;
  size_t param_count() const;

  // Closed-form count: |C|d_c + Kd_m + params(φ_q) + (d_h+d_m)d_h + d_m d_h.
  static size_t expected_param_count(const CityCondConfig& config, size_t hidden);
};

}  // namespace citycond
