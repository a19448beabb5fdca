#pragma once

#include <memory>
#include <string>
#include <vector>

#include "citycond/citycond_layer.hpp"
#include "citycond/errors.hpp"
#include "citycond/nn.hpp"
#include "citycond/tensor.hpp"

namespace citycond {

enum class BackboneKind { gru, tcn, transformer, gnn, stgcn, lstm_traj };

std::string to_string(BackboneKind k);
BackboneKind backbone_from_string(const std::string& s);
bool is_graph_backbone(BackboneKind k);

struct BackboneSpec {
  BackboneKind kind = BackboneKind::gru;
  size_t d_h = 64;
  size_t layers = 2;                          // gru: fixed 2; transformer: fixed 4; gnn depth
  size_t heads = 4;                           // transformer only
  std::vector<size_t> dilations = {1, 2, 4, 8};  // tcn only
  size_t kernel = 3;                          // tcn / stgcn temporal convs
  size_t head_hidden = 320;                   // per-node decoder width (graph backbones)

  static BackboneSpec defaults(BackboneKind kind);
  void validate() const;
};

// Weighted graph plus the row-normalized propagation matrix over A + I.
struct Adjacency {
  Tensor a;     // [N x N], nonnegative
  Tensor prop;  // row-normalized (A + I); rows sum to 1

  Adjacency() = default;
  explicit Adjacency(Tensor weights);
  size_t n() const { return a.defined() ? a.dim(0) : 0; }
};

// One message-passing layer: relu(P (H W_n) + H W_s + b), H: [N x d_h].
Tensor gnn_layer(const Tensor& h, const Tensor& prop, const Tensor& w_n, const Tensor& w_s,
                 const Tensor& b);

struct ModelConfig {
  BackboneSpec spec;
  CityCondConfig citycond;
  size_t d_x = 1;
  size_t l_h = 12;
  size_t l_f = 12;
  std::vector<size_t> city_nodes;  // N_c per city (traffic kinds)

  void validate() const;
};

// Paper-scale reference configuration used for the parameter-overhead check.
ModelConfig default_model_config(BackboneKind kind, Variant variant = Variant::base);

// Uniform forecasting interface. Traffic models map a normalized history
// window [L_h x N_c x d_x] to [L_f x N_c x d_x]; the trajectory model maps
// world positions [L_h x 2] to [L_f x 2]. Graph backbones need `adj`.
class Model {
 public:
  ModelConfig cfg;
  CityCondLayer citycond;

  virtual ~Model() = default;
  virtual Tensor forward(size_t city, const Tensor& x, const Adjacency* adj = nullptr,
                         std::vector<AttentionRecord>* sink = nullptr, size_t time_base = 0) = 0;
  virtual void collect(ParamList& out) const = 0;

  ParamList parameters() const;
  size_t param_count() const;
};

std::unique_ptr<Model> build_model(const ModelConfig& cfg, Rng& rng);

}  // namespace citycond
