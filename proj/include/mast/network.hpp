#pragma once

// The MAST network: perception MLP -> L pre-norm attention/MLP blocks with
// residuals -> readout MLP with velocity clipping. Parameters live in a named,
// ordered tensor collection that serializes bit-exactly.

#include "mast/attention.hpp"
#include "mast/comm.hpp"
#include "mast/numkernel.hpp"
#include "mast/posenc.hpp"

#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

namespace mast {

enum class Variant {
  local,   // MAST-L: window mask only
  masked,  // MAST-M: window AND component mask
};

Variant parse_variant(const std::string& name);
std::string to_string(Variant v);

struct MastConfig {
  int layers = 4;
  int heads = 4;
  int head_dim = 64;
  PosEncKind posenc = PosEncKind::rope_geometric;
  double window_radius = kUnboundedRadius;
  double base_wavelength = 1000.0;
  Variant variant = Variant::masked;
  int obs_dim = 14;
  int action_dim = 2;
  double leaky_slope = kDefaultLeakySlope;
  bool scaled_attention = true;
  double obs_scale = 1.0;  // observations are multiplied by this before perception
  double u_max = 5.0;

  int model_dim() const { return heads * head_dim; }
  bool use_component_mask() const { return variant == Variant::masked; }
  /// Throws std::invalid_argument on an inconsistent configuration.
  void validate() const;
  /// Frequencies for the configured encoding (empty set for none/mlp).
  FrequencySet frequencies() const;
};

class ModelParams {
public:
  struct Tensor {
    std::string name;
    Matrix value;
  };

  void add(std::string name, Matrix value);
  bool contains(const std::string& name) const { return index_.contains(name); }
  const Matrix& at(const std::string& name) const;
  Matrix& at(const std::string& name);

  std::size_t size() const { return tensors_.size(); }
  std::vector<Tensor>& tensors() { return tensors_; }
  const std::vector<Tensor>& tensors() const { return tensors_; }
  std::size_t parameter_count() const;

  bool operator==(const ModelParams& other) const;

private:
  std::vector<Tensor> tensors_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Uniform(+-1/sqrt(fan_in)) weights, zero biases, unit layernorm gains.
ModelParams init_params(const MastConfig& cfg, Rng& rng);

/// Same names and shapes as init_params, every value zero.
ModelParams zero_params(const MastConfig& cfg);

/// Parameters placed on a tape, addressable by name.
class BoundModel {
public:
  BoundModel(Tape& tape, const ModelParams& params, const MastConfig& cfg, bool trainable);

  Var operator[](const std::string& name) const;
  const MastConfig& config() const { return cfg_; }
  Tape& tape() const { return *tape_; }
  /// Tape variables in ModelParams order.
  const std::vector<Var>& vars() const { return vars_; }

private:
  Tape* tape_;
  MastConfig cfg_;
  std::vector<Var> vars_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Observations (N x obs_dim) to embeddings (N x d).
Var perceive(const BoundModel& model, Var observations);
/// L blocks of x <- x + Attn(LN(x)); x <- x + MLP(LN(x)). Additive encodings join before the first block.
Var forward(const BoundModel& model, Var embeddings, const Matrix& positions, const MaskMatrix& mask);
/// Rows of Y to velocities, each clipped to norm <= u_max.
Var readout(const BoundModel& model, Var y);
/// perceive -> forward -> readout.
Var policy(const BoundModel& model, const Matrix& observations, const Matrix& positions, const MaskMatrix& mask);

Matrix perceive(const ModelParams& params, const MastConfig& cfg, const Matrix& observations);
Matrix forward(const ModelParams& params, const MastConfig& cfg, const Matrix& embeddings, const Matrix& positions,
               const MaskMatrix& mask);
Matrix readout(const ModelParams& params, const MastConfig& cfg, const Matrix& y);
Matrix policy(const ModelParams& params, const MastConfig& cfg, const Matrix& observations, const Matrix& positions,
              const MaskMatrix& mask);

/// Training/centralized mask: window mask, AND-ed with the component mask for MAST-M.
MaskMatrix attention_mask(const MastConfig& cfg, const Matrix& positions, const CommGraph& graph);

class FormatError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Binary layout: magic "MASTW001", then per tensor until end of file: u64 name length,
/// UTF-8 name, u64 rank, u64 extents, f64 values row-major. All little-endian.
void save_weights(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_weights(const std::filesystem::path& path);
/// Loads and checks every tensor against the shapes implied by cfg.
ModelParams load_weights(const std::filesystem::path& path, const MastConfig& cfg);
void check_compatible(const ModelParams& params, const MastConfig& cfg);

std::string serialize_weights(const ModelParams& params);
ModelParams deserialize_weights(const std::string& bytes);

}  // namespace mast
