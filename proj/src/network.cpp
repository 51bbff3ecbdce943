#include "mast/network.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace mast {

Variant parse_variant(const std::string& name) {
  if (name == "mast-l" || name == "local") return Variant::local;
  if (name == "mast-m" || name == "masked") return Variant::masked;
  throw std::invalid_argument("unknown model variant '" + name + "'");
}

std::string to_string(Variant v) { return v == Variant::local ? "mast-l" : "mast-m"; }

void MastConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("model config: " + msg); };
  if (layers < 0) fail("layers must be >= 0");
  if (heads < 1) fail("heads must be >= 1");
  if (head_dim < 1) fail("head_dim must be >= 1");
  if (is_rope(posenc) && head_dim % 4 != 0) fail("rotary encoding needs head_dim divisible by 4");
  if (is_ape(posenc) && model_dim() % 4 != 0) fail("absolute encoding needs heads*head_dim divisible by 4");
  if (obs_dim < 1) fail("obs_dim must be >= 1");
  if (action_dim < 1) fail("action_dim must be >= 1");
  if (!(window_radius > 0.0)) fail("window_radius must be positive");
  if (!(base_wavelength > 0.0)) fail("base_wavelength must be positive");
  if (!(leaky_slope > 0.0 && leaky_slope < 1.0)) fail("leaky_slope must lie in (0, 1)");
  if (!(u_max > 0.0)) fail("u_max must be positive");
}

FrequencySet MastConfig::frequencies() const {
  if (is_rope(posenc)) return make_frequencies(frequency_kind(posenc), head_dim / 4, base_wavelength);
  if (is_ape(posenc)) return make_frequencies(frequency_kind(posenc), model_dim() / 4, base_wavelength);
  return FrequencySet{{}, FrequencyKind::geometric, base_wavelength};
}

// ---------------------------------------------------------------------------

void ModelParams::add(std::string name, Matrix value) {
  if (index_.contains(name)) throw std::invalid_argument("duplicate tensor name '" + name + "'");
  index_.emplace(name, tensors_.size());
  tensors_.push_back(Tensor{std::move(name), std::move(value)});
}

const Matrix& ModelParams::at(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no tensor named '" + name + "'");
  return tensors_[it->second].value;
}

Matrix& ModelParams::at(const std::string& name) {
  return const_cast<Matrix&>(static_cast<const ModelParams&>(*this).at(name));
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += static_cast<std::size_t>(t.value.size());
  return n;
}

bool ModelParams::operator==(const ModelParams& other) const {
  if (tensors_.size() != other.tensors_.size()) return false;
  for (std::size_t i = 0; i < tensors_.size(); ++i) {
    const auto& a = tensors_[i];
    const auto& b = other.tensors_[i];
    if (a.name != b.name || a.value.rows() != b.value.rows() || a.value.cols() != b.value.cols()) return false;
    if (std::memcmp(a.value.data(), b.value.data(), sizeof(double) * static_cast<std::size_t>(a.value.size())) != 0)
      return false;
  }
  return true;
}

namespace {

std::string layer_prefix(int l) { return "layer" + std::to_string(l) + "."; }

struct Shape {
  std::string name;
  Index rows, cols;
  enum class Init { weight, zero, one } init;
};

std::vector<Shape> expected_shapes(const MastConfig& cfg) {
  const Index d = cfg.model_dim(), da = cfg.head_dim, hidden = 2 * d;
  using I = Shape::Init;
  std::vector<Shape> s;
  auto mlp = [&](const std::string& p, Index in, Index mid, Index out) {
    s.push_back({p + "w1", mid, in, I::weight});
    s.push_back({p + "b1", 1, mid, I::zero});
    s.push_back({p + "w2", out, mid, I::weight});
    s.push_back({p + "b2", 1, out, I::zero});
  };
  mlp("perception.", cfg.obs_dim, hidden, d);
  if (cfg.posenc == PosEncKind::mlp) mlp("posenc.", 2, hidden, d);
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string p = layer_prefix(l);
    s.push_back({p + "ln1.gain", 1, d, I::one});
    s.push_back({p + "ln1.bias", 1, d, I::zero});
    for (int h = 0; h < cfg.heads; ++h) {
      s.push_back({p + "attn.q" + std::to_string(h), da, d, I::weight});
      s.push_back({p + "attn.k" + std::to_string(h), da, d, I::weight});
      s.push_back({p + "attn.v" + std::to_string(h), da, d, I::weight});
    }
    s.push_back({p + "attn.o", d, da * cfg.heads, I::weight});
    s.push_back({p + "ln2.gain", 1, d, I::one});
    s.push_back({p + "ln2.bias", 1, d, I::zero});
    mlp(p + "mlp.", d, hidden, d);
  }
  mlp("readout.", d, hidden, cfg.action_dim);
  return s;
}

}  // namespace

ModelParams init_params(const MastConfig& cfg, Rng& rng) {
  cfg.validate();
  ModelParams params;
  for (const Shape& s : expected_shapes(cfg)) {
    Matrix m(s.rows, s.cols);
    switch (s.init) {
      case Shape::Init::zero: m.setZero(); break;
      case Shape::Init::one: m.setOnes(); break;
      case Shape::Init::weight: {
        const double bound = 1.0 / std::sqrt(static_cast<double>(s.cols));
        for (Index j = 0; j < m.cols(); ++j)
          for (Index i = 0; i < m.rows(); ++i) m(i, j) = rng.uniform(-bound, bound);
        break;
      }
    }
    params.add(s.name, std::move(m));
  }
  return params;
}

ModelParams zero_params(const MastConfig& cfg) {
  cfg.validate();
  ModelParams params;
  for (const Shape& s : expected_shapes(cfg)) params.add(s.name, Matrix::Zero(s.rows, s.cols));
  return params;
}

void check_compatible(const ModelParams& params, const MastConfig& cfg) {
  const auto shapes = expected_shapes(cfg);
  for (const Shape& s : shapes) {
    if (!params.contains(s.name)) {
      throw FormatError("weights are missing tensor '" + s.name + "' (expected shape " + shape_string(s.rows, s.cols) + ")");
    }
    const Matrix& m = params.at(s.name);
    if (m.rows() != s.rows || m.cols() != s.cols) {
      throw FormatError("tensor '" + s.name + "' has shape " + shape_string(m) + ", expected " +
                        shape_string(s.rows, s.cols));
    }
  }
  if (params.size() != shapes.size()) {
    for (const auto& t : params.tensors()) {
      bool known = false;
      for (const Shape& s : shapes) known = known || s.name == t.name;
      if (!known) throw FormatError("unexpected tensor '" + t.name + "' for this configuration");
    }
  }
}

// ---------------------------------------------------------------------------

BoundModel::BoundModel(Tape& tape, const ModelParams& params, const MastConfig& cfg, bool trainable)
    : tape_(&tape), cfg_(cfg) {
  vars_.reserve(params.size());
  for (const auto& t : params.tensors()) {
    index_.emplace(t.name, vars_.size());
    vars_.push_back(trainable ? tape.variable(t.value) : tape.constant(t.value));
  }
}

Var BoundModel::operator[](const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("model has no tensor '" + name + "'");
  return vars_[it->second];
}

namespace {

Var mlp(const BoundModel& m, const std::string& prefix, Var x) {
  const double slope = m.config().leaky_slope;
  Var hidden = leaky_relu(add_rowwise(matmul_bt(x, m[prefix + "w1"]), m[prefix + "b1"]), slope);
  return add_rowwise(matmul_bt(hidden, m[prefix + "w2"]), m[prefix + "b2"]);
}

}  // namespace

Var perceive(const BoundModel& model, Var observations) {
  const MastConfig& cfg = model.config();
  if (observations.cols() != cfg.obs_dim) {
    throw ShapeError("perceive: observation width " + std::to_string(observations.cols()) + ", expected " +
                     std::to_string(cfg.obs_dim));
  }
  Var scaled = cfg.obs_scale == 1.0 ? observations : scale(observations, cfg.obs_scale);
  return mlp(model, "perception.", scaled);
}

Var forward(const BoundModel& model, Var embeddings, const Matrix& positions, const MaskMatrix& mask) {
  const MastConfig& cfg = model.config();
  Tape& tape = model.tape();
  if (embeddings.cols() != cfg.model_dim()) {
    throw ShapeError("forward: embedding width " + std::to_string(embeddings.cols()) + ", expected " +
                     std::to_string(cfg.model_dim()));
  }
  const FrequencySet freqs = cfg.frequencies();
  AttentionOptions options;
  options.scaled = cfg.scaled_attention;
  options.rope = is_rope(cfg.posenc) ? &freqs : nullptr;

  Var x = embeddings;
  for (int l = 0; l < cfg.layers; ++l) {
    if (l == 0) {
      if (is_ape(cfg.posenc)) {
        x = add(x, tape.constant(ape_encode_rows(positions, freqs, cfg.model_dim())));
      } else if (cfg.posenc == PosEncKind::mlp) {
        x = add(x, mlp(model, "posenc.", tape.constant(positions / cfg.base_wavelength)));
      }
    }
    const std::string p = layer_prefix(l);
    AttentionWeights w;
    for (int h = 0; h < cfg.heads; ++h) {
      w.q.push_back(model[p + "attn.q" + std::to_string(h)]);
      w.k.push_back(model[p + "attn.k" + std::to_string(h)]);
      w.v.push_back(model[p + "attn.v" + std::to_string(h)]);
    }
    w.output = model[p + "attn.o"];
    Var normed = layernorm_rows(x, model[p + "ln1.gain"], model[p + "ln1.bias"]);
    x = add(x, attend(normed, positions, w, mask, options));
    normed = layernorm_rows(x, model[p + "ln2.gain"], model[p + "ln2.bias"]);
    x = add(x, mlp(model, p + "mlp.", normed));
  }
  return x;
}

Var readout(const BoundModel& model, Var y) {
  return clip_norm_rows(mlp(model, "readout.", y), model.config().u_max);
}

Var policy(const BoundModel& model, const Matrix& observations, const Matrix& positions, const MaskMatrix& mask) {
  Var x = perceive(model, model.tape().constant(observations));
  return readout(model, forward(model, x, positions, mask));
}

Matrix perceive(const ModelParams& params, const MastConfig& cfg, const Matrix& observations) {
  Tape tape;
  BoundModel m(tape, params, cfg, false);
  return perceive(m, tape.constant(observations)).value();
}

Matrix forward(const ModelParams& params, const MastConfig& cfg, const Matrix& embeddings, const Matrix& positions,
               const MaskMatrix& mask) {
  Tape tape;
  BoundModel m(tape, params, cfg, false);
  return forward(m, tape.constant(embeddings), positions, mask).value();
}

Matrix readout(const ModelParams& params, const MastConfig& cfg, const Matrix& y) {
  Tape tape;
  BoundModel m(tape, params, cfg, false);
  return readout(m, tape.constant(y)).value();
}

Matrix policy(const ModelParams& params, const MastConfig& cfg, const Matrix& observations, const Matrix& positions,
              const MaskMatrix& mask) {
  Tape tape;
  BoundModel m(tape, params, cfg, false);
  return policy(m, observations, positions, mask).value();
}

MaskMatrix attention_mask(const MastConfig& cfg, const Matrix& positions, const CommGraph& graph) {
  MaskMatrix mask = window_mask(positions, cfg.window_radius);
  if (cfg.use_component_mask()) mask = combine_masks(mask, component_mask(graph));
  return mask;
}

// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[] = "MASTW001";
constexpr std::size_t kMagicLen = 8;

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
void put_le(std::string& out, T value) {
  std::uint64_t bits;
  static_assert(sizeof(T) == 8);
  std::memcpy(&bits, &value, 8);
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
}

class Reader {
public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  bool done() const { return pos_ == bytes_.size(); }

  template <typename T>
  T get(const std::string& what) {
    if (bytes_.size() - pos_ < 8) throw FormatError("weights file truncated while reading " + what);
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b)
      bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + static_cast<std::size_t>(b)])) << (8 * b);
    pos_ += 8;
    T value;
    std::memcpy(&value, &bits, 8);
    return value;
  }

  std::string str(std::size_t n, const std::string& what) {
    if (bytes_.size() - pos_ < n) throw FormatError("weights file truncated while reading " + what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string serialize_weights(const ModelParams& params) {
  std::string out(kMagic, kMagicLen);
  for (const auto& t : params.tensors()) {
    put_le<std::uint64_t>(out, t.name.size());
    out += t.name;
    put_le<std::uint64_t>(out, 2);
    put_le<std::uint64_t>(out, static_cast<std::uint64_t>(t.value.rows()));
    put_le<std::uint64_t>(out, static_cast<std::uint64_t>(t.value.cols()));
    for (Index i = 0; i < t.value.rows(); ++i)
      for (Index j = 0; j < t.value.cols(); ++j) put_le<double>(out, t.value(i, j));
  }
  return out;
}

ModelParams deserialize_weights(const std::string& bytes) {
  if (bytes.size() < kMagicLen || bytes.compare(0, kMagicLen, kMagic) != 0) {
    throw FormatError("not a weights file: bad magic");
  }
  Reader r(bytes);
  r.str(kMagicLen, "magic");
  ModelParams params;
  while (!r.done()) {
    const auto name_len = r.get<std::uint64_t>("tensor name length");
    if (name_len > (1u << 20)) throw FormatError("implausible tensor name length");
    const std::string name = r.str(name_len, "tensor name");
    const auto rank = r.get<std::uint64_t>("rank of '" + name + "'");
    if (rank > 2) throw FormatError("tensor '" + name + "' has unsupported rank " + std::to_string(rank));
    std::vector<std::uint64_t> extents;
    for (std::uint64_t k = 0; k < rank; ++k) extents.push_back(r.get<std::uint64_t>("extents of '" + name + "'"));
    const Index rows = rank == 2 ? static_cast<Index>(extents[0]) : 1;
    const Index cols = rank == 0 ? 1 : static_cast<Index>(extents.back());
    Matrix m(rows, cols);
    for (Index i = 0; i < rows; ++i)
      for (Index j = 0; j < cols; ++j) m(i, j) = r.get<double>("values of '" + name + "'");
    params.add(name, std::move(m));
  }
  return params;
}

void save_weights(const ModelParams& params, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  const std::string bytes = serialize_weights(params);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

ModelParams load_weights(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open weights file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_weights(ss.str());
}

ModelParams load_weights(const std::filesystem::path& path, const MastConfig& cfg) {
  ModelParams params = load_weights(path);
  check_compatible(params, cfg);
  return params;
}

}  // namespace mast
