#include "unibf/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "unibf/error.hpp"

namespace unibf::model {

using linalg::CMat;
using linalg::CVec;

std::string_view head_name(HeadKind head) {
  switch (head) {
    case HeadKind::dbl: return "dbl";
    case HeadKind::fl: return "fl";
    case HeadKind::sfl: return "sfl";
  }
  return "?";
}

HeadKind parse_head(std::string_view name) {
  if (name == "dbl") return HeadKind::dbl;
  if (name == "fl") return HeadKind::fl;
  if (name == "sfl") return HeadKind::sfl;
  throw ConfigError("unknown head '" + std::string(name) +
                    "' (expected dbl, fl or sfl)");
}

std::size_t ModelDims::input_dim() const {
  return 2 * num_antennas * num_users + (power_feature ? 1 : 0);
}

std::size_t ModelDims::output_dim() const {
  switch (head) {
    case HeadKind::dbl: return 2 * num_antennas * num_users;
    case HeadKind::fl: return 2 * num_users;
    case HeadKind::sfl: return num_users;
  }
  return 0;
}

void ModelDims::validate() const {
  if (num_antennas == 0 || num_users == 0)
    throw ConfigError("model: M and K must be positive");
  if (hidden.empty()) throw ConfigError("model: at least one hidden layer");
  for (std::size_t w : hidden)
    if (w == 0) throw ConfigError("model: hidden widths must be positive");
  if (!std::isfinite(fixed_power_db))
    throw ConfigError("model: fixed power must be finite");
}

// --------------------------------------------------------------- params

std::vector<std::pair<std::string, ad::Tensor*>> NetworkParams::trainable() {
  std::vector<std::pair<std::string, ad::Tensor*>> out;
  for (std::size_t l = 0; l < hidden.size(); ++l) {
    const std::string s = std::to_string(l + 1);
    out.emplace_back("W" + s, &hidden[l].weight);
    out.emplace_back("b" + s, &hidden[l].bias);
    out.emplace_back("gamma" + s, &norms[l].gain);
    out.emplace_back("beta" + s, &norms[l].shift);
  }
  const std::string s = std::to_string(hidden.size() + 1);
  out.emplace_back("W" + s, &output.weight);
  out.emplace_back("b" + s, &output.bias);
  return out;
}

std::vector<std::pair<std::string, const ad::Tensor*>> NetworkParams::trainable()
    const {
  auto mut = const_cast<NetworkParams*>(this)->trainable();
  std::vector<std::pair<std::string, const ad::Tensor*>> out;
  out.reserve(mut.size());
  for (auto& [name, t] : mut) out.emplace_back(std::move(name), t);
  return out;
}

std::size_t NetworkParams::num_trainable_values() const {
  std::size_t n = 0;
  for (const auto& [name, t] : trainable()) n += t->size();
  return n;
}

namespace {

DenseLayer glorot_layer(std::mt19937_64& rng, std::size_t in, std::size_t out) {
  const double a = std::sqrt(6.0 / static_cast<double>(in + out));
  std::uniform_real_distribution<double> u(-a, a);
  DenseLayer l{ad::Tensor(in, out), ad::Tensor(1, out)};
  for (double& w : l.weight.data) w = u(rng);
  return l;
}

}  // namespace

NetworkParams init_params(const ModelDims& dims, std::uint64_t seed) {
  dims.validate();
  NetworkParams p;
  p.dims = dims;
  auto rng = channel::make_stream(seed, channel::streams::kInit);
  std::size_t in = dims.input_dim();
  for (std::size_t w : dims.hidden) {
    p.hidden.push_back(glorot_layer(rng, in, w));
    p.norms.push_back(NormLayer{ad::Tensor(1, w, 1.0), ad::Tensor(1, w),
                                ad::Tensor(1, w), ad::Tensor(1, w, 1.0)});
    in = w;
  }
  p.output = glorot_layer(rng, in, dims.output_dim());
  return p;
}

std::vector<double> build_input(const channel::ChannelSample& sample,
                                bool power_feature) {
  const std::size_t k = sample.num_users();
  const std::size_t m = sample.num_antennas();
  std::vector<double> x(2 * k * m + (power_feature ? 1 : 0));
  for (std::size_t j = 0; j < k; ++j) {
    if (sample.h[j].size() != m)
      throw ShapeError("build_input: ragged channel rows");
    linalg::pack(sample.h[j], std::span(x).first(2 * k * m), k, j);
  }
  if (power_feature) x.back() = linear_to_db(sample.power);
  for (double v : x)
    if (!std::isfinite(v)) throw NumericError("build_input: non-finite entry");
  return x;
}

std::vector<CVec> channels_from_input(std::span<const double> x0, std::size_t m,
                                      std::size_t k) {
  if (x0.size() < 2 * m * k) throw ShapeError("channels_from_input: short input");
  std::vector<CVec> h;
  h.reserve(k);
  for (std::size_t j = 0; j < k; ++j)
    h.push_back(linalg::unpack(x0.first(2 * m * k), k, m, j));
  return h;
}

// ------------------------------------------------------- per-sample heads

std::vector<double> scaled_softmax(std::span<const double> z, double power) {
  std::vector<double> out(z.size());
  if (z.empty()) return out;
  const double zmax = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    out[i] = std::exp(z[i] - zmax);
    s += out[i];
  }
  for (double& v : out) v = power * (v / s);
  return out;
}

BeamStack head_dbl(std::span<const CVec> u, double power) {
  double total = 0.0;
  for (const CVec& uk : u) total += linalg::norm2(uk);
  if (!(total > 0.0))
    throw DomainError("head_dbl: all-zero output has no beam direction");
  const double s = std::sqrt(power / total);
  BeamStack b;
  b.power = power;
  for (const CVec& uk : u) {
    CVec v = uk;
    for (std::size_t i = 0; i < v.size(); ++i) {
      v.re[i] *= s;
      v.im[i] *= s;
    }
    b.v.push_back(std::move(v));
  }
  return b;
}

BeamStack recover_beams(std::span<const CVec> h, std::span<const double> p,
                        std::span<const double> q, std::vector<CVec>* directions) {
  const std::size_t k = h.size();
  if (p.size() != k || q.size() != k)
    throw ShapeError("recover_beams: K channels need K powers");
  for (std::size_t j = 0; j < k; ++j)
    if (!(linalg::norm2(h[j]) > 0.0))
      throw DomainError("recover_beams: channel of user " + std::to_string(j) +
                        " is zero");
  const linalg::Cholesky chol(linalg::gram_matrix(h, q, kNoisePower));
  BeamStack b;
  b.power = 0.0;
  if (directions) directions->clear();
  for (std::size_t j = 0; j < k; ++j) {
    CVec d = chol.solve(h[j]);
    const double inv = 1.0 / std::sqrt(linalg::norm2(d));
    const double amp = std::sqrt(p[j]);
    for (std::size_t i = 0; i < d.size(); ++i) {
      d.re[i] *= inv;
      d.im[i] *= inv;
    }
    CVec v = d;
    for (std::size_t i = 0; i < v.size(); ++i) {
      v.re[i] *= amp;
      v.im[i] *= amp;
    }
    b.power += p[j];
    b.v.push_back(std::move(v));
    if (directions) directions->push_back(std::move(d));
  }
  return b;
}

BeamStack head_fl(std::span<const double> u, std::span<const CVec> h,
                  double power, DualityFeature* feature) {
  const std::size_t k = h.size();
  if (u.size() != 2 * k) throw ShapeError("head_fl: expected 2K outputs");
  auto p = scaled_softmax(u.first(k), power);
  auto q = scaled_softmax(u.subspan(k, k), power);
  BeamStack b = recover_beams(h, p, q);
  b.power = power;
  if (feature) *feature = DualityFeature{std::move(p), std::move(q)};
  return b;
}

BeamStack head_sfl(std::span<const double> u, std::span<const CVec> h,
                   double power, DualityFeature* feature) {
  const std::size_t k = h.size();
  if (u.size() != k) throw ShapeError("head_sfl: expected K outputs");
  auto p = scaled_softmax(u, power);
  BeamStack b = recover_beams(h, p, p);
  b.power = power;
  if (feature) *feature = DualityFeature{p, p};
  return b;
}

// ---------------------------------------------------------- batched graph

Batch make_batch(std::span<const channel::ChannelSample> samples,
                 const ModelDims& dims) {
  const std::size_t m = dims.num_antennas;
  const std::size_t k = dims.num_users;
  Batch b;
  b.x0 = ad::Tensor(samples.size(), dims.input_dim());
  b.h = ad::Tensor(samples.size(), 2 * k * m);
  b.power = ad::Tensor(samples.size(), 1);
  for (std::size_t r = 0; r < samples.size(); ++r) {
    const auto& s = samples[r];
    if (s.num_users() != k || s.num_antennas() != m)
      throw ShapeError("sample " + std::to_string(r) + " is K=" +
                       std::to_string(s.num_users()) + ", M=" +
                       std::to_string(s.num_antennas()) + " but the model is K=" +
                       std::to_string(k) + ", M=" + std::to_string(m));
    if (!(s.power > 0.0))
      throw DomainError("sample " + std::to_string(r) + " has power <= 0");
    const auto x = build_input(s, dims.power_feature);
    std::copy(x.begin(), x.end(), b.x0.row(r).begin());
    std::copy(x.begin(), x.begin() + 2 * k * m, b.h.row(r).begin());
    b.power(r, 0) = s.power;
    if (dims.head != HeadKind::dbl)
      for (std::size_t j = 0; j < k; ++j)
        if (!(linalg::norm2(s.h[j]) > 0.0))
          throw DomainError("sample " + std::to_string(r) + ": channel of user " +
                            std::to_string(j) + " is zero");
  }
  return b;
}

ad::Var forward_trunk(ad::Tape& tape, const NetworkParams& params, ad::Var x0,
                      Mode mode, std::vector<ad::Var>* norm_nodes) {
  const std::size_t rows = tape.value(x0).rows;
  if (mode == Mode::train && rows < 2)
    throw ShapeError("forward_trunk: train mode needs a batch of at least 2");
  if (tape.value(x0).cols != params.dims.input_dim())
    throw ShapeError("forward_trunk: input has " +
                     std::to_string(tape.value(x0).cols) +
                     " features, model expects " +
                     std::to_string(params.dims.input_dim()));

  const bool train = mode == Mode::train;
  auto leaf = [&](const std::string& name, const ad::Tensor& t) {
    return train ? tape.parameter_ref(name, t) : tape.constant_ref(t);
  };

  ad::Var x = x0;
  for (std::size_t l = 0; l < params.hidden.size(); ++l) {
    const std::string s = std::to_string(l + 1);
    const auto& dense = params.hidden[l];
    const auto& norm = params.norms[l];
    const ad::Var w = leaf("W" + s, dense.weight);
    const ad::Var b = leaf("b" + s, dense.bias);
    const ad::Var g = leaf("gamma" + s, norm.gain);
    const ad::Var beta = leaf("beta" + s, norm.shift);
    x = ad::affine(tape, x, w, b);
    if (train) {
      x = ad::batch_norm_train(tape, x, g, beta, kBatchNormEps);
      if (norm_nodes) norm_nodes->push_back(x);
    } else {
      x = ad::batch_norm_eval(tape, x, g, beta,
                              tape.constant_ref(norm.running_mean),
                              tape.constant_ref(norm.running_var), kBatchNormEps);
    }
    x = ad::relu(tape, x);
  }
  const std::string s = std::to_string(params.hidden.size() + 1);
  return ad::affine(tape, x, leaf("W" + s, params.output.weight),
                    leaf("b" + s, params.output.bias));
}

ad::Var apply_head(ad::Tape& tape, HeadKind head, ad::Var u, ad::Var h,
                   ad::Var power, std::size_t m, std::size_t k, ad::Var* p_out,
                   ad::Var* q_out) {
  if (head == HeadKind::dbl) {
    const ad::Var n = ad::norm2(tape, u, m * k);
    const ad::Var s = ad::sqrt(tape, ad::div(tape, power, n));
    return ad::scale_groups(tape, u, s);
  }
  ad::Var p, q;
  if (head == HeadKind::fl) {
    p = ad::scaled_softmax(tape, ad::slice(tape, u, 0, k), power);
    q = ad::scaled_softmax(tape, ad::slice(tape, u, k, k), power);
  } else {
    p = ad::scaled_softmax(tape, u, power);
    q = p;
  }
  if (p_out) *p_out = p;
  if (q_out) *q_out = q;
  const ad::Var a = ad::gram(tape, h, q, m, kNoisePower);
  const ad::Var x = ad::hpd_solve(tape, a, h);
  const ad::Var s = ad::sqrt(tape, ad::div(tape, p, ad::norm2(tape, x, m)));
  return ad::scale_groups(tape, x, s);
}

GraphOutput build_forward(ad::Tape& tape, const NetworkParams& params,
                          const Batch& batch, Mode mode) {
  GraphOutput g;
  const ad::Var x0 = tape.constant_ref(batch.x0);
  g.h = tape.constant_ref(batch.h);
  g.power = tape.constant_ref(batch.power);
  g.u = forward_trunk(tape, params, x0, mode, &g.norm_nodes);
  g.beams = apply_head(tape, params.dims.head, g.u, g.h, g.power,
                       params.dims.num_antennas, params.dims.num_users, &g.p,
                       &g.q);
  return g;
}

std::vector<BeamStack> unpack_beams(const ad::Tensor& beams,
                                    const ad::Tensor& power, std::size_t m,
                                    std::size_t k) {
  if (beams.cols != 2 * m * k || power.rows != beams.rows)
    throw ShapeError("unpack_beams: shape mismatch");
  std::vector<BeamStack> out(beams.rows);
  for (std::size_t r = 0; r < beams.rows; ++r) {
    out[r].power = power(r, 0);
    out[r].v.reserve(k);
    for (std::size_t j = 0; j < k; ++j)
      out[r].v.push_back(linalg::unpack(beams.row(r), k, m, j));
  }
  return out;
}

std::vector<BeamStack> infer(const NetworkParams& params,
                             std::span<const channel::ChannelSample> samples) {
  if (samples.empty()) return {};
  const Batch batch = make_batch(samples, params.dims);
  ad::Tape tape(false);
  const GraphOutput g = build_forward(tape, params, batch, Mode::eval);
  return unpack_beams(tape.value(g.beams), batch.power, params.dims.num_antennas,
                      params.dims.num_users);
}

BeamStack infer_one(const NetworkParams& params,
                    const channel::ChannelSample& sample) {
  return std::move(infer(params, std::span(&sample, 1)).front());
}

void update_running_stats(NetworkParams& params, const ad::Tape& tape,
                          std::span<const ad::Var> norm_nodes) {
  if (norm_nodes.size() != params.norms.size())
    throw ShapeError("update_running_stats: one node per hidden layer expected");
  for (std::size_t l = 0; l < norm_nodes.size(); ++l) {
    const ad::Tensor& bm = tape.batch_mean(norm_nodes[l]);
    const ad::Tensor& bv = tape.batch_var(norm_nodes[l]);
    auto& n = params.norms[l];
    for (std::size_t i = 0; i < bm.size(); ++i) {
      n.running_mean.data[i] = kBatchNormMomentum * n.running_mean.data[i] +
                               (1.0 - kBatchNormMomentum) * bm.data[i];
      n.running_var.data[i] = kBatchNormMomentum * n.running_var.data[i] +
                              (1.0 - kBatchNormMomentum) * bv.data[i];
    }
  }
}

// --------------------------------------------------------- parameter files

namespace {

constexpr char kMagic[8] = {'U', 'N', 'I', 'B', 'F', 'N', 'E', 'T'};
constexpr std::uint32_t kMaxDim = 1u << 20;

static_assert(std::endian::native == std::endian::little,
              "parameter files assume a little-endian host");

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}
  template <class T>
  void put(T v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void put(const ad::Tensor& t) {
    out_.write(reinterpret_cast<const char*>(t.data.data()),
               static_cast<std::streamsize>(t.data.size() * sizeof(double)));
  }

 private:
  std::ostream& out_;
};

class Reader {
 public:
  explicit Reader(std::istream& in) : in_(in) {}
  template <class T>
  T get(const char* what) {
    T v{};
    read(reinterpret_cast<char*>(&v), sizeof(T), what);
    return v;
  }
  ad::Tensor tensor(std::size_t rows, std::size_t cols, const char* what) {
    ad::Tensor t(rows, cols);
    read(reinterpret_cast<char*>(t.data.data()), t.data.size() * sizeof(double),
         what);
    return t;
  }
  void read(char* dst, std::size_t n, const char* what) {
    in_.read(dst, static_cast<std::streamsize>(n));
    const auto got = static_cast<std::size_t>(in_.gcount());
    if (got != n)
      throw ParseError(std::string("parameter file truncated while reading ") +
                           what + " at byte " + std::to_string(offset_ + got),
                       offset_ + got);
    offset_ += n;
  }
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::istream& in_;
  std::size_t offset_ = 0;
};

}  // namespace

void save_params(std::ostream& out, const NetworkParams& params) {
  const ModelDims& d = params.dims;
  Writer w(out);
  out.write(kMagic, sizeof(kMagic));
  w.put<std::uint32_t>(kParamsVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(d.num_antennas));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(d.num_users));
  w.put<std::uint8_t>(static_cast<std::uint8_t>(d.head));
  w.put<std::uint8_t>(d.power_feature ? 1 : 0);
  w.put<double>(d.fixed_power_db);
  w.put<std::uint64_t>(params.config_fingerprint);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(d.hidden.size()));
  for (std::size_t width : d.hidden) w.put<std::uint32_t>(static_cast<std::uint32_t>(width));
  for (std::size_t l = 0; l < params.hidden.size(); ++l) {
    w.put(params.hidden[l].weight);
    w.put(params.hidden[l].bias);
    w.put(params.norms[l].gain);
    w.put(params.norms[l].shift);
    w.put(params.norms[l].running_mean);
    w.put(params.norms[l].running_var);
  }
  w.put(params.output.weight);
  w.put(params.output.bias);
  if (!out) throw Error("save_params: write failed");
}

void save_params(const std::filesystem::path& path, const NetworkParams& params) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("save_params: cannot open " + path.string());
  save_params(f, params);
}

NetworkParams load_params(std::istream& in, std::optional<HeadKind> expected_head) {
  Reader r(in);
  char magic[sizeof(kMagic)];
  r.read(magic, sizeof(magic), "magic");
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw ParseError("not a unibf parameter file (bad magic)", 0);

  const std::size_t version_at = r.offset();
  const auto version = r.get<std::uint32_t>("version");
  if (version != kParamsVersion)
    throw ParseError("parameter file version " + std::to_string(version) +
                         " unsupported (expected " +
                         std::to_string(kParamsVersion) + ")",
                     version_at);

  NetworkParams p;
  ModelDims& d = p.dims;
  const std::size_t dims_at = r.offset();
  d.num_antennas = r.get<std::uint32_t>("M");
  d.num_users = r.get<std::uint32_t>("K");
  const std::size_t head_at = r.offset();
  const auto head = r.get<std::uint8_t>("head");
  if (head > static_cast<std::uint8_t>(HeadKind::sfl))
    throw ParseError("unknown head id " + std::to_string(head), head_at);
  d.head = static_cast<HeadKind>(head);
  if (expected_head && *expected_head != d.head)
    throw ConfigError("head mismatch: file holds a " +
                      std::string(head_name(d.head)) + " model, expected " +
                      std::string(head_name(*expected_head)));
  d.power_feature = r.get<std::uint8_t>("power flag") != 0;
  d.fixed_power_db = r.get<double>("fixed power");
  p.config_fingerprint = r.get<std::uint64_t>("fingerprint");
  const auto depth = r.get<std::uint32_t>("depth");
  if (d.num_antennas == 0 || d.num_users == 0 || d.num_antennas > kMaxDim ||
      d.num_users > kMaxDim || depth == 0 || depth > 1024)
    throw ParseError("parameter file has implausible dimensions", dims_at);
  d.hidden.resize(depth);
  for (auto& width : d.hidden) {
    const std::size_t at = r.offset();
    width = r.get<std::uint32_t>("width");
    if (width == 0 || width > kMaxDim)
      throw ParseError("implausible hidden width " + std::to_string(width), at);
  }

  std::size_t in_dim = d.input_dim();
  for (std::size_t width : d.hidden) {
    DenseLayer dense{r.tensor(in_dim, width, "weight"), r.tensor(1, width, "bias")};
    NormLayer norm;
    norm.gain = r.tensor(1, width, "gain");
    norm.shift = r.tensor(1, width, "shift");
    norm.running_mean = r.tensor(1, width, "running mean");
    norm.running_var = r.tensor(1, width, "running variance");
    p.hidden.push_back(std::move(dense));
    p.norms.push_back(std::move(norm));
    in_dim = width;
  }
  p.output.weight = r.tensor(in_dim, d.output_dim(), "output weight");
  p.output.bias = r.tensor(1, d.output_dim(), "output bias");

  if (in.peek() != std::char_traits<char>::eof())
    throw ParseError("trailing bytes after parameter blobs", r.offset());
  return p;
}

NetworkParams load_params(const std::filesystem::path& path,
                          std::optional<HeadKind> expected_head) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("load_params: cannot open " + path.string());
  return load_params(f, expected_head);
}

}  // namespace unibf::model
