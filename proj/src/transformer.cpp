#include "ood/transformer.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "ood/errors.hpp"
#include "ood/rng.hpp"

namespace ood {

void ModelConfig::validate() const {
  if (n_layers == 0 || d_model == 0 || n_heads == 0 || d_ff == 0 || max_seq_len == 0)
    throw ConfigError("model sizes must be positive");
  if (d_model % n_heads != 0)
    throw ConfigError("d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                      std::to_string(n_heads));
  if (!(ln_eps > 0.0)) throw ConfigError("ln_eps must be positive");
  if (!(init_std > 0.0)) throw ConfigError("init_std must be positive");
}

std::vector<Tensor*> ModelParams::tensors() {
  std::vector<Tensor*> out{&w_emb, &b_emb, &pos_table};
  for (auto& l : layers) {
    for (Tensor* t : {&l.ln1_gamma, &l.ln1_beta, &l.w_q, &l.w_k, &l.w_v, &l.w_o, &l.ln2_gamma,
                      &l.ln2_beta, &l.w_ff1, &l.b_ff1, &l.w_ff2, &l.b_ff2})
      out.push_back(t);
  }
  out.push_back(&w_head);
  out.push_back(&b_head);
  return out;
}

std::vector<const Tensor*> ModelParams::tensors() const {
  auto mut = const_cast<ModelParams*>(this)->tensors();
  return {mut.begin(), mut.end()};
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const Tensor* t : tensors()) n += t->size();
  return n;
}

void ModelParams::zero_grad() {
  for (Tensor* t : tensors()) t->zero_grad();
}

bool ModelParams::all_finite() const {
  for (const Tensor* t : tensors())
    for (double v : t->data)
      if (!std::isfinite(v)) return false;
  return true;
}

std::size_t parameter_count(const ModelConfig& c) {
  const std::size_t d = c.d_model, f = c.d_ff;
  const std::size_t per_layer = 4 * d * d + (d * f + f) + (f * d + d) + 4 * d;
  return 2 * d + c.max_seq_len * d + c.n_layers * per_layer + d + 1;
}

ModelParams init_params(const ModelConfig& config) {
  config.validate();
  Rng rng(config.seed);
  const std::size_t d = config.d_model, f = config.d_ff;
  auto normal = [&](Shape shape) {
    Tensor t(std::move(shape));
    for (double& v : t.data) v = rng.normal(0.0, config.init_std);
    return t;
  };
  ModelParams p;
  p.config = config;
  p.w_emb = normal({1, d});
  p.b_emb = Tensor({d}, 0.0);
  p.pos_table = normal({config.max_seq_len, d});
  for (std::size_t i = 0; i < config.n_layers; ++i) {
    LayerParams l;
    l.ln1_gamma = Tensor({d}, 1.0);
    l.ln1_beta = Tensor({d}, 0.0);
    l.w_q = normal({d, d});
    l.w_k = normal({d, d});
    l.w_v = normal({d, d});
    l.w_o = normal({d, d});
    l.ln2_gamma = Tensor({d}, 1.0);
    l.ln2_beta = Tensor({d}, 0.0);
    l.w_ff1 = normal({d, f});
    l.b_ff1 = Tensor({f}, 0.0);
    l.w_ff2 = normal({f, d});
    l.b_ff2 = Tensor({d}, 0.0);
    p.layers.push_back(std::move(l));
  }
  p.w_head = normal({d, 1});
  p.b_head = Tensor({1}, 0.0);
  return p;
}

namespace {

template <class Bind>
Var build_forward(Tape& tape, const ModelParams& params, std::span<const double> prompt,
                  Bind bind) {
  const ModelConfig& c = params.config;
  const std::size_t T = prompt.size();
  if (T == 0) throw ContractError("forward needs at least one position");
  if (T > c.max_seq_len)
    throw LengthError("sequence of " + std::to_string(T) + " exceeds max_seq_len " +
                      std::to_string(c.max_seq_len));

  auto z = tape.constant(Tensor({T, 1}, std::vector<double>(prompt.begin(), prompt.end())));
  auto x = add_row_bias(matmul(z, bind(params.w_emb)), bind(params.b_emb));
  x = add(x, slice_rows(bind(params.pos_table), 0, T));

  const std::size_t hd = c.head_dim();
  const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<Var> heads(c.n_heads);
  for (const LayerParams& l : params.layers) {
    auto h = layer_norm(x, bind(l.ln1_gamma), bind(l.ln1_beta), c.ln_eps);
    auto q = matmul(h, bind(l.w_q));
    auto k = matmul(h, bind(l.w_k));
    auto v = matmul(h, bind(l.w_v));
    for (std::size_t i = 0; i < c.n_heads; ++i) {
      auto qi = slice_cols(q, i * hd, hd);
      auto ki = slice_cols(k, i * hd, hd);
      auto vi = slice_cols(v, i * hd, hd);
      auto scores = causal_mask(scale(matmul(qi, transpose(ki)), inv_sqrt_hd));
      heads[i] = matmul(softmax_rows(scores), vi);
    }
    auto attn = c.n_heads == 1 ? heads[0] : concat_cols(heads);
    x = add(x, matmul(attn, bind(l.w_o)));

    auto h2 = layer_norm(x, bind(l.ln2_gamma), bind(l.ln2_beta), c.ln_eps);
    auto ff = gelu(add_row_bias(matmul(h2, bind(l.w_ff1)), bind(l.b_ff1)));
    x = add(x, add_row_bias(matmul(ff, bind(l.w_ff2)), bind(l.b_ff2)));
  }
  return add_row_bias(matmul(x, bind(params.w_head)), bind(params.b_head));
}

}  // namespace

Var forward_on_tape(Tape& tape, ModelParams& params, std::span<const double> prompt) {
  return build_forward(tape, params, prompt,
                       [&](const Tensor& t) { return tape.leaf(const_cast<Tensor&>(t)); });
}

std::vector<double> forward(const ModelParams& params, std::span<const double> prompt) {
  Tape tape;
  auto out = build_forward(tape, params, prompt,
                           [&](const Tensor& t) { return tape.reference(t); });
  return out.value().data;
}

std::vector<double> predict_autoregressive(const ModelParams& params,
                                           std::span<const double> prompt,
                                           std::size_t n_steps) {
  if (prompt.size() + n_steps > params.config.max_seq_len)
    throw LengthError("prompt of " + std::to_string(prompt.size()) + " plus " +
                      std::to_string(n_steps) + " steps exceeds max_seq_len " +
                      std::to_string(params.config.max_seq_len));
  std::vector<double> seq(prompt.begin(), prompt.end());
  std::vector<double> generated;
  generated.reserve(n_steps);
  for (std::size_t s = 0; s < n_steps; ++s) {
    const double next = forward(params, seq).back();
    generated.push_back(next);
    seq.push_back(next);
  }
  return generated;
}

// ---- checkpoint -----------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'O', 'O', 'D', 'C', 'K', 'P', 'T', '\0'};

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

class Reader {
 public:
  explicit Reader(std::string_view b) : bytes_(b) {}
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw Error("checkpoint truncated");
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(const ModelParams& params) {
  const ModelConfig& c = params.config;
  std::string out(kMagic, sizeof kMagic);
  put_u32(out, kCheckpointVersion);
  put_u64(out, c.n_layers);
  put_u64(out, c.d_model);
  put_u64(out, c.n_heads);
  put_u64(out, c.d_ff);
  put_u64(out, c.max_seq_len);
  put_f64(out, c.ln_eps);
  put_f64(out, c.init_std);
  put_u64(out, c.seed);
  put_u64(out, params.parameter_count());
  for (const Tensor* t : params.tensors())
    for (double v : t->data) put_f64(out, v);
  put_u64(out, fnv1a(out));
  return out;
}

ModelParams decode_checkpoint(std::string_view bytes) {
  Reader r(bytes);
  if (r.take(sizeof kMagic) != std::string_view(kMagic, sizeof kMagic))
    throw Error("not a checkpoint (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw Error("unsupported checkpoint version " + std::to_string(version));
  ModelConfig c;
  c.n_layers = r.u64();
  c.d_model = r.u64();
  c.n_heads = r.u64();
  c.d_ff = r.u64();
  c.max_seq_len = r.u64();
  c.ln_eps = r.f64();
  c.init_std = r.f64();
  c.seed = r.u64();
  c.validate();
  const std::uint64_t count = r.u64();
  if (count != parameter_count(c)) throw Error("checkpoint parameter count mismatch");
  ModelParams p = init_params(c);
  for (Tensor* t : p.tensors())
    for (double& v : t->data) v = r.f64();
  const std::size_t body = r.pos();
  const std::uint64_t stored = r.u64();
  if (stored != fnv1a(bytes.substr(0, body))) throw Error("checkpoint checksum mismatch");
  if (r.pos() != bytes.size()) throw Error("trailing bytes after checkpoint");
  return p;
}

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot write checkpoint " + path.string());
  const std::string bytes = encode_checkpoint(params);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot read checkpoint " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return decode_checkpoint(ss.str());
}

}  // namespace ood
