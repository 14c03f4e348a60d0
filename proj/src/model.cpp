#include "cmt/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>

#include "cmt/errors.hpp"
#include "cmt/io.hpp"

namespace cmt::model {
namespace {

using nlohmann::json;

std::string block_name(std::size_t stage, std::size_t block) {
  return "cife.s" + std::to_string(stage) + ".b" + std::to_string(block);
}

std::string enc_name(std::size_t index) { return "enc" + std::to_string(index); }

std::string ffn_name(std::size_t index, std::size_t repeat) {
  return enc_name(index) + ".ffn" + std::to_string(repeat);
}

const Var& get(const BoundParams& p, const std::string& name) {
  const auto it = p.find(name);
  if (it == p.end()) throw ContractError("missing parameter " + name);
  return it->second;
}

Tensor uniform_fan_in(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
  Tensor t(std::move(shape), 0.0);
  for (double& v : t.data()) v = uniform(rng, -bound, bound);
  return t;
}

bool needs_projection(std::size_t c_in, std::size_t c_out, std::size_t stride) {
  return c_in != c_out || stride != 1;
}

// Visits every bottleneck block as (stage, block, c_in, c_out, stride).
template <typename F>
void for_each_block(const CifeConfig& cfg, F&& f) {
  std::size_t c_in = cfg.stem_channels;
  for (std::size_t s = 0; s < cfg.stage_channels.size(); ++s) {
    for (std::size_t b = 0; b < cfg.repeats[s]; ++b) {
      f(s, b, c_in, cfg.stage_channels[s], b == 0 ? cfg.strides[s] : std::size_t{1});
      c_in = cfg.stage_channels[s];
    }
  }
}

template <typename T>
void set_if(const json& j, const char* key, T& field) {
  if (j.contains(key)) field = j.at(key).get<T>();
}

void reject_unknown(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : keys) known = known || it.key() == k;
    if (!known) throw ConfigError("unknown key '" + it.key() + "' in " + where);
  }
}

// ---- little-endian encoding ----------------------------------------------------

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(const std::string& s) : s_(s) {}
  bool done() const { return pos_ == s_.size(); }
  std::uint64_t uint(int bytes) {
    need(static_cast<std::size_t>(bytes));
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s_[pos_++])) << (8 * i);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string out = s_.substr(pos_, n);
    pos_ += n;
    return out;
  }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > s_.size()) throw DatasetError("checkpoint is truncated");
  }
  const std::string& s_;
  std::size_t pos_ = 0;
};

}  // namespace

// ---- configuration ---------------------------------------------------------------

void CifeConfig::validate() const {
  if (in_channels == 0 || stem_channels == 0) throw ConfigError("cife: channel counts must be positive");
  if (stem_kernel == 0 || stem_kernel % 2 == 0) throw ConfigError("cife: stem kernel must be odd");
  if (stage_channels.empty()) throw ConfigError("cife: at least one stage is required");
  if (repeats.size() != stage_channels.size() || strides.size() != stage_channels.size()) {
    throw ConfigError("cife: stage_channels, repeats and strides must have equal length");
  }
  for (std::size_t s = 0; s < stage_channels.size(); ++s) {
    if (repeats[s] == 0) throw ConfigError("cife: stage repeats must be >= 1");
    if (strides[s] == 0) throw ConfigError("cife: strides must be >= 1");
    if (expansion == 0 || stage_channels[s] < expansion || stage_channels[s] % expansion != 0) {
      throw ConfigError("cife: stage channels must be a positive multiple of the expansion factor");
    }
  }
}

std::size_t CifeConfig::total_stride() const {
  std::size_t t = 4;
  for (std::size_t s : strides) t *= s;
  return t;
}

std::pair<std::size_t, std::size_t> CifeConfig::output_hw(std::size_t h, std::size_t w) const {
  validate();
  auto fail = [&] {
    return ConfigError("input " + std::to_string(h) + "x" + std::to_string(w) +
                       " is not compatible with the CIFE stride schedule (total stride " +
                       std::to_string(total_stride()) + ")");
  };
  if (h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0) throw fail();
  std::size_t hh = h / 4, ww = w / 4;
  for (std::size_t s : strides) {
    if (hh % s != 0 || ww % s != 0) throw fail();
    hh /= s;
    ww /= s;
  }
  return {hh, ww};
}

void CmtConfig::validate() const {
  cife.validate();
  if (encoders == 0) throw ConfigError("encoders must be >= 1");
  if (classes == 0) throw ConfigError("classes must be >= 1");
  if (ffn_hidden == 0 || head_hidden == 0 || ffn_repeats == 0) throw ConfigError("hidden widths must be >= 1");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must be in [0,1)");
  if (attention.channels != cife.out_channels()) {
    throw ConfigError("attention channels " + std::to_string(attention.channels) + " != CIFE output channels " +
                      std::to_string(cife.out_channels()));
  }
  attention.validate();
}

void CmtConfig::validate_for(std::size_t h, std::size_t w) const {
  validate();
  const auto [hp, wp] = cife.output_hw(h, w);
  if (attention_kind == attn::AttentionKind::mmsa) {
    if (hp < attention.grid || wp < attention.grid) {
      throw ConfigError("feature map " + std::to_string(hp) + "x" + std::to_string(wp) + " is smaller than g=" +
                        std::to_string(attention.grid));
    }
    attention.validate_for(hp, wp);
  }
}

CmtConfig toy_config() {
  CmtConfig cfg;
  cfg.cife.stem_channels = 8;
  cfg.cife.stem_kernel = 3;
  cfg.cife.stage_channels = {8, 8, 8};
  cfg.cife.repeats = {1, 1, 1};
  cfg.cife.strides = {1, 1, 1};
  cfg.cife.expansion = 2;
  cfg.encoders = 1;
  cfg.attention = attn::AttentionConfig{8, 2, 2, 2, 0.3, 0.7, true};
  cfg.ffn_hidden = 16;
  cfg.head_hidden = 8;
  return cfg;
}

CmtConfig toy_classifier_config() {
  CmtConfig cfg = toy_config();
  cfg.cife.stem_channels = 16;
  cfg.cife.stage_channels = {16, 16, 16};
  cfg.attention.channels = 16;
  cfg.head_hidden = 32;
  return cfg;
}

nlohmann::ordered_json to_json(const CmtConfig& cfg) {
  nlohmann::ordered_json j;
  j["cife"] = {{"in_channels", cfg.cife.in_channels},   {"stem_channels", cfg.cife.stem_channels},
               {"stem_kernel", cfg.cife.stem_kernel},   {"stage_channels", cfg.cife.stage_channels},
               {"repeats", cfg.cife.repeats},           {"strides", cfg.cife.strides},
               {"expansion", cfg.cife.expansion}};
  j["encoders"] = cfg.encoders;
  j["attention"] = {{"kind", attn::to_string(cfg.attention_kind)}, {"heads", cfg.attention.heads},
                    {"grid", cfg.attention.grid},                  {"downsample", cfg.attention.downsample},
                    {"pool_alpha", cfg.attention.pool_alpha},      {"pool_beta", cfg.attention.pool_beta},
                    {"pool_half", cfg.attention.pool_half}};
  j["ffn_hidden"] = cfg.ffn_hidden;
  j["ffn_repeats"] = cfg.ffn_repeats;
  j["head_hidden"] = cfg.head_hidden;
  j["dropout"] = cfg.dropout;
  j["classes"] = cfg.classes;
  return j;
}

CmtConfig config_from_json(const nlohmann::json& j) {
  CmtConfig cfg;
  try {
    reject_unknown(j, {"cife", "encoders", "attention", "ffn_hidden", "ffn_repeats", "head_hidden", "dropout", "classes"},
                   "model config");
    if (j.contains("cife")) {
      const json& c = j.at("cife");
      reject_unknown(c, {"in_channels", "stem_channels", "stem_kernel", "stage_channels", "repeats", "strides",
                         "expansion"},
                     "cife config");
      set_if(c, "in_channels", cfg.cife.in_channels);
      set_if(c, "stem_channels", cfg.cife.stem_channels);
      set_if(c, "stem_kernel", cfg.cife.stem_kernel);
      set_if(c, "stage_channels", cfg.cife.stage_channels);
      set_if(c, "repeats", cfg.cife.repeats);
      set_if(c, "strides", cfg.cife.strides);
      set_if(c, "expansion", cfg.cife.expansion);
    }
    set_if(j, "encoders", cfg.encoders);
    if (j.contains("attention")) {
      const json& a = j.at("attention");
      reject_unknown(a, {"kind", "heads", "grid", "downsample", "pool_alpha", "pool_beta", "pool_half"},
                     "attention config");
      if (a.contains("kind")) {
        const std::string kind = a.at("kind").get<std::string>();
        if (kind != "mmsa" && kind != "mhsa") throw ConfigError("attention kind must be mmsa or mhsa");
        cfg.attention_kind = kind == "mmsa" ? attn::AttentionKind::mmsa : attn::AttentionKind::mhsa;
      }
      set_if(a, "heads", cfg.attention.heads);
      set_if(a, "grid", cfg.attention.grid);
      set_if(a, "downsample", cfg.attention.downsample);
      set_if(a, "pool_alpha", cfg.attention.pool_alpha);
      set_if(a, "pool_beta", cfg.attention.pool_beta);
      set_if(a, "pool_half", cfg.attention.pool_half);
    }
    set_if(j, "ffn_hidden", cfg.ffn_hidden);
    set_if(j, "ffn_repeats", cfg.ffn_repeats);
    set_if(j, "head_hidden", cfg.head_hidden);
    set_if(j, "dropout", cfg.dropout);
    set_if(j, "classes", cfg.classes);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  if (!cfg.cife.stage_channels.empty()) cfg.attention.channels = cfg.cife.out_channels();
  cfg.validate();
  return cfg;
}

std::uint64_t config_digest(const CmtConfig& cfg) { return io::fnv1a64(to_json(cfg).dump()); }

// ---- parameters ------------------------------------------------------------------

ParamMap init_params(const CmtConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ParamMap p;
  Rng rng(seed);
  const CifeConfig& cc = cfg.cife;
  const std::size_t k = cc.stem_kernel;
  p["cife.stem"] = uniform_fan_in(Shape{cc.stem_channels, cc.in_channels, k, k}, cc.in_channels * k * k, rng);
  for_each_block(cc, [&](std::size_t s, std::size_t b, std::size_t c_in, std::size_t c_out, std::size_t stride) {
    const std::string n = block_name(s, b);
    const std::size_t mid = c_out / cc.expansion;
    p[n + ".conv1"] = uniform_fan_in(Shape{mid, c_in, 1, 1}, c_in, rng);
    p[n + ".conv2"] = uniform_fan_in(Shape{mid, mid, 3, 3}, mid * 9, rng);
    p[n + ".conv3"] = uniform_fan_in(Shape{c_out, mid, 1, 1}, mid, rng);
    if (needs_projection(c_in, c_out, stride)) p[n + ".proj"] = uniform_fan_in(Shape{c_out, c_in, 1, 1}, c_in, rng);
    p[n + ".scale"] = Tensor(Shape{c_out}, 1.0);
  });

  const std::size_t c = cc.out_channels();
  for (std::size_t e = 0; e < cfg.encoders; ++e) {
    const std::string n = enc_name(e);
    if (cfg.attention_kind == attn::AttentionKind::mmsa) {
      for (const char* w : {"wq1", "wk1", "wv1", "wq2", "wk2", "wv2", "wm", "wn"}) {
        p[n + ".attn." + w] = uniform_fan_in(Shape{c, c}, c, rng);
      }
    } else {
      for (const char* w : {"wq", "wk", "wv", "wp"}) p[n + ".attn." + w] = uniform_fan_in(Shape{c, c}, c, rng);
    }
    p[n + ".ln_attn.gamma"] = Tensor(Shape{c}, 1.0);
    p[n + ".ln_attn.beta"] = Tensor(Shape{c}, 0.0);
    for (std::size_t r = 0; r < cfg.ffn_repeats; ++r) {
      const std::string f = ffn_name(e, r);
      p[f + ".w1"] = uniform_fan_in(Shape{c, cfg.ffn_hidden}, c, rng);
      p[f + ".b1"] = Tensor(Shape{cfg.ffn_hidden}, 0.0);
      p[f + ".w2"] = uniform_fan_in(Shape{cfg.ffn_hidden, c}, cfg.ffn_hidden, rng);
      p[f + ".b2"] = Tensor(Shape{c}, 0.0);
      p[f + ".ln.gamma"] = Tensor(Shape{c}, 1.0);
      p[f + ".ln.beta"] = Tensor(Shape{c}, 0.0);
    }
  }
  p["head.w2"] = uniform_fan_in(Shape{cfg.head_hidden, c}, c, rng);
  p["head.w1"] = uniform_fan_in(Shape{cfg.classes, cfg.head_hidden}, cfg.head_hidden, rng);
  p["head.b"] = Tensor(Shape{cfg.classes}, 0.0);
  return p;
}

BoundParams bind(Tape& tape, const ParamMap& params, bool trainable) {
  BoundParams out;
  for (const auto& [name, value] : params) out.emplace(name, trainable ? tape.variable(value) : tape.constant(value));
  return out;
}

std::size_t parameter_count(const ParamMap& params) {
  std::size_t n = 0;
  for (const auto& [name, value] : params) n += value.size();
  return n;
}

// ---- forward ---------------------------------------------------------------------

Var cife_forward(Var image, const BoundParams& p, const CmtConfig& cfg) {
  const CifeConfig& cc = cfg.cife;
  const Shape s = image.shape();
  if (s.size() != 3 || s[0] != cc.in_channels) {
    throw DimensionError("cife input must be [" + std::to_string(cc.in_channels) + ",h,w], got " + shape_string(s));
  }
  cc.output_hw(s[1], s[2]);
  Var x = relu(conv2d(image, get(p, "cife.stem"), 2, cc.stem_kernel / 2));
  x = pool2d(x, 2, 2, PoolMode::max);
  for_each_block(cc, [&](std::size_t st, std::size_t b, std::size_t c_in, std::size_t c_out, std::size_t stride) {
    const std::string n = block_name(st, b);
    Var branch = relu(conv2d(x, get(p, n + ".conv1"), 1, 0));
    branch = relu(conv2d(branch, get(p, n + ".conv2"), stride, 1));
    branch = conv2d(branch, get(p, n + ".conv3"), 1, 0);
    Var shortcut = needs_projection(c_in, c_out, stride) ? conv2d(x, get(p, n + ".proj"), stride, 0) : x;
    x = relu(add(shortcut, scale_axis(branch, get(p, n + ".scale"), 0)));
  });
  return x;
}

Tensor to_embedding(const Tensor& fmap) {
  if (fmap.rank() != 3) throw DimensionError("to_embedding expects [c,h,w], got " + shape_string(fmap.shape()));
  return fmap.reshaped(Shape{fmap.dim(0), fmap.dim(1) * fmap.dim(2)});
}

Tensor from_embedding(const Tensor& embedding, std::size_t h, std::size_t w) {
  if (embedding.rank() != 2 || embedding.dim(1) != h * w) {
    throw DimensionError("from_embedding: " + shape_string(embedding.shape()) + " is not [c," + std::to_string(h * w) +
                         "]");
  }
  return embedding.reshaped(Shape{embedding.dim(0), h, w});
}

Var encoder_forward(Var x, const BoundParams& p, const CmtConfig& cfg, std::size_t index, Mode mode, Rng* rng) {
  const bool training = mode == Mode::train && cfg.dropout > 0.0;
  if (training && rng == nullptr) throw ContractError("encoder_forward: train mode needs a dropout generator");
  const std::string n = enc_name(index);
  const Shape s = x.shape();
  const std::size_t h = s[1], w = s[2];

  Var y;
  const std::string a = n + ".attn.";
  if (cfg.attention_kind == attn::AttentionKind::mmsa) {
    const attn::MmsaVars v{get(p, a + "wq1"), get(p, a + "wk1"), get(p, a + "wv1"), get(p, a + "wq2"),
                           get(p, a + "wk2"), get(p, a + "wv2"), get(p, a + "wm"),  get(p, a + "wn")};
    y = attn::mmsa_forward(x, v, cfg.attention);
  } else {
    const attn::MhsaVars v{get(p, a + "wq"), get(p, a + "wk"), get(p, a + "wv"), get(p, a + "wp")};
    y = attn::mhsa_forward(x, v, cfg.attention);
  }
  y = layer_norm(y, get(p, n + ".ln_attn.gamma"), get(p, n + ".ln_attn.beta"));

  for (std::size_t r = 0; r < cfg.ffn_repeats; ++r) {
    const std::string f = ffn_name(index, r);
    Var hidden = relu(add_bias(matmul(attn::to_tokens(y), get(p, f + ".w1")), get(p, f + ".b1"), 1));
    if (training) hidden = dropout(hidden, cfg.dropout, *rng, true);
    Var out = add_bias(matmul(hidden, get(p, f + ".w2")), get(p, f + ".b2"), 1);
    y = layer_norm(add(y, attn::from_tokens(out, h, w)), get(p, f + ".ln.gamma"), get(p, f + ".ln.beta"));
  }
  return y;
}

Var head_logits(Var fmap, const BoundParams& p) {
  const Var& w1 = get(p, "head.w1");
  const std::size_t c = fmap.shape()[0];
  Var pooled = reshape(global_avg_pool(fmap), Shape{c, 1});
  Var z = matmul(w1, matmul(get(p, "head.w2"), pooled));
  return add_bias(reshape(z, Shape{w1.shape()[0]}), get(p, "head.b"), 0);
}

Var head_forward(Var fmap, const BoundParams& p) { return sigmoid(head_logits(fmap, p)); }

Forward cmt_forward(Var image, const BoundParams& p, const CmtConfig& cfg, Mode mode, Rng* rng) {
  Forward f;
  f.features = cife_forward(image, p, cfg);
  Var x = f.features;
  for (std::size_t e = 0; e < cfg.encoders; ++e) x = encoder_forward(x, p, cfg, e, mode, rng);
  f.logits = head_logits(x, p);
  f.probs = sigmoid(f.logits);
  return f;
}

Tensor predict(const Tensor& image, const ParamMap& params, const CmtConfig& cfg) {
  Tape tape;
  const BoundParams p = bind(tape, params, false);
  return cmt_forward(tape.constant(image), p, cfg, Mode::eval, nullptr).probs.value();
}

// ---- checkpoint --------------------------------------------------------------------

std::string encode_checkpoint(const CmtConfig& cfg, const ParamMap& params) {
  std::string out = "CMT1";
  put_u64(out, config_digest(cfg));
  for (const auto& [name, value] : params) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<std::uint32_t>(value.rank()));
    for (std::size_t d : value.shape()) put_u64(out, d);
    for (double v : value.data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

ParamMap decode_checkpoint(const std::string& bytes, const CmtConfig& cfg) {
  Reader r(bytes);
  if (r.str(4) != "CMT1") throw DatasetError("not a CMT1 checkpoint");
  const std::uint64_t digest = r.uint(8);
  if (digest != config_digest(cfg)) {
    throw ConfigError("checkpoint config digest " + io::hex64(digest) + " does not match the model config " +
                      io::hex64(config_digest(cfg)));
  }
  const ParamMap expected = init_params(cfg, 0);
  ParamMap out;
  while (!r.done()) {
    const std::string name = r.str(r.uint(4));
    Shape shape(r.uint(4));
    for (std::size_t& d : shape) d = r.uint(8);
    const auto it = expected.find(name);
    if (it == expected.end() || it->second.shape() != shape) {
      throw DatasetError("checkpoint parameter " + name + " " + shape_string(shape) + " does not fit the model");
    }
    Tensor t(shape, 0.0);
    for (double& v : t.data()) v = std::bit_cast<double>(r.uint(8));
    require_finite(t, ("checkpoint parameter " + name).c_str());
    out.emplace(name, std::move(t));
  }
  if (out.size() != expected.size()) throw DatasetError("checkpoint is missing parameters");
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const CmtConfig& cfg, const ParamMap& params) {
  io::write_file_atomic(path, encode_checkpoint(cfg, params));
}

ParamMap load_checkpoint(const std::filesystem::path& path, const CmtConfig& cfg) {
  return decode_checkpoint(io::read_file(path), cfg);
}

}  // namespace cmt::model
