#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cmt/attention.hpp"
#include "cmt/autodiff.hpp"
#include "cmt/rng.hpp"
#include "cmt/tensor.hpp"

namespace cmt::model {

// Convolutional front end: stem conv (stride 2) -> 2x2 max pool -> bottleneck stages.
struct CifeConfig {
  std::size_t in_channels = 3;
  std::size_t stem_channels = 16;
  std::size_t stem_kernel = 7;  // odd; padding kernel/2
  std::vector<std::size_t> stage_channels{32, 64, 64};
  std::vector<std::size_t> repeats{1, 1, 1};
  std::vector<std::size_t> strides{1, 2, 2};  // stride of the first block of each stage
  std::size_t expansion = 4;                  // bottleneck width = stage channels / expansion

  void validate() const;
  std::size_t out_channels() const { return stage_channels.back(); }
  std::size_t total_stride() const;
  // Spatial size after the extractor; ConfigError when a stride does not divide.
  std::pair<std::size_t, std::size_t> output_hw(std::size_t h, std::size_t w) const;
};

struct CmtConfig {
  CifeConfig cife;
  std::size_t encoders = 4;
  attn::AttentionKind attention_kind = attn::AttentionKind::mmsa;
  attn::AttentionConfig attention{64, 4, 2, 2, 0.3, 0.7, true};
  std::size_t ffn_hidden = 128;
  std::size_t ffn_repeats = 1;  // Feed-Forward/Add&Norm blocks per encoder
  std::size_t head_hidden = 64;
  double dropout = 0.2;
  std::size_t classes = 4;

  void validate() const;
  // validate() plus spatial compatibility of an h x w input.
  void validate_for(std::size_t h, std::size_t w) const;
};

// 3x32x32 input -> c'=8 at 8x8, one encoder, g=g'=2.
CmtConfig toy_config();
// Same layout at c'=16 with a wider head; trains reliably on the synthetic set in 20 epochs.
CmtConfig toy_classifier_config();

nlohmann::ordered_json to_json(const CmtConfig& cfg);
// Missing keys keep their defaults; unknown keys are a ConfigError.
CmtConfig config_from_json(const nlohmann::json& j);
// FNV-1a of the canonical JSON dump.
std::uint64_t config_digest(const CmtConfig& cfg);

using ParamMap = std::map<std::string, Tensor>;
using BoundParams = std::map<std::string, Var>;

// Uniform in +-sqrt(1/fan_in) for conv and linear maps; biases 0; layer-norm
// scale 1, shift 0; residual-branch scales 1.
ParamMap init_params(const CmtConfig& cfg, std::uint64_t seed);
BoundParams bind(Tape& tape, const ParamMap& params, bool trainable);
std::size_t parameter_count(const ParamMap& params);

enum class Mode { train, eval };

Var cife_forward(Var image, const BoundParams& p, const CmtConfig& cfg);

// [c',h',w'] <-> [c', h'*w'].
Tensor to_embedding(const Tensor& fmap);
Tensor from_embedding(const Tensor& embedding, std::size_t h, std::size_t w);

// y = LN(Attn(x)), attention carrying its own residual; then per FFN repeat
// y = LN(y + FFN(y)). `rng` drives dropout and is required in train mode.
Var encoder_forward(Var x, const BoundParams& p, const CmtConfig& cfg, std::size_t index, Mode mode, Rng* rng);

// Pre-sigmoid class scores [K]: W1 W2 GAP(x) + b.
Var head_logits(Var fmap, const BoundParams& p);
Var head_forward(Var fmap, const BoundParams& p);

struct Forward {
  Var features;  // CIFE output
  Var logits;
  Var probs;
};

Forward cmt_forward(Var image, const BoundParams& p, const CmtConfig& cfg, Mode mode, Rng* rng);

// Eval-mode probabilities for one image.
Tensor predict(const Tensor& image, const ParamMap& params, const CmtConfig& cfg);

// "CMT1", u64 config digest, then per parameter in name order:
// u32 name length, name, u32 rank, u64 dims, f64 values (all little endian).
std::string encode_checkpoint(const CmtConfig& cfg, const ParamMap& params);
ParamMap decode_checkpoint(const std::string& bytes, const CmtConfig& cfg);
void save_checkpoint(const std::filesystem::path& path, const CmtConfig& cfg, const ParamMap& params);
ParamMap load_checkpoint(const std::filesystem::path& path, const CmtConfig& cfg);

}  // namespace cmt::model
