#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "cmt/errors.hpp"
#include "cmt/model.hpp"
#include "model_support.hpp"

using namespace cmt;
using namespace cmt::model;
using cmt::test::random_tensor;

namespace {

Tensor run_encoder(const Tensor& x, const ParamMap& params, const CmtConfig& cfg, Mode mode, Rng* rng) {
  Tape tape;
  return encoder_forward(tape.constant(x), model::bind(tape, params, false), cfg, 0, mode, rng).value();
}

Tensor layer_norm_loop(const Tensor& x) {
  const std::size_t c = x.dim(0), n = x.size() / c;
  Tensor out = x;
  for (std::size_t p = 0; p < n; ++p) {
    double mu = 0.0, var = 0.0;
    for (std::size_t ch = 0; ch < c; ++ch) mu += x[ch * n + p];
    mu /= static_cast<double>(c);
    for (std::size_t ch = 0; ch < c; ++ch) var += (x[ch * n + p] - mu) * (x[ch * n + p] - mu);
    var /= static_cast<double>(c);
    for (std::size_t ch = 0; ch < c; ++ch) out[ch * n + p] = (x[ch * n + p] - mu) / std::sqrt(var + kLayerNormEps);
  }
  return out;
}

}  // namespace

TEST_SUITE("model") {
  TEST_CASE("CIFE output shapes follow the config") {
    const CmtConfig full;
    CHECK(full.cife.total_stride() == 16);
    CHECK(full.cife.output_hw(64, 64) == std::pair<std::size_t, std::size_t>{4, 4});
    CHECK(full.cife.output_hw(352, 352) == std::pair<std::size_t, std::size_t>{22, 22});
    CHECK_THROWS_AS(full.cife.output_hw(360, 360), ConfigError);
    CHECK_THROWS_AS(full.cife.output_hw(60, 64), ConfigError);

    Rng rng(1);
    const ParamMap params = init_params(full, 3);
    Tape tape;
    const BoundParams p = model::bind(tape, params, false);
    const Tensor fmap = cife_forward(tape.constant(random_tensor(Shape{3, 64, 64}, rng)), p, full).value();
    CHECK(fmap.shape() == Shape{64, 4, 4});
    CHECK_THROWS_AS(cife_forward(tape.constant(Tensor(Shape{3, 60, 60})), p, full), ConfigError);
    CHECK_THROWS_AS(cife_forward(tape.constant(Tensor(Shape{1, 64, 64})), p, full), DimensionError);

    const CmtConfig toy = toy_config();
    CHECK(toy.cife.output_hw(32, 32) == std::pair<std::size_t, std::size_t>{8, 8});
    const ParamMap tp = init_params(toy, 4);
    Tape t2;
    CHECK(cife_forward(t2.constant(random_tensor(Shape{3, 32, 24}, rng)), model::bind(t2, tp, false), toy).value().shape() ==
          Shape{8, 8, 6});
  }

  TEST_CASE("zero input with zero block scales gives a zero feature map") {
    const CmtConfig cfg = toy_config();
    ParamMap params = init_params(cfg, 5);
    for (auto& [name, value] : params)
      if (name.ends_with(".scale")) value = Tensor(value.shape(), 0.0);
    Tape tape;
    const Tensor fmap = cife_forward(tape.constant(Tensor(Shape{3, 32, 32})), model::bind(tape, params, false), cfg).value();
    for (double v : fmap.data()) CHECK(v == 0.0);
  }

  TEST_CASE("config validation") {
    CmtConfig cfg = toy_config();
    CHECK_NOTHROW(cfg.validate_for(32, 32));
    CHECK_THROWS_AS(cfg.validate_for(36, 36), ConfigError);  // 9x9 map, g=2
    cfg.encoders = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = toy_config();
    cfg.dropout = 1.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = toy_config();
    cfg.attention.channels = 16;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = toy_config();
    cfg.cife.strides = {1, 1};
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = toy_config();
    cfg.attention.grid = 4;
    CHECK_THROWS_AS(cfg.validate_for(24, 24), ConfigError);  // 6x6 map
    CHECK_NOTHROW(cfg.validate_for(32, 32));
    CHECK_THROWS_AS(cfg.validate_for(8, 8), ConfigError);  // 2x2 map is smaller than g
  }

  TEST_CASE("config JSON round trip") {
    CmtConfig cfg = toy_config();
    cfg.attention_kind = attn::AttentionKind::mhsa;
    cfg.ffn_repeats = 2;
    const auto j = to_json(cfg);
    const CmtConfig back = config_from_json(nlohmann::json::parse(j.dump()));
    CHECK(to_json(back) == j);
    CHECK(config_digest(back) == config_digest(cfg));
    CHECK(config_digest(toy_config()) != config_digest(cfg));
    CHECK_THROWS_AS(config_from_json(nlohmann::json{{"encoder", 2}}), ConfigError);
    CHECK_THROWS_AS(config_from_json(nlohmann::json{{"encoders", "two"}}), ConfigError);
    CHECK_THROWS_AS(config_from_json(nlohmann::json{{"attention", {{"kind", "dense"}}}}), ConfigError);
  }

  TEST_CASE("embedding is a lossless reshape") {
    Rng rng(2);
    const Tensor fmap = random_tensor(Shape{8, 4, 4}, rng);
    const Tensor e = to_embedding(fmap);
    CHECK(e.shape() == Shape{8, 16});
    for (std::size_t i = 0; i < fmap.size(); ++i) CHECK(e[i] == fmap[i]);
    CHECK(from_embedding(e, 4, 4) == fmap);
    CHECK_THROWS_AS(from_embedding(e, 3, 4), DimensionError);
  }

  TEST_CASE("encoder determinism and dropout reproducibility") {
    const CmtConfig cfg = toy_config();
    const ParamMap params = init_params(cfg, 6);
    Rng rng(3);
    const Tensor x = random_tensor(Shape{8, 8, 8}, rng);
    CHECK(run_encoder(x, params, cfg, Mode::eval, nullptr) == run_encoder(x, params, cfg, Mode::eval, nullptr));
    Rng d1(9), d2(9);
    const Tensor t1 = run_encoder(x, params, cfg, Mode::train, &d1);
    const Tensor t2 = run_encoder(x, params, cfg, Mode::train, &d2);
    CHECK(t1 == t2);
    CHECK_FALSE(t1 == run_encoder(x, params, cfg, Mode::eval, nullptr));
    CHECK_THROWS_AS(run_encoder(x, params, cfg, Mode::train, nullptr), ContractError);
  }

  TEST_CASE("zero sublayer projections reduce the encoder to LN(LN(x))") {
    for (auto kind : {attn::AttentionKind::mmsa, attn::AttentionKind::mhsa}) {
      CmtConfig cfg = toy_config();
      cfg.attention_kind = kind;
      ParamMap params = init_params(cfg, 7);
      for (const char* name : {"enc0.attn.wm", "enc0.attn.wp", "enc0.ffn0.w2"}) {
        if (params.contains(name)) params[name] = Tensor(params[name].shape(), 0.0);
      }
      Rng rng(4);
      const Tensor x = random_tensor(Shape{8, 8, 8}, rng, -2.0, 2.0);
      Rng d(1);
      const Tensor expected = layer_norm_loop(layer_norm_loop(x));
      CHECK(max_abs_diff(run_encoder(x, params, cfg, Mode::eval, nullptr), expected) < 1e-12);
      CHECK(max_abs_diff(run_encoder(x, params, cfg, Mode::train, &d), expected) < 1e-12);
    }
  }

  TEST_CASE("head examples and loop oracle") {
    Rng rng(5);
    const std::size_t c = 3, hid = 4, k = 2;
    const Tensor fmap = random_tensor(Shape{c, 2, 5}, rng);
    const Tensor w2 = random_tensor(Shape{hid, c}, rng), w1 = random_tensor(Shape{k, hid}, rng);
    const Tensor b = random_tensor(Shape{k}, rng);
    auto head = [&](const Tensor& a1, const Tensor& a2, const Tensor& bb) {
      Tape tape;
      BoundParams p{{"head.w1", tape.constant(a1)}, {"head.w2", tape.constant(a2)}, {"head.b", tape.constant(bb)}};
      return head_forward(tape.constant(fmap), p).value();
    };
    std::vector<double> gap(c, 0.0);
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t i = 0; i < 10; ++i) gap[ch] += fmap[ch * 10 + i];
      gap[ch] /= 10.0;
    }
    const Tensor got = head(w1, w2, b);
    for (std::size_t kk = 0; kk < k; ++kk) {
      double z = b[kk];
      for (std::size_t j = 0; j < hid; ++j) {
        double inner = 0.0;
        for (std::size_t ch = 0; ch < c; ++ch) inner += w2.at({j, ch}) * gap[ch];
        z += w1.at({kk, j}) * inner;
      }
      CHECK(std::abs(got[kk] - 1.0 / (1.0 + std::exp(-z))) < 1e-14);
    }
    const Tensor zero_b(Shape{k}, 0.0);
    const Tensor w1_zero = head(Tensor(Shape{k, hid}), w2, zero_b);
    const Tensor w2_zero = head(w1, Tensor(Shape{hid, c}), zero_b);
    const Tensor saturated = head(w1, w2, Tensor(Shape{k}, 40.0));
    for (double v : w1_zero.data()) CHECK(v == 0.5);
    for (double v : w2_zero.data()) CHECK(v == 0.5);
    for (double v : saturated.data()) CHECK(v > 1.0 - 1e-12);
  }

  TEST_CASE("zero-parameter model outputs 0.5 for every class") {
    const CmtConfig cfg = toy_config();
    ParamMap params = init_params(cfg, 8);
    for (auto& [name, value] : params) value = Tensor(value.shape(), 0.0);
    Rng rng(6);
    const Tensor probs = predict(random_tensor(Shape{3, 32, 32}, rng), params, cfg);
    CHECK(probs.shape() == Shape{4});
    for (double v : probs.data()) CHECK(v == 0.5);
  }

  TEST_CASE("end-to-end eval purity and output range") {
    for (auto kind : {attn::AttentionKind::mmsa, attn::AttentionKind::mhsa}) {
      CmtConfig cfg = toy_config();
      cfg.attention_kind = kind;
      cfg.encoders = 2;
      cfg.ffn_repeats = 2;
      const ParamMap params = init_params(cfg, 9);
      Rng rng(7);
      for (int trial = 0; trial < 3; ++trial) {
        const Tensor img = random_tensor(Shape{3, 32, 32}, rng, 0.0, 1.0);
        const Tensor a = predict(img, params, cfg), b = predict(img, params, cfg);
        CHECK(a == b);
        for (double v : a.data()) {
          CHECK(v > 0.0);
          CHECK(v < 1.0);
        }
      }
    }
  }

  TEST_CASE("checkpoint round trip and validation") {
    const CmtConfig cfg = toy_config();
    const ParamMap params = init_params(cfg, 10);
    const std::string bytes = encode_checkpoint(cfg, params);
    CHECK(bytes.substr(0, 4) == "CMT1");
    CHECK(encode_checkpoint(cfg, init_params(cfg, 10)) == bytes);
    const ParamMap back = decode_checkpoint(bytes, cfg);
    CHECK(back == params);

    CmtConfig other = cfg;
    other.ffn_hidden = 12;
    CHECK_THROWS_AS(decode_checkpoint(bytes, other), ConfigError);
    CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, bytes.size() - 3), cfg), DatasetError);
    CHECK_THROWS_AS(decode_checkpoint("XXXX" + bytes.substr(4), cfg), DatasetError);

    const auto path = std::filesystem::temp_directory_path() / "cmt_test_model" / "ckpt.bin";
    save_checkpoint(path, cfg, params);
    CHECK(load_checkpoint(path, cfg) == params);
    CHECK(parameter_count(params) > 0);
  }
}

TEST_SUITE("gradient-check") {
  TEST_CASE("CIFE gradient on a tiny config with a projection shortcut") {
    CmtConfig cfg = toy_config();
    cfg.cife.stage_channels = {8, 4};
    cfg.cife.repeats = {1, 1};
    cfg.cife.strides = {1, 2};
    cfg.attention.channels = 4;
    const ParamMap params = init_params(cfg, 11);
    Rng rng(12);
    std::vector<std::string> names{"image"};
    std::vector<Tensor> inputs{random_tensor(Shape{3, 16, 16}, rng, 0.0, 1.0)};
    for (const auto& [name, value] : params) {
      if (!name.starts_with("cife.")) continue;
      names.push_back(name);
      Tensor v = value;
      for (double& x : v.data()) x += uniform(rng, -0.1, 0.1);
      inputs.push_back(v);
    }
    const Tensor probe = random_tensor(Shape{4, 2, 2}, rng);
    auto graph = [&](Tape& tape, std::span<const Var> in) {
      BoundParams p;
      for (std::size_t i = 1; i < in.size(); ++i) p.emplace(names[i], in[i]);
      return sum(mul(cife_forward(in[0], p, cfg), tape.constant(probe)));
    };
    CHECK(test::gradcheck(graph, inputs, 1e-6).max_rel_error < 1e-4);
  }

  TEST_CASE("toy CMT end-to-end gradient (c'=8, 8x8, N=1, g=g'=2)") {
    const auto res = test::model_gradcheck(toy_config(), 32, 13, 0);
    INFO("worst input: " << res.worst << ", seconds " << res.seconds);
    CHECK(res.max_rel_error < 1e-4);
  }
}
