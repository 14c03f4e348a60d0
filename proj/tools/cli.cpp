#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdlib>
#include <optional>
#include <sstream>

#include <json.hpp>

#include "cmt/attention.hpp"
#include "cmt/errors.hpp"
#include "cmt/ffa.hpp"
#include "cmt/interpret.hpp"
#include "cmt/io.hpp"
#include "cmt/metrics.hpp"
#include "cmt/model.hpp"
#include "cmt/training.hpp"
#include "dataset.hpp"

namespace cmt::cli {

namespace {

using ojson = nlohmann::ordered_json;

// Stream keys under the run seed.
constexpr std::uint64_t kInitStream = 0x1417;
constexpr std::uint64_t kHeldOutStream = 0x4e1d;

std::uint64_t default_seed() {
  const char* env = std::getenv("CMT_SEED");
  if (env == nullptr || *env == '\0') return 0;
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(env, &used);
    if (used != std::string(env).size()) throw std::invalid_argument(env);
    return v;
  } catch (const std::exception&) {
    throw ConfigError(std::string("CMT_SEED is not an unsigned integer: ") + env);
  }
}

// Flat JSON object -> "--key value" arguments. Underscores in keys become dashes.
std::vector<std::string> config_args(const fs::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  } catch (const DatasetError& e) {
    throw ConfigError(e.what());
  }
  if (!j.is_object()) throw ConfigError("config " + path.string() + " must be a flat JSON object");
  std::vector<std::string> out;
  for (const auto& [key, value] : j.items()) {
    std::string flag = "--" + key;
    std::replace(flag.begin(), flag.end(), '_', '-');
    if (value.is_boolean()) {
      if (value.get<bool>()) out.push_back(flag);
    } else if (value.is_string()) {
      out.push_back(flag);
      out.push_back(value.get<std::string>());
    } else if (value.is_number()) {
      out.push_back(flag);
      out.push_back(value.dump());
    } else {
      throw ConfigError("config key '" + key + "' must be a string, number or boolean");
    }
  }
  return out;
}

// Splices the config file's settings in front of the command-line flags so the
// latter win (every option keeps its last value).
std::vector<std::string> expand_config(const std::vector<std::string>& args) {
  std::optional<std::string> path;
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
  }
  if (!path || args.size() < 2) return args;
  std::vector<std::string> out(args.begin(), args.begin() + 2);
  const auto extra = config_args(*path);
  out.insert(out.end(), extra.begin(), extra.end());
  out.insert(out.end(), args.begin() + 2, args.end());
  return out;
}

void emit(std::ostream& out, const ojson& j) { out << j.dump() << "\n"; }

std::string jsonl(const std::vector<ojson>& lines) {
  std::string s;
  for (const auto& l : lines) s += l.dump() + "\n";
  return s;
}

attn::AttentionKind parse_kind(const std::string& s) {
  if (s == "mhsa") return attn::AttentionKind::mhsa;
  if (s == "mmsa") return attn::AttentionKind::mmsa;
  throw ConfigError("unknown attention kind '" + s + "'");
}

model::CmtConfig read_model_config(const std::string& path) {
  try {
    return model::config_from_json(nlohmann::json::parse(io::read_file(path)));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("model config " + path + ": " + e.what());
  }
}

// ---- augment ---------------------------------------------------------------------

struct AugmentArgs {
  std::string in, out = "augmented";
  std::size_t count = 8;
  std::size_t p = 2;
  double alpha = 0.4;
  std::optional<std::size_t> m, n;
  std::string region = "strict";
  std::uint64_t seed = 0;
};

int cmd_augment(const AugmentArgs& a, std::ostream& out) {
  ffa::FfaConfig cfg;
  cfg.patch = a.p;
  cfg.alpha = a.alpha;
  cfg.row = a.m;
  cfg.col = a.n;
  cfg.region = ffa::parse_region(a.region);
  cfg.validate();
  const auto entries = ffa::augment_dataset(a.in, a.out, a.count, cfg, a.seed);
  ojson j;
  j["command"] = "augment";
  j["count"] = entries.size();
  j["out"] = a.out;
  j["manifest"] = (fs::path(a.out) / "manifest.jsonl").string();
  emit(out, j);
  return kExitOk;
}

// ---- bench -----------------------------------------------------------------------

struct BenchArgs {
  std::string kind = "both";
  std::size_t c = 64, hw = 24, g = 2, gp = 2, heads = 1, trials = 5;
  bool backward = false;
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_bench(const BenchArgs& a, std::ostream& out) {
  std::vector<attn::AttentionKind> kinds;
  if (a.kind == "both") {
    kinds = {attn::AttentionKind::mhsa, attn::AttentionKind::mmsa};
  } else {
    kinds = {parse_kind(a.kind)};
  }
  if (a.trials == 0) throw ConfigError("--trials must be positive");
  attn::AttentionConfig cfg;
  cfg.channels = a.c;
  cfg.heads = a.heads;
  cfg.grid = a.g;
  cfg.downsample = a.gp;
  cfg.validate_for(a.hw, a.hw);
  std::string lines;
  for (auto kind : kinds) {
    const auto report = attn::measure_cost(kind, a.c, a.hw, a.hw, cfg, a.trials, a.backward, a.seed);
    lines += attn::to_json_line(report) + "\n";
  }
  out << lines;
  if (!a.out.empty()) io::write_file_atomic(fs::path(a.out) / "bench.jsonl", lines);
  return kExitOk;
}

// ---- ingest ----------------------------------------------------------------------

struct IngestArgs {
  std::string root, out = ".";
  std::uint64_t seed = 0;
};

int cmd_ingest(const IngestArgs& a, std::ostream& out) {
  const DatasetIndex index = ingest(a.root, a.seed);
  const fs::path path = fs::path(a.out) / "index.json";
  io::write_file_atomic(path, to_json(index).dump(2) + "\n");
  ojson j;
  j["command"] = "ingest";
  j["index"] = path.string();
  j["classes"] = ojson::array();
  for (const auto& c : index.classes) {
    ojson cj;
    cj["name"] = c.name;
    cj["train"] = c.train.size();
    cj["val"] = c.val.size();
    cj["test"] = c.test.size();
    j["classes"].push_back(std::move(cj));
  }
  emit(out, j);
  return kExitOk;
}

DatasetIndex index_for(const std::string& index_path, const std::string& data, std::uint64_t seed) {
  if (!index_path.empty()) {
    try {
      return index_from_json(nlohmann::json::parse(io::read_file(index_path)));
    } catch (const nlohmann::json::exception& e) {
      throw DatasetError("index " + index_path + ": " + e.what());
    }
  }
  if (data.empty()) throw ConfigError("need --data, --index or --toy");
  return ingest(data, seed);
}

// ---- model directory -------------------------------------------------------------

struct ModelDir {
  model::CmtConfig cfg;
  std::size_t hw = 0;
  std::vector<std::string> class_names;
  model::ParamMap params;
};

ojson model_json(const model::CmtConfig& cfg, std::size_t hw, const std::vector<std::string>& names) {
  ojson j;
  j["model"] = model::to_json(cfg);
  j["hw"] = hw;
  j["class_names"] = names;
  return j;
}

ModelDir load_model_dir(const fs::path& dir) {
  ModelDir m;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_file(dir / "model.json"));
    m.cfg = model::config_from_json(j.at("model"));
    m.hw = j.at("hw").get<std::size_t>();
    m.class_names = j.at("class_names").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw DatasetError((dir / "model.json").string() + ": " + e.what());
  }
  m.params = model::load_checkpoint(dir / "checkpoint.bin", m.cfg);
  return m;
}

// ---- train -----------------------------------------------------------------------

struct TrainArgs {
  bool toy = false;
  std::size_t per_class = 16;
  std::string data, index, model_config, out = "run";
  std::optional<std::size_t> hw, epochs, batch, warmup_steps;
  std::optional<double> lr_max, lr_min;
  double ffa_ratio = 1.0;
  bool no_ffa = false;
  std::size_t p = 2;
  double alpha = 0.4;
  std::string region = "strict";
  std::uint64_t seed = 0;
};

train::Dataset toy_held_out(std::size_t per_class, std::uint64_t seed, std::size_t hw) {
  return train::toy_dataset(per_class, derive_seed(seed, {kHeldOutStream}), hw);
}

int cmd_train(const TrainArgs& a, std::ostream& out) {
  std::optional<ffa::FfaConfig> fcfg;
  if (!a.no_ffa) {
    ffa::FfaConfig f;
    f.patch = a.p;
    f.alpha = a.alpha;
    f.region = ffa::parse_region(a.region);
    f.validate();
    fcfg = f;
  }
  model::CmtConfig mcfg = a.model_config.empty() ? (a.toy ? model::toy_classifier_config() : model::CmtConfig{})
                                                 : read_model_config(a.model_config);
  train::TrainConfig tcfg = a.toy ? train::toy_train_config() : train::TrainConfig{};
  if (a.epochs) tcfg.epochs = *a.epochs;
  if (a.batch) tcfg.batch = *a.batch;
  if (a.lr_max) tcfg.lr_max = *a.lr_max;
  if (a.lr_min) tcfg.lr_min = *a.lr_min;
  if (a.warmup_steps) tcfg.warmup_steps = a.warmup_steps;
  tcfg.ffa_ratio = a.ffa_ratio;
  tcfg.validate();

  train::Dataset train_set, check_set;
  std::size_t hw = 0;
  if (a.toy) {
    if (a.per_class == 0) throw ConfigError("--per-class must be positive");
    hw = a.hw.value_or(32);
    mcfg.classes = 4;
    resolve_hw(hw, mcfg, fcfg ? std::optional<std::size_t>(fcfg->patch) : std::nullopt);
    train_set = train::toy_dataset(a.per_class, a.seed, hw);
    check_set = toy_held_out(a.per_class, a.seed, hw);
  } else {
    const DatasetIndex index = index_for(a.index, a.data, a.seed);
    mcfg.classes = index.classes.size();
    hw = resolve_hw(a.hw, mcfg, fcfg ? std::optional<std::size_t>(fcfg->patch) : std::nullopt);
    train_set = load_split(index, Split::train, mcfg.cife.in_channels, hw);
    check_set = load_split(index, Split::val, mcfg.cife.in_channels, hw);
  }
  mcfg.validate_for(hw, hw);

  std::vector<ojson> log_lines;
  const auto result = train::train_loop(train_set, mcfg, model::init_params(mcfg, derive_seed(a.seed, {kInitStream})),
                                        tcfg, fcfg, a.seed, [&](const train::EpochLog& l) {
                                          log_lines.push_back(train::to_json(l));
                                          emit(out, log_lines.back());
                                        });

  const fs::path dir(a.out);
  const std::string ckpt = model::encode_checkpoint(mcfg, result.params);
  io::write_file_atomic(dir / "checkpoint.bin", ckpt);
  io::write_file_atomic(dir / "model.json", model_json(mcfg, hw, train_set.class_names).dump(2) + "\n");
  io::write_file_atomic(dir / "train_log.jsonl", jsonl(log_lines));

  const auto [train_of1, train_cf1] = train::f1_scores(train_set, result.params, mcfg, tcfg.threshold);
  const auto [check_of1, check_cf1] = train::f1_scores(check_set, result.params, mcfg, tcfg.threshold);
  ojson summary;
  summary["command"] = "train";
  summary["toy"] = a.toy;
  summary["seed"] = a.seed;
  summary["epochs"] = result.log.size();
  summary["ffa"] = fcfg.has_value();
  summary["ffa_ratio"] = fcfg ? tcfg.ffa_ratio : 0.0;
  summary["final_loss"] = result.log.back().mean_loss;
  summary["train_of1"] = train_of1;
  summary["train_cf1"] = train_cf1;
  summary[a.toy ? "heldout_of1" : "val_of1"] = check_of1;
  summary[a.toy ? "heldout_cf1" : "val_cf1"] = check_cf1;
  summary["checkpoint_fnv1a"] = io::hex64(io::fnv1a64(ckpt));
  io::write_file_atomic(dir / "summary.json", summary.dump() + "\n");
  emit(out, summary);
  return kExitOk;
}

// ---- eval ------------------------------------------------------------------------

struct EvalArgs {
  std::string model_dir, data, index, split = "test", out;
  bool toy = false;
  std::size_t per_class = 16;
  double threshold = 0.5;
  bool literal = false;
  std::uint64_t seed = 0;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  if (!(a.threshold >= 0.0 && a.threshold <= 1.0)) throw ConfigError("--threshold must be in [0,1]");
  const ModelDir m = load_model_dir(a.model_dir);
  train::Dataset data;
  if (a.toy) {
    data = toy_held_out(a.per_class, a.seed, m.hw);
  } else {
    const DatasetIndex index = index_for(a.index, a.data, a.seed);
    if (index.classes.size() != m.cfg.classes) {
      throw DatasetError("dataset has " + std::to_string(index.classes.size()) + " classes, model has " +
                         std::to_string(m.cfg.classes));
    }
    data = load_split(index, parse_split(a.split), m.cfg.cife.in_channels, m.hw);
  }
  metrics::LabelMatrix preds, targets;
  const auto probs = train::predict_all(data, m.params, m.cfg);
  for (std::size_t i = 0; i < probs.size(); ++i) {
    preds.push_back(metrics::binarize(probs[i], a.threshold));
    std::vector<int> t(m.cfg.classes, 0);
    t.at(data.samples[i].label) = 1;
    targets.push_back(std::move(t));
  }
  const auto report = metrics::report(metrics::confusion(preds, targets, m.cfg.classes));
  ojson j;
  j["command"] = "eval";
  j["images"] = data.samples.size();
  j["threshold"] = a.threshold;
  const ojson body = metrics::to_json(report, m.class_names);
  for (const auto& [k, v] : body.items()) j[k] = v;
  if (a.literal) j["literal_formulas"] = metrics::to_json(metrics::literal_report(preds, targets, m.cfg.classes));
  if (!a.out.empty()) io::write_file_atomic(fs::path(a.out) / "eval.json", j.dump() + "\n");
  emit(out, j);
  return kExitOk;
}

// ---- cam -------------------------------------------------------------------------

struct CamArgs {
  std::string model_dir, image, out = "cam";
  bool toy = false;
  std::size_t toy_index = 0, per_class = 16;
  std::optional<std::size_t> target;
  std::uint64_t seed = 0;
};

int cmd_cam(const CamArgs& a, std::ostream& out) {
  const ModelDir m = load_model_dir(a.model_dir);
  Tensor image;
  std::string input, stem;
  if (a.toy) {
    const auto data = toy_held_out(a.per_class, a.seed, m.hw);
    if (a.toy_index >= data.samples.size()) throw ConfigError("--toy-index out of range");
    image = data.samples[a.toy_index].image;
    input = "toy:" + std::to_string(a.toy_index);
    stem = "toy_" + std::to_string(a.toy_index);
  } else {
    if (a.image.empty()) throw ConfigError("need --image or --toy");
    image = load_image(a.image, m.cfg.cife.in_channels, m.hw);
    input = a.image;
    stem = fs::path(a.image).stem().string();
  }
  std::size_t target = 0;
  if (a.target) {
    target = *a.target;
  } else {
    const Tensor p = model::predict(image, m.params, m.cfg);
    target = static_cast<std::size_t>(std::max_element(p.data().begin(), p.data().end()) - p.data().begin());
  }
  const auto cam = interp::grad_cam(image, m.params, m.cfg, target);
  const fs::path path = fs::path(a.out) / ("cam_" + stem + ".png");
  interp::write_overlay(path, cam, image, input);
  ojson j = interp::sidecar(cam, input);
  j["overlay"] = path.string();
  emit(out, j);
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& raw_args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Hybrid CNN / multilevel-attention chest X-ray classifier toolkit", "cmt"};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  std::uint64_t seed = 0;
  std::string config_path;
  AugmentArgs aug;
  BenchArgs bench;
  IngestArgs ing;
  TrainArgs tr;
  EvalArgs ev;
  CamArgs cam;

  auto common = [&](CLI::App* sub, std::string& out_dir) {
    sub->add_option("--seed", seed, "Seed (default: $CMT_SEED or 0)");
    sub->add_option("--config", config_path, "Flat JSON file of flag values; flags on the command line win");
    sub->add_option("--out", out_dir, "Output directory");
  };

  auto* s_aug = app.add_subcommand("augment", "Write FFA-fused images of one class plus a manifest");
  common(s_aug, aug.out);
  s_aug->add_option("--in", aug.in, "Class directory")->required();
  s_aug->add_option("--count", aug.count, "Number of fused images");
  s_aug->add_option("--p", aug.p, "Patch grid size");
  s_aug->add_option("--alpha", aug.alpha, "Beta(alpha, alpha) parameter");
  s_aug->add_option("--m", aug.m, "Patch row (random when omitted)");
  s_aug->add_option("--n", aug.n, "Patch column (random when omitted)");
  s_aug->add_option("--region", aug.region, "strict or halfopen");

  auto* s_bench = app.add_subcommand("bench", "Analytic and measured attention cost");
  common(s_bench, bench.out);
  s_bench->add_option("--kind", bench.kind, "mhsa, mmsa or both");
  s_bench->add_option("--c", bench.c, "Channels");
  s_bench->add_option("--hw", bench.hw, "Feature map side");
  s_bench->add_option("--g", bench.g, "Level-1 window side");
  s_bench->add_option("--gp", bench.gp, "Level-2 downsampling factor");
  s_bench->add_option("--heads", bench.heads, "Attention heads");
  s_bench->add_option("--trials", bench.trials, "Timed repetitions");
  s_bench->add_flag("--backward", bench.backward, "Include the backward pass");

  auto* s_ing = app.add_subcommand("ingest", "Split a class-per-directory dataset 8:1:1");
  common(s_ing, ing.out);
  s_ing->add_option("--root", ing.root, "Dataset root")->required();

  auto* s_tr = app.add_subcommand("train", "Train a model and write a checkpoint and per-epoch log");
  common(s_tr, tr.out);
  s_tr->add_flag("--toy", tr.toy, "Synthetic 4-class set at 32x32");
  s_tr->add_option("--per-class", tr.per_class, "Toy images per class");
  s_tr->add_option("--data", tr.data, "Dataset root (ingested with --seed)");
  s_tr->add_option("--index", tr.index, "Dataset index written by ingest");
  s_tr->add_option("--model-config", tr.model_config, "Model config JSON");
  s_tr->add_option("--hw", tr.hw, "Resize target (default: largest valid size <= 360)");
  s_tr->add_option("--epochs", tr.epochs, "Epochs");
  s_tr->add_option("--batch", tr.batch, "Real images per mini-batch");
  s_tr->add_option("--lr-max", tr.lr_max, "Peak learning rate");
  s_tr->add_option("--lr-min", tr.lr_min, "Final learning rate");
  s_tr->add_option("--warmup-steps", tr.warmup_steps, "Warmup steps (default: 5% of all steps)");
  s_tr->add_option("--ffa-ratio", tr.ffa_ratio, "Fused samples per real sample");
  s_tr->add_flag("--no-ffa", tr.no_ffa, "Disable FFA");
  s_tr->add_option("--p", tr.p, "FFA patch grid size");
  s_tr->add_option("--alpha", tr.alpha, "FFA Beta parameter");
  s_tr->add_option("--region", tr.region, "FFA region rule");

  auto* s_ev = app.add_subcommand("eval", "Metrics report of a trained model");
  common(s_ev, ev.out);
  s_ev->add_option("--model", ev.model_dir, "Directory written by train")->required();
  s_ev->add_flag("--toy", ev.toy, "Held-out synthetic set of the same seed");
  s_ev->add_option("--per-class", ev.per_class, "Toy images per class");
  s_ev->add_option("--data", ev.data, "Dataset root (ingested with --seed)");
  s_ev->add_option("--index", ev.index, "Dataset index written by ingest");
  s_ev->add_option("--split", ev.split, "train, val or test");
  s_ev->add_option("--threshold", ev.threshold, "Binarization threshold");
  s_ev->add_flag("--literal-formulas", ev.literal, "Also report the literal-formula aggregates (OR can exceed 1)");

  auto* s_cam = app.add_subcommand("cam", "Grad-CAM overlay of one image");
  common(s_cam, cam.out);
  s_cam->add_option("--model", cam.model_dir, "Directory written by train")->required();
  s_cam->add_option("--image", cam.image, "Input image");
  s_cam->add_flag("--toy", cam.toy, "Use a held-out synthetic image");
  s_cam->add_option("--toy-index", cam.toy_index, "Which synthetic image");
  s_cam->add_option("--per-class", cam.per_class, "Toy images per class");
  s_cam->add_option("--class", cam.target, "Target class (default: top prediction)");

  try {
    seed = default_seed();
    std::vector<std::string> args = expand_config(raw_args);
    std::vector<std::string> reversed(args.rbegin(), args.rend() - (args.empty() ? 0 : 1));
    app.parse(reversed);
    aug.seed = bench.seed = ing.seed = tr.seed = ev.seed = cam.seed = seed;
    if (s_aug->parsed()) return cmd_augment(aug, out);
    if (s_bench->parsed()) return cmd_bench(bench, out);
    if (s_ing->parsed()) return cmd_ingest(ing, out);
    if (s_tr->parsed()) return cmd_train(tr, out);
    if (s_ev->parsed()) return cmd_eval(ev, out);
    if (s_cam->parsed()) return cmd_cam(cam, out);
    return kExitInternal;
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ParameterError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ScheduleError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DatasetError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const DimensionError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitInternal;
  }
}

}  // namespace cmt::cli
