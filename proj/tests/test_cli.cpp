#include <doctest.h>

#include <cstdlib>
#include <json.hpp>
#include <set>
#include <sstream>

#include "cli.hpp"
#include "cmt/errors.hpp"
#include "cmt/io.hpp"
#include "cmt/training.hpp"
#include "dataset.hpp"
#include "support.hpp"

using namespace cmt;
using cmt::test::scratch_dir;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = 0;
  std::string out, err;
};

Run run(std::vector<std::string> args) {
  args.insert(args.begin(), "cmt");
  std::ostringstream out, err;
  Run r;
  r.code = cli::run_cli(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::vector<std::string> lines_of(const std::string& s) {
  std::vector<std::string> lines;
  std::istringstream in(s);
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  return lines;
}

// Writes `n` distinct noise images into dir.
void noise_images(const fs::path& dir, std::size_t n, std::size_t hw, std::uint64_t seed, const std::string& ext) {
  fs::create_directories(dir);
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = ext == ".pgm" ? 1 : 3;
    char name[32];
    std::snprintf(name, sizeof name, "img_%03zu", i);
    io::write_image(dir / (name + ext), test::random_tensor(Shape{c, hw, hw}, rng, 0.0, 1.0));
  }
}

std::string strip_timing(const std::string& jsonl_text) {
  std::string out;
  for (const auto& l : lines_of(jsonl_text)) {
    auto j = nlohmann::ordered_json::parse(l);
    j.erase("wall_ms");
    j.erase("wall_ns_median");
    out += j.dump() + "\n";
  }
  return out;
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("bench reports both kinds") {
    const auto dir = scratch_dir("cli_bench");
    const Run r = run({"bench", "--kind", "both", "--c", "64", "--hw", "24", "--g", "2", "--gp", "2", "--trials", "5",
                       "--out", dir.string()});
    REQUIRE(r.code == 0);
    const auto lines = lines_of(io::read_file(dir / "bench.jsonl"));
    REQUIRE(lines.size() == 2);
    const auto mhsa = nlohmann::json::parse(lines[0]), mmsa = nlohmann::json::parse(lines[1]);
    CHECK(mhsa["kind"] == "mhsa");
    CHECK(mmsa["kind"] == "mmsa");
    CHECK(mmsa["measured_macs"].get<std::uint64_t>() < mhsa["measured_macs"].get<std::uint64_t>());
    CHECK(r.out == io::read_file(dir / "bench.jsonl"));

    const Run again = run({"bench", "--c", "64", "--hw", "24", "--trials", "5"});
    CHECK(strip_timing(again.out) == strip_timing(r.out));

    CHECK(run({"bench", "--hw", "23"}).code == cli::kExitConfig);
    CHECK(run({"bench", "--kind", "dense"}).code == cli::kExitConfig);
    CHECK(run({"bench", "--trials", "0"}).code == cli::kExitConfig);
    CHECK(run({"bench", "--no-such-flag"}).code == cli::kExitConfig);
  }

  TEST_CASE("augment writes count files and a manifest") {
    const auto root = scratch_dir("cli_aug");
    noise_images(root / "covid", 5, 16, 1, ".png");
    const auto a = root / "a", b = root / "b";
    const Run r = run({"augment", "--in", (root / "covid").string(), "--count", "8", "--p", "2", "--alpha", "0.4",
                       "--seed", "7", "--out", a.string()});
    REQUIRE(r.code == 0);
    const auto manifest = lines_of(io::read_file(a / "manifest.jsonl"));
    REQUIRE(manifest.size() == 8);
    CHECK(nlohmann::json::parse(manifest[0])["seed"] == 7);
    CHECK(nlohmann::json::parse(manifest[7])["seed"] == 14);
    CHECK(io::list_images(a).size() == 8);

    REQUIRE(run({"augment", "--in", (root / "covid").string(), "--count", "8", "--seed", "7", "--out", b.string()}).code == 0);
    CHECK(io::read_file(a / "manifest.jsonl") == io::read_file(b / "manifest.jsonl"));
    for (const auto& f : io::list_images(a)) CHECK(io::read_file(f) == io::read_file(b / f.filename()));

    CHECK(run({"augment", "--count", "2"}).code == cli::kExitConfig);
    CHECK(run({"augment", "--in", (root / "missing").string(), "--out", (root / "x").string()}).code == cli::kExitData);
    CHECK(run({"augment", "--in", (root / "covid").string(), "--alpha", "1.5", "--out", (root / "x").string()}).code ==
          cli::kExitConfig);
    CHECK(run({"augment", "--in", (root / "covid").string(), "--region", "open", "--out", (root / "x").string()}).code ==
          cli::kExitConfig);
  }

  TEST_CASE("config file and environment seed") {
    const auto root = scratch_dir("cli_cfg");
    noise_images(root / "c", 3, 8, 2, ".pgm");
    io::write_file_atomic(root / "run.json", R"({"count": 3, "seed": 11, "alpha": 0.3})");
    const auto out = root / "o";
    REQUIRE(run({"augment", "--config", (root / "run.json").string(), "--in", (root / "c").string(), "--count", "2",
                 "--out", out.string()})
                .code == 0);
    const auto manifest = lines_of(io::read_file(out / "manifest.jsonl"));
    REQUIRE(manifest.size() == 2);
    const auto first = nlohmann::json::parse(manifest[0]);
    CHECK(first["seed"] == 11);
    CHECK(first["alpha"] == 0.3);

    io::write_file_atomic(root / "bad.json", R"({"colour": "blue"})");
    CHECK(run({"augment", "--config", (root / "bad.json").string(), "--in", (root / "c").string()}).code ==
          cli::kExitConfig);
    io::write_file_atomic(root / "nested.json", R"({"count": [1, 2]})");
    CHECK(run({"augment", "--config", (root / "nested.json").string(), "--in", (root / "c").string()}).code ==
          cli::kExitConfig);
    CHECK(run({"augment", "--config", (root / "none.json").string(), "--in", (root / "c").string()}).code ==
          cli::kExitConfig);

    ::setenv("CMT_SEED", "21", 1);
    const auto env_out = root / "env";
    const Run r = run({"augment", "--in", (root / "c").string(), "--count", "1", "--out", env_out.string()});
    ::unsetenv("CMT_SEED");
    REQUIRE(r.code == 0);
    CHECK(nlohmann::json::parse(lines_of(io::read_file(env_out / "manifest.jsonl"))[0])["seed"] == 21);
  }

  TEST_CASE("ingest splits 8:1:1 and rejects overlap") {
    const auto root = scratch_dir("cli_ingest");
    const auto data = root / "data";
    noise_images(data / "covid", 40, 8, 3, ".png");
    noise_images(data / "normal", 40, 8, 4, ".png");
    noise_images(data / "viral", 25, 8, 5, ".pgm");
    const Run r = run({"ingest", "--root", data.string(), "--seed", "3", "--out", (root / "i1").string()});
    REQUIRE(r.code == 0);
    const auto index = nlohmann::json::parse(io::read_file(root / "i1" / "index.json"));
    CHECK(index["classes"][0]["train"].size() == 32);
    CHECK(index["classes"][0]["val"].size() == 4);
    CHECK(index["classes"][0]["test"].size() == 4);
    CHECK(index["classes"][2]["train"].size() == 21);
    std::set<std::string> all;
    std::size_t total = 0;
    for (const auto& c : index["classes"])
      for (const char* s : {"train", "val", "test"})
        for (const auto& f : c[s]) {
          all.insert(f.get<std::string>());
          ++total;
        }
    CHECK(all.size() == total);
    CHECK(total == 105);

    REQUIRE(run({"ingest", "--root", data.string(), "--seed", "3", "--out", (root / "i2").string()}).code == 0);
    CHECK(io::read_file(root / "i1" / "index.json") == io::read_file(root / "i2" / "index.json"));
    REQUIRE(run({"ingest", "--root", data.string(), "--seed", "4", "--out", (root / "i3").string()}).code == 0);
    CHECK(io::read_file(root / "i1" / "index.json") != io::read_file(root / "i3" / "index.json"));

    fs::copy_file(data / "covid" / "img_000.png", data / "normal" / "dup.png");
    const Run dup = run({"ingest", "--root", data.string(), "--out", (root / "i4").string()});
    CHECK(dup.code == cli::kExitData);
    CHECK(dup.err.find("overlapping") != std::string::npos);
    fs::remove(data / "normal" / "dup.png");

    fs::create_directories(data / "empty");
    const Run empty = run({"ingest", "--root", data.string(), "--out", (root / "i5").string()});
    CHECK(empty.code == cli::kExitData);
    CHECK(empty.err.find("empty") != std::string::npos);
    fs::remove(data / "empty");
    noise_images(data / "small", 9, 8, 6, ".png");
    CHECK(run({"ingest", "--root", data.string(), "--out", (root / "i6").string()}).code == cli::kExitData);
  }

  TEST_CASE("resize target resolution") {
    CHECK(cli::resolve_hw(std::nullopt, model::CmtConfig{}, std::size_t{2}) == 352);
    CHECK(cli::resolve_hw(std::size_t{96}, model::CmtConfig{}, std::size_t{2}) == 96);
    CHECK_THROWS_AS(cli::resolve_hw(std::size_t{360}, model::CmtConfig{}, std::nullopt), ConfigError);
    CHECK_THROWS_AS(cli::resolve_hw(std::size_t{40}, model::toy_config(), std::size_t{3}), ConfigError);
    CHECK(cli::resolve_hw(std::nullopt, model::toy_config(), std::nullopt) == 360);
  }

  TEST_CASE("train --toy end to end, then eval and cam") {
    const auto root = scratch_dir("cli_train");
    const auto a = root / "a";
    const Run r = run({"train", "--toy", "--seed", "1", "--out", a.string()});
    REQUIRE(r.code == 0);
    const auto log = lines_of(io::read_file(a / "train_log.jsonl"));
    REQUIRE(log.size() == 20);
    for (std::size_t e = 1; e < 5; ++e) {
      CHECK(nlohmann::json::parse(log[e])["mean_loss"].get<double>() <
            nlohmann::json::parse(log[e - 1])["mean_loss"].get<double>());
    }
    const auto summary = nlohmann::json::parse(io::read_file(a / "summary.json"));
    CHECK(summary["train_of1"].get<double>() >= 0.95);

    const Run ev = run({"eval", "--model", a.string(), "--toy", "--seed", "1", "--out", a.string()});
    REQUIRE(ev.code == 0);
    const auto report = nlohmann::json::parse(io::read_file(a / "eval.json"));
    CHECK(report["images"] == 64);
    CHECK(report["OF1"].get<double>() == doctest::Approx(100.0 * summary["heldout_of1"].get<double>()));
    CHECK_FALSE(report.contains("literal_formulas"));
    CHECK(nlohmann::json::parse(run({"eval", "--model", a.string(), "--toy", "--literal-formulas"}).out)
              .contains("literal_formulas"));

    const Run cam = run({"cam", "--model", a.string(), "--toy", "--toy-index", "2", "--class", "2", "--out",
                         (root / "cam").string()});
    REQUIRE(cam.code == 0);
    CHECK(io::read_image(root / "cam" / "cam_toy_2.png").shape() == Shape{3, 32, 32});
    CHECK(nlohmann::json::parse(io::read_file(root / "cam" / "cam_toy_2.json"))["class"] == 2);
    CHECK(run({"cam", "--model", a.string(), "--toy", "--class", "9", "--out", (root / "cam").string()}).code ==
          cli::kExitConfig);

    CHECK(run({"eval", "--model", (root / "nowhere").string(), "--toy"}).code == cli::kExitData);
    CHECK(run({"train", "--toy", "--hw", "30", "--out", (root / "bad").string()}).code == cli::kExitConfig);
    CHECK(run({"train", "--out", (root / "bad").string()}).code == cli::kExitConfig);
    CHECK(run({"train", "--toy", "--lr-min", "1", "--out", (root / "bad").string()}).code == cli::kExitConfig);
  }

  TEST_CASE("train on an ingested directory dataset") {
    const auto root = scratch_dir("cli_train_dir");
    const auto data = root / "data";
    const auto toy = train::toy_dataset(10, 5, 40);
    for (std::size_t i = 0; i < toy.samples.size(); ++i) {
      const auto& s = toy.samples[i];
      fs::create_directories(data / toy.class_names[s.label]);
      io::write_image(data / toy.class_names[s.label] / ("s" + std::to_string(i) + ".png"), s.image);
    }
    io::write_file_atomic(root / "model.json", model::to_json(model::toy_classifier_config()).dump());
    const auto out = root / "run";
    const Run r = run({"train", "--data", data.string(), "--model-config", (root / "model.json").string(), "--hw",
                       "32", "--epochs", "2", "--lr-max", "0.01", "--seed", "2", "--out", out.string()});
    INFO(r.err);
    REQUIRE(r.code == 0);
    const auto summary = nlohmann::json::parse(io::read_file(out / "summary.json"));
    CHECK(summary.contains("val_of1"));
    const auto model_json = nlohmann::json::parse(io::read_file(out / "model.json"));
    CHECK(model_json["hw"] == 32);
    CHECK(model_json["class_names"].size() == 4);
    const Run ev = run({"eval", "--model", out.string(), "--data", data.string(), "--seed", "2"});
    REQUIRE(ev.code == 0);
    CHECK(nlohmann::json::parse(ev.out)["images"] == 4);
    const Run cam = run({"cam", "--model", out.string(), "--image", (data / "blob" / "s3.png").string(), "--out",
                         (root / "cam").string()});
    REQUIRE(cam.code == 0);
    CHECK(fs::exists(root / "cam" / "cam_s3.png"));
  }

  TEST_CASE("reruns give identical artifacts") {
    const auto root = scratch_dir("cli_repeat");
    for (const char* name : {"x", "y"}) {
      REQUIRE(run({"train", "--toy", "--epochs", "2", "--seed", "5", "--out", (root / name).string()}).code == 0);
    }
    for (const char* f : {"checkpoint.bin", "model.json", "summary.json"}) {
      CHECK(io::read_file(root / "x" / f) == io::read_file(root / "y" / f));
    }
    CHECK(strip_timing(io::read_file(root / "x" / "train_log.jsonl")) ==
          strip_timing(io::read_file(root / "y" / "train_log.jsonl")));
  }
}
