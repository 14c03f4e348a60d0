#include "cmt/ffa.hpp"

#include <cmath>
#include <json.hpp>
#include <random>

#include "cmt/errors.hpp"
#include "cmt/io.hpp"

namespace cmt::ffa {

void BetaParams::validate() const {
  if (!(a > 0.0) || !(b > 0.0) || !std::isfinite(a) || !std::isfinite(b)) {
    throw ParameterError("beta parameters must be positive, got a=" + std::to_string(a) + " b=" + std::to_string(b));
  }
}

double sample_beta(const BetaParams& params, Rng& rng) {
  params.validate();
  // Shape < 1 gammas can underflow to 0; redraw the rare 0/0 pair.
  for (;;) {
    const double x = std::gamma_distribution<double>(params.a, 1.0)(rng);
    const double y = std::gamma_distribution<double>(params.b, 1.0)(rng);
    if (x + y > 0.0) return x / (x + y);
  }
}

Sampler beta_sampler(const BetaParams& params, Rng& rng) {
  params.validate();
  return [params, &rng] { return sample_beta(params, rng); };
}

std::string to_string(Region region) { return region == Region::strict ? "strict" : "halfopen"; }

Region parse_region(const std::string& name) {
  if (name == "strict") return Region::strict;
  if (name == "halfopen") return Region::halfopen;
  throw ConfigError("unknown FFA region '" + name + "' (expected strict or halfopen)");
}

void FfaConfig::validate() const {
  if (patch == 0) throw ConfigError("ffa: patch size must be positive");
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("ffa: alpha must be in (0,1), got " + std::to_string(alpha));
  if (row && *row >= patch) throw ConfigError("ffa: m=" + std::to_string(*row) + " outside [0,p)");
  if (col && *col >= patch) throw ConfigError("ffa: n=" + std::to_string(*col) + " outside [0,p)");
}

void FfaConfig::validate_for(std::size_t h, std::size_t w) const {
  validate();
  if (h % patch != 0 || w % patch != 0) {
    throw ConfigError("ffa: patch size " + std::to_string(patch) + " does not divide " + std::to_string(h) + "x" +
                      std::to_string(w));
  }
}

bool in_region(std::size_t i, std::size_t j, std::size_t h, std::size_t w, std::size_t p, std::size_t row,
               std::size_t col, Region region) {
  const std::size_t r0 = row * h / p, r1 = (row + 1) * h / p;
  const std::size_t c0 = col * w / p, c1 = (col + 1) * w / p;
  if (region == Region::strict) return r0 < i && i < r1 && c0 < j && j < c1;
  return r0 <= i && i < r1 && c0 <= j && j < c1;
}

WeightMask build_masks(std::size_t h, std::size_t w, std::size_t p, std::size_t row, std::size_t col, Region region,
                       const Sampler& draw) {
  FfaConfig check;
  check.patch = p;
  check.row = row;
  check.col = col;
  check.alpha = 0.5;
  check.validate_for(h, w);

  WeightMask mask{Tensor(Shape{h, w}), Tensor(Shape{h, w}), row, col, draw()};
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      const double z = in_region(i, j, h, w, p, row, col, region) ? draw() : mask.fixed;
      mask.m[i * w + j] = z;
      mask.m_d[i * w + j] = 1.0 - z;
    }
  return mask;
}

WeightMask build_masks(std::size_t h, std::size_t w, const FfaConfig& cfg, Rng& rng) {
  cfg.validate_for(h, w);
  const std::size_t row = cfg.row ? *cfg.row : uniform_index(rng, cfg.patch);
  const std::size_t col = cfg.col ? *cfg.col : uniform_index(rng, cfg.patch);
  return build_masks(h, w, cfg.patch, row, col, cfg.region, beta_sampler({cfg.alpha, cfg.alpha}, rng));
}

Tensor fuse(const Tensor& i1, const Tensor& i2, const WeightMask& mask) {
  if (i1.shape() != i2.shape()) {
    throw DimensionError("fuse: image shapes differ " + shape_string(i1.shape()) + " vs " + shape_string(i2.shape()));
  }
  const std::size_t h = mask.m.dim(0), w = mask.m.dim(1);
  const bool plane = i1.rank() == 2 && i1.dim(0) == h && i1.dim(1) == w;
  const bool stack = i1.rank() == 3 && i1.dim(1) == h && i1.dim(2) == w;
  if (!plane && !stack) {
    throw DimensionError("fuse: image " + shape_string(i1.shape()) + " does not match mask " +
                         shape_string(mask.m.shape()));
  }
  Tensor out = i1;
  const std::size_t hw = h * w;
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = i1[k] * mask.m[k % hw] + i2[k] * mask.m_d[k % hw];
  return out;
}

std::string to_json_line(const ManifestEntry& e) {
  nlohmann::ordered_json j;
  j["output"] = e.output;
  j["source_a"] = e.source_a;
  j["source_b"] = e.source_b;
  j["seed"] = e.seed;
  j["p"] = e.p;
  j["alpha"] = e.alpha;
  j["m"] = e.m;
  j["n"] = e.n;
  return j.dump();
}

std::vector<ManifestEntry> augment_dataset(const std::filesystem::path& class_dir,
                                           const std::filesystem::path& out_dir, std::size_t count,
                                           const FfaConfig& cfg, std::uint64_t base_seed) {
  cfg.validate();
  const auto sources = io::list_images(class_dir);
  if (sources.size() < 2) {
    throw DatasetError(class_dir.string() + ": need at least 2 images, found " + std::to_string(sources.size()));
  }
  std::vector<Tensor> images;
  images.reserve(sources.size());
  for (const auto& path : sources) {
    images.push_back(io::read_image(path));
    if (images.back().shape() != images.front().shape()) {
      throw DimensionError("mixed image dimensions in " + class_dir.string() + ": " + sources.front().string() + " " +
                           shape_string(images.front().shape()) + " vs " + path.string() + " " +
                           shape_string(images.back().shape()));
    }
  }
  const std::size_t h = images.front().dim(1), w = images.front().dim(2);
  cfg.validate_for(h, w);

  std::vector<ManifestEntry> manifest;
  std::string lines;
  for (std::size_t k = 0; k < count; ++k) {
    const std::uint64_t seed = base_seed + k;
    Rng rng(seed);
    const std::size_t a = uniform_index(rng, images.size());
    std::size_t b = uniform_index(rng, images.size() - 1);
    if (b >= a) ++b;
    const WeightMask mask = build_masks(h, w, cfg, rng);
    char name[32];
    std::snprintf(name, sizeof name, "ffa_%05zu.png", k);
    io::write_image(out_dir / name, fuse(images[a], images[b], mask));
    ManifestEntry entry{name, sources[a].filename().string(), sources[b].filename().string(), seed, cfg.patch,
                        cfg.alpha, mask.row, mask.col};
    lines += to_json_line(entry) + "\n";
    manifest.push_back(std::move(entry));
  }
  io::write_file_atomic(out_dir / "manifest.jsonl", lines);
  return manifest;
}

}  // namespace cmt::ffa
