#include "dataset.hpp"

#include <algorithm>
#include <map>

#include "cmt/errors.hpp"
#include "cmt/io.hpp"
#include "cmt/rng.hpp"

namespace cmt::cli {

Split parse_split(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "val") return Split::val;
  if (name == "test") return Split::test;
  throw ConfigError("unknown split '" + name + "' (train, val, test)");
}

std::vector<std::string> DatasetIndex::class_names() const {
  std::vector<std::string> names;
  for (const auto& c : classes) names.push_back(c.name);
  return names;
}

DatasetIndex ingest(const fs::path& root, std::uint64_t seed) {
  if (!fs::is_directory(root)) throw DatasetError("dataset root " + root.string() + " is not a directory");
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  if (dirs.empty()) throw DatasetError("dataset root " + root.string() + " has no class directories");

  DatasetIndex index;
  index.root = root.string();
  index.seed = seed;
  std::map<std::uint64_t, std::string> seen;  // content hash -> first path
  for (std::size_t k = 0; k < dirs.size(); ++k) {
    const std::string name = dirs[k].filename().string();
    std::vector<fs::path> files = io::list_images(dirs[k]);
    if (files.empty()) throw DatasetError("class '" + name + "' has no images");
    if (files.size() < kMinPerClass) {
      throw DatasetError("class '" + name + "' has " + std::to_string(files.size()) + " images, need at least " +
                         std::to_string(kMinPerClass));
    }
    std::vector<std::string> rel;
    for (const auto& f : files) {
      const std::string r = fs::relative(f, root).generic_string();
      const auto [it, fresh] = seen.emplace(io::fnv1a64(io::read_file(f)), r);
      if (!fresh) throw DatasetError("overlapping file: " + r + " has the same content as " + it->second);
      rel.push_back(r);
    }
    Rng rng(derive_seed(seed, {k}));
    std::shuffle(rel.begin(), rel.end(), rng);
    const std::size_t n = rel.size(), n_val = n / 10, n_test = n / 10;
    ClassSplit cs;
    cs.name = name;
    cs.val.assign(rel.begin(), rel.begin() + n_val);
    cs.test.assign(rel.begin() + n_val, rel.begin() + n_val + n_test);
    cs.train.assign(rel.begin() + n_val + n_test, rel.end());
    index.classes.push_back(std::move(cs));
  }
  return index;
}

nlohmann::ordered_json to_json(const DatasetIndex& index) {
  nlohmann::ordered_json j;
  j["root"] = index.root;
  j["seed"] = index.seed;
  j["classes"] = nlohmann::ordered_json::array();
  for (const auto& c : index.classes) {
    nlohmann::ordered_json cj;
    cj["name"] = c.name;
    cj["train"] = c.train;
    cj["val"] = c.val;
    cj["test"] = c.test;
    j["classes"].push_back(cj);
  }
  return j;
}

DatasetIndex index_from_json(const nlohmann::json& j) {
  try {
    DatasetIndex index;
    index.root = j.at("root").get<std::string>();
    index.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& cj : j.at("classes")) {
      ClassSplit c;
      c.name = cj.at("name").get<std::string>();
      c.train = cj.at("train").get<std::vector<std::string>>();
      c.val = cj.at("val").get<std::vector<std::string>>();
      c.test = cj.at("test").get<std::vector<std::string>>();
      index.classes.push_back(std::move(c));
    }
    return index;
  } catch (const nlohmann::json::exception& e) {
    throw DatasetError(std::string("malformed dataset index: ") + e.what());
  }
}

Tensor load_image(const fs::path& path, std::size_t channels, std::size_t hw) {
  Tensor img = io::read_image(path);
  if (channels == 3) {
    img = io::to_rgb(img);
  } else if (channels == 1 && img.dim(0) == 3) {
    const std::size_t n = img.dim(1) * img.dim(2);
    Tensor gray(Shape{1, img.dim(1), img.dim(2)}, 0.0);
    for (std::size_t i = 0; i < n; ++i) gray[i] = (img[i] + img[n + i] + img[2 * n + i]) / 3.0;
    img = std::move(gray);
  } else if (img.dim(0) != channels) {
    throw DatasetError(path.string() + ": cannot convert " + std::to_string(img.dim(0)) + " channels to " +
                       std::to_string(channels));
  }
  if (img.dim(1) != hw || img.dim(2) != hw) img = io::resize_bilinear(img, hw, hw);
  return img;
}

train::Dataset load_split(const DatasetIndex& index, Split split, std::size_t channels, std::size_t hw) {
  train::Dataset d;
  d.class_names = index.class_names();
  for (std::size_t k = 0; k < index.classes.size(); ++k) {
    const auto& c = index.classes[k];
    const auto& files = split == Split::train ? c.train : split == Split::val ? c.val : c.test;
    for (const auto& rel : files) d.samples.push_back({load_image(fs::path(index.root) / rel, channels, hw), k});
  }
  if (d.samples.empty()) throw DatasetError("selected split is empty");
  return d;
}

std::size_t resolve_hw(std::optional<std::size_t> requested, const model::CmtConfig& cfg,
                       std::optional<std::size_t> patch) {
  auto check = [&](std::size_t hw) {
    if (hw == 0) throw ConfigError("image size must be positive");
    cfg.validate_for(hw, hw);
    if (patch && hw % *patch != 0) {
      throw ConfigError("image size " + std::to_string(hw) + " is not divisible by the FFA patch count " +
                        std::to_string(*patch));
    }
  };
  if (requested) {
    check(*requested);
    return *requested;
  }
  for (std::size_t hw = kDefaultResize; hw > 0; --hw) {
    try {
      check(hw);
      return hw;
    } catch (const ConfigError&) {
    }
  }
  throw ConfigError("no image size up to " + std::to_string(kDefaultResize) + " fits the model");
}

}  // namespace cmt::cli
