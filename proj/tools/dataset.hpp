#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cmt/model.hpp"
#include "cmt/training.hpp"

namespace cmt::cli {

namespace fs = std::filesystem;

inline constexpr std::size_t kDefaultResize = 360;
inline constexpr std::size_t kMinPerClass = 10;

enum class Split { train, val, test };
Split parse_split(const std::string& name);

struct ClassSplit {
  std::string name;
  std::vector<std::string> train, val, test;  // paths relative to the root
};

struct DatasetIndex {
  std::string root;
  std::uint64_t seed = 0;
  std::vector<ClassSplit> classes;

  std::vector<std::string> class_names() const;
};

// One subdirectory per class, >= kMinPerClass images each. Per class: seeded
// shuffle, then val = n/10, test = n/10, train = the rest. Identical file
// contents anywhere in the tree are a DatasetError.
DatasetIndex ingest(const fs::path& root, std::uint64_t seed);

nlohmann::ordered_json to_json(const DatasetIndex& index);
DatasetIndex index_from_json(const nlohmann::json& j);

// Reads one split, converting to the model's channel count and resizing to hw x hw.
train::Dataset load_split(const DatasetIndex& index, Split split, std::size_t channels, std::size_t hw);

// Reads, converts and resizes one image.
Tensor load_image(const fs::path& path, std::size_t channels, std::size_t hw);

// Explicit sizes must satisfy the model (and FFA patch, when given) or raise
// ConfigError. Without one, the largest valid size <= 360 is used.
std::size_t resolve_hw(std::optional<std::size_t> requested, const model::CmtConfig& cfg,
                       std::optional<std::size_t> patch);

}  // namespace cmt::cli
