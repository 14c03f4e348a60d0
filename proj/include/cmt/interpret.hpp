#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "cmt/autodiff.hpp"
#include "cmt/model.hpp"
#include "cmt/tensor.hpp"

namespace cmt::interp {

struct CamMap {
  Tensor heat;         // [h',w'] in [0,1]
  Tensor overlay;      // [h,w], heat nearest-upsampled to the input size
  Tensor activations;  // [c,h',w'] feature map
  Tensor gradient;     // [c,h',w'] d(score)/d(activations)
  std::size_t target = 0;
  double raw_min = 0.0, raw_max = 0.0;  // of relu(sum_c w_c A_c) before normalization
};

// relu(sum_c mean(grad_c) * act_c) over [c,h,w] inputs.
Tensor cam_raw(const Tensor& activations, const Tensor& gradient);

// Min-max to [0,1]. A constant map becomes all zeros when it is zero and all
// ones otherwise, so the maximum is 1 unless the map is identically 0.
Tensor normalize_heat(const Tensor& raw);

// Nearest-neighbour resize of an [h',w'] map.
Tensor upsample_nearest(const Tensor& map, std::size_t h, std::size_t w);

// Backward from the scalar `score` and weight `features` by its gradient.
// `features` must lie upstream of `score` and require a gradient.
CamMap cam_for(Var features, Var score, std::size_t out_h, std::size_t out_w, std::size_t target);

// CAM of the pre-sigmoid score of `target` over the CIFE output of `image` [c,h,w].
// ParameterError when target >= classes.
CamMap grad_cam(const Tensor& image, const model::ParamMap& params, const model::CmtConfig& cfg,
                std::size_t target);

// 0.5 * grayscale(image) + 0.5 * colormap(heat), as an RGB image [3,h,w] in [0,1].
Tensor render_overlay(const CamMap& cam, const Tensor& image);

nlohmann::ordered_json sidecar(const CamMap& cam, const std::string& input);

// Writes the overlay (format by extension) and `<stem>.json` next to it.
void write_overlay(const std::filesystem::path& path, const CamMap& cam, const Tensor& image,
                   const std::string& input);

}  // namespace cmt::interp
