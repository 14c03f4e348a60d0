#include "cmt/interpret.hpp"

#include <algorithm>
#include <cmath>

#include "cmt/colormap.hpp"
#include "cmt/errors.hpp"
#include "cmt/io.hpp"

namespace cmt::interp {

Tensor cam_raw(const Tensor& activations, const Tensor& gradient) {
  if (activations.rank() != 3 || activations.shape() != gradient.shape()) {
    throw DimensionError("cam: activations " + shape_string(activations.shape()) + " vs gradient " +
                         shape_string(gradient.shape()));
  }
  const std::size_t c = activations.dim(0), h = activations.dim(1), w = activations.dim(2), hw = h * w;
  Tensor out(Shape{h, w}, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double weight = 0.0;
    for (std::size_t i = 0; i < hw; ++i) weight += gradient[ch * hw + i];
    weight /= static_cast<double>(hw);
    for (std::size_t i = 0; i < hw; ++i) out[i] += weight * activations[ch * hw + i];
  }
  for (double& v : out.data()) v = std::max(v, 0.0);
  return out;
}

Tensor normalize_heat(const Tensor& raw) {
  Tensor out(raw.shape(), 0.0);
  if (raw.empty()) return out;
  const auto [lo, hi] = std::minmax_element(raw.data().begin(), raw.data().end());
  const double mn = *lo, mx = *hi;
  if (mx - mn == 0.0) {
    if (mx != 0.0) std::fill(out.data().begin(), out.data().end(), 1.0);
    return out;
  }
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = (raw[i] - mn) / (mx - mn);
  return out;
}

Tensor upsample_nearest(const Tensor& map, std::size_t h, std::size_t w) {
  if (map.rank() != 2) throw DimensionError("upsample_nearest: expected [h,w], got " + shape_string(map.shape()));
  const std::size_t mh = map.dim(0), mw = map.dim(1);
  Tensor out(Shape{h, w}, 0.0);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) out.at({i, j}) = map.at({i * mh / h, j * mw / w});
  return out;
}

CamMap cam_for(Var features, Var score, std::size_t out_h, std::size_t out_w, std::size_t target) {
  if (score.value().size() != 1) throw DimensionError("cam: score must be a scalar");
  Tape& tape = score.tape();
  tape.backward(score);
  CamMap cam;
  cam.target = target;
  cam.activations = features.value();
  cam.gradient = tape.grad(features);
  const Tensor raw = cam_raw(cam.activations, cam.gradient);
  const auto [lo, hi] = std::minmax_element(raw.data().begin(), raw.data().end());
  cam.raw_min = *lo;
  cam.raw_max = *hi;
  cam.heat = normalize_heat(raw);
  cam.overlay = upsample_nearest(cam.heat, out_h, out_w);
  return cam;
}

CamMap grad_cam(const Tensor& image, const model::ParamMap& params, const model::CmtConfig& cfg,
                std::size_t target) {
  if (target >= cfg.classes) {
    throw ParameterError("grad_cam: class " + std::to_string(target) + " out of range for " +
                         std::to_string(cfg.classes) + " classes");
  }
  if (image.rank() != 3) throw DimensionError("grad_cam: expected [c,h,w] image, got " + shape_string(image.shape()));
  cfg.validate_for(image.dim(1), image.dim(2));
  Tape tape;
  const model::BoundParams p = model::bind(tape, params, false);
  // A tracked image makes every downstream node, the feature map included, carry a gradient.
  const model::Forward f = model::cmt_forward(tape.variable(image), p, cfg, model::Mode::eval, nullptr);
  return cam_for(f.features, pick(f.logits, target), image.dim(1), image.dim(2), target);
}

Tensor render_overlay(const CamMap& cam, const Tensor& image) {
  if (image.rank() != 3) throw DimensionError("render_overlay: expected [c,h,w] image");
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2), hw = h * w;
  if (cam.overlay.shape() != Shape{h, w}) {
    throw DimensionError("render_overlay: heat " + shape_string(cam.overlay.shape()) + " vs image " +
                         shape_string(image.shape()));
  }
  Tensor out(Shape{3, h, w}, 0.0);
  for (std::size_t i = 0; i < hw; ++i) {
    double gray = 0.0;
    for (std::size_t ch = 0; ch < c; ++ch) gray += image[ch * hw + i];
    gray /= static_cast<double>(c);
    const double heat = std::clamp(cam.overlay[i], 0.0, 1.0);
    const auto& rgb = kWarmColormap[static_cast<std::size_t>(std::lround(heat * 255.0))];
    for (std::size_t ch = 0; ch < 3; ++ch) out[ch * hw + i] = 0.5 * gray + 0.5 * (rgb[ch] / 255.0);
  }
  return out;
}

nlohmann::ordered_json sidecar(const CamMap& cam, const std::string& input) {
  nlohmann::ordered_json j;
  j["input"] = input;
  j["class"] = cam.target;
  j["min"] = cam.raw_min;
  j["max"] = cam.raw_max;
  return j;
}

void write_overlay(const std::filesystem::path& path, const CamMap& cam, const Tensor& image,
                   const std::string& input) {
  Tensor rgb = render_overlay(cam, image);
  if (path.extension() == ".pgm") {
    const std::size_t h = rgb.dim(1), w = rgb.dim(2), hw = h * w;
    Tensor gray(Shape{1, h, w}, 0.0);
    for (std::size_t i = 0; i < hw; ++i) gray[i] = (rgb[i] + rgb[hw + i] + rgb[2 * hw + i]) / 3.0;
    rgb = std::move(gray);
  }
  io::write_image(path, rgb);
  std::filesystem::path meta = path;
  meta.replace_extension(".json");
  io::write_file_atomic(meta, sidecar(cam, input).dump() + "\n");
}

}  // namespace cmt::interp
