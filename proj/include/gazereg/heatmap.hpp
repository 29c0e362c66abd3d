#ifndef GAZEREG_HEATMAP_HPP
#define GAZEREG_HEATMAP_HPP

#include <cmath>
#include <cstdint>
#include <string>

#include "gazereg/gaze_ingest.hpp"
#include "gazereg/image.hpp"

namespace gazereg {

enum class HeatmapKind : std::uint32_t { continuous = 0, binary = 1, distribution = 2 };

template <typename Scalar>
struct HeatmapT {
  Plane<Scalar> values;  // height x width, non-negative
  int frame_id = 0;
  HeatmapKind kind = HeatmapKind::continuous;
  int excluded = 0;  // out-of-bounds samples skipped while splatting

  int width() const { return static_cast<int>(values.cols()); }
  int height() const { return static_cast<int>(values.rows()); }
};

using Heatmap = HeatmapT<double>;

/// Sum of unnormalized isotropic Gaussians exp(-r^2 / 2 sigma^2), one per
/// in-bounds sample, divided by the number of contributing samples. Pixel
/// (x, y) sits at integer coordinates. An empty window gives all zeros.
template <typename Scalar = double>
HeatmapT<Scalar> gaussian_splat(const AlignmentWindow& window, int width, int height, Scalar sigma_px) {
  if (!(sigma_px > Scalar(0))) throw ParameterError("gaussian_splat: sigma_px must be > 0");
  if (width <= 0 || height <= 0) throw ShapeError("gaussian_splat: empty image size");
  HeatmapT<Scalar> h;
  h.frame_id = window.frame_id;
  h.kind = HeatmapKind::continuous;
  h.values = Plane<Scalar>::Zero(height, width);

  using Row = Eigen::Array<Scalar, 1, Eigen::Dynamic>;
  using Col = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  const Row xs = Row::LinSpaced(width, Scalar(0), Scalar(width - 1));
  const Col ys = Col::LinSpaced(height, Scalar(0), Scalar(height - 1));
  const Scalar inv_two_var = Scalar(1) / (Scalar(2) * sigma_px * sigma_px);

  int used = 0;
  for (const auto& s : window.selected) {
    if (!s.in_bounds(width, height)) {
      ++h.excluded;
      continue;
    }
    // Separable: exp(-(dx^2 + dy^2) k) = exp(-dy^2 k) * exp(-dx^2 k).
    const Row gx = (-(xs - Scalar(s.x)).square() * inv_two_var).exp();
    const Col gy = (-(ys - Scalar(s.y)).square() * inv_two_var).exp();
    h.values += (gy.matrix() * gx.matrix()).array();
    ++used;
  }
  if (used > 1) h.values /= Scalar(used);
  return h;
}

/// Relative threshold: 1 where value >= tau * max, else 0.
template <typename Scalar>
HeatmapT<Scalar> binarize(const HeatmapT<Scalar>& h, Scalar tau) {
  if (h.kind != HeatmapKind::continuous) throw ParameterError("binarize: expects a continuous heatmap");
  HeatmapT<Scalar> out = h;
  out.kind = HeatmapKind::binary;
  const Scalar peak = h.values.size() ? h.values.maxCoeff() : Scalar(0);
  if (!(peak > Scalar(0))) {
    out.values.setZero();
    return out;
  }
  if (!(tau > Scalar(0))) throw ParameterError("binarize: tau must be > 0");
  out.values = (h.values >= tau * peak).template cast<Scalar>();
  return out;
}

/// Peak-normalized weights h / max(h); all zeros when the heatmap is empty.
template <typename Scalar>
Plane<Scalar> normalized_weights(const Plane<Scalar>& values) {
  const Scalar peak = values.size() ? values.maxCoeff() : Scalar(0);
  if (!(peak > Scalar(0))) return Plane<Scalar>::Zero(values.rows(), values.cols());
  return values / peak;
}

/// Highlight colour: saturated red for 3-channel images, full intensity for others.
template <typename Scalar>
Scalar highlight_value(int channel, int channels) {
  if (channels == 3) return channel == 0 ? Scalar(1) : Scalar(0);
  return Scalar(1);
}

/// out = (1 - alpha * w) * base + alpha * w * highlight, w = h / max(h).
template <typename Scalar>
ImageT<Scalar> overlay_weights(const ImageT<Scalar>& base, const Plane<Scalar>& weights, Scalar alpha) {
  if (!(alpha >= Scalar(0) && alpha <= Scalar(1))) throw ParameterError("overlay: alpha must lie in [0, 1]");
  if (base.planes.empty()) throw ShapeError("overlay: base image has no channels");
  require_same_size(base.planes.front(), weights, "overlay");
  ImageT<Scalar> out = base;
  if (alpha == Scalar(0)) return out;
  const Plane<Scalar> aw = alpha * weights;
  for (int c = 0; c < base.channels(); ++c) {
    const Scalar hl = highlight_value<Scalar>(c, base.channels());
    auto& p = out.planes[static_cast<std::size_t>(c)];
    p = (Scalar(1) - aw) * base.planes[static_cast<std::size_t>(c)] + aw * hl;
  }
  return out;
}

template <typename Scalar>
ImageT<Scalar> overlay(const ImageT<Scalar>& base, const HeatmapT<Scalar>& h, Scalar alpha) {
  if (base.planes.empty()) throw ShapeError("overlay: base image has no channels");
  require_same_size(base.planes.front(), h.values, "overlay");
  return overlay_weights(base, normalized_weights(h.values), alpha);
}

/// GHM1 container: "GHM1", u32 width, u32 height, u32 kind, u32 reserved,
/// then width * height little-endian f32 values, row-major.
std::string encode_ghm1(const Plane<float>& values, HeatmapKind kind);
Plane<float> decode_ghm1(std::string_view bytes, HeatmapKind* kind = nullptr);
void write_heatmap(const std::string& path, const Heatmap& h);
Heatmap read_heatmap(const std::string& path);

}  // namespace gazereg

#endif  // GAZEREG_HEATMAP_HPP
