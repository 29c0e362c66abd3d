#ifndef GAZEREG_IMAGE_HPP
#define GAZEREG_IMAGE_HPP

#include <Eigen/Dense>

#include <vector>

#include "gazereg/errors.hpp"

namespace gazereg {

/// Single image plane. Rows index y (height), columns index x (width).
template <typename Scalar>
using Plane = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

/// Planar multi-channel image. Channel 0 is red when there are three channels.
template <typename Scalar>
struct ImageT {
  std::vector<Plane<Scalar>> planes;

  ImageT() = default;
  ImageT(int width, int height, int channels, Scalar fill = Scalar(0))
      : planes(static_cast<std::size_t>(channels), Plane<Scalar>::Constant(height, width, fill)) {}

  int channels() const { return static_cast<int>(planes.size()); }
  int width() const { return planes.empty() ? 0 : static_cast<int>(planes.front().cols()); }
  int height() const { return planes.empty() ? 0 : static_cast<int>(planes.front().rows()); }

  Scalar& operator()(int c, int y, int x) { return planes[static_cast<std::size_t>(c)](y, x); }
  Scalar operator()(int c, int y, int x) const { return planes[static_cast<std::size_t>(c)](y, x); }

  template <typename Other>
  ImageT<Other> cast() const {
    ImageT<Other> out;
    out.planes.reserve(planes.size());
    for (const auto& p : planes) out.planes.push_back(p.template cast<Other>());
    return out;
  }

  /// Channel mean; the grayscale view used by flow estimation.
  Plane<Scalar> gray() const {
    if (planes.empty()) throw ShapeError("gray(): image has no channels");
    Plane<Scalar> g = planes.front();
    for (std::size_t c = 1; c < planes.size(); ++c) g += planes[c];
    return g / Scalar(planes.size());
  }
};

using Image = ImageT<double>;
using ImageF = ImageT<float>;

template <typename A, typename B>
void require_same_size(const A& a, const B& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(what) + ": size mismatch");
}

}  // namespace gazereg

#endif  // GAZEREG_IMAGE_HPP
