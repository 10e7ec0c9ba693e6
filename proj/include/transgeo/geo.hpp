#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <utility>

#include "transgeo/image.hpp"

namespace transgeo {

inline constexpr double kEarthRadiusM = 6371000.0;

/// Degrees of latitude per meter on the spherical earth model.
inline constexpr double kDegreesPerMeter = 180.0 / (std::numbers::pi * kEarthRadiusM);

struct GeoLocation {
  double lat = 0.0;  // degrees, [-90, 90]
  double lon = 0.0;  // degrees, [-180, 180)

  bool operator==(const GeoLocation&) const = default;
};

inline void validate(const GeoLocation& g) {
  if (!(g.lat >= -90.0 && g.lat <= 90.0) || !(g.lon >= -180.0 && g.lon < 180.0)) {
    throw std::invalid_argument("geolocation out of range");
  }
}

struct AerialTile {
  GeoLocation center;
  double ground_extent_m = 0.0;  // side length of the covered square
  int side_px = 0;
};

inline double wrap_lon_deg(double d) {
  d = std::fmod(d + 180.0, 360.0);
  if (d < 0) d += 360.0;
  return d - 180.0;
}

/// Haversine great-circle distance in meters.
inline double geodesic_m(const GeoLocation& a, const GeoLocation& b) {
  constexpr double rad = std::numbers::pi / 180.0;
  const double dlat = (b.lat - a.lat) * rad;
  const double dlon = (b.lon - a.lon) * rad;
  const double s1 = std::sin(dlat / 2);
  const double s2 = std::sin(dlon / 2);
  double h = s1 * s1 + std::cos(a.lat * rad) * std::cos(b.lat * rad) * s2 * s2;
  h = std::min(1.0, h);
  return 2.0 * kEarthRadiusM * std::asin(std::sqrt(h));
}

/// Equirectangular (east, north) offset of `q` from `origin` in meters.
inline std::pair<double, double> local_offset_m(const GeoLocation& origin, const GeoLocation& q) {
  constexpr double rad = std::numbers::pi / 180.0;
  const double east = wrap_lon_deg(q.lon - origin.lon) * rad * kEarthRadiusM * std::cos(origin.lat * rad);
  const double north = (q.lat - origin.lat) * rad * kEarthRadiusM;
  return {east, north};
}

/// True iff `q` lies in the tile's closed square footprint.
inline bool covers(const GeoLocation& q, const AerialTile& tile) {
  if (!(tile.ground_extent_m > 0.0)) throw std::invalid_argument("tile extent must be positive");
  const auto [e, n] = local_offset_m(tile.center, q);
  const double half = tile.ground_extent_m / 2.0;
  return std::abs(e) <= half && std::abs(n) <= half;
}

/// Polar warp of a square aerial image around pixel-space point (cx, cy).
///
/// Output row i samples radius (A/2)(out_h - i)/out_h, column j the azimuth 2*pi*j/out_w
/// measured clockwise from north (column 0 = up in the aerial image).
inline Image polar_transform_at(const Image& aerial, double cx, double cy, int out_h, int out_w) {
  if (aerial.height != aerial.width) throw std::invalid_argument("polar transform needs a square image");
  if (!(cx >= 0 && cx <= aerial.width && cy >= 0 && cy <= aerial.height)) {
    throw std::invalid_argument("polar center outside the image");
  }
  const double half = aerial.width / 2.0;
  Image out(out_h, out_w, aerial.channels);
  for (int i = 0; i < out_h; ++i) {
    const double r = half * double(out_h - i) / out_h;
    for (int j = 0; j < out_w; ++j) {
      const double theta = 2.0 * std::numbers::pi * j / out_w;
      const double x = cx + r * std::sin(theta);
      const double y = cy - r * std::cos(theta);
      for (int c = 0; c < aerial.channels; ++c) out.at(i, j, c) = sample_bilinear(aerial, x, y, c);
    }
  }
  return out;
}

inline Image polar_transform(const Image& aerial, int out_h, int out_w) {
  return polar_transform_at(aerial, aerial.width / 2.0, aerial.height / 2.0, out_h, out_w);
}

}  // namespace transgeo
