#pragma once

// Synthetic cross-view world: colored disk landmarks on a flat ground plane, rendered as
// top-down aerial tiles and as ground-level 360 degree panoramas.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "transgeo/dataset.hpp"
#include "transgeo/image.hpp"

namespace transgeo {

struct Rgb {
  float r = 0, g = 0, b = 0;
  bool operator==(const Rgb&) const = default;
};

struct SceneSpec {
  std::uint64_t seed = 0;
  double world_side_m = 512.0;
  int landmarks = 64;
  double radius_min_m = 2.0;
  double radius_max_m = 5.0;
  double height_min_m = 3.0;
  double height_max_m = 15.0;
  int palette_size = 12;

  void validate() const {
    if (landmarks < 1) throw std::invalid_argument("scene needs at least one landmark");
    if (!(world_side_m > 0)) throw std::invalid_argument("world side must be positive");
    if (!(radius_min_m > 0 && radius_max_m >= radius_min_m)) throw std::invalid_argument("bad landmark radius range");
    if (!(height_min_m > 0 && height_max_m >= height_min_m)) throw std::invalid_argument("bad landmark height range");
    if (palette_size < 1) throw std::invalid_argument("palette needs at least one color");
  }
};

struct Landmark {
  double x = 0, y = 0;  // meters east / north of the world's south-west corner
  double radius = 0;
  double height = 0;
  int color_index = 0;
  Rgb color;

  bool operator==(const Landmark&) const = default;
};

struct World {
  double side_m = 0;
  std::vector<Landmark> landmarks;
  std::vector<Rgb> palette;
  Rgb ground{0.42f, 0.40f, 0.36f};
  Rgb sky{0.62f, 0.74f, 0.90f};
};

/// Evenly spaced hues alternating between two brightness levels.
inline std::vector<Rgb> make_palette(int n) {
  std::vector<Rgb> out;
  for (int i = 0; i < n; ++i) {
    const double h = 6.0 * double(i) / double(n);
    const double v = i % 2 == 0 ? 0.95 : 0.7;
    const double s = 0.85;
    const double c = v * s;
    const double x = c * (1 - std::abs(std::fmod(h, 2.0) - 1));
    const double m = v - c;
    double r = 0, g = 0, b = 0;
    switch (static_cast<int>(h)) {
      case 0: r = c, g = x; break;
      case 1: r = x, g = c; break;
      case 2: g = c, b = x; break;
      case 3: g = x, b = c; break;
      case 4: r = x, b = c; break;
      default: r = c, b = x; break;
    }
    out.push_back({float(r + m), float(g + m), float(b + m)});
  }
  return out;
}

/// Landmarks uniform over the square world; everything derives from spec.seed.
inline World generate_world(const SceneSpec& spec) {
  spec.validate();
  World w;
  w.side_m = spec.world_side_m;
  w.palette = make_palette(spec.palette_size);
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> pos(0.0, spec.world_side_m);
  std::uniform_real_distribution<double> rad(spec.radius_min_m, spec.radius_max_m);
  std::uniform_real_distribution<double> hgt(spec.height_min_m, spec.height_max_m);
  std::uniform_int_distribution<int> col(0, spec.palette_size - 1);
  for (int i = 0; i < spec.landmarks; ++i) {
    Landmark l;
    l.x = pos(rng);
    l.y = pos(rng);
    l.radius = rad(rng);
    l.height = hgt(rng);
    l.color_index = col(rng);
    l.color = w.palette[l.color_index];
    w.landmarks.push_back(l);
  }
  return w;
}

/// Square ground footprint in world meters.
struct TileGeometry {
  double cx = 0, cy = 0;
  double extent_m = 0;
  int side_px = 0;
};

inline void paint(Image& img, int r, int c, const Rgb& rgb) {
  img.at(r, c, 0) = rgb.r;
  img.at(r, c, 1) = rgb.g;
  img.at(r, c, 2) = rgb.b;
}

inline bool in_tile(const Landmark& l, const TileGeometry& t) {
  return std::abs(l.x - t.cx) <= t.extent_m / 2 && std::abs(l.y - t.cy) <= t.extent_m / 2;
}

/// Orthographic top-down render, north up. Landmarks are filled disks drawn in list order.
inline Image render_aerial(const World& world, const TileGeometry& tile) {
  Image img(tile.side_px, tile.side_px, 3);
  const double mpp = tile.extent_m / tile.side_px;
  for (int r = 0; r < tile.side_px; ++r)
    for (int c = 0; c < tile.side_px; ++c) paint(img, r, c, world.ground);
  const double x0 = tile.cx - tile.extent_m / 2;
  const double y1 = tile.cy + tile.extent_m / 2;
  for (const auto& l : world.landmarks) {
    if (l.x + l.radius < x0 || l.x - l.radius > x0 + tile.extent_m) continue;
    if (l.y + l.radius < y1 - tile.extent_m || l.y - l.radius > y1) continue;
    const int c_lo = std::max(0, int(std::floor((l.x - l.radius - x0) / mpp)));
    const int c_hi = std::min(tile.side_px - 1, int(std::ceil((l.x + l.radius - x0) / mpp)));
    const int r_lo = std::max(0, int(std::floor((y1 - l.y - l.radius) / mpp)));
    const int r_hi = std::min(tile.side_px - 1, int(std::ceil((y1 - l.y + l.radius) / mpp)));
    for (int r = r_lo; r <= r_hi; ++r) {
      for (int c = c_lo; c <= c_hi; ++c) {
        const double wx = x0 + (c + 0.5) * mpp;
        const double wy = y1 - (r + 0.5) * mpp;
        if ((wx - l.x) * (wx - l.x) + (wy - l.y) * (wy - l.y) <= l.radius * l.radius) paint(img, r, c, l.color);
      }
    }
  }
  return img;
}

struct PanoramaView {
  double heading_offset_deg = 0.0;
  double fov_deg = 360.0;
  double view_range_m = 32.0;
  double camera_height_m = 2.0;
};

/// Clockwise-from-north azimuth of (dx, dy) in degrees, [0, 360).
inline double azimuth_deg(double dx, double dy) {
  double a = std::atan2(dx, dy) * 180.0 / std::numbers::pi;
  return a < 0 ? a + 360.0 : a;
}

inline bool in_view(const Landmark& l, double x, double y, const PanoramaView& view) {
  const double d = std::hypot(l.x - x, l.y - y);
  return d <= view.view_range_m;
}

/// Ground-level panorama at (x, y). Column j looks along azimuth heading + fov * j / w. The
/// upper half spans elevations 0..90 degrees above the horizon, the lower half 0..90 below.
/// Each landmark in range is a vertical bar whose angular width and height shrink with
/// distance; per column only the nearest covering landmark is drawn.
inline Image render_panorama(const World& world, double x, double y, int h, int w, const PanoramaView& view) {
  Image img(h, w, 3);
  const int horizon = h / 2;
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) paint(img, r, c, r < horizon ? world.sky : world.ground);
  struct Visible {
    const Landmark* l;
    double dist, az, half_width;
  };
  std::vector<Visible> visible;
  for (const auto& l : world.landmarks) {
    if (!in_view(l, x, y, view)) continue;
    const double d = std::hypot(l.x - x, l.y - y);
    const double half = d > l.radius ? std::asin(l.radius / d) * 180.0 / std::numbers::pi : 90.0;
    visible.push_back({&l, d, azimuth_deg(l.x - x, l.y - y), half});
  }
  const double rows_per_deg_up = double(horizon) / 90.0;
  const double rows_per_deg_down = double(h - horizon) / 90.0;
  for (int c = 0; c < w; ++c) {
    const double az = view.heading_offset_deg + view.fov_deg * c / w;
    const Visible* best = nullptr;
    for (const auto& v : visible) {
      double diff = std::fmod(az - v.az, 360.0);
      if (diff < -180) diff += 360;
      if (diff >= 180) diff -= 360;
      if (std::abs(diff) <= v.half_width && (!best || v.dist < best->dist)) best = &v;
    }
    if (!best) continue;
    const double d = std::max(best->dist, 1e-3);
    const double up = std::atan(best->l->height / d) * 180.0 / std::numbers::pi;
    const double down = std::atan(view.camera_height_m / d) * 180.0 / std::numbers::pi;
    const int top = std::max(0, horizon - int(std::lround(up * rows_per_deg_up)));
    const int bottom = std::min(h, horizon + int(std::lround(down * rows_per_deg_down)));
    for (int r = top; r < bottom; ++r) paint(img, r, c, best->l->color);
  }
  return img;
}

/// Circular column shift: output column j = input column (j + shift) mod w.
inline Image roll_columns(const Image& img, int shift) {
  Image out(img.height, img.width, img.channels);
  for (int r = 0; r < img.height; ++r)
    for (int c = 0; c < img.width; ++c)
      for (int ch = 0; ch < img.channels; ++ch)
        out.at(r, c, ch) = img.at(r, ((c + shift) % img.width + img.width) % img.width, ch);
  return out;
}

inline Image crop_columns(const Image& img, int cols) {
  Image out(img.height, cols, img.channels);
  for (int r = 0; r < img.height; ++r)
    for (int c = 0; c < cols; ++c)
      for (int ch = 0; ch < img.channels; ++ch) out.at(r, c, ch) = img.at(r, c, ch);
  return out;
}

struct EmitOptions {
  std::size_t n = 128;
  PlacementMode mode = PlacementMode::aligned;
  bool unknown_orientation = false;
  double fov_deg = 360.0;
  int street_height = 64;
  int street_width = 256;
  int aerial_px = 128;
  double tile_extent_m = 64.0;
  double view_range_m = 32.0;
  double test_fraction = 0.0;
};

/// Tile pitch: adjacent tiles touch in aligned mode and overlap by half in offset mode.
inline double tile_spacing(const EmitOptions& opts) {
  return opts.mode == PlacementMode::aligned ? opts.tile_extent_m : opts.tile_extent_m / 2;
}

/// Scene large enough for `opts.n` tiles on a square lattice, with about
/// `landmarks_per_tile` landmarks per tile footprint.
inline SceneSpec default_scene(const EmitOptions& opts, std::uint64_t seed, double landmarks_per_tile = 6.0) {
  SceneSpec s;
  s.seed = seed;
  const auto cols = static_cast<std::size_t>(std::ceil(std::sqrt(double(opts.n))));
  s.world_side_m = double(cols) * tile_spacing(opts) + opts.tile_extent_m;
  const double area_tiles = (s.world_side_m * s.world_side_m) / (opts.tile_extent_m * opts.tile_extent_m);
  s.landmarks = std::max(1, int(std::lround(landmarks_per_tile * area_tiles)));
  return s;
}

inline GeoLocation world_to_geo(const World& w, double x, double y) {
  return {(y - w.side_m / 2) * kDegreesPerMeter, (x - w.side_m / 2) * kDegreesPerMeter};
}

/// Renders `opts.n` street/aerial pairs into out_dir and writes the index.
///
/// Tiles sit on a square lattice. In offset mode the query is drawn uniformly from the
/// lattice cell of its tile, which keeps that tile the nearest one, and neighbors are all
/// other tiles whose footprint covers the query.
inline DatasetIndex emit_dataset(const SceneSpec& spec, const EmitOptions& opts, const std::filesystem::path& out_dir) {
  if (opts.n < 1) throw DatasetError("dataset needs at least one sample");
  if (!(opts.fov_deg > 0 && opts.fov_deg <= 360)) throw DatasetError("fov must lie in (0, 360]");
  const World world = generate_world(spec);
  const double spacing = tile_spacing(opts);
  const auto cols = static_cast<std::size_t>(std::ceil(std::sqrt(double(opts.n))));
  const double margin = opts.tile_extent_m / 2;
  if (margin * 2 + double(cols) * spacing > spec.world_side_m + 1e-9) {
    throw DatasetError("world too small for " + std::to_string(opts.n) + " tiles");
  }
  std::mt19937_64 rng(spec.seed ^ 0x9E3779B97F4A7C15ull);
  std::uniform_real_distribution<double> cell(-spacing / 2, spacing / 2);
  std::uniform_int_distribution<int> roll(0, opts.street_width - 1);

  DatasetIndex index;
  index.mode = opts.mode;
  index.unknown_orientation = opts.unknown_orientation;
  index.fov_deg = opts.fov_deg;
  index.street_height = opts.street_height;
  index.street_width = opts.fov_deg < 360 ? int(std::lround(opts.street_width * opts.fov_deg / 360.0)) : opts.street_width;
  index.aerial_px = opts.aerial_px;
  index.root = out_dir;

  struct Placement {
    double cx, cy, qx, qy;
    int roll;
  };
  std::vector<Placement> place(opts.n);
  for (std::size_t i = 0; i < opts.n; ++i) {
    auto& p = place[i];
    p.cx = margin + (double(i % cols) + 0.5) * spacing;
    p.cy = margin + (double(i / cols) + 0.5) * spacing;
    p.qx = p.cx;
    p.qy = p.cy;
    if (opts.mode == PlacementMode::offset) {
      p.qx += cell(rng);
      p.qy += cell(rng);
    }
    p.roll = opts.unknown_orientation ? roll(rng) : 0;
  }
  std::vector<std::size_t> order(opts.n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<bool> is_test(opts.n, false);
  const auto n_test = static_cast<std::size_t>(std::floor(opts.test_fraction * double(opts.n)));
  for (std::size_t k = 0; k < n_test; ++k) is_test[order[k]] = true;

  std::filesystem::create_directories(out_dir / "street");
  std::filesystem::create_directories(out_dir / "aerial");
  auto id_of = [](std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%06zu", i);
    return std::string(buf);
  };
  for (std::size_t i = 0; i < opts.n; ++i) {
    const auto& p = place[i];
    SampleRecord r;
    r.id = id_of(i);
    r.street = "street/" + r.id + ".ppm";
    r.aerial = "aerial/" + r.id + ".ppm";
    r.query = world_to_geo(world, p.qx, p.qy);
    r.tile.center = world_to_geo(world, p.cx, p.cy);
    r.tile.ground_extent_m = opts.tile_extent_m;
    r.tile.side_px = opts.aerial_px;
    r.off_x_m = p.qx - p.cx;
    r.off_y_m = p.qy - p.cy;
    r.split = is_test[i] ? "test" : "train";
    index.records.push_back(std::move(r));
  }
  for (std::size_t i = 0; i < opts.n; ++i) {
    for (std::size_t j = 0; j < opts.n; ++j) {
      if (i != j && covers(index.records[i].query, index.records[j].tile)) {
        index.records[i].neighbors.push_back(index.records[j].id);
      }
    }
  }
  PanoramaView view;
  view.view_range_m = opts.view_range_m;
  for (std::size_t i = 0; i < opts.n; ++i) {
    const auto& p = place[i];
    const TileGeometry tile{p.cx, p.cy, opts.tile_extent_m, opts.aerial_px};
    save_ppm(render_aerial(world, tile), (out_dir / index.records[i].aerial).string());
    Image pano = render_panorama(world, p.qx, p.qy, opts.street_height, opts.street_width, view);
    if (p.roll) pano = roll_columns(pano, p.roll);
    if (index.street_width != opts.street_width) pano = crop_columns(pano, index.street_width);
    save_ppm(pano, (out_dir / index.records[i].street).string());
  }
  save_index(index, out_dir);
  return index;
}

}  // namespace transgeo
