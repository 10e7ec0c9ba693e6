#pragma once

// Sample records, dataset index and its on-disk form (index.csv + meta.txt).

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "transgeo/geo.hpp"

namespace transgeo {

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class PlacementMode { aligned, offset };

inline const char* to_string(PlacementMode m) { return m == PlacementMode::aligned ? "aligned" : "offset"; }

inline PlacementMode parse_placement_mode(const std::string& s) {
  if (s == "aligned") return PlacementMode::aligned;
  if (s == "offset") return PlacementMode::offset;
  throw DatasetError("unknown placement mode '" + s + "'");
}

struct SampleRecord {
  std::string id;
  std::string street;  // path relative to the dataset root
  std::string aerial;
  GeoLocation query;
  AerialTile tile;
  double off_x_m = 0.0;  // east offset of the query from the tile center
  double off_y_m = 0.0;  // north offset
  std::string split = "train";
  std::vector<std::string> neighbors;  // ids of other tiles covering this query

  bool operator==(const SampleRecord& o) const {
    return id == o.id && street == o.street && aerial == o.aerial && query == o.query &&
           tile.center == o.tile.center && tile.ground_extent_m == o.tile.ground_extent_m &&
           tile.side_px == o.tile.side_px && off_x_m == o.off_x_m && off_y_m == o.off_y_m &&
           split == o.split && neighbors == o.neighbors;
  }
};

struct DatasetIndex {
  std::vector<SampleRecord> records;
  PlacementMode mode = PlacementMode::aligned;
  bool unknown_orientation = false;
  double fov_deg = 360.0;
  int street_height = 0;
  int street_width = 0;
  int aerial_px = 0;
  std::filesystem::path root;

  std::size_t size() const { return records.size(); }

  std::size_t position_of(const std::string& id) const {
    if (by_id_.size() != records.size()) rebuild();
    auto it = by_id_.find(id);
    if (it == by_id_.end()) throw DatasetError("unknown sample id " + id);
    return it->second;
  }

  /// Symmetric closure of the per-query covering relation.
  bool are_neighbors(std::size_t i, std::size_t j) const {
    if (i == j) return false;
    const auto& a = records.at(i);
    const auto& b = records.at(j);
    return std::find(a.neighbors.begin(), a.neighbors.end(), b.id) != a.neighbors.end() ||
           std::find(b.neighbors.begin(), b.neighbors.end(), a.id) != b.neighbors.end();
  }

  /// Positions of records in `split` ("" selects all).
  std::vector<std::size_t> select(const std::string& split) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < records.size(); ++i) {
      if (split.empty() || records[i].split == split) out.push_back(i);
    }
    return out;
  }

  std::filesystem::path street_path(std::size_t i) const { return root / records.at(i).street; }
  std::filesystem::path aerial_path(std::size_t i) const { return root / records.at(i).aerial; }

  void validate() const {
    std::set<std::string> ids;
    for (const auto& r : records) {
      if (!ids.insert(r.id).second) throw DatasetError("duplicate sample id " + r.id);
      if (!(r.tile.ground_extent_m > 0)) throw DatasetError("tile extent must be positive for " + r.id);
      validate_location(r.query);
      validate_location(r.tile.center);
    }
    for (const auto& r : records)
      for (const auto& n : r.neighbors)
        if (!ids.count(n)) throw DatasetError("neighbor " + n + " of " + r.id + " is not in the index");
  }

 private:
  static void validate_location(const GeoLocation& g) {
    try {
      transgeo::validate(g);
    } catch (const std::invalid_argument& e) {
      throw DatasetError(e.what());
    }
  }

  void rebuild() const {
    by_id_.clear();
    for (std::size_t i = 0; i < records.size(); ++i) by_id_[records[i].id] = i;
  }

  mutable std::map<std::string, std::size_t> by_id_;
};

inline constexpr char kIndexHeader[] =
    "id,street,aerial,lat,lon,center_lat,center_lon,extent_m,off_x_m,off_y_m,split,neighbors";

namespace detail {

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::vector<std::string> split_on(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

inline double parse_double(const std::string& s, const std::string& what) {
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw DatasetError("bad number for " + what + ": '" + s + "'");
  }
  if (used != s.size()) throw DatasetError("bad number for " + what + ": '" + s + "'");
  return v;
}

}  // namespace detail

inline std::string encode_index_csv(const DatasetIndex& index) {
  std::string out = std::string(kIndexHeader) + "\n";
  for (const auto& r : index.records) {
    std::string nb;
    for (std::size_t i = 0; i < r.neighbors.size(); ++i) nb += (i ? ";" : "") + r.neighbors[i];
    out += r.id + "," + r.street + "," + r.aerial + "," + detail::fmt_double(r.query.lat) + "," +
           detail::fmt_double(r.query.lon) + "," + detail::fmt_double(r.tile.center.lat) + "," +
           detail::fmt_double(r.tile.center.lon) + "," + detail::fmt_double(r.tile.ground_extent_m) + "," +
           detail::fmt_double(r.off_x_m) + "," + detail::fmt_double(r.off_y_m) + "," + r.split + "," + nb + "\n";
  }
  return out;
}

inline std::vector<SampleRecord> decode_index_csv(const std::string& text, int aerial_px) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kIndexHeader) throw DatasetError("index.csv header mismatch");
  std::vector<SampleRecord> records;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto f = detail::split_on(line, ',');
    if (f.size() != 12) throw DatasetError("index.csv row has " + std::to_string(f.size()) + " fields");
    SampleRecord r;
    r.id = f[0];
    r.street = f[1];
    r.aerial = f[2];
    r.query = {detail::parse_double(f[3], "lat"), detail::parse_double(f[4], "lon")};
    r.tile.center = {detail::parse_double(f[5], "center_lat"), detail::parse_double(f[6], "center_lon")};
    r.tile.ground_extent_m = detail::parse_double(f[7], "extent_m");
    r.tile.side_px = aerial_px;
    r.off_x_m = detail::parse_double(f[8], "off_x_m");
    r.off_y_m = detail::parse_double(f[9], "off_y_m");
    r.split = f[10];
    if (!f[11].empty()) r.neighbors = detail::split_on(f[11], ';');
    records.push_back(std::move(r));
  }
  return records;
}

inline std::string encode_index_meta(const DatasetIndex& index) {
  std::ostringstream os;
  os << "mode = " << to_string(index.mode) << "\n"
     << "unknown_orientation = " << (index.unknown_orientation ? 1 : 0) << "\n"
     << "fov_deg = " << detail::fmt_double(index.fov_deg) << "\n"
     << "street_height = " << index.street_height << "\n"
     << "street_width = " << index.street_width << "\n"
     << "aerial_px = " << index.aerial_px << "\n";
  return os.str();
}

inline void save_index(const DatasetIndex& index, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream csv(dir / "index.csv", std::ios::binary);
  std::ofstream meta(dir / "meta.txt", std::ios::binary);
  if (!csv || !meta) throw DatasetError("cannot write index into " + dir.string());
  csv << encode_index_csv(index);
  meta << encode_index_meta(index);
  if (!csv || !meta) throw DatasetError("index write failed in " + dir.string());
}

inline DatasetIndex load_index(const std::filesystem::path& dir) {
  DatasetIndex index;
  index.root = dir;
  std::ifstream meta(dir / "meta.txt");
  if (!meta) throw DatasetError("missing meta.txt in " + dir.string());
  std::string line;
  while (std::getline(meta, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw DatasetError("bad meta line: " + line);
    auto trim = [](std::string s) {
      s.erase(0, s.find_first_not_of(" \t"));
      s.erase(s.find_last_not_of(" \t\r") + 1);
      return s;
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key == "mode") {
      index.mode = parse_placement_mode(value);
    } else if (key == "unknown_orientation") {
      index.unknown_orientation = value == "1";
    } else if (key == "fov_deg") {
      index.fov_deg = detail::parse_double(value, key);
    } else if (key == "street_height") {
      index.street_height = std::stoi(value);
    } else if (key == "street_width") {
      index.street_width = std::stoi(value);
    } else if (key == "aerial_px") {
      index.aerial_px = std::stoi(value);
    } else {
      throw DatasetError("unknown meta key '" + key + "'");
    }
  }
  std::ifstream csv(dir / "index.csv", std::ios::binary);
  if (!csv) throw DatasetError("missing index.csv in " + dir.string());
  std::string text((std::istreambuf_iterator<char>(csv)), std::istreambuf_iterator<char>());
  index.records = decode_index_csv(text, index.aerial_px);
  index.validate();
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (!std::filesystem::exists(index.street_path(i)) || !std::filesystem::exists(index.aerial_path(i))) {
      throw DatasetError("image files missing for sample " + index.records[i].id);
    }
  }
  return index;
}

}  // namespace transgeo
