#pragma once

#include "stillsplat/core.hpp"
#include "stillsplat/geometry.hpp"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

namespace stillsplat {

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Portable float map (PFM), single channel, little-endian (negative scale),
// rows stored bottom-to-top per the format convention. Multi-plane data
// (pointmaps, flow) is stored as planes stacked vertically: plane p occupies
// rows [p*H, (p+1)*H) of a (planes*H) x W map.
// ---------------------------------------------------------------------------

inline void write_pfm(const std::string& path, const GridF& grid) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path);
  f << "Pf\n" << grid.width() << " " << grid.height() << "\n-1.0\n";
  std::vector<float> row(grid.width());
  for (int r = grid.height() - 1; r >= 0; --r) {
    for (int c = 0; c < grid.width(); ++c) row[c] = static_cast<float>(grid.at(r, c));
    f.write(reinterpret_cast<const char*>(row.data()), sizeof(float) * row.size());
  }
  if (!f) throw IoError("short write on " + path);
}

inline GridF read_pfm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path);
  std::string magic;
  int w = 0, h = 0;
  double scale = 0;
  f >> magic >> w >> h >> scale;
  if (magic != "Pf" || w <= 0 || h <= 0) throw IoError("bad PFM header in " + path);
  if (scale >= 0) throw IoError("big-endian PFM not supported: " + path);
  f.get();  // single whitespace after scale
  GridF grid(h, w);
  std::vector<float> row(w);
  for (int r = h - 1; r >= 0; --r) {
    f.read(reinterpret_cast<char*>(row.data()), sizeof(float) * row.size());
    if (!f) throw IoError("truncated PFM " + path);
    for (int c = 0; c < w; ++c) grid.at(r, c) = row[c];
  }
  return grid;
}

inline void write_pfm_planes(const std::string& path, const std::vector<const GridF*>& planes) {
  int H = planes.at(0)->height(), W = planes.at(0)->width();
  GridF stacked(static_cast<int>(planes.size()) * H, W);
  for (size_t p = 0; p < planes.size(); ++p)
    for (int r = 0; r < H; ++r)
      for (int c = 0; c < W; ++c) stacked.at(static_cast<int>(p) * H + r, c) = planes[p]->at(r, c);
  write_pfm(path, stacked);
}

inline std::vector<GridF> read_pfm_planes(const std::string& path, int num_planes) {
  GridF stacked = read_pfm(path);
  if (stacked.height() % num_planes != 0)
    throw IoError("PFM height not divisible by plane count: " + path);
  int H = stacked.height() / num_planes;
  std::vector<GridF> planes(num_planes, GridF(H, stacked.width()));
  for (int p = 0; p < num_planes; ++p)
    for (int r = 0; r < H; ++r)
      for (int c = 0; c < stacked.width(); ++c) planes[p].at(r, c) = stacked.at(p * H + r, c);
  return planes;
}

inline void write_pfm_pointmap(const std::string& path, const Pointmap& pm) {
  int H = pm.points.height(), W = pm.points.width();
  GridF x(H, W), y(H, W), z(H, W);
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) {
      x.at(r, c) = pm.points.at(r, c).x();
      y.at(r, c) = pm.points.at(r, c).y();
      z.at(r, c) = pm.points.at(r, c).z();
    }
  write_pfm_planes(path, {&x, &y, &z});
}

inline Pointmap read_pfm_pointmap(const std::string& path, PointFrame frame) {
  auto planes = read_pfm_planes(path, 3);
  Pointmap pm;
  pm.frame = frame;
  pm.points = Grid<Vec3>(planes[0].height(), planes[0].width());
  for (size_t i = 0; i < pm.points.size(); ++i)
    pm.points[i] = Vec3(planes[0][i], planes[1][i], planes[2][i]);
  return pm;
}

inline void write_pfm_flow(const std::string& path, const FlowField& flow) {
  int H = flow.uv.height(), W = flow.uv.width();
  GridF u(H, W), v(H, W), valid(H, W);
  for (size_t i = 0; i < flow.uv.size(); ++i) {
    u[i] = flow.uv[i].x();
    v[i] = flow.uv[i].y();
    valid[i] = flow.valid[i] ? 1.0 : 0.0;
  }
  write_pfm_planes(path, {&u, &v, &valid});
}

inline FlowField read_pfm_flow(const std::string& path) {
  auto planes = read_pfm_planes(path, 3);
  FlowField flow;
  flow.uv = Grid<Vec2>(planes[0].height(), planes[0].width());
  flow.valid = Grid<uint8_t>(planes[0].height(), planes[0].width());
  for (size_t i = 0; i < flow.uv.size(); ++i) {
    flow.uv[i] = Vec2(planes[0][i], planes[1][i]);
    flow.valid[i] = planes[2][i] > 0.5 ? 1 : 0;
  }
  return flow;
}

// ---------------------------------------------------------------------------
// 8-bit images: P6 PPM for RGB frames, P5 PGM for masks (value v ~ v/255).
// ---------------------------------------------------------------------------

inline void write_ppm(const std::string& path, const Image& img) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path);
  f << "P6\n" << img.width() << " " << img.height() << "\n255\n";
  std::vector<uint8_t> row(static_cast<size_t>(img.width()) * 3);
  for (int r = 0; r < img.height(); ++r) {
    for (int c = 0; c < img.width(); ++c)
      for (int k = 0; k < 3; ++k)
        row[c * 3 + k] = static_cast<uint8_t>(std::lround(clamp01(img.at(r, c)[k]) * 255.0));
    f.write(reinterpret_cast<const char*>(row.data()), row.size());
  }
}

inline Image read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path);
  std::string magic;
  int w, h, maxval;
  f >> magic >> w >> h >> maxval;
  if (magic != "P6" || maxval != 255) throw IoError("bad PPM header in " + path);
  f.get();
  Image img(h, w);
  std::vector<uint8_t> row(static_cast<size_t>(w) * 3);
  for (int r = 0; r < h; ++r) {
    f.read(reinterpret_cast<char*>(row.data()), row.size());
    if (!f) throw IoError("truncated PPM " + path);
    for (int c = 0; c < w; ++c)
      img.at(r, c) = Vec3(row[c * 3] / 255.0, row[c * 3 + 1] / 255.0, row[c * 3 + 2] / 255.0);
  }
  return img;
}

inline void write_pgm(const std::string& path, const GridF& grid) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path);
  f << "P5\n" << grid.width() << " " << grid.height() << "\n255\n";
  std::vector<uint8_t> row(grid.width());
  for (int r = 0; r < grid.height(); ++r) {
    for (int c = 0; c < grid.width(); ++c)
      row[c] = static_cast<uint8_t>(std::lround(clamp01(grid.at(r, c)) * 255.0));
    f.write(reinterpret_cast<const char*>(row.data()), row.size());
  }
}

inline GridF read_pgm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path);
  std::string magic;
  int w, h, maxval;
  f >> magic >> w >> h >> maxval;
  if (magic != "P5" || maxval != 255) throw IoError("bad PGM header in " + path);
  f.get();
  GridF grid(h, w);
  std::vector<uint8_t> row(w);
  for (int r = 0; r < h; ++r) {
    f.read(reinterpret_cast<char*>(row.data()), row.size());
    if (!f) throw IoError("truncated PGM " + path);
    for (int c = 0; c < w; ++c) grid.at(r, c) = row[c] / 255.0;
  }
  return grid;
}

// ---------------------------------------------------------------------------
// Trajectory text format: one line per frame,
//   timestamp tx ty tz qx qy qz qw
// ---------------------------------------------------------------------------

struct TrajectoryEntry {
  double timestamp = 0;
  Pose pose;
};

inline void write_trajectory(const std::string& path, const std::vector<TrajectoryEntry>& traj) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path);
  char buf[512];
  for (const auto& e : traj) {
    const Quat& q = e.pose.rotation;
    const Vec3& t = e.pose.translation;
    std::snprintf(buf, sizeof(buf), "%.9f %.17g %.17g %.17g %.17g %.17g %.17g %.17g\n",
                  e.timestamp, t.x(), t.y(), t.z(), q.x(), q.y(), q.z(), q.w());
    f << buf;
  }
}

inline std::vector<TrajectoryEntry> read_trajectory(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read " + path);
  std::vector<TrajectoryEntry> traj;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    TrajectoryEntry e;
    double qx, qy, qz, qw;
    if (!(ss >> e.timestamp >> e.pose.translation.x() >> e.pose.translation.y() >>
          e.pose.translation.z() >> qx >> qy >> qz >> qw))
      throw IoError("bad trajectory line in " + path + ": " + line);
    e.pose.rotation = Quat(qw, qx, qy, qz);
    e.pose.rotation.normalize();
    traj.push_back(e);
  }
  return traj;
}

// ---------------------------------------------------------------------------
// Plain-text key-value config: `section.key = value` lines, `#` comments.
// Unknown keys are rejected with the offending line number.
// ---------------------------------------------------------------------------

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

class KeyValueConfig {
 public:
  KeyValueConfig() = default;

  static KeyValueConfig from_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read config " + path);
    KeyValueConfig cfg;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
      ++lineno;
      std::string s = strip(line);
      if (s.empty() || s[0] == '#') continue;
      auto eq = s.find('=');
      if (eq == std::string::npos)
        throw ConfigError(path + ":" + std::to_string(lineno) + ": expected `key = value`");
      std::string key = strip(s.substr(0, eq));
      std::string value = strip(s.substr(eq + 1));
      if (key.empty())
        throw ConfigError(path + ":" + std::to_string(lineno) + ": empty key");
      cfg.set(key, value, lineno);
    }
    return cfg;
  }

  void set(const std::string& key, const std::string& value, int lineno = 0) {
    entries_[key] = {value, lineno};
  }

  bool has(const std::string& key) const { return entries_.count(key) > 0; }

  std::string get_string(const std::string& key, const std::string& def) const {
    auto it = entries_.find(key);
    return it == entries_.end() ? def : it->second.value;
  }

  double get_double(const std::string& key, double def) const {
    auto it = entries_.find(key);
    return it == entries_.end() ? def : std::stod(it->second.value);
  }

  int get_int(const std::string& key, int def) const {
    auto it = entries_.find(key);
    return it == entries_.end() ? def : std::stoi(it->second.value);
  }

  bool get_bool(const std::string& key, bool def) const {
    auto it = entries_.find(key);
    if (it == entries_.end()) return def;
    const std::string& v = it->second.value;
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("bad boolean value for " + key + ": " + v);
  }

  // Throws naming the first key (with line number) not in `allowed`.
  void reject_unknown(const std::vector<std::string>& allowed) const {
    for (const auto& [key, ev] : entries_) {
      if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
        throw ConfigError("unknown config key `" + key + "` at line " +
                          std::to_string(ev.lineno));
    }
  }

 private:
  struct Entry {
    std::string value;
    int lineno = 0;
  };

  static std::string strip(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
  }

  std::map<std::string, Entry> entries_;
};

}  // namespace stillsplat
