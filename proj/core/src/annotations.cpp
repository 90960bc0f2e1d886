#include "stn/annotations.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

namespace stn {

bool point_in_bounds(double x, double y, int width, int height) {
  return x >= -0.5 && x <= width - 0.5 && y >= -0.5 && y <= height - 0.5;
}

void validate_trajectories(const std::vector<Trajectory>& trajs, int width, int height) {
  std::set<int> ids;
  for (const auto& t : trajs) {
    if (!ids.insert(t.id).second) {
      throw std::runtime_error("trajectory id " + std::to_string(t.id) + " appears twice");
    }
    for (std::size_t i = 0; i < t.points.size(); ++i) {
      const auto& p = t.points[i];
      if (i > 0 && p.frame != t.points[i - 1].frame + 1) {
        throw std::runtime_error("trajectory " + std::to_string(t.id) +
                                 " has a frame gap or disorder at frame " +
                                 std::to_string(p.frame));
      }
      if (width > 0 && height > 0 && !point_in_bounds(p.x, p.y, width, height)) {
        throw std::runtime_error("trajectory " + std::to_string(t.id) + " point at frame " +
                                 std::to_string(p.frame) + " is out of bounds");
      }
    }
  }
}

std::vector<FrameAnnotations> annotations_per_frame(const std::vector<Trajectory>& trajs,
                                                    int num_frames) {
  std::vector<FrameAnnotations> out(static_cast<std::size_t>(std::max(num_frames, 0)));
  for (int f = 0; f < num_frames; ++f) out[f].frame = f;
  for (const auto& t : trajs) {
    for (const auto& p : t.points) {
      if (p.frame < 0 || p.frame >= num_frames) continue;
      out[p.frame].points.push_back({t.id, p.x, p.y});
    }
  }
  for (auto& fa : out) {
    std::sort(fa.points.begin(), fa.points.end(),
              [](const auto& a, const auto& b) { return a.id < b.id; });
  }
  return out;
}

void save_annotations(const std::vector<Trajectory>& trajs, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_annotations: cannot open " + path);
  out << "frame,id,x,y\n";
  // rows ordered by frame then id: diffable and streamable per frame
  int max_frame = -1;
  for (const auto& t : trajs) {
    for (const auto& p : t.points) max_frame = std::max(max_frame, p.frame);
  }
  char buf[128];
  for (int f = 0; f <= max_frame; ++f) {
    std::vector<std::tuple<int, double, double>> rows;
    for (const auto& t : trajs) {
      for (const auto& p : t.points) {
        if (p.frame == f) rows.emplace_back(t.id, p.x, p.y);
      }
    }
    std::sort(rows.begin(), rows.end());
    for (const auto& [id, x, y] : rows) {
      std::snprintf(buf, sizeof(buf), "%d,%d,%.3f,%.3f\n", f, id, x, y);
      out << buf;
    }
  }
  if (!out) throw std::runtime_error("save_annotations: write failed for " + path);
}

std::vector<Trajectory> load_annotations(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_annotations: cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line != "frame,id,x,y") {
    throw std::runtime_error("load_annotations: " + path + ":1: expected header 'frame,id,x,y'");
  }
  std::map<int, std::vector<Trajectory::Point>> by_id;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    int frame = 0, id = 0;
    double x = 0.0, y = 0.0;
    char trailing = 0;
    const int got = std::sscanf(line.c_str(), "%d,%d,%lf,%lf%c", &frame, &id, &x, &y, &trailing);
    if (got < 4 || (got == 5 && trailing != '\r')) {
      throw std::runtime_error("load_annotations: " + path + ":" + std::to_string(lineno) +
                               ": malformed line '" + line + "'");
    }
    if (frame < 0) {
      throw std::runtime_error("load_annotations: " + path + ":" + std::to_string(lineno) +
                               ": negative frame index");
    }
    by_id[id].push_back({frame, x, y});
  }
  std::vector<Trajectory> trajs;
  trajs.reserve(by_id.size());
  for (auto& [id, pts] : by_id) {
    std::sort(pts.begin(), pts.end(),
              [](const auto& a, const auto& b) { return a.frame < b.frame; });
    for (std::size_t i = 1; i < pts.size(); ++i) {
      if (pts[i].frame == pts[i - 1].frame) {
        throw std::runtime_error("load_annotations: id " + std::to_string(id) +
                                 " has two points in frame " + std::to_string(pts[i].frame));
      }
      if (pts[i].frame != pts[i - 1].frame + 1) {
        throw std::runtime_error("load_annotations: id " + std::to_string(id) +
                                 " has a frame gap before frame " + std::to_string(pts[i].frame));
      }
    }
    Trajectory t;
    t.id = id;
    t.points = std::move(pts);
    trajs.push_back(std::move(t));
  }
  return trajs;
}

}  // namespace stn
