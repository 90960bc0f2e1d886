#pragma once

#include <string>
#include <vector>

namespace stn {

// One identity's head track: (frame, x, y) with strictly increasing,
// gap-free frame indices. Coordinates are pixel-center based; a frame of
// width W spans [-0.5, W-0.5].
struct Trajectory {
  int id = 0;
  struct Point {
    int frame = 0;
    double x = 0.0;
    double y = 0.0;
  };
  std::vector<Point> points;
};

// All head points of one frame.
struct FrameAnnotations {
  int frame = 0;
  struct Entry {
    int id = 0;
    double x = 0.0;
    double y = 0.0;
  };
  std::vector<Entry> points;
};

bool point_in_bounds(double x, double y, int width, int height);

void validate_trajectories(const std::vector<Trajectory>& trajs, int width, int height);

// Per-frame view of a trajectory set over frames [0, num_frames).
std::vector<FrameAnnotations> annotations_per_frame(const std::vector<Trajectory>& trajs,
                                                    int num_frames);

// Plain-text interchange format: header `frame,id,x,y`, one point per line,
// 0-indexed frames, coordinates with 3 decimals.
void save_annotations(const std::vector<Trajectory>& trajs, const std::string& path);
std::vector<Trajectory> load_annotations(const std::string& path);

}  // namespace stn
