#include "stn/runconfig.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>

namespace stn {

namespace {

struct Binding {
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

int parse_int(const std::string& v) {
  std::size_t used = 0;
  const int x = std::stoi(v, &used);
  if (used != v.size()) throw std::runtime_error("not an integer: '" + v + "'");
  return x;
}

double parse_double(const std::string& v) {
  std::size_t used = 0;
  const double x = std::stod(v, &used);
  if (used != v.size()) throw std::runtime_error("not a number: '" + v + "'");
  return x;
}

std::uint64_t parse_u64(const std::string& v) {
  std::size_t used = 0;
  const unsigned long long x = std::stoull(v, &used);
  if (used != v.size()) throw std::runtime_error("not an unsigned integer: '" + v + "'");
  return static_cast<std::uint64_t>(x);
}

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::runtime_error("not a boolean: '" + v + "'");
}

std::string fmt_double(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

const std::vector<Binding>& bindings() {
  static const std::vector<Binding> table = [] {
    std::vector<Binding> b;
    auto add = [&](const std::string& key, auto setter, auto getter) {
      b.push_back({key, setter, getter});
    };
#define INT_FIELD(key, expr)                                                       \
  add(key, [](RunConfig& c, const std::string& v) { expr = parse_int(v); },        \
      [](const RunConfig& c) { return std::to_string(expr); })
#define DBL_FIELD(key, expr)                                                       \
  add(key, [](RunConfig& c, const std::string& v) { expr = parse_double(v); },     \
      [](const RunConfig& c) { return fmt_double(expr); })
#define U64_FIELD(key, expr)                                                       \
  add(key, [](RunConfig& c, const std::string& v) { expr = parse_u64(v); },        \
      [](const RunConfig& c) { return std::to_string(expr); })
#define BOOL_FIELD(key, expr)                                                      \
  add(key, [](RunConfig& c, const std::string& v) { expr = parse_bool(v); },       \
      [](const RunConfig& c) { return (expr) ? std::string("true") : std::string("false"); })

    INT_FIELD("scene.width", c.scene.width);
    INT_FIELD("scene.height", c.scene.height);
    INT_FIELD("scene.frames", c.scene.num_frames);
    INT_FIELD("scene.people", c.scene.num_people);
    INT_FIELD("scene.min_people", c.scene.min_people);
    INT_FIELD("scene.max_people", c.scene.max_people);
    INT_FIELD("scene.groups", c.scene.num_groups);
    DBL_FIELD("scene.drift_speed", c.scene.drift_speed);
    DBL_FIELD("scene.jitter_sigma", c.scene.jitter_sigma);
    DBL_FIELD("scene.blob_sigma", c.scene.blob_sigma);
    DBL_FIELD("scene.clutter", c.scene.clutter_amplitude);
    U64_FIELD("scene.seed", c.scene.seed);

    add("model.widths",
        [](RunConfig& c, const std::string& v) {
          std::array<int, 3> w{};
          if (std::sscanf(v.c_str(), "%d,%d,%d", &w[0], &w[1], &w[2]) != 3) {
            throw std::runtime_error("model.widths expects three comma-separated integers");
          }
          c.model.widths = w;
        },
        [](const RunConfig& c) {
          return std::to_string(c.model.widths[0]) + "," + std::to_string(c.model.widths[1]) +
                 "," + std::to_string(c.model.widths[2]);
        });
    INT_FIELD("model.max_disp", c.model.max_disp);
    add("model.density_weights",
        [](RunConfig& c, const std::string& v) {
          std::array<double, 3> w{};
          if (std::sscanf(v.c_str(), "%lf,%lf,%lf", &w[0], &w[1], &w[2]) != 3) {
            throw std::runtime_error("model.density_weights expects three comma-separated reals");
          }
          c.model.density_weights.w = w;
        },
        [](const RunConfig& c) {
          return fmt_double(c.model.density_weights.w[0]) + "," +
                 fmt_double(c.model.density_weights.w[1]) + "," +
                 fmt_double(c.model.density_weights.w[2]);
        });
    DBL_FIELD("model.match_radius", c.model.match_radius);
    DBL_FIELD("model.neighbor_radius", c.model.neighbor_radius);
    DBL_FIELD("model.nms_radius", c.model.nms_radius);
    INT_FIELD("model.top_m", c.model.top_m);
    INT_FIELD("model.beta", c.model.beta);
    INT_FIELD("model.batch_size", c.model.batch_size);
    DBL_FIELD("model.learning_rate", c.model.learning_rate);
    DBL_FIELD("model.grad_clip_norm", c.model.grad_clip_norm);
    DBL_FIELD("model.decode_floor", c.model.decode_floor);
    DBL_FIELD("model.cls_prior", c.model.cls_prior);
    INT_FIELD("model.attention_reduction", c.model.attention_reduction);
    INT_FIELD("model.point_hidden", c.model.point_hidden);
    BOOL_FIELD("model.attention", c.model.attention_enabled);
    BOOL_FIELD("model.use_localization", c.model.use_localization);
    BOOL_FIELD("model.use_association", c.model.use_association);
    BOOL_FIELD("model.use_relation", c.model.use_relation);
    BOOL_FIELD("model.use_cycle", c.model.use_cycle);

    DBL_FIELD("track.entry_cost", c.track.entry);
    DBL_FIELD("track.exit_cost", c.track.exit);
    DBL_FIELD("track.lambda_link", c.track.lambda_link);
    DBL_FIELD("track.gate", c.track.gate);

    INT_FIELD("train.steps_stage1", c.train_steps_stage1);
    INT_FIELD("train.steps_stage2", c.train_steps_stage2);
    U64_FIELD("train.seed", c.train_seed);
    INT_FIELD("data.scenes_train", c.scenes_train);
    INT_FIELD("data.scenes_test", c.scenes_test);
    DBL_FIELD("eval.track_match_dist", c.eval_track_match_dist);

#undef INT_FIELD
#undef DBL_FIELD
#undef U64_FIELD
#undef BOOL_FIELD
    return b;
  }();
  return table;
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  for (const auto& b : bindings()) {
    if (b.key == key) {
      try {
        b.set(*this, value);
      } catch (const std::exception& e) {
        throw std::runtime_error("config key '" + key + "': " + e.what());
      }
      return;
    }
  }
  throw std::runtime_error("unknown config key '" + key + "'");
}

std::string RunConfig::get(const std::string& key) const {
  for (const auto& b : bindings()) {
    if (b.key == key) return b.get(*this);
  }
  throw std::runtime_error("unknown config key '" + key + "'");
}

std::string RunConfig::serialize() const {
  std::ostringstream os;
  for (const auto& b : bindings()) os << b.key << "=" << b.get(*this) << "\n";
  return os.str();
}

std::vector<std::string> RunConfig::known_keys() {
  std::vector<std::string> keys;
  for (const auto& b : bindings()) keys.push_back(b.key);
  return keys;
}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open " + path);
  RunConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::runtime_error("config: " + path + ":" + std::to_string(lineno) +
                               ": expected key=value, got '" + line + "'");
    }
    try {
      cfg.set(line.substr(0, eq), line.substr(eq + 1));
    } catch (const std::exception& e) {
      throw std::runtime_error("config: " + path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return cfg;
}

void RunConfig::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("config: cannot open " + path + " for writing");
  out << serialize();
  if (!out) throw std::runtime_error("config: write failed for " + path);
}

}  // namespace stn
