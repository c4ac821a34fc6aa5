#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "ciseg/data.hpp"
#include "ciseg/rng.hpp"

namespace ciseg {

namespace {

const char* kShapeNames[kVocabularySize] = {"circle", "square",  "triangle", "cross", "ring",
                                            "diamond", "star",   "ellipse",  "lshape", "tshape"};

// Point-in-shape test in instance-local coordinates (unit radius, y down).
bool inside_unit(int class_id, double x, double y) {
  switch (class_id) {
    case 0:  // circle
      return x * x + y * y <= 1.0;
    case 1:  // square
      return std::max(std::abs(x), std::abs(y)) <= 0.82;
    case 2: {  // triangle, apex up, circumradius 1
      if (y > 0.5) return false;
      // edges from apex (0,-1) to (+-sqrt(3)/2, 0.5)
      return std::abs(x) * 1.7320508075688772 <= (y + 1.0) && y >= -1.0;
    }
    case 3:  // cross
      return (std::abs(x) <= 0.32 && std::abs(y) <= 1.0) ||
             (std::abs(y) <= 0.32 && std::abs(x) <= 1.0);
    case 4: {  // ring
      double d2 = x * x + y * y;
      return d2 <= 1.0 && d2 >= 0.55 * 0.55;
    }
    case 5:  // diamond
      return std::abs(x) + std::abs(y) <= 1.15;
    case 6: {  // five-point star, even-odd test over the 10-gon
      static const int kPts = 10;
      double vx[kPts], vy[kPts];
      for (int k = 0; k < kPts; ++k) {
        double r = k % 2 == 0 ? 1.0 : 0.45;
        double a = -1.5707963267948966 + k * 0.6283185307179586;
        vx[k] = r * std::cos(a);
        vy[k] = r * std::sin(a);
      }
      bool in = false;
      for (int k = 0, j = kPts - 1; k < kPts; j = k++) {
        if ((vy[k] > y) != (vy[j] > y) &&
            x < (vx[j] - vx[k]) * (y - vy[k]) / (vy[j] - vy[k]) + vx[k])
          in = !in;
      }
      return in;
    }
    case 7:  // ellipse, 0.55 aspect
      return x * x + (y / 0.55) * (y / 0.55) <= 1.0;
    case 8:  // L: left vertical bar plus bottom bar
      return (x >= -0.9 && x <= -0.3 && std::abs(y) <= 1.0) ||
             (std::abs(x) <= 0.9 && y >= 0.4 && y <= 1.0);
    case 9:  // T: top bar plus central stem
      return (std::abs(x) <= 0.9 && y >= -1.0 && y <= -0.4) ||
             (std::abs(x) <= 0.3 && std::abs(y) <= 1.0);
    default:
      throw std::invalid_argument("inside_unit: unknown class id " + std::to_string(class_id));
  }
}

std::vector<uint8_t> rasterize(int class_id, double cx, double cy, double size, double rot,
                               int height, int width, int* pixel_count) {
  std::vector<uint8_t> mask(size_t(height) * width, 0);
  const double c = std::cos(rot), s = std::sin(rot);
  const int pad = int(size * 1.6) + 2;
  const int y0 = std::max(0, int(cy) - pad), y1 = std::min(height - 1, int(cy) + pad);
  const int x0 = std::max(0, int(cx) - pad), x1 = std::min(width - 1, int(cx) + pad);
  int count = 0;
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      double dx = (x + 0.5 - cx) / size, dy = (y + 0.5 - cy) / size;
      double lx = dx * c + dy * s, ly = -dx * s + dy * c;
      if (inside_unit(class_id, lx, ly)) {
        mask[size_t(y) * width + x] = 1;
        ++count;
      }
    }
  *pixel_count = count;
  return mask;
}

constexpr int kMinVisiblePixels = 16;
constexpr int kMaxResamples = 100;
constexpr uint8_t kBackgroundGray = 20;

}  // namespace

const char* shape_name(int class_id) {
  if (class_id < 0 || class_id >= kVocabularySize)
    throw std::invalid_argument("shape_name: bad class id " + std::to_string(class_id));
  return kShapeNames[class_id];
}

ShapeScene generate_scene(uint64_t seed, const std::vector<int>& class_pool,
                          std::pair<int, int> instance_count_range, int height, int width) {
  if (class_pool.empty()) throw std::invalid_argument("generate_scene: empty class pool");
  if (instance_count_range.first < 1 || instance_count_range.second < instance_count_range.first)
    throw std::invalid_argument("generate_scene: bad instance count range");
  SplitMix64 rng(seed);

  ShapeScene scene;
  scene.height = height;
  scene.width = width;
  const int n = rng.uniform_int(instance_count_range.first, instance_count_range.second);

  struct Draft {
    ShapeInstance inst;
    std::vector<uint8_t> full_mask;
    double tint[3];
  };
  std::vector<Draft> drafts;
  int resamples = 0;

  while (int(drafts.size()) < n) {
    Draft d;
    d.inst.class_id = class_pool[size_t(rng.next_below(class_pool.size()))];
    const double size_hi = std::min(15.0, std::min(height, width) / 4.2);
    const double size_lo = std::min(8.0, size_hi - 0.5);
    d.inst.size = rng.uniform(size_lo, size_hi);
    d.inst.cx = rng.uniform(d.inst.size, width - d.inst.size);
    d.inst.cy = rng.uniform(d.inst.size, height - d.inst.size);
    d.inst.rotation = rng.uniform(-0.26, 0.26);
    d.inst.fill = rng.uniform(0.35, 1.0);
    for (double& t : d.tint) t = rng.uniform(0.8, 1.0);

    int full_pixels = 0;
    d.full_mask = rasterize(d.inst.class_id, d.inst.cx, d.inst.cy, d.inst.size, d.inst.rotation,
                            height, width, &full_pixels);

    bool ok = full_pixels >= kMinVisiblePixels;
    if (ok) {
      // the newcomer occludes everyone before it; check they all survive
      for (const Draft& prev : drafts) {
        int visible = 0;
        for (size_t i = 0; i < d.full_mask.size(); ++i)
          if (prev.full_mask[i] && !d.full_mask[i]) ++visible;
        // occlusion by drafts between prev and the newcomer is handled when
        // visible masks are finalized; this check is conservative per pair
        if (visible < kMinVisiblePixels) {
          ok = false;
          break;
        }
      }
    }
    if (ok) {
      drafts.push_back(std::move(d));
    } else if (++resamples > kMaxResamples) {
      throw std::runtime_error("generate_scene: constraints unsatisfiable after " +
                               std::to_string(kMaxResamples) + " resamples (seed " +
                               std::to_string(seed) + ")");
    }
  }

  // final visible masks under full occlusion order
  bool all_ok = true;
  for (size_t i = 0; i < drafts.size(); ++i) {
    auto vis = drafts[i].full_mask;
    for (size_t j = i + 1; j < drafts.size(); ++j)
      for (size_t p = 0; p < vis.size(); ++p)
        if (drafts[j].full_mask[p]) vis[p] = 0;
    int count = 0;
    for (uint8_t v : vis) count += v;
    drafts[i].inst.visible_mask = std::move(vis);
    drafts[i].inst.visible_pixels = count;
    if (count < kMinVisiblePixels) all_ok = false;
  }
  if (!all_ok) {
    // rare: chained occlusion broke an earlier instance; restart the scene
    // from a derived seed, bounded by the same resample budget
    if (resamples > kMaxResamples)
      throw std::runtime_error("generate_scene: constraints unsatisfiable");
    return generate_scene(mix_seed(seed, 0x0CC1DEull), class_pool, instance_count_range, height,
                          width);
  }

  scene.image.assign(size_t(3) * height * width, kBackgroundGray);
  for (const Draft& d : drafts) {
    for (int ch = 0; ch < 3; ++ch) {
      uint8_t v = uint8_t(std::lround(255.0 * std::min(1.0, d.inst.fill * d.tint[ch])));
      uint8_t* plane = scene.image.data() + size_t(ch) * height * width;
      for (size_t p = 0; p < d.inst.visible_mask.size(); ++p)
        if (d.inst.visible_mask[p]) plane[p] = v;
    }
    scene.instances.push_back(d.inst);
  }
  return scene;
}

StepTarget relabel_for_step(const ShapeScene& scene, const std::vector<int>& step_classes,
                            TaskMode mode) {
  StepTarget out;
  out.mode = mode;
  out.height = scene.height;
  out.width = scene.width;
  const size_t hw = size_t(scene.height) * scene.width;
  out.semantic.assign(hw, 255);

  auto in_step = [&](int cid) {
    return std::find(step_classes.begin(), step_classes.end(), cid) != step_classes.end();
  };

  for (const auto& inst : scene.instances) {
    if (!in_step(inst.class_id)) continue;
    for (size_t p = 0; p < hw; ++p)
      if (inst.visible_mask[p]) out.semantic[p] = uint8_t(inst.class_id);
  }

  if (mode == TaskMode::kInstance) {
    for (const auto& inst : scene.instances) {
      if (!in_step(inst.class_id)) continue;
      MaskTarget t;
      t.class_id = inst.class_id;
      t.mask = inst.visible_mask;
      out.targets.push_back(std::move(t));
    }
  } else {
    // one target per present class: the union of its visible regions
    std::vector<int> present;
    for (const auto& inst : scene.instances)
      if (in_step(inst.class_id) &&
          std::find(present.begin(), present.end(), inst.class_id) == present.end())
        present.push_back(inst.class_id);
    std::sort(present.begin(), present.end());
    for (int cid : present) {
      MaskTarget t;
      t.class_id = cid;
      t.mask.assign(hw, 0);
      for (size_t p = 0; p < hw; ++p)
        if (out.semantic[p] == cid) t.mask[p] = 1;
      out.targets.push_back(std::move(t));
    }
  }
  return out;
}

Sample dataset_sample(const DatasetSpec& spec, int index) {
  if (!spec.protocol) throw std::invalid_argument("dataset_sample: null protocol");
  const Protocol& proto = *spec.protocol;
  if (spec.step < 0 || spec.step >= proto.steps)
    throw std::invalid_argument("dataset_sample: step out of range");

  std::vector<int> pool;
  if (proto.setting == Setting::kOverlapped) {
    pool = proto.class_order;  // any class may appear, labeled or not
  } else {
    pool = proto.classes_through(spec.step);
  }

  uint64_t s = mix_seed(spec.seed, uint64_t(spec.step),
                        spec.split == Split::kTrain ? 0x7124ull : 0x7e57ull, uint64_t(index));
  Sample out;
  out.scene = generate_scene(s, pool, {spec.instances_min, spec.instances_max}, spec.height,
                             spec.width);
  const std::vector<int> label_set = spec.split == Split::kTrain
                                         ? proto.step_classes[size_t(spec.step)]
                                         : proto.classes_through(spec.step);
  out.target = relabel_for_step(out.scene, label_set, spec.mode);
  return out;
}

}  // namespace ciseg
