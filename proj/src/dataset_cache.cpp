#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "ciseg/data.hpp"

namespace ciseg {

namespace {

constexpr char kMagic[8] = {'C', 'I', 'S', 'G', 'D', 'S', '0', '1'};

std::string split_file(int step, Split split) {
  return "step" + std::to_string(step) + (split == Split::kTrain ? "_train.bin" : "_test.bin");
}

void append_u32(std::string& buf, uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(char((v >> (8 * i)) & 0xff));
}

uint32_t read_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw std::runtime_error("dataset cache: truncated file");
  return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
}

std::string encode_scene(const ShapeScene& s) {
  std::string buf;
  append_u32(buf, uint32_t(s.instances.size()));
  buf.append(reinterpret_cast<const char*>(s.image.data()), s.image.size());
  // instance-id map: 255 background, else draw-order index
  std::vector<uint8_t> idmap(size_t(s.height) * s.width, 255);
  for (size_t i = 0; i < s.instances.size(); ++i)
    for (size_t p = 0; p < idmap.size(); ++p)
      if (s.instances[i].visible_mask[p]) idmap[p] = uint8_t(i);
  buf.append(reinterpret_cast<const char*>(idmap.data()), idmap.size());
  for (const auto& inst : s.instances) buf.push_back(char(inst.class_id));
  return buf;
}

}  // namespace

void write_dataset_cache(const std::string& dir, const Protocol& protocol, TaskMode mode,
                         uint64_t seed, int train_size, int test_size, int height, int width) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);

  for (int step = 0; step < protocol.steps; ++step) {
    for (Split split : {Split::kTrain, Split::kTest}) {
      int count = split == Split::kTrain ? train_size : test_size;
      DatasetSpec spec{&protocol, step, split, mode, seed, height, width, 1, 4};
      std::string buf(kMagic, sizeof(kMagic));
      append_u32(buf, uint32_t(count));
      append_u32(buf, uint32_t(height));
      append_u32(buf, uint32_t(width));
      for (int i = 0; i < count; ++i) buf += encode_scene(dataset_sample(spec, i).scene);
      std::ofstream out(fs::path(dir) / split_file(step, split), std::ios::binary);
      if (!out) throw std::runtime_error("dataset cache: cannot write to " + dir);
      out.write(buf.data(), std::streamsize(buf.size()));
    }
  }

  nlohmann::ordered_json manifest;
  manifest["protocol"] = protocol.name;
  manifest["setting"] = to_string(protocol.setting);
  manifest["mode"] = to_string(mode);
  manifest["seed"] = seed;
  manifest["class_order_seed"] = protocol.class_order_seed;
  manifest["train_size"] = train_size;
  manifest["test_size"] = test_size;
  manifest["height"] = height;
  manifest["width"] = width;
  manifest["steps"] = protocol.steps;
  nlohmann::ordered_json step_meta = nlohmann::ordered_json::array();
  for (const auto& cs : protocol.step_classes) step_meta.push_back(cs);
  manifest["step_classes"] = step_meta;
  std::ofstream mf(std::filesystem::path(dir) / "manifest.json");
  mf << manifest.dump(2) << "\n";
}

CacheManifest read_cache_manifest(const std::string& dir) {
  std::ifstream mf(std::filesystem::path(dir) / "manifest.json");
  if (!mf) throw std::runtime_error("dataset cache: missing manifest in " + dir);
  nlohmann::json j = nlohmann::json::parse(mf);
  CacheManifest m;
  m.protocol_name = j.at("protocol").get<std::string>();
  m.setting = j.at("setting").get<std::string>();
  m.mode = j.at("mode").get<std::string>();
  m.seed = j.at("seed").get<uint64_t>();
  m.train_size = j.at("train_size").get<int>();
  m.test_size = j.at("test_size").get<int>();
  m.height = j.at("height").get<int>();
  m.width = j.at("width").get<int>();
  m.steps = j.at("steps").get<int>();
  return m;
}

std::vector<ShapeScene> read_cache_split(const std::string& dir, int step, Split split) {
  std::ifstream in(std::filesystem::path(dir) / split_file(step, split), std::ios::binary);
  if (!in) throw std::runtime_error("dataset cache: missing split file in " + dir);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::string(magic, 8) != std::string(kMagic, 8))
    throw std::runtime_error("dataset cache: bad magic");
  uint32_t count = read_u32(in);
  uint32_t height = read_u32(in);
  uint32_t width = read_u32(in);
  std::vector<ShapeScene> out;
  out.reserve(count);
  const size_t hw = size_t(height) * width;
  for (uint32_t i = 0; i < count; ++i) {
    ShapeScene s;
    s.height = int(height);
    s.width = int(width);
    uint32_t n_inst = read_u32(in);
    s.image.resize(3 * hw);
    in.read(reinterpret_cast<char*>(s.image.data()), std::streamsize(s.image.size()));
    std::vector<uint8_t> idmap(hw);
    in.read(reinterpret_cast<char*>(idmap.data()), std::streamsize(hw));
    std::vector<uint8_t> classes(n_inst);
    in.read(reinterpret_cast<char*>(classes.data()), n_inst);
    if (!in) throw std::runtime_error("dataset cache: truncated sample");
    for (uint32_t k = 0; k < n_inst; ++k) {
      ShapeInstance inst;
      inst.class_id = classes[k];
      inst.visible_mask.assign(hw, 0);
      for (size_t p = 0; p < hw; ++p)
        if (idmap[p] == k) {
          inst.visible_mask[p] = 1;
          ++inst.visible_pixels;
        }
      s.instances.push_back(std::move(inst));
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace ciseg
