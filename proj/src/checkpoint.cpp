#include "ciseg/checkpoint.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace ciseg {

namespace {

constexpr char kMagic[8] = {'C', 'I', 'S', 'E', 'G', 'C', 'K', '1'};
constexpr uint32_t kVersion = 1;

void append_u32(std::string& buf, uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(char((v >> (8 * i)) & 0xff));
}

void append_u64(std::string& buf, uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(char((v >> (8 * i)) & 0xff));
}

uint32_t get_u32(const std::string& b, size_t off) {
  return uint32_t(uint8_t(b[off])) | uint32_t(uint8_t(b[off + 1])) << 8 |
         uint32_t(uint8_t(b[off + 2])) << 16 | uint32_t(uint8_t(b[off + 3])) << 24;
}

uint64_t get_u64(const std::string& b, size_t off) {
  uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | uint8_t(b[off + size_t(i)]);
  return v;
}

void append_tensor(std::string& buf, const Tensor<float>& t) {
  static_assert(sizeof(float) == 4);
  size_t bytes = size_t(t.numel()) * 4;
  size_t off = buf.size();
  buf.resize(off + bytes);
  std::memcpy(buf.data() + off, t.data(), bytes);  // little-endian host assumed
}

}  // namespace

void checkpoint_save(const std::string& path, const Model<float>& model,
                     const QueryQueue<float>& queue, int step, TaskMode mode,
                     const std::string& config_hash) {
  nlohmann::ordered_json meta;
  meta["format_version"] = kVersion;
  meta["config_hash"] = config_hash;
  meta["step"] = step;
  meta["mode"] = to_string(mode);

  const ModelConfig& mc = model.config();
  meta["model"] = {{"d_q", mc.d_q},
                   {"decoder_layers", mc.decoder_layers},
                   {"backbone_channels", mc.backbone_channels},
                   {"image_h", mc.image_h},
                   {"image_w", mc.image_w},
                   {"attention_heads", mc.attention_heads},
                   {"ffn_hidden", mc.ffn_hidden},
                   {"num_classes", model.num_classes()}};

  nlohmann::ordered_json qgroups = nlohmann::ordered_json::array();
  for (const auto& grp : queue.groups())
    qgroups.push_back({{"step_index", grp.step_index},
                       {"query_count", grp.query_count},
                       {"class_ids", grp.class_ids},
                       {"frozen", grp.frozen}});
  meta["queue"] = {{"d_q", queue.d_q()}, {"groups", qgroups}};

  nlohmann::ordered_json dir = nlohmann::ordered_json::array();
  for (const auto& name : model.params().names())
    dir.push_back({{"name", name}, {"shape", model.params().get(name).dims()}});
  for (size_t gi = 0; gi < queue.groups().size(); ++gi) {
    const auto& grp = queue.groups()[gi];
    std::string base = "queue.g" + std::to_string(gi);
    dir.push_back({{"name", base + ".content"}, {"shape", grp.content.dims()}});
    dir.push_back({{"name", base + ".position"}, {"shape", grp.position.dims()}});
  }
  meta["tensors"] = dir;

  std::string meta_str = meta.dump();
  std::string buf(kMagic, sizeof(kMagic));
  append_u32(buf, kVersion);
  append_u64(buf, meta_str.size());
  buf += meta_str;
  for (const auto& name : model.params().names()) append_tensor(buf, model.params().get(name));
  for (const auto& grp : queue.groups()) {
    append_tensor(buf, grp.content);
    append_tensor(buf, grp.position);
  }
  uint32_t crc = uint32_t(::crc32(0, reinterpret_cast<const Bytef*>(buf.data()), uInt(buf.size())));
  append_u32(buf, crc);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("checkpoint_save: cannot open " + path);
  out.write(buf.data(), std::streamsize(buf.size()));
  if (!out) throw std::runtime_error("checkpoint_save: write failed for " + path);
}

LoadedCheckpoint checkpoint_load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint_load: cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  if (buf.size() < sizeof(kMagic) + 4 + 8 + 4)
    throw std::runtime_error("checkpoint_load: truncated file " + path);
  if (std::memcmp(buf.data(), kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("checkpoint_load: bad magic in " + path);
  uint32_t version = get_u32(buf, 8);
  if (version != kVersion)
    throw std::runtime_error("checkpoint_load: unsupported version " + std::to_string(version));

  uint32_t stored_crc = get_u32(buf, buf.size() - 4);
  uint32_t crc =
      uint32_t(::crc32(0, reinterpret_cast<const Bytef*>(buf.data()), uInt(buf.size() - 4)));
  if (crc != stored_crc)
    throw std::runtime_error("checkpoint_load: integrity check failed (crc mismatch) in " + path);

  uint64_t meta_len = get_u64(buf, 12);
  size_t meta_off = 20;
  if (meta_off + meta_len > buf.size() - 4)
    throw std::runtime_error("checkpoint_load: truncated metadata in " + path);
  nlohmann::json meta = nlohmann::json::parse(buf.substr(meta_off, meta_len));

  LoadedCheckpoint out;
  out.step = meta.at("step").get<int>();
  out.config_hash = meta.at("config_hash").get<std::string>();
  out.mode = meta.at("mode").get<std::string>() == "instance" ? TaskMode::kInstance
                                                              : TaskMode::kSemantic;

  ModelConfig mc;
  const auto& jm = meta.at("model");
  mc.d_q = jm.at("d_q").get<int>();
  mc.decoder_layers = jm.at("decoder_layers").get<int>();
  mc.backbone_channels = jm.at("backbone_channels").get<std::vector<int>>();
  mc.image_h = jm.at("image_h").get<int>();
  mc.image_w = jm.at("image_w").get<int>();
  mc.attention_heads = jm.at("attention_heads").get<int>();
  mc.ffn_hidden = jm.at("ffn_hidden").get<int>();
  int num_classes = jm.at("num_classes").get<int>();

  out.model = std::make_unique<Model<float>>(mc, 0);
  out.queue = std::make_unique<QueryQueue<float>>(meta.at("queue").at("d_q").get<int>());

  // rebuild queue groups (blobs are read below)
  for (const auto& jg : meta.at("queue").at("groups")) {
    QueryGroup<float> grp;
    grp.step_index = jg.at("step_index").get<int>();
    grp.query_count = jg.at("query_count").get<int>();
    grp.class_ids = jg.at("class_ids").get<std::vector<int>>();
    grp.frozen = jg.at("frozen").get<bool>();
    grp.content = Tensor<float>({grp.query_count, out.queue->d_q()});
    grp.position = Tensor<float>({grp.query_count, out.queue->d_q()});
    out.queue->load_group(std::move(grp));
  }

  size_t off = meta_off + meta_len;
  const size_t payload_end = buf.size() - 4;
  auto read_tensor = [&](const std::vector<int>& shape) {
    Tensor<float> t(shape);
    size_t bytes = size_t(t.numel()) * 4;
    if (off + bytes > payload_end)
      throw std::runtime_error("checkpoint_load: truncated tensor payload in " + path);
    std::memcpy(t.data(), buf.data() + off, bytes);
    off += bytes;
    return t;
  };

  for (const auto& jt : meta.at("tensors")) {
    std::string name = jt.at("name").get<std::string>();
    std::vector<int> shape = jt.at("shape").get<std::vector<int>>();
    Tensor<float> t = read_tensor(shape);
    if (name.rfind("queue.g", 0) == 0) {
      size_t dot = name.find('.', 7);
      int gi = std::stoi(name.substr(7, dot - 7));
      std::string field = name.substr(dot + 1);
      auto& grp = out.queue->group(gi);
      (field == "content" ? grp.content : grp.position) = std::move(t);
    } else {
      if (!out.model->params().has(name))
        throw std::runtime_error("checkpoint_load: unknown tensor '" + name + "'");
      if (name == "head.class.weight" || name == "head.class.bias")
        out.model->params().get(name) = std::move(t);  // shape grows with steps
      else if (out.model->params().get(name).dims() != shape)
        throw std::runtime_error("checkpoint_load: shape mismatch for '" + name + "'");
      else
        out.model->params().get(name) = std::move(t);
    }
  }
  if (off != payload_end)
    throw std::runtime_error("checkpoint_load: trailing bytes after payload in " + path);
  out.model->force_class_count(num_classes);
  out.queue->check_invariants();
  return out;
}

}  // namespace ciseg
