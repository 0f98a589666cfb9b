#include "lesionaware/checkpoint.hpp"

#include <bit>
#include <fstream>

#include <json.hpp>

namespace lesionaware {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are little-endian raw scalars");

namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'L', 'A', 'W', 'C', 'K', 'P', 'T', '\0'};
constexpr std::uint8_t kVersion = 1;

json config_to_json(const ModelConfig& cfg) {
  json j;
  j["fex"]["n_stages"] = cfg.fex.n_stages;
  j["fex"]["in_channels"] = cfg.fex.in_channels;
  j["fex"]["stem_channels"] = cfg.fex.stem_channels;
  j["fex"]["channels"] = cfg.fex.channels;
  j["fex"]["blocks"] = cfg.fex.blocks;
  j["fex"]["input_size"] = cfg.fex.input_size;
  j["num_classes"] = cfg.num_classes;
  j["use_lanet"] = cfg.use_lanet;
  j["use_cam"] = cfg.use_cam;
  j["use_sam"] = cfg.use_sam;
  j["use_mam"] = cfg.use_mam;
  j["cam_shared"] = cfg.cam_shared;
  j["cam_reduction"] = cfg.cam_reduction;
  return j;
}

ModelConfig config_from_json(const json& j) {
  ModelConfig cfg;
  const json& f = j.at("fex");
  cfg.fex.n_stages = f.at("n_stages").get<int>();
  cfg.fex.in_channels = f.at("in_channels").get<int>();
  cfg.fex.stem_channels = f.at("stem_channels").get<int>();
  cfg.fex.channels = f.at("channels").get<std::vector<int>>();
  cfg.fex.blocks = f.at("blocks").get<std::vector<int>>();
  cfg.fex.input_size = f.at("input_size").get<int>();
  cfg.num_classes = j.at("num_classes").get<int>();
  cfg.use_lanet = j.at("use_lanet").get<bool>();
  cfg.use_cam = j.at("use_cam").get<bool>();
  cfg.use_sam = j.at("use_sam").get<bool>();
  cfg.use_mam = j.at("use_mam").get<bool>();
  cfg.cam_shared = j.at("cam_shared").get<bool>();
  cfg.cam_reduction = j.at("cam_reduction").get<int>();
  return cfg;
}

}  // namespace

std::string model_config_to_json_text(const ModelConfig& cfg) { return config_to_json(cfg).dump(2); }

ModelConfig model_config_from_json_text(const std::string& text) {
  try {
    return config_from_json(json::parse(text));
  } catch (const json::exception& e) {
    throw IoError(std::string("malformed model config: ") + e.what());
  }
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  json header;
  header["config"] = config_to_json(ckpt.config);
  header["metadata"] = ckpt.metadata;
  json entries = json::array();
  std::uint64_t offset = 0;
  for (const auto& e : ckpt.entries) {
    json je;
    je["name"] = e.name;
    je["shape"] = e.shape;
    je["width"] = e.scalar_width;
    je["offset"] = offset;
    je["bytes"] = e.payload.size();
    entries.push_back(je);
    offset += e.payload.size();
  }
  header["entries"] = entries;
  const std::string header_text = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot create checkpoint file: " + path.string());
  out.write(kMagic, sizeof(kMagic));
  out.put(static_cast<char>(kVersion));
  const std::uint64_t len = header_text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
  for (const auto& e : ckpt.entries) {
    out.write(reinterpret_cast<const char*>(e.payload.data()),
              static_cast<std::streamsize>(e.payload.size()));
  }
  if (!out) throw IoError("failed writing checkpoint file: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint file: " + path.string());

  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw IoError("not a checkpoint file: " + path.string());
  }
  const int version = in.get();
  if (version != kVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(version) + " in " +
                  path.string());
  }
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in) throw IoError("truncated checkpoint file: " + path.string());
  std::string header_text(len, '\0');
  in.read(header_text.data(), static_cast<std::streamsize>(len));
  if (!in) throw IoError("truncated checkpoint file: " + path.string());

  Checkpoint ckpt;
  try {
    const json header = json::parse(header_text);
    ckpt.config = config_from_json(header.at("config"));
    ckpt.metadata = header.at("metadata").get<std::map<std::string, std::string>>();
    for (const auto& je : header.at("entries")) {
      CheckpointEntry e;
      e.name = je.at("name").get<std::string>();
      e.shape = je.at("shape").get<Shape>();
      e.scalar_width = je.at("width").get<int>();
      e.payload.resize(je.at("bytes").get<std::size_t>());
      ckpt.entries.push_back(std::move(e));
    }
  } catch (const json::exception& e) {
    throw IoError("malformed checkpoint header in " + path.string() + ": " + e.what());
  }
  for (auto& e : ckpt.entries) {
    in.read(reinterpret_cast<char*>(e.payload.data()), static_cast<std::streamsize>(e.payload.size()));
    if (!in) throw IoError("truncated checkpoint payload in " + path.string());
  }
  ckpt.version = version;
  return ckpt;
}

}  // namespace lesionaware
