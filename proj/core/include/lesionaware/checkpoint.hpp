#pragma once

#include <cstring>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "lesionaware/model.hpp"
#include "lesionaware/optimizer.hpp"

namespace lesionaware {

// Little-endian binary checkpoint: 8-byte magic, version byte, JSON header
// (config snapshot, metadata, entry table), then the raw parameter payloads in
// entry order.
struct CheckpointEntry {
  std::string name;
  Shape shape;
  int scalar_width = 4;  // bytes per scalar: 4 or 8
  std::vector<std::uint8_t> payload;
};

struct Checkpoint {
  int version = 1;
  ModelConfig config;
  std::map<std::string, std::string> metadata;
  std::vector<CheckpointEntry> entries;

  const CheckpointEntry* find(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return &e;
    return nullptr;
  }
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::string model_config_to_json_text(const ModelConfig& cfg);
ModelConfig model_config_from_json_text(const std::string& text);

namespace detail {

template <typename S>
std::vector<std::uint8_t> encode_scalars(const std::vector<S>& values) {
  std::vector<std::uint8_t> out(values.size() * sizeof(S));
  std::memcpy(out.data(), values.data(), out.size());
  return out;
}

template <typename S>
std::vector<S> decode_scalars(const CheckpointEntry& entry) {
  if (entry.scalar_width != static_cast<int>(sizeof(S))) {
    throw IoError("checkpoint entry '" + entry.name + "' has scalar width " +
                  std::to_string(entry.scalar_width) + ", expected " + std::to_string(sizeof(S)));
  }
  if (entry.payload.size() % sizeof(S) != 0) {
    throw IoError("checkpoint entry '" + entry.name + "' has a torn payload");
  }
  std::vector<S> values(entry.payload.size() / sizeof(S));
  std::memcpy(values.data(), entry.payload.data(), entry.payload.size());
  return values;
}

}  // namespace detail

template <typename S>
Checkpoint make_checkpoint(LesionModel<S>& model, const Adam<S>* optimizer,
                           std::map<std::string, std::string> metadata) {
  Checkpoint ckpt;
  ckpt.config = model.cfg;
  ckpt.metadata = std::move(metadata);
  const auto params = model.parameters();
  for (const auto& p : params) {
    ckpt.entries.push_back(
        {p.name, p.tensor.shape(), static_cast<int>(sizeof(S)), detail::encode_scalars(p.tensor.values())});
  }
  for (auto& b : model.buffers()) {
    ckpt.entries.push_back({b.name,
                            Shape{static_cast<int>(b.values->size())},
                            static_cast<int>(sizeof(S)),
                            detail::encode_scalars(*b.values)});
  }
  if (optimizer) {
    const auto& slots = optimizer->slots();
    for (std::size_t i = 0; i < slots.size() && i < params.size(); ++i) {
      const Shape shape = params[i].tensor.shape();
      ckpt.entries.push_back({"adam.m." + params[i].name, shape, static_cast<int>(sizeof(S)),
                              detail::encode_scalars(slots[i].m)});
      ckpt.entries.push_back({"adam.v." + params[i].name, shape, static_cast<int>(sizeof(S)),
                              detail::encode_scalars(slots[i].v)});
    }
    ckpt.metadata["adam.steps"] = std::to_string(optimizer->steps());
  }
  return ckpt;
}

template <typename S>
LesionModel<S> restore_model(const Checkpoint& ckpt, std::uint64_t seed = 0) {
  LesionModel<S> model = LesionModel<S>::build(ckpt.config, seed);
  for (auto& p : model.parameters()) {
    const CheckpointEntry* e = ckpt.find(p.name);
    if (!e) throw IoError("checkpoint is missing parameter '" + p.name + "'");
    if (e->shape != p.tensor.shape()) {
      throw IoError("checkpoint parameter '" + p.name + "' has shape " + shape_str(e->shape) +
                    ", model expects " + shape_str(p.tensor.shape()));
    }
    p.tensor.assign_values(detail::decode_scalars<S>(*e));
  }
  for (auto& b : model.buffers()) {
    const CheckpointEntry* e = ckpt.find(b.name);
    if (!e) throw IoError("checkpoint is missing buffer '" + b.name + "'");
    auto values = detail::decode_scalars<S>(*e);
    if (values.size() != b.values->size()) {
      throw IoError("checkpoint buffer '" + b.name + "' has wrong length");
    }
    *b.values = std::move(values);
  }
  return model;
}

template <typename S>
void restore_optimizer(const Checkpoint& ckpt, const ParamList<S>& params, Adam<S>& optimizer) {
  std::vector<typename Adam<S>::Slot> slots;
  for (const auto& p : params) {
    const CheckpointEntry* em = ckpt.find("adam.m." + p.name);
    const CheckpointEntry* ev = ckpt.find("adam.v." + p.name);
    if (!em || !ev) throw IoError("checkpoint has no optimizer state for '" + p.name + "'");
    slots.push_back({detail::decode_scalars<S>(*em), detail::decode_scalars<S>(*ev)});
  }
  std::int64_t steps = 0;
  if (auto it = ckpt.metadata.find("adam.steps"); it != ckpt.metadata.end()) {
    steps = std::stoll(it->second);
  }
  optimizer.restore(std::move(slots), steps);
}

}  // namespace lesionaware
