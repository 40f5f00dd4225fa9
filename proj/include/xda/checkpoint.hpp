#pragma once

// Binary checkpoints. Layout, all integers little-endian:
//   "XDA1" | u64 config hash | u32 record count |
//   per record: u32 name length, name bytes, u32 rank, u32 dims[rank], f32 values
// The config text travels as the record "meta.config" (one float per byte) so
// a checkpoint can be evaluated without the original config file. Teacher
// parameters are stored under "teacher.<name>".

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "xda/config.hpp"
#include "xda/segnet.hpp"

namespace xda {

struct Record {
  std::string name;
  Shape shape;
  std::vector<float> values;
  bool operator==(const Record&) const = default;
};

struct RawCheckpoint {
  std::uint64_t config_hash = 0;
  std::vector<Record> records;
};

std::vector<std::uint8_t> encode_checkpoint(const RawCheckpoint& ckpt);
RawCheckpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);
void write_raw_checkpoint(const std::filesystem::path& path, const RawCheckpoint& ckpt);
RawCheckpoint read_raw_checkpoint(const std::filesystem::path& path);

inline constexpr const char* kConfigRecord = "meta.config";
inline constexpr const char* kTeacherPrefix = "teacher.";

RawCheckpoint make_checkpoint(const TrainConfig& config, const SegModel& student, const SegModel* teacher);

struct LoadedCheckpoint {
  TrainConfig config;
  SegModel student;
  std::optional<SegModel> teacher;
};

// Throws FormatError on a damaged file or when the stored hash disagrees with
// the embedded config, DimensionError when parameters do not fit the model.
LoadedCheckpoint load_checkpoint(const RawCheckpoint& raw);
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);
void save_checkpoint(const std::filesystem::path& path, const TrainConfig& config, const SegModel& student,
                     const SegModel* teacher);

// Drops teacher records; everything needed for inference remains.
RawCheckpoint strip_teacher(const RawCheckpoint& raw);

// Rounds every parameter to the nearest float so in-memory and saved models agree.
void round_to_float(SegModel& model);

}  // namespace xda
