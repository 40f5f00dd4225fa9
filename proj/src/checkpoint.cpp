#include "xda/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "xda/errors.hpp"

namespace xda {

namespace {

static_assert(sizeof(float) == 4 && std::numeric_limits<float>::is_iec559);

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : bytes_(b) {}
  std::uint64_t uint(int width) {
    need(static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }
  std::string text(std::size_t n) {
    need(n);
    std::string s(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_), bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw FormatError("checkpoint: truncated at byte " + std::to_string(pos_));
  }
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

std::uint32_t checked_u32(std::size_t v, const char* what) {
  if (v > 0xffffffffULL) throw FormatError(std::string("checkpoint: ") + what + " too large");
  return static_cast<std::uint32_t>(v);
}

Record to_record(const std::string& name, const Tensor& t) {
  Record r{name, t.shape(), {}};
  r.values.reserve(t.size());
  for (Real v : t.data()) r.values.push_back(static_cast<float>(v));
  return r;
}

SegModel model_from(const TrainConfig& config, const std::vector<const Record*>& records, const std::string& prefix) {
  SegModel m(config.model, 0);
  const auto names = m.named_parameters();
  if (records.size() != names.size())
    throw DimensionError("checkpoint: " + std::to_string(records.size()) + " " + (prefix.empty() ? "student" : "teacher") +
                         " tensors, model needs " + std::to_string(names.size()));
  std::vector<NamedTensor> loaded;
  for (std::size_t i = 0; i < names.size(); ++i) {
    const Record& r = *records[i];
    std::vector<Real> v(r.values.begin(), r.values.end());
    if (numel(r.shape) != v.size()) throw FormatError("checkpoint: record " + r.name + " has inconsistent size");
    loaded.emplace_back(r.name.substr(prefix.size()), Tensor::constant(r.shape, std::move(v)));
  }
  m.load_parameters(loaded);
  return m;
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const RawCheckpoint& ckpt) {
  std::vector<std::uint8_t> out{'X', 'D', 'A', '1'};
  put_u64(out, ckpt.config_hash);
  put_u32(out, checked_u32(ckpt.records.size(), "record count"));
  for (const auto& r : ckpt.records) {
    if (numel(r.shape) != r.values.size()) throw DimensionError("checkpoint: record " + r.name + " shape/size mismatch");
    put_u32(out, checked_u32(r.name.size(), "name"));
    out.insert(out.end(), r.name.begin(), r.name.end());
    put_u32(out, checked_u32(r.shape.size(), "rank"));
    for (std::size_t d : r.shape) put_u32(out, checked_u32(d, "dimension"));
    for (float f : r.values) put_u32(out, std::bit_cast<std::uint32_t>(f));
  }
  return out;
}

RawCheckpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader in(bytes);
  if (in.text(4) != "XDA1") throw FormatError("checkpoint: bad magic (expected XDA1)");
  RawCheckpoint ckpt;
  ckpt.config_hash = in.uint(8);
  const auto count = in.uint(4);
  for (std::uint64_t i = 0; i < count; ++i) {
    Record r;
    r.name = in.text(in.uint(4));
    const auto rank = in.uint(4);
    if (rank > 8) throw FormatError("checkpoint: record " + r.name + " has implausible rank");
    for (std::uint64_t k = 0; k < rank; ++k) r.shape.push_back(in.uint(4));
    const std::size_t n = numel(r.shape);
    if (n > bytes.size()) throw FormatError("checkpoint: record " + r.name + " larger than the file");
    r.values.resize(n);
    for (auto& f : r.values) f = std::bit_cast<float>(static_cast<std::uint32_t>(in.uint(4)));
    ckpt.records.push_back(std::move(r));
  }
  if (!in.done()) throw FormatError("checkpoint: trailing bytes");
  return ckpt;
}

void write_raw_checkpoint(const std::filesystem::path& path, const RawCheckpoint& ckpt) {
  const auto bytes = encode_checkpoint(ckpt);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw FormatError("write failed for " + path.string());
}

RawCheckpoint read_raw_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot read " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

RawCheckpoint make_checkpoint(const TrainConfig& config, const SegModel& student, const SegModel* teacher) {
  RawCheckpoint ckpt;
  const std::string text = config.canonical();
  ckpt.config_hash = fnv1a(text);
  Record meta{kConfigRecord, {text.size()}, {}};
  for (unsigned char ch : text) meta.values.push_back(static_cast<float>(ch));
  ckpt.records.push_back(std::move(meta));
  for (const auto& [name, t] : student.named_parameters()) ckpt.records.push_back(to_record(name, t));
  if (teacher != nullptr)
    for (const auto& [name, t] : teacher->named_parameters())
      ckpt.records.push_back(to_record(kTeacherPrefix + name, t));
  return ckpt;
}

LoadedCheckpoint load_checkpoint(const RawCheckpoint& raw) {
  const Record* meta = nullptr;
  std::vector<const Record*> student, teacher;
  const std::string tp = kTeacherPrefix;
  for (const auto& r : raw.records) {
    if (r.name == kConfigRecord) meta = &r;
    else if (r.name.rfind(tp, 0) == 0) teacher.push_back(&r);
    else student.push_back(&r);
  }
  if (meta == nullptr) throw FormatError("checkpoint: missing " + std::string(kConfigRecord) + " record");
  std::string text;
  for (float f : meta->values) {
    if (!(f >= 0 && f < 256)) throw FormatError("checkpoint: corrupt config record");
    text.push_back(static_cast<char>(static_cast<unsigned char>(f)));
  }
  if (fnv1a(text) != raw.config_hash) throw FormatError("checkpoint: config hash does not match the embedded config");
  TrainConfig config = parse_config(text);
  SegModel s = model_from(config, student, "");
  std::optional<SegModel> t;
  if (!teacher.empty()) t = model_from(config, teacher, tp).clone(false);
  return {std::move(config), std::move(s), std::move(t)};
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) { return load_checkpoint(read_raw_checkpoint(path)); }

void save_checkpoint(const std::filesystem::path& path, const TrainConfig& config, const SegModel& student,
                     const SegModel* teacher) {
  write_raw_checkpoint(path, make_checkpoint(config, student, teacher));
}

RawCheckpoint strip_teacher(const RawCheckpoint& raw) {
  RawCheckpoint out{raw.config_hash, {}};
  const std::string tp = kTeacherPrefix;
  for (const auto& r : raw.records)
    if (r.name.rfind(tp, 0) != 0) out.records.push_back(r);
  return out;
}

void round_to_float(SegModel& model) {
  for (auto& t : model.parameters())
    for (auto& v : t.mutable_data()) v = static_cast<Real>(static_cast<float>(v));
}

}  // namespace xda
