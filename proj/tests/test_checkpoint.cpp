#include "doctest.h"

#include <cstring>
#include <filesystem>
#include <fstream>

#include "xda/checkpoint.hpp"
#include "xda/errors.hpp"
#include "xda/trainer.hpp"

using namespace xda;

namespace {

const std::filesystem::path kGolden = XDA_GOLDEN_DIR "/tiny.xda";

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

TrainConfig tiny() {
  TrainConfig c;
  c.model.height = c.model.width = 16;
  c.data.height = c.data.width = 16;
  c.splits = {6, 6, 3};
  c.iterations = 3;
  c.warmup = 1;
  c.tau = 0.26;
  return c;
}

std::filesystem::path tmp(const std::string& name) { return std::filesystem::temp_directory_path() / name; }

}  // namespace

TEST_CASE("golden checkpoint decodes to the documented records") {
  const auto bytes = read_bytes(kGolden);
  REQUIRE(bytes.size() > 16);
  const RawCheckpoint raw = decode_checkpoint(bytes);
  const std::string text = "[model]\nheight = 8\n";
  CHECK(raw.config_hash == fnv1a(text));
  REQUIRE(raw.records.size() == 4);
  CHECK(raw.records[0].name == "meta.config");
  CHECK(raw.records[0].shape == Shape{text.size()});
  for (std::size_t i = 0; i < text.size(); ++i) CHECK(raw.records[0].values[i] == static_cast<float>(text[i]));
  CHECK(raw.records[1].name == "blocks.0.w");
  CHECK(raw.records[1].shape == Shape{2, 3});
  CHECK(raw.records[1].values == std::vector<float>{-0.5f, -0.25f, 0.0f, 0.25f, 0.5f, 0.75f});
  CHECK(raw.records[2].values == std::vector<float>{1.0f, -2.0f, 0.1f, 3.5e-3f});
  CHECK(raw.records[3].name == "teacher.blocks.0.w");
  // Re-encoding reproduces the file byte for byte.
  CHECK(encode_checkpoint(raw) == bytes);
}

TEST_CASE("golden header layout") {
  const auto bytes = read_bytes(kGolden);
  CHECK(std::memcmp(bytes.data(), "XDA1", 4) == 0);
  std::uint64_t hash = 0;
  for (int i = 0; i < 8; ++i) hash |= static_cast<std::uint64_t>(bytes[4 + i]) << (8 * i);
  CHECK(hash == fnv1a("[model]\nheight = 8\n"));
  CHECK(bytes[12] == 4);
  CHECK(bytes[13] == 0);
  CHECK(bytes[16] == std::strlen("meta.config"));
}

TEST_CASE("damaged checkpoints are rejected") {
  const auto bytes = read_bytes(kGolden);
  auto bad_magic = bytes;
  bad_magic[3] = '2';
  CHECK_THROWS_AS(decode_checkpoint(bad_magic), FormatError);
  CHECK_THROWS_AS(decode_checkpoint({bytes.begin(), bytes.end() - 1}), FormatError);
  auto trailing = bytes;
  trailing.push_back(0);
  CHECK_THROWS_AS(decode_checkpoint(trailing), FormatError);
  CHECK_THROWS_AS(decode_checkpoint({}), FormatError);
  // The golden config is not a loadable training config.
  CHECK_THROWS(load_checkpoint(decode_checkpoint(bytes)));
}

TEST_CASE("trained checkpoint round trips bitwise") {
  const TrainConfig c = tiny();
  const TrainResult r = train(c);
  const auto path = tmp("xda_ckpt_test.xda");
  save_checkpoint(path, c, r.student, &*r.teacher);
  const auto bytes = read_bytes(path);
  CHECK(encode_checkpoint(decode_checkpoint(bytes)) == bytes);

  const LoadedCheckpoint l = load_checkpoint(path);
  CHECK(l.config == c);
  const auto a = r.student.named_parameters(), b = l.student.named_parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].first == b[i].first);
    CHECK(std::equal(a[i].second.data().begin(), a[i].second.data().end(), b[i].second.data().begin()));
  }
  REQUIRE(l.teacher.has_value());
  const auto ta = r.teacher->parameters(), tb = l.teacher->parameters();
  for (std::size_t i = 0; i < ta.size(); ++i)
    CHECK(std::equal(ta[i].data().begin(), ta[i].data().end(), tb[i].data().begin()));

  // A second save of the loaded model is byte-identical.
  const auto again = tmp("xda_ckpt_test2.xda");
  save_checkpoint(again, l.config, l.student, &*l.teacher);
  CHECK(read_bytes(again) == bytes);

  // The final eval recorded during training is reproduced from disk.
  const auto data = make_dataset(c);
  CHECK(evaluate(l.student, c.perturbation, data->eval).mean == r.record.final_eval.mean);
  std::filesystem::remove(path);
  std::filesystem::remove(again);
}

TEST_CASE("stripping teacher state leaves predictions bitwise unchanged") {
  const TrainConfig c = tiny();
  const TrainResult r = train(c);
  const RawCheckpoint full = make_checkpoint(c, r.student, &*r.teacher);
  const RawCheckpoint stripped = strip_teacher(full);
  CHECK(stripped.records.size() == 1 + r.student.named_parameters().size());
  const LoadedCheckpoint a = load_checkpoint(full), b = load_checkpoint(stripped);
  CHECK_FALSE(b.teacher.has_value());
  const auto data = make_dataset(c);
  for (const auto& s : data->eval) CHECK(predict(a.student, s.image, c.perturbation) == predict(b.student, s.image, c.perturbation));
}

TEST_CASE("config/checkpoint mismatches are errors") {
  const TrainConfig c = tiny();
  SegModel m(c.model, 0);
  RawCheckpoint raw = make_checkpoint(c, m, nullptr);

  SUBCASE("hash disagrees with the embedded config") {
    raw.config_hash ^= 1;
    CHECK_THROWS_AS(load_checkpoint(raw), FormatError);
  }
  SUBCASE("missing parameter") {
    raw.records.pop_back();
    CHECK_THROWS_AS(load_checkpoint(raw), DimensionError);
  }
  SUBCASE("wrong shape") {
    raw.records.back().shape.push_back(1);
    CHECK_THROWS_AS(load_checkpoint(raw), DimensionError);
  }
  SUBCASE("missing config") {
    raw.records.erase(raw.records.begin());
    CHECK_THROWS_AS(load_checkpoint(raw), FormatError);
  }
}

TEST_CASE("config text round trips through its canonical form") {
  TrainConfig c = tiny();
  c.lambda_attn = 0.1;
  c.lr = 1.0 / 3.0;
  c.losses.stop_query_grad = false;
  c.perturbation = PerturbationMode::random;
  c.data.shift.hue_degrees = -45.5;
  const TrainConfig back = parse_config(c.canonical());
  CHECK(back == c);
  CHECK(back.canonical() == c.canonical());
  CHECK(back.hash() == c.hash());
  c.lambda_attn = 10;
  CHECK(c.hash() != back.hash());
}

TEST_CASE("partial configs keep defaults") {
  const TrainConfig c = parse_config("[train]\nseed = 7\n\n[losses]\nlambda_attn=10\nattn = false\n");
  TrainConfig d;
  d.seed = 7;
  d.lambda_attn = 10;
  d.losses.attn = false;
  CHECK(c == d);
  CHECK(parse_config("") == TrainConfig{});
}

TEST_CASE("config errors") {
  CHECK_THROWS_AS(parse_config("[train]\nsede = 1\n"), FormatError);
  CHECK_THROWS_AS(parse_config("[optim]\nlr = 1\n"), FormatError);
  CHECK_THROWS_AS(parse_config("[train]\nlr = fast\n"), FormatError);
  CHECK_THROWS_AS(parse_config("[train]\nlr = -1\n"), ContractError);
  CHECK_THROWS_AS(parse_config("[train]\ntau = 1\n"), ContractError);
  CHECK_THROWS_AS(parse_config("[losses]\nsup=false\ntgt=false\nt2s=false\ns2t=false\n"), ContractError);
  CHECK_THROWS_AS(parse_config("[model]\nheight = 30\n"), ContractError);
  CHECK_THROWS_AS(parse_config("[losses]\nperturbation = sometimes\n"), FormatError);
  CHECK_THROWS_AS(load_config("/nonexistent/xda.ini"), FormatError);
}
