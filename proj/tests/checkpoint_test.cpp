#include <gtest/gtest.h>

#include <algorithm>
#include <cstring>
#include <random>
#include <string>
#include <vector>

#include "patchkit/checkpoint.hpp"
#include "test_util.hpp"

namespace patchkit {
namespace {

using test::raw_container;
using test::slurp;
using test::spit;
using test::TempDir;

std::string error_kind(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  return "<no error>";
}

TEST(OpenCheckpoint, MinimalContainer) {
  TempDir dir;
  const auto path = dir / "w.safetensors";
  spit(path, raw_container(R"({"w":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}})",
                           {0x00, 0x00, 0x80, 0x3F, 0x00, 0x00, 0x00, 0x40}));
  const auto manifest = open_checkpoint(path);
  ASSERT_EQ(manifest.size(), 1u);
  EXPECT_EQ(manifest.total_data_bytes(), 8u);
  const auto& record = manifest.records()[0];
  EXPECT_EQ(record.name, "w");
  EXPECT_EQ(record.dtype, DType::F32);
  EXPECT_EQ(record.shape, Shape{2});
  const auto tensor = read_tensor(manifest, "w");
  EXPECT_EQ(tensor.values, (std::vector<float>{1.0f, 2.0f}));
}

TEST(OpenCheckpoint, RejectsInvalidContainers) {
  TempDir dir;
  const auto path = dir / "bad.safetensors";
  auto kind_for = [&](const std::string& header, std::vector<std::uint8_t> data) {
    spit(path, raw_container(header, data));
    return error_kind([&] { open_checkpoint(path); });
  };
  const std::vector<std::uint8_t> eight(8), twelve(12);
  EXPECT_EQ(kind_for(R"({"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},)"
                     R"("b":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}})",
                     eight),
            "OverlappingOffsets");
  EXPECT_EQ(kind_for(R"({"a":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}})", eight), "GappedOffsets");
  EXPECT_EQ(kind_for(R"({"a":{"dtype":"F64","shape":[1],"data_offsets":[0,8]}})", eight), "UnknownDtype");
  EXPECT_EQ(kind_for(R"({"a":{"dtype":"F32","shape":[3],"data_offsets":[0,12]}})", eight), "TruncatedFile");
  EXPECT_EQ(kind_for(R"({"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}})", twelve), "TrailingBytes");
  EXPECT_EQ(kind_for(R"({"a":{"dtype":"F32","shape":[3],"data_offsets":[0,8]}})", eight), "SizeMismatch");
  EXPECT_EQ(kind_for(R"({"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]})", eight), "MalformedHeader");
  EXPECT_EQ(kind_for(R"({"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8],"x":1}})", eight),
            "MalformedHeader");
  EXPECT_EQ(kind_for(R"({"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},)"
                     R"("a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}})",
                     eight),
            "DuplicateName");
  EXPECT_EQ(kind_for(R"({"__metadata__":{"role":3}})", {}), "MalformedHeader");

  spit(path, {1, 2, 3});
  EXPECT_EQ(error_kind([&] { open_checkpoint(path); }), "TruncatedFile");
  EXPECT_EQ(error_kind([&] { open_checkpoint(dir / "nope"); }), "OpenFailed");
}

TEST(ReadTensor, UnknownNameIsAnError) {
  TempDir dir;
  const auto m = write_checkpoint(std::vector<TensorEntry>{}, dir / "e.safetensors", {});
  EXPECT_EQ(error_kind([&] { read_tensor(m, "missing"); }), "UnknownTensor");
}

TEST(ReadTensor, NonFloatIsPassThrough) {
  TempDir dir;
  TensorEntry ids{{"ids", DType::I64, {2}}, std::vector<std::byte>(16, std::byte{7})};
  const auto m = write_checkpoint(std::vector{ids}, dir / "i.safetensors", {});
  const auto t = read_tensor(m, "ids");
  EXPECT_FALSE(t.arithmetic());
  EXPECT_TRUE(t.values.empty());
  EXPECT_EQ(t.raw, ids.data);
}

TEST(WriteCheckpoint, EmptyStream) {
  TempDir dir;
  const auto m = write_checkpoint(std::vector<TensorEntry>{}, dir / "empty.safetensors", {});
  EXPECT_EQ(m.total_data_bytes(), 0u);
  EXPECT_EQ(m.size(), 0u);
  EXPECT_EQ(open_checkpoint(dir / "empty.safetensors"), m);
}

TEST(WriteCheckpoint, HeaderIsSortedPaddedAndPacked) {
  TempDir dir;
  const std::vector<float> one = {1.0f};
  std::vector<TensorEntry> entries = {make_entry("z", DType::F32, {1}, one), make_entry("a", DType::BF16, {1}, one)};
  const auto m = write_checkpoint(entries, dir / "o.safetensors", {{"role", "model"}});
  // data is laid out in name order whatever the input order
  EXPECT_EQ(m.at("a").begin, 0u);
  EXPECT_EQ(m.at("a").end, 2u);
  EXPECT_EQ(m.at("z").begin, 2u);
  const auto bytes = slurp(dir / "o.safetensors");
  std::uint64_t header_len;
  std::memcpy(&header_len, bytes.data(), 8);
  EXPECT_EQ(header_len % 8, 0u);
  const std::string header(bytes.begin() + 8, bytes.begin() + 8 + static_cast<long>(header_len));
  EXPECT_LT(header.find("\"__metadata__\""), header.find("\"a\""));
  EXPECT_LT(header.find("\"a\""), header.find("\"z\""));
  EXPECT_EQ(m.metadata().at("role"), "model");
}

TEST(WriteCheckpoint, DuplicateNamesRejectedAndNothingLeftBehind) {
  TempDir dir;
  const std::vector<float> one = {1.0f};
  std::vector<TensorEntry> entries = {make_entry("x", DType::F32, {1}, one), make_entry("x", DType::F32, {1}, one)};
  EXPECT_EQ(error_kind([&] { write_checkpoint(entries, dir / "d.safetensors", {}); }), "DuplicateName");
  EXPECT_FALSE(std::filesystem::exists(dir / "d.safetensors"));
}

TEST(WriteCheckpoint, AbandonedWriterRemovesPartialFile) {
  TempDir dir;
  const auto path = dir / "p.safetensors";
  {
    CheckpointWriter writer(path, {{"a", DType::F32, {2}}, {"b", DType::F32, {1}}}, {});
    const std::vector<float> two = {1.0f, 2.0f};
    writer.write_values(two);
    EXPECT_TRUE(std::filesystem::exists(path.string() + ".partial"));
  }
  EXPECT_FALSE(std::filesystem::exists(path.string() + ".partial"));
  EXPECT_FALSE(std::filesystem::exists(path));
}

TEST(WriteCheckpoint, RefusesToOverwriteUnlessAsked) {
  TempDir dir;
  const auto path = dir / "x.safetensors";
  write_checkpoint(std::vector<TensorEntry>{}, path, {});
  EXPECT_EQ(error_kind([&] { write_checkpoint(std::vector<TensorEntry>{}, path, {}); }), "OutputExists");
  EXPECT_NO_THROW(write_checkpoint(std::vector<TensorEntry>{}, path, {}, WriteMode::overwrite));
}

TEST(WriteCheckpoint, RejectsWrongSizes) {
  TempDir dir;
  CheckpointWriter writer(dir / "s.safetensors", {{"a", DType::F32, {2}}}, {});
  const std::vector<float> three = {1, 2, 3};
  EXPECT_EQ(error_kind([&] { writer.write_values(three); }), "SizeMismatch");
  EXPECT_EQ(error_kind([&] { writer.commit(); }), "IncompleteWrite");
}

// Random manifests with every dtype, including empty and zero-size shapes.
std::vector<TensorEntry> random_entries(std::mt19937_64& rng) {
  static constexpr DType kTypes[] = {DType::F32, DType::F16, DType::BF16, DType::I64, DType::BOOL};
  std::vector<TensorEntry> entries;
  const int count = static_cast<int>(rng() % 6);
  for (int i = 0; i < count; ++i) {
    TensorEntry entry;
    entry.spec.name = "t" + std::to_string(rng() % 1000) + "_" + std::to_string(i);
    entry.spec.dtype = kTypes[rng() % 5];
    const int rank = static_cast<int>(rng() % 4);
    for (int d = 0; d < rank; ++d) entry.spec.shape.push_back(rng() % 5);
    entry.data.resize(element_count(entry.spec.shape) * byte_width(entry.spec.dtype));
    for (auto& b : entry.data) b = static_cast<std::byte>(rng());
    entries.push_back(std::move(entry));
  }
  return entries;
}

TEST(RoundTrip, RandomManifestsAreBitExact) {
  TempDir dir;
  std::mt19937_64 rng(42);
  for (int round = 0; round < 200; ++round) {
    const auto entries = random_entries(rng);
    Metadata metadata{{"role", "model"}, {"k" + std::to_string(round), "v"}};
    const auto first = dir / "first.safetensors";
    const auto second = dir / "second.safetensors";
    const auto written = write_checkpoint(entries, first, metadata, WriteMode::overwrite);
    const auto opened = open_checkpoint(first);
    ASSERT_EQ(written, opened);
    ASSERT_EQ(opened.metadata(), metadata);
    std::vector<TensorEntry> reread;
    for (const auto& entry : entries) {
      const auto& record = opened.at(entry.spec.name);
      EXPECT_EQ(record.dtype, entry.spec.dtype);
      EXPECT_EQ(record.shape, entry.spec.shape);
      const auto raw = read_raw(opened, record);
      ASSERT_EQ(raw, entry.data) << entry.spec.name;
      reread.push_back({entry.spec, raw});
    }
    write_checkpoint(reread, second, opened.metadata(), WriteMode::overwrite);
    ASSERT_EQ(slurp(first), slurp(second));
  }
}

TEST(RoundTrip, EntryOrderDoesNotChangeBytes) {
  TempDir dir;
  std::mt19937_64 rng(9);
  for (int round = 0; round < 50; ++round) {
    auto entries = random_entries(rng);
    write_checkpoint(entries, dir / "a.safetensors", {}, WriteMode::overwrite);
    std::shuffle(entries.begin(), entries.end(), rng);
    write_checkpoint(entries, dir / "b.safetensors", {}, WriteMode::overwrite);
    ASSERT_EQ(slurp(dir / "a.safetensors"), slurp(dir / "b.safetensors"));
  }
}

TEST(ValidateCompat, Reports) {
  TempDir dir;
  const std::vector<float> six(6, 1.0f), one = {1.0f};
  const auto a = write_checkpoint(
      std::vector{make_entry("lm_head.weight", DType::F32, {1}, one), make_entry("w", DType::F32, {2, 3}, six)},
      dir / "a.safetensors", {});
  const auto same = open_checkpoint(dir / "a.safetensors");
  EXPECT_TRUE(validate_compat(a, same).compatible());

  const auto b = write_checkpoint(std::vector{make_entry("w", DType::F32, {3, 2}, six)}, dir / "b.safetensors", {});
  const auto report = validate_compat(a, b);
  EXPECT_FALSE(report.compatible());
  EXPECT_EQ(report.only_in_a, std::vector<std::string>{"lm_head.weight"});
  EXPECT_TRUE(report.only_in_b.empty());
  EXPECT_EQ(report.shape_mismatches, std::vector<std::string>{"w"});

  const auto c = write_checkpoint(std::vector{make_entry("w", DType::BF16, {2, 3}, six),
                                              make_entry("lm_head.weight", DType::F32, {1}, one)},
                                  dir / "c.safetensors", {});
  EXPECT_EQ(validate_compat(a, c).dtype_mismatches, std::vector<std::string>{"w"});
}

}  // namespace
}  // namespace patchkit
