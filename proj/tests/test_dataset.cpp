#include <doctest.h>

#include <filesystem>
#include <random>

#include "ibd/binio.hpp"
#include "ibd/error.hpp"
#include "ibd/dataset.hpp"

using namespace ibd;

namespace {

SyntheticSpec tiny_spec() {
  SyntheticSpec s;
  s.classes = 4;
  s.shape = {8, 8, 3};
  s.train_per_class = 12;
  s.val_per_class = 3;
  s.seed = 21;
  return s;
}

void be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

std::vector<std::uint8_t> idx_images(std::uint32_t n, std::uint32_t rows, std::uint32_t cols) {
  std::vector<std::uint8_t> out;
  be32(out, 0x00000803);
  be32(out, n);
  be32(out, rows);
  be32(out, cols);
  for (std::uint32_t i = 0; i < n * rows * cols; ++i) out.push_back(static_cast<std::uint8_t>(i * 7));
  return out;
}

std::vector<std::uint8_t> idx_labels(std::uint32_t n) {
  std::vector<std::uint8_t> out;
  be32(out, 0x00000801);
  be32(out, n);
  for (std::uint32_t i = 0; i < n; ++i) out.push_back(static_cast<std::uint8_t>(i % 10));
  return out;
}

}  // namespace

TEST_CASE("synthetic data: seeded, balanced, shaped") {
  const SplitDataset a = gen_synthetic(tiny_spec()), b = gen_synthetic(tiny_spec());
  CHECK(a.train == b.train);
  CHECK(a.val == b.val);
  CHECK(a.train.size() == 48);
  CHECK(a.val.size() == 12);
  for (int k = 0; k < 4; ++k) {
    CHECK(a.train.indices_of_label(k).size() == 12);
    CHECK(a.val.indices_of_label(k).size() == 3);
  }
  CHECK(a.train.pixels.size() == 48 * 192);
  CHECK(a.train.poisoned_count() == 0);

  SyntheticSpec other = tiny_spec();
  other.seed = 22;
  CHECK_FALSE(gen_synthetic(other).train == a.train);
  other.classes = 1;
  CHECK_THROWS_AS(gen_synthetic(other), Error);
}

TEST_CASE("IDX parsing") {
  const Dataset d = parse_idx(idx_images(5, 3, 4), idx_labels(5));
  CHECK(d.size() == 5);
  CHECK(d.shape == ImageShape{3, 4, 1});
  CHECK(d.label(3) == 3);
  CHECK(d.image(1)[0] == static_cast<std::uint8_t>(12 * 7));

  auto bad_magic = idx_images(5, 3, 4);
  bad_magic[3] = 0x01;
  CHECK_THROWS_AS(parse_idx(bad_magic, idx_labels(5)), Error);
  CHECK_THROWS_AS(parse_idx(idx_images(5, 3, 4), idx_labels(4)), Error);

  auto truncated = idx_images(5, 3, 4);
  truncated.pop_back();
  try {
    parse_idx(truncated, idx_labels(5));
    FAIL("truncated IDX accepted");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Format);
    CHECK(std::string(e.what()).find("expected 76 bytes, got 75") != std::string::npos);
  }
  CHECK_THROWS_AS(load_idx("", "labels.idx"), Error);
}

TEST_CASE("dataset format round-trips bit-exactly") {
  SplitDataset d = gen_synthetic(tiny_spec());
  Dataset& ds = d.train;
  ds.config_hash = "feedface";
  ds.records[5].assigned_label = 2;
  ds.records[5].provenance = Provenance::Poisoned;
  const auto bytes = encode_dataset(ds);
  const Dataset back = decode_dataset(bytes);
  CHECK(back == ds);
  CHECK(encode_dataset(back) == bytes);

  const auto dir = std::filesystem::temp_directory_path() / "ibd_test_dataset";
  std::filesystem::create_directories(dir);
  save_dataset(dir / "d.bin", ds);
  CHECK(read_file(dir / "d.bin") == bytes);
  CHECK(load_dataset(dir / "d.bin") == ds);
  std::filesystem::remove_all(dir);

  auto ver = bytes;
  ver[8] = 7;
  try {
    decode_dataset(ver);
    FAIL("wrong version accepted");
  } catch (const Error& e) {
    const std::string what = e.what();
    CHECK(what.find('7') != std::string::npos);
    CHECK(what.find('1') != std::string::npos);
  }
  CHECK_THROWS_AS(decode_dataset(std::span(bytes).first(bytes.size() - 1)), Error);
  auto extra = bytes;
  extra.push_back(0);
  CHECK_THROWS_AS(decode_dataset(extra), Error);
  CHECK_THROWS_AS(load_dataset("/nonexistent/ibd/d.bin"), Error);
}

TEST_CASE("random datasets round-trip") {
  std::mt19937_64 rng(8);
  for (int rep = 0; rep < 20; ++rep) {
    Dataset ds;
    ds.shape = {1 + rng() % 5, 1 + rng() % 5, 1 + rng() % 3};
    ds.classes = 2 + rng() % 9;
    ds.seed = rng();
    ds.name = "r" + std::to_string(rep);
    const std::size_t n = rng() % 30;
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<std::uint8_t> img(ds.shape.size());
      for (auto& b : img) b = static_cast<std::uint8_t>(rng());
      const int l = static_cast<int>(rng() % ds.classes);
      ds.push(img, {l, l, rng() % 2 ? Provenance::Poisoned : Provenance::Clean});
    }
    CHECK(decode_dataset(encode_dataset(ds)) == ds);
  }
}

TEST_CASE("manifest lists every sample with provenance") {
  Dataset ds;
  ds.name = "m";
  ds.shape = {2, 2, 1};
  ds.classes = 3;
  ds.push(std::vector<std::uint8_t>(4, 1), {0, 0, Provenance::Clean});
  ds.push(std::vector<std::uint8_t>(4, 2), {1, 2, Provenance::Poisoned});
  const std::string m = manifest_text(ds);
  CHECK(m.find("samples=2\n") != std::string::npos);
  CHECK(m.find("poisoned=1\n") != std::string::npos);
  CHECK(m.find("1 4 1 2 poisoned\n") != std::string::npos);
  CHECK_THROWS_AS(ds.push(std::vector<std::uint8_t>(4, 0), {0, 3, Provenance::Clean}), Error);
  CHECK_THROWS_AS(ds.push(std::vector<std::uint8_t>(3, 0), {0, 0, Provenance::Clean}), Error);
}
