#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "spcl/dataio.hpp"
#include "spcl/error.hpp"
#include "spcl/probes.hpp"
#include "spcl/rng.hpp"
#include "spcl/trainer.hpp"

using namespace spcl;
namespace fs = std::filesystem;

namespace {

std::string pgm(std::size_t w, std::size_t h, const std::string& payload) {
  return "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n" + payload;
}

TrainState toy_state() {
  EncoderConfig c;
  c.depth = 1;
  c.dim = 8;
  c.heads = 2;
  c.patch = 4;
  c.image = 8;
  TrainConfig t;
  t.seed = 4;
  TrainState s = init_state(c, t);
  // Give the optimizer state non-trivial contents.
  CounterRng rng(2);
  for (auto& m : s.opt.m)
    for (auto& v : m.data()) v = static_cast<float>(rng.normal());
  for (auto& m : s.opt.v)
    for (auto& v : m.data()) v = static_cast<float>(rng.uniform());
  s.opt.step = s.step = 17;
  s.loss.theta_tau = 2.5;
  return s;
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("spcl_dataio_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("PGM decoding maps bytes to [0, 1]") {
  const std::string payload = {'\x00', '\xff', '\x80', '\x40'};
  const ImageGray img = parse_pgm(pgm(2, 2, payload));
  CHECK(img.height == 2);
  CHECK(img.width == 2);
  CHECK(img.pixels[0] == 0.0f);
  CHECK(img.pixels[1] == 1.0f);
  CHECK(img.pixels[2] == doctest::Approx(128.0 / 255.0));
  CHECK(img.pixels[3] == doctest::Approx(64.0 / 255.0));
  CHECK(encode_pgm(img) == pgm(2, 2, payload));

  // Comments and arbitrary whitespace in the header are accepted.
  CHECK(parse_pgm("P5 # c\n2\t2\n# x\n255\n" + payload) == img);
}

TEST_CASE("PGM errors name the problem") {
  auto message = [](const std::string& bytes) {
    try {
      parse_pgm(bytes, "f.pgm");
    } catch (const FormatError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  CHECK(message("P2\n1 1\n255\n0\n").find("magic") != std::string::npos);
  CHECK(message(pgm(2, 2, "abc")).find("truncated") != std::string::npos);
  CHECK(message("P5\n2 2\n65535\n").find("maxval") != std::string::npos);
  CHECK(message("P5\n0 2\n255\n").find("width") != std::string::npos);
  CHECK(message("P5\nx 2\n255\n").find("width") != std::string::npos);
  CHECK(message("").find("f.pgm") != std::string::npos);
}

TEST_CASE("PGM parser never crashes on truncated or random input") {
  const std::string good = pgm(3, 2, "abcdef");
  for (std::size_t n = 0; n < good.size(); ++n) CHECK_THROWS_AS(parse_pgm(good.substr(0, n)), FormatError);
  CounterRng rng(99);
  for (int trial = 0; trial < 300; ++trial) {
    std::string bytes = trial % 2 ? good : "P5\n";
    const auto extra = rng.below(24);
    for (std::uint64_t i = 0; i < extra; ++i) {
      const auto pos = rng.below(bytes.size() + 1);
      bytes.insert(bytes.begin() + static_cast<std::ptrdiff_t>(pos), static_cast<char>(rng.below(256)));
    }
    try {
      const ImageGray img = parse_pgm(bytes);
      CHECK(img.pixels.size() == img.height * img.width);
    } catch (const FormatError&) {
    }
  }
}

TEST_CASE("PGM encoding quantizes and clamps") {
  const ImageGray img(1, 4, {-0.5f, 0.5f, 1.5f, 0.2f});
  const ImageGray back = parse_pgm(encode_pgm(img));
  CHECK(back.pixels[0] == 0.0f);
  CHECK(back.pixels[1] == doctest::Approx(128.0 / 255.0));
  CHECK(back.pixels[2] == 1.0f);
  CHECK(std::abs(back.pixels[3] - 0.2f) <= 0.5f / 255.0f + 1e-7f);
}

TEST_CASE("manifest parsing and validation") {
  const Manifest m = parse_manifest("path\tlabel\tsplit\na.pgm\t0\ttrain\nb.pgm\t3\n");
  REQUIRE(m.records.size() == 2);
  CHECK(m.records[1] == ManifestRecord{"b.pgm", 3, ""});
  CHECK_THROWS_AS(parse_manifest(""), FormatError);
  CHECK_THROWS_AS(parse_manifest("file\tlabel\n"), FormatError);
  CHECK_THROWS_AS(parse_manifest("path\tlabel\tsplit\na.pgm\n"), FormatError);
  CHECK_THROWS_AS(parse_manifest("path\tlabel\tsplit\na.pgm\tx\n"), FormatError);
  CHECK_THROWS_AS(parse_manifest("path\tlabel\tsplit\na.pgm\t-1\n"), FormatError);
  CHECK_THROWS_AS(parse_manifest("path\tlabel\tsplit\na.pgm\t1\na.pgm\t2\n"), FormatError);
}

TEST_CASE("checkpoint round trip is exact") {
  const TrainState s = toy_state();
  const std::string bytes = encode_checkpoint(s);
  const TrainState back = decode_checkpoint(bytes);
  CHECK(back == s);
  CHECK(encode_checkpoint(back) == bytes);

  const fs::path d = temp_dir("ckpt");
  save_checkpoint(d / "sub" / "c.spcl", s);
  CHECK(load_checkpoint(d / "sub" / "c.spcl") == s);
  fs::remove_all(d);
}

TEST_CASE("checkpoint corruption is detected") {
  const std::string bytes = encode_checkpoint(toy_state());
  auto message = [](const std::string& b) {
    try {
      decode_checkpoint(b);
    } catch (const FormatError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  // A flipped bit inside the last tensor payload.
  std::string flipped = bytes;
  flipped[bytes.size() - 4 - 8 - 2] ^= 0x10;
  CHECK(message(flipped).find("integrity") != std::string::npos);

  std::string bumped = bytes;
  bumped[4] = static_cast<char>(kCheckpointVersion + 1);
  CHECK(message(bumped).find("unsupported checkpoint version 2") != std::string::npos);

  CHECK(message("XXXX" + bytes.substr(4)).find("magic") != std::string::npos);
  CHECK(message(bytes + "x").find("trailing") != std::string::npos);
  CHECK(message(bytes.substr(0, 3)).find("magic") != std::string::npos);
  for (std::size_t n : {8u, 40u, 200u}) CHECK(message(bytes.substr(0, n)).find("truncated") != std::string::npos);
  for (std::size_t n = 0; n < bytes.size(); n += 97) CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, n)), FormatError);
}

TEST_CASE("embedding files round trip") {
  LabeledEmbeddings e;
  e.embeddings = Tensor::matrix({{0.6f, 0.8f}, {1.0f, 0.0f}, {0.123456789f, -0.9923f}});
  e.labels = {2, 0, 1};
  const LabeledEmbeddings back = parse_embeddings(format_embeddings(e));
  CHECK(back.labels == e.labels);
  CHECK(back.embeddings == e.embeddings);
  const fs::path d = temp_dir("emb");
  export_embeddings(d / "e.tsv", e);
  CHECK(import_embeddings(d / "e.tsv").embeddings == e.embeddings);
  fs::remove_all(d);
  CHECK_THROWS_AS(parse_embeddings("x\ty\n"), FormatError);
  CHECK_THROWS_AS(parse_embeddings("label\td0\td1\n0\t1\n"), FormatError);
  CHECK_THROWS_AS(parse_embeddings("label\td0\n"), FormatError);
}

TEST_CASE("synthetic images are deterministic and label-informative") {
  SyntheticConfig cfg;
  CHECK(synthetic_image(cfg, 7, 3) == synthetic_image(cfg, 7, 3));
  CHECK_FALSE(synthetic_image(cfg, 7, 3) == synthetic_image(cfg, 8, 3));
  SyntheticConfig other = cfg;
  other.seed = 1;
  CHECK_FALSE(synthetic_image(cfg, 7, 3) == synthetic_image(other, 7, 3));

  // Without noise, the image minus the label-free background is the blob
  // alone: non-negative and concentrated in the label's quadrant.
  SyntheticConfig clean = cfg;
  clean.noise_std = 0.0;
  for (int label = 0; label < 4; ++label) {
    for (std::size_t idx = 0; idx < 10; ++idx) {
      const ImageGray img = synthetic_image(clean, idx, label);
      // Reference with the blob pushed to another quadrant.
      const ImageGray ref = synthetic_image(clean, idx, (label + 2) % 4);
      double q[4] = {0, 0, 0, 0};
      for (std::size_t y = 0; y < img.height; ++y)
        for (std::size_t x = 0; x < img.width; ++x) {
          const int quad = (x >= img.width / 2 ? 1 : 0) + (y >= img.height / 2 ? 2 : 0);
          q[quad] += img.at(y, x) - ref.at(y, x);
        }
      int best = 0;
      for (int k = 1; k < 4; ++k)
        if (q[k] > q[best]) best = k;
      CHECK(best == label);
    }
  }
  for (float v : synthetic_image(cfg, 0, 1).pixels) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }
  CHECK_THROWS_AS(synthetic_image(cfg, 0, -1), ConfigError);
}

TEST_CASE("gen_synthetic writes images, manifest and splits") {
  const fs::path d = temp_dir("gen");
  SyntheticConfig cfg;
  cfg.height = cfg.width = 16;
  const Manifest m = gen_synthetic(d, 10, cfg, 0.3);
  REQUIRE(m.records.size() == 10);
  std::size_t tests = 0;
  for (const auto& r : m.records) tests += r.split == "test";
  CHECK(tests == 3);
  CHECK(m.records.back().split == "test");
  const auto train = load_dataset(d, std::string("train"));
  CHECK(train.images.size() == 7);
  CHECK(load_dataset(d, std::nullopt).images.size() == 10);
  CHECK(train.labels[5] == 1);
  CHECK(read_manifest(d / kManifestName).records == m.records);
  CHECK_THROWS_AS(gen_synthetic(d, 0, cfg), ConfigError);
  CHECK_THROWS_AS(gen_synthetic(d, 5, cfg, 1.0), ConfigError);
  fs::remove_all(d);
  CHECK_THROWS_AS(load_dataset(d, std::nullopt), FormatError);
}
