#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "fetalsleep/container.hpp"
#include "fetalsleep/edf.hpp"
#include "fetalsleep/error.hpp"
#include "fetalsleep/random.hpp"
#include "fetalsleep/synth.hpp"

using namespace fsn;

namespace {

std::string pad(std::string s, std::size_t width) {
  s.resize(width, ' ');
  return s;
}

// Hand-assembled EDF, independent of the writer: 2 signals, 3 records of 1 s,
// 4 and 2 samples per record.
edf::Bytes handmade_edf(int header_bytes = 768, int records = 3) {
  std::string h;
  h += pad("0", 8) + pad("X F 01-JAN-2000 Test", 80) + pad("Startdate 01-JAN-2000 X X X", 80);
  h += pad("01.01.00", 8) + pad("22.10.05", 8) + pad(std::to_string(header_bytes), 8) + pad("", 44);
  h += pad(std::to_string(records), 8) + pad("1", 8) + pad("2", 4);
  h += pad("EEG Fpz-Cz", 16) + pad("EEG Pz-Oz", 16);
  h += pad("AgAgCl electrode", 80) + pad("AgAgCl electrode", 80);
  h += pad("uV", 8) + pad("mV", 8);
  h += pad("-200", 8) + pad("-1.5", 8);
  h += pad("200", 8) + pad("1.5", 8);
  h += pad("-2048", 8) + pad("-32768", 8);
  h += pad("2047", 8) + pad("32767", 8);
  h += pad("HP:0.5Hz", 80) + pad("", 80);
  h += pad("4", 8) + pad("2", 8);
  h += pad("", 32) + pad("", 32);
  edf::Bytes out(h.begin(), h.end());
  std::int16_t v = -300;
  for (int r = 0; r < records; ++r)
    for (int k = 0; k < 6; ++k) {
      const auto u = static_cast<std::uint16_t>(v);
      out.push_back(u & 0xff);
      out.push_back(u >> 8);
      v += 97;
    }
  return out;
}

Recording noise_recording(std::size_t seconds, double fs, std::uint64_t seed, double sd) {
  std::mt19937_64 rng(seed);
  Recording r;
  r.sample_rate_hz = fs;
  r.subject_id = "S";
  for (const char* label : {"ch0", "ch1"}) {
    Channel c{label, std::vector<double>(seconds * static_cast<std::size_t>(fs))};
    for (auto& x : c.samples) x = sd * standard_normal(rng);
    r.channels.push_back(std::move(c));
  }
  return r;
}

}  // namespace

TEST(Edf, ParsesHandmadeFile) {
  const auto bytes = handmade_edf();
  const auto f = edf::parse_edf(bytes);
  EXPECT_EQ(f.header.header_bytes, 768);
  EXPECT_EQ(f.header.num_signals(), 2);
  EXPECT_EQ(f.header.num_records, 3);
  EXPECT_EQ(f.header.signals[0].label, "EEG Fpz-Cz");
  ASSERT_EQ(f.signals[0].samples.size(), 12u);
  ASSERT_EQ(f.signals[1].samples.size(), 6u);
  // first digital value -300 on a 400 µV / 4095 step scale
  const double q0 = 400.0 / 4095.0;
  EXPECT_NEAR(f.signals[0].samples[0], -200.0 + (-300 + 2048) * q0, 1e-9);
  // second signal stored in mV, returned in µV
  const double q1 = 3.0 / 65535.0;
  const int d = -300 + 4 * 97;
  EXPECT_NEAR(f.signals[1].samples[0], 1e3 * (-1.5 + (d + 32768) * q1), 1e-9);
}

TEST(Edf, ByteExactRoundTrip) {
  const auto bytes = handmade_edf();
  EXPECT_EQ(edf::write_edf(edf::parse_edf(bytes)), bytes);
}

TEST(Edf, HeaderErrors) {
  try {
    edf::parse_edf(handmade_edf(1024));
    FAIL() << "inconsistent header_bytes accepted";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), 184u);
  }
  auto bad = handmade_edf();
  bad[236] = 'x';  // record count field
  EXPECT_THROW(edf::parse_edf(bad), ParseError);
  auto truncated = handmade_edf();
  truncated.resize(truncated.size() - 5);
  EXPECT_THROW(edf::parse_edf(truncated), ParseError);
  EXPECT_THROW(edf::parse_edf(edf::Bytes(100, ' ')), ParseError);
}

TEST(Edf, NeverReadsPastDeclaredRecords) {
  auto bytes = handmade_edf(768, 2);
  const auto two = edf::parse_edf(bytes);
  bytes.insert(bytes.end(), 40, 0x7f);
  const auto padded = edf::parse_edf(bytes);
  EXPECT_EQ(padded.signals[0].samples, two.signals[0].samples);
  EXPECT_EQ(padded.header.num_records, 2);
}

TEST(Edf, ZeroRecordingWrites) {
  Recording r;
  r.sample_rate_hz = 100.0;
  r.channels = {{"a", std::vector<double>(1000, 0.0)}, {"b", std::vector<double>(1000, 0.0)}};
  const auto header = edf::make_header(r, 1.0);
  const auto f = edf::parse_edf(edf::write_edf(header, r));
  EXPECT_EQ(f.header.num_records, 10);
  EXPECT_EQ(f.header.header_bytes, 768);
  for (const auto& s : f.signals)
    for (double v : s.samples) EXPECT_LE(std::abs(v), header.signals[0].quantum());
}

// |error| <= one digital quantum over random recordings, scales and rates
TEST(Edf, QuantisationBoundProperty) {
  for (std::uint64_t seed = 1; seed <= 12; ++seed) {
    const double fs = seed % 2 ? 100.0 : 400.0;
    const auto r = noise_recording(5 + seed % 4, fs, seed, 5.0 * seed);
    const auto header = edf::make_header(r, seed % 3 ? 1.0 : 0.5);
    const auto back = edf::parse_edf(edf::write_edf(header, r)).to_recording();
    ASSERT_EQ(back.channels.size(), 2u);
    EXPECT_DOUBLE_EQ(back.sample_rate_hz, fs);
    for (std::size_t c = 0; c < 2; ++c) {
      const double q = header.signals[c].quantum();
      ASSERT_EQ(back.channels[c].samples.size(), r.channels[c].samples.size());
      for (std::size_t i = 0; i < r.channels[c].samples.size(); ++i)
        ASSERT_LE(std::abs(back.channels[c].samples[i] - r.channels[c].samples[i]), q) << seed;
    }
  }
}

TEST(Edf, OutOfRangeSample) {
  auto r = noise_recording(2, 100.0, 3, 10.0);
  const auto header = edf::make_header(r);
  r.channels[1].samples[17] = header.signals[1].physical_max + 1.0;
  EXPECT_THROW(edf::write_edf(header, r), RangeError);
}

TEST(Hypnogram, RkMapping) {
  const auto& map = edf::rk_stage_map();
  for (const char* s : {"W", "R", "1", "2", "3", "4", "Movement", "?"}) EXPECT_TRUE(map.count(s)) << s;
  EXPECT_EQ(map.at("3"), map.at("4"));
  EXPECT_EQ(map.at("Sleep stage 3"), map.at("Sleep stage 4"));
  EXPECT_EQ(map.at("Movement time"), Stage::kExcluded);
  EXPECT_EQ(map.at("?"), Stage::kExcluded);

  const auto tal = edf::encode_tal({{0.0, 30.0, "Sleep stage 4"}, {30.0, 60.0, "Movement time"},
                                    {90.0, 30.0, "Sleep stage R"}});
  const auto track = edf::parse_hypnogram(tal);
  ASSERT_EQ(track.intervals.size(), 3u);
  EXPECT_EQ(track.intervals[0], (LabelInterval{0.0, 30.0, Stage::kN3}));
  EXPECT_EQ(track.intervals[1].stage, Stage::kExcluded);
  EXPECT_EQ(track.intervals[2].stage, Stage::kRem);
  EXPECT_TRUE(edf::parse_hypnogram("").intervals.empty());
}

TEST(Hypnogram, UnknownStageNamesString) {
  const auto tal = edf::encode_tal({{0.0, 30.0, "Sleep stage X"}});
  try {
    edf::parse_hypnogram(tal);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("Sleep stage X"), std::string::npos);
  }
}

TEST(Hypnogram, AnnotationFileRoundTrip) {
  const std::vector<edf::Annotation> a = {{0.0, 30.0, "Sleep stage W"}, {30.0, 90.0, "Sleep stage 2"},
                                          {120.0, 30.0, "Sleep stage 3"}};
  const auto bytes = edf::make_annotation_file(a, 150.0);
  const auto track = edf::parse_hypnogram_file(bytes);
  ASSERT_EQ(track.intervals.size(), 3u);
  EXPECT_EQ(track.intervals[1], (LabelInterval{30.0, 120.0, Stage::kN2}));
  EXPECT_EQ(edf::write_edf(edf::parse_edf(bytes)), bytes);
}

TEST(Tal, RawBytes) {
  const std::string raw = std::string("+0\x14\x14\0", 5) + std::string("+30\x15" "30\x14Sleep stage 1\x14\0", 22);
  const auto a = edf::parse_tal(raw);
  ASSERT_EQ(a.size(), 1u);
  EXPECT_EQ(a[0], (edf::Annotation{30.0, 30.0, "Sleep stage 1"}));
}

class Internal : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = std::filesystem::temp_directory_path() /
           ("fsn_edf_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) + "_" +
            ::testing::UnitTest::GetInstance()->current_test_info()->name());
    std::filesystem::create_directories(dir_);
  }
  void TearDown() override { std::filesystem::remove_all(dir_); }
  std::filesystem::path dir_;
};

TEST_F(Internal, DualChannelOneRemInterval) {
  auto r = noise_recording(10, 400.0, 5, 30.0);
  LabelTrack t{{{0.0, 10.0, Stage::kRem}}};
  const auto path = dir_ / "F01.fsr";
  container::write_internal(path, r, t);
  const auto [back, labels] = container::read_internal(path);
  EXPECT_EQ(back.sample_rate_hz, 400.0);
  EXPECT_EQ(back.channels.size(), 2u);
  EXPECT_EQ(back.subject_id, "F01");
  EXPECT_EQ(labels, t);
  for (std::size_t i = 0; i < r.num_samples(); ++i)
    EXPECT_EQ(back.channels[0].samples[i], static_cast<double>(static_cast<float>(r.channels[0].samples[i])));
}

TEST_F(Internal, LabelErrors) {
  auto r = noise_recording(1, 400.0, 6, 1.0);
  const auto path = dir_ / "F02.fsr";
  container::write_internal(path, r, {});
  container::write_text(container::labels_path(path), "0\t20\tREM\n10\t30\tNREM\n");
  EXPECT_THROW(container::read_internal(path), ParseError);
  container::write_text(container::labels_path(path), "0\t20\tDEEP\n");
  EXPECT_THROW(container::read_internal(path), ParseError);
}

TEST_F(Internal, BadMagicAndTruncation) {
  auto bytes = container::encode(noise_recording(1, 100.0, 7, 1.0));
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(container::decode(bad), ParseError);
  bytes.pop_back();
  EXPECT_THROW(container::decode(bytes), ParseError);
}

TEST_F(Internal, SynthOutputRoundTrips) {
  auto cfg = synth::default_config(synth::Domain::kFetal);
  cfg.duration_s = 1800.0;
  cfg.seed = 11;
  const auto g = synth::generate(cfg);
  const auto path = dir_ / "F03.fsr";
  container::write_internal(path, g.recording, g.labels);
  const auto [back, labels] = container::read_internal(path);
  EXPECT_EQ(labels, g.labels);
  EXPECT_EQ(container::encode(back), container::encode(g.recording));
}
