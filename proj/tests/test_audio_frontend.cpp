#include <cmath>
#include <complex>
#include <filesystem>
#include <numbers>
#include <random>

#include <doctest.h>

#include "opt/array_io.hpp"
#include "opt/audio_frontend.hpp"
#include "opt/error.hpp"

namespace fs = std::filesystem;
using namespace opt::audio;

namespace {

WaveBuffer tone(double hz, double seconds, int rate = kSampleRate, double amp = 0.5) {
  WaveBuffer w;
  w.sample_rate = rate;
  w.samples.resize(static_cast<size_t>(seconds * rate));
  for (size_t i = 0; i < w.samples.size(); ++i)
    w.samples[i] = static_cast<float>(amp * std::sin(2 * std::numbers::pi * hz * static_cast<double>(i) / rate));
  return w;
}

fs::path temp_dir() {
  auto d = fs::temp_directory_path() / "opt_audio_test";
  fs::create_directories(d);
  return d;
}

// Independent log-mel oracle: direct O(N²) DFT and triangle weights evaluated
// from the mel-scale definition.
std::vector<std::vector<double>> oracle_log_mel(const std::vector<float>& x, int first_hop, int n_hops) {
  auto mel = [](double hz) { return 1127.0 * std::log(1.0 + hz / 700.0); };
  auto inv = [](double m) { return 700.0 * (std::exp(m / 1127.0) - 1.0); };
  std::vector<double> edge(18);
  for (int i = 0; i < 18; ++i) edge[i] = inv(mel(8000.0) * i / 17.0);
  std::vector<std::vector<double>> out(16, std::vector<double>(n_hops));
  for (int h = 0; h < n_hops; ++h) {
    long start = static_cast<long>(first_hop + h) * 200 - 400;
    std::vector<double> frame(800);
    for (int i = 0; i < 800; ++i) {
      long s = start + i;
      double v = (s >= 0 && s < static_cast<long>(x.size())) ? x[static_cast<size_t>(s)] : 0.0;
      frame[i] = v * (0.5 - 0.5 * std::cos(2 * std::numbers::pi * i / 800.0));
    }
    std::vector<double> power(401);
    for (int k = 0; k <= 400; ++k) {
      std::complex<double> acc = 0;
      for (int i = 0; i < 800; ++i) acc += frame[i] * std::polar(1.0, -2 * std::numbers::pi * k * i / 800.0);
      power[k] = std::norm(acc);
    }
    for (int m = 0; m < 16; ++m) {
      double e = 0;
      for (int k = 0; k <= 400; ++k) {
        double f = 20.0 * k;
        double w = 0;
        if (f > edge[m] && f <= edge[m + 1]) w = (f - edge[m]) / (edge[m + 1] - edge[m]);
        else if (f > edge[m + 1] && f < edge[m + 2]) w = (edge[m + 2] - f) / (edge[m + 2] - edge[m + 1]);
        e += w * power[k];
      }
      out[m][h] = std::log(std::max(e, 1e-10));
    }
  }
  return out;
}

}  // namespace

TEST_CASE("load_audio keeps 16 kHz files and resamples 48 kHz to 16000 samples per second") {
  auto dir = temp_dir();
  write_wav(dir / "a16.wav", tone(300, 1.0));
  auto w16 = load_audio(dir / "a16.wav");
  CHECK(w16.samples.size() == 16000);
  CHECK(w16.sample_rate == 16000);

  write_wav(dir / "a48.wav", tone(300, 1.0, 48000));
  auto w48 = load_audio(dir / "a48.wav");
  // floor(48000 · 16000 / 48000)
  CHECK(w48.samples.size() == 16000);
  // Band-limited resampling of a 300 Hz tone reproduces the 16 kHz tone in the interior.
  double max_err = 0;
  for (size_t i = 200; i < 15800; ++i) max_err = std::max(max_err, std::abs(double(w48.samples[i]) - w16.samples[i]));
  CHECK(max_err < 5e-3);
  for (float s : w48.samples) CHECK(std::abs(s) <= 1.0F);
}

TEST_CASE("load_audio rejects missing, empty and unsupported files") {
  auto dir = temp_dir();
  CHECK_THROWS_AS(load_audio(dir / "nope.wav"), opt::IoError);
  WaveBuffer empty;
  write_wav(dir / "empty.wav", empty);
  CHECK_THROWS_AS(load_audio(dir / "empty.wav"), opt::ValidationError);
  opt::io::write_text(dir / "junk.wav", "definitely not audio");
  CHECK_THROWS_AS(load_audio(dir / "junk.wav"), opt::ValidationError);
}

TEST_CASE("mel_chunk of digital silence is the log floor everywhere") {
  WaveBuffer silent;
  silent.samples.assign(16000, 0.0F);
  auto c = mel_chunk(silent, 10);
  for (const auto& row : c.values)
    for (float v : row) CHECK(v == static_cast<float>(std::log(1e-10)));
}

TEST_CASE("mel_chunk matches a direct-DFT oracle and a 440 Hz tone peaks in the bin containing 440 Hz") {
  auto w = tone(440, 1.0);
  const int frame = 12;
  auto c = mel_chunk(w, frame);
  auto ref = oracle_log_mel(w.samples, center_hop(frame) - 8, 16);
  // Which filter responds most to 440 Hz, from the oracle's own triangles.
  int expected_bin = 0;
  for (int m = 1; m < 16; ++m)
    if (ref[m][8] > ref[expected_bin][8]) expected_bin = m;
  for (int t = 0; t < 16; ++t) {
    int arg = 0;
    for (int m = 1; m < 16; ++m)
      if (c.values[m][t] > c.values[arg][t]) arg = m;
    CHECK(arg == expected_bin);
    for (int m = 0; m < 16; ++m) CHECK(c.values[m][t] == doctest::Approx(ref[m][t]).epsilon(1e-5));
  }
  // 440 Hz lies between the lower and upper edge of that filter.
  double lo = mel_to_hz(hz_to_mel(8000.0) * expected_bin / 17.0);
  double hi = mel_to_hz(hz_to_mel(8000.0) * (expected_bin + 2) / 17.0);
  CHECK(lo < 440.0);
  CHECK(hi > 440.0);
}

TEST_CASE("chunk counts follow 25 frames per second") {
  auto count = [](double seconds) { return chunks_for_video(tone(200, seconds)).size(); };
  CHECK(count(1.0) == 25);
  CHECK(count(0.04) == 1);
  auto two = chunks_for_video(tone(200, 2.0));
  REQUIRE(two.size() == 50);
  for (int i = 0; i < 50; ++i) CHECK(two[static_cast<size_t>(i)].frame_index == i);
  // Batch path agrees with the per-frame path.
  auto single = mel_chunk(tone(200, 2.0), 37);
  CHECK(single.values == two[37].values);
}

TEST_CASE("mel_chunk is deterministic, shift-consistent and monotone in amplitude") {
  std::mt19937 rng(3);
  std::normal_distribution<float> n(0.0F, 0.2F);
  WaveBuffer w;
  w.samples.resize(24000);
  for (auto& s : w.samples) s = std::clamp(n(rng), -1.0F, 1.0F);

  CHECK(mel_chunk(w, 7).values == mel_chunk(w, 7).values);

  // 16 hops = 3200 samples = exactly 5 frames.
  WaveBuffer shifted;
  shifted.samples.assign(3200, 0.0F);
  shifted.samples.insert(shifted.samples.end(), w.samples.begin(), w.samples.end());
  for (int f : {0, 3, 20}) {
    auto a = mel_chunk(w, f), b = mel_chunk(shifted, f + 5);
    for (int m = 0; m < 16; ++m)
      for (int t = 0; t < 16; ++t) CHECK(a.values[m][t] == doctest::Approx(b.values[m][t]).epsilon(1e-6));
  }

  WaveBuffer loud = w;
  for (auto& s : loud.samples) s *= 0.5F;  // keep within [-1,1]: compare 0.5x against 1x
  for (int f : {1, 10, 30}) {
    auto quiet = mel_chunk(loud, f), full = mel_chunk(w, f);
    for (int m = 0; m < 16; ++m)
      for (int t = 0; t < 16; ++t) CHECK(full.values[m][t] >= quiet.values[m][t]);
  }
}

TEST_CASE("mel_chunk rejects negative frame indices") {
  CHECK_THROWS_AS(mel_chunk(tone(100, 0.5), -1), opt::ValidationError);
}

TEST_CASE("chunk arrays round-trip through the on-disk container") {
  auto chunks = chunks_for_video(tone(330, 0.5));
  auto stem = temp_dir() / "chunks";
  write_chunks(stem, chunks);
  auto back = read_chunks(stem);
  REQUIRE(back.size() == chunks.size());
  for (size_t i = 0; i < back.size(); ++i) CHECK(back[i].values == chunks[i].values);
}
