#include "opt/audio_frontend.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <mutex>
#include <numbers>

#include <fftw3.h>

#include "opt/array_io.hpp"
#include "opt/error.hpp"

namespace opt::audio {

void WaveBuffer::validate() const {
  require(sample_rate == kSampleRate, "wave buffer must be 16 kHz");
  for (float s : samples) require(std::isfinite(s), "wave buffer contains non-finite samples");
}

// ---------------------------------------------------------------------------
// WAV I/O

namespace {

uint32_t le32(const unsigned char* p) { return p[0] | (p[1] << 8) | (p[2] << 16) | (uint32_t(p[3]) << 24); }
uint16_t le16(const unsigned char* p) { return static_cast<uint16_t>(p[0] | (p[1] << 8)); }

}  // namespace

WaveBuffer load_audio(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("audio file not found: " + path.string());
  std::string bytes = io::read_text(path);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  size_t n = bytes.size();
  if (n < 12 || std::memcmp(p, "RIFF", 4) != 0 || std::memcmp(p + 8, "WAVE", 4) != 0)
    throw ValidationError("unsupported encoding (not a RIFF/WAVE file): " + path.string());

  int format = 0, channels = 0, rate = 0, bits = 0;
  const unsigned char* data = nullptr;
  size_t data_len = 0;
  size_t off = 12;
  while (off + 8 <= n) {
    uint32_t len = le32(p + off + 4);
    const unsigned char* body = p + off + 8;
    size_t avail = std::min<size_t>(len, n - off - 8);
    if (std::memcmp(p + off, "fmt ", 4) == 0 && avail >= 16) {
      format = le16(body);
      channels = le16(body + 2);
      rate = static_cast<int>(le32(body + 4));
      bits = le16(body + 14);
      if (format == 0xFFFE && avail >= 26) format = le16(body + 24);  // extensible subformat
    } else if (std::memcmp(p + off, "data", 4) == 0) {
      data = body;
      data_len = avail;
    }
    off += 8 + len + (len & 1);
  }
  if (!data || format == 0) throw ValidationError("unsupported encoding (missing fmt/data): " + path.string());
  if (channels != 1) throw ValidationError("unsupported encoding (expected mono): " + path.string());
  bool pcm = format == 1 && (bits == 8 || bits == 16 || bits == 24 || bits == 32);
  bool flt = format == 3 && bits == 32;
  if (!pcm && !flt || rate <= 0) throw ValidationError("unsupported encoding: " + path.string());

  size_t width = static_cast<size_t>(bits / 8);
  size_t count = data_len / width;
  if (count == 0) throw ValidationError("zero-length audio: " + path.string());
  std::vector<float> samples(count);
  for (size_t i = 0; i < count; ++i) {
    const unsigned char* s = data + i * width;
    double v = 0.0;
    if (flt) {
      float f;
      std::memcpy(&f, s, 4);
      v = f;
    } else if (bits == 8) {
      v = (static_cast<int>(s[0]) - 128) / 128.0;
    } else if (bits == 16) {
      v = static_cast<int16_t>(le16(s)) / 32768.0;
    } else if (bits == 24) {
      int32_t x = s[0] | (s[1] << 8) | (s[2] << 16);
      if (x & 0x800000) x |= ~0xFFFFFF;
      v = x / 8388608.0;
    } else {
      v = static_cast<int32_t>(le32(s)) / 2147483648.0;
    }
    if (!std::isfinite(v)) throw ValidationError("non-finite sample in " + path.string());
    samples[i] = static_cast<float>(std::clamp(v, -1.0, 1.0));
  }

  WaveBuffer wave;
  wave.samples = rate == kSampleRate ? std::move(samples) : resample(samples, rate, kSampleRate);
  if (wave.samples.empty()) throw ValidationError("zero-length audio after resampling: " + path.string());
  for (float& s : wave.samples) s = std::clamp(s, -1.0F, 1.0F);
  return wave;
}

void write_wav(const std::filesystem::path& path, const WaveBuffer& wave) {
  const uint32_t data_len = static_cast<uint32_t>(wave.samples.size() * 2);
  std::string out;
  out.reserve(44 + data_len);
  auto put32 = [&](uint32_t v) { for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF)); };
  auto put16 = [&](uint16_t v) { out.push_back(static_cast<char>(v & 0xFF)); out.push_back(static_cast<char>(v >> 8)); };
  out += "RIFF";
  put32(36 + data_len);
  out += "WAVEfmt ";
  put32(16);
  put16(1);
  put16(1);
  put32(static_cast<uint32_t>(wave.sample_rate));
  put32(static_cast<uint32_t>(wave.sample_rate * 2));
  put16(2);
  put16(16);
  out += "data";
  put32(data_len);
  for (float s : wave.samples) {
    auto q = static_cast<int16_t>(std::lround(std::clamp(s, -1.0F, 1.0F) * 32767.0F));
    put16(static_cast<uint16_t>(q));
  }
  io::write_text(path, out);
}

std::vector<float> resample(const std::vector<float>& in, int from_rate, int to_rate) {
  require(from_rate > 0 && to_rate > 0, "sample rates must be positive");
  if (from_rate == to_rate) return in;
  const size_t out_len = static_cast<size_t>(static_cast<long double>(in.size()) * to_rate / from_rate);
  std::vector<float> out(out_len);
  // Low-pass at 0.95 of the lower Nyquist; Hann-windowed sinc with 16 lobes each side.
  const double cutoff = 0.95 * std::min(from_rate, to_rate) / 2.0;
  const double fc = cutoff / from_rate;  // cycles per input sample
  const double half_width = 16.0 / (2.0 * fc);
  const double step = static_cast<double>(from_rate) / to_rate;
  for (size_t i = 0; i < out_len; ++i) {
    double t = i * step;
    auto lo = static_cast<long>(std::ceil(t - half_width));
    auto hi = static_cast<long>(std::floor(t + half_width));
    double acc = 0.0;
    for (long j = std::max(lo, 0L); j <= std::min<long>(hi, static_cast<long>(in.size()) - 1); ++j) {
      double x = j - t;
      double sinc = x == 0.0 ? 2.0 * fc : std::sin(2.0 * std::numbers::pi * fc * x) / (std::numbers::pi * x);
      double win = 0.5 + 0.5 * std::cos(std::numbers::pi * x / half_width);
      acc += in[static_cast<size_t>(j)] * sinc * win;
    }
    out[i] = static_cast<float>(acc);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Mel spectrogram

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

const std::vector<std::vector<double>>& mel_filterbank() {
  static const std::vector<std::vector<double>> bank = [] {
    constexpr int n_bins = kWindowSize / 2 + 1;
    const double mel_lo = hz_to_mel(0.0), mel_hi = hz_to_mel(kSampleRate / 2.0);
    std::vector<double> edges(kMelBins + 2);
    for (int i = 0; i < kMelBins + 2; ++i) edges[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * i / (kMelBins + 1));
    std::vector<std::vector<double>> w(kMelBins, std::vector<double>(n_bins, 0.0));
    for (int m = 0; m < kMelBins; ++m) {
      for (int k = 0; k < n_bins; ++k) {
        double f = static_cast<double>(k) * kSampleRate / kWindowSize;
        double up = (f - edges[m]) / (edges[m + 1] - edges[m]);
        double down = (edges[m + 2] - f) / (edges[m + 2] - edges[m + 1]);
        w[m][k] = std::max(0.0, std::min(up, down));
      }
    }
    return w;
  }();
  return bank;
}

namespace {

// FFTW planning is not thread-safe; execution on distinct buffers is.
struct RealFft {
  double* in = nullptr;
  fftw_complex* out = nullptr;
  fftw_plan plan = nullptr;
  RealFft() {
    static std::mutex planner_mutex;
    std::lock_guard lock(planner_mutex);
    in = fftw_alloc_real(kWindowSize);
    out = fftw_alloc_complex(kWindowSize / 2 + 1);
    plan = fftw_plan_dft_r2c_1d(kWindowSize, in, out, FFTW_ESTIMATE);
  }
  ~RealFft() {
    fftw_destroy_plan(plan);
    fftw_free(in);
    fftw_free(out);
  }
  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;
};

const std::vector<double>& hann_window() {
  static const std::vector<double> w = [] {
    std::vector<double> v(kWindowSize);
    for (int i = 0; i < kWindowSize; ++i) v[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / kWindowSize);
    return v;
  }();
  return w;
}

}  // namespace

std::vector<std::vector<float>> log_mel_hops(const WaveBuffer& wave, int first_hop, int n_hops) {
  require(n_hops >= 0, "hop count must be non-negative");
  const auto& bank = mel_filterbank();
  const auto& win = hann_window();
  constexpr int n_bins = kWindowSize / 2 + 1;
  thread_local RealFft fft;
  std::vector<std::vector<float>> out(kMelBins, std::vector<float>(static_cast<size_t>(n_hops)));
  std::vector<double> power(n_bins);
  const long n = static_cast<long>(wave.samples.size());
  for (int h = 0; h < n_hops; ++h) {
    long start = static_cast<long>(first_hop + h) * kHopSize - kWindowSize / 2;
    for (int i = 0; i < kWindowSize; ++i) {
      long s = start + i;
      fft.in[i] = (s >= 0 && s < n) ? wave.samples[static_cast<size_t>(s)] * win[i] : 0.0;
    }
    fftw_execute_dft_r2c(fft.plan, fft.in, fft.out);
    for (int k = 0; k < n_bins; ++k) power[k] = fft.out[k][0] * fft.out[k][0] + fft.out[k][1] * fft.out[k][1];
    for (int m = 0; m < kMelBins; ++m) {
      double e = 0.0;
      for (int k = 0; k < n_bins; ++k) e += bank[m][k] * power[k];
      out[m][h] = static_cast<float>(std::log(std::max(e, kLogFloor)));
    }
  }
  return out;
}

int center_hop(int frame_index, int fps) {
  // round(frame_index · hops_per_second / fps) in exact integer arithmetic.
  const long hops_per_second = kSampleRate / kHopSize;
  return static_cast<int>((2L * frame_index * hops_per_second + fps) / (2L * fps));
}

MelChunk mel_chunk(const WaveBuffer& wave, int frame_index, int fps) {
  require(frame_index >= 0, "frame_index must be non-negative");
  require(fps > 0, "fps must be positive");
  auto hops = log_mel_hops(wave, center_hop(frame_index, fps) - kChunkHops / 2, kChunkHops);
  MelChunk chunk;
  chunk.frame_index = frame_index;
  for (int m = 0; m < kMelBins; ++m)
    for (int t = 0; t < kChunkHops; ++t) chunk.values[m][t] = hops[m][t];
  return chunk;
}

int frame_count(const WaveBuffer& wave, int fps) {
  return static_cast<int>(static_cast<long>(wave.samples.size()) * fps / wave.sample_rate);
}

std::vector<MelChunk> chunks_for_video(const WaveBuffer& wave, int fps) {
  require(!wave.samples.empty(), "wave is empty");
  const int n = frame_count(wave, fps);
  if (n == 0) return {};
  const int first = center_hop(0, fps) - kChunkHops / 2;
  const int last = center_hop(n - 1, fps) + kChunkHops / 2;
  auto all = log_mel_hops(wave, first, last - first);
  std::vector<MelChunk> chunks(static_cast<size_t>(n));
  for (int f = 0; f < n; ++f) {
    auto& c = chunks[static_cast<size_t>(f)];
    c.frame_index = f;
    int off = center_hop(f, fps) - kChunkHops / 2 - first;
    for (int m = 0; m < kMelBins; ++m)
      for (int t = 0; t < kChunkHops; ++t) c.values[m][t] = all[m][static_cast<size_t>(off + t)];
  }
  return chunks;
}

void write_chunks(const std::filesystem::path& stem, const std::vector<MelChunk>& chunks) {
  io::FloatArray a;
  a.shape = {static_cast<int64_t>(chunks.size()), kMelBins, kChunkHops};
  a.data.reserve(chunks.size() * kMelBins * kChunkHops);
  for (const auto& c : chunks)
    for (const auto& row : c.values) a.data.insert(a.data.end(), row.begin(), row.end());
  a.meta["fps"] = kFps;
  a.meta["layout"] = "frame,mel_bin,hop";
  io::write_array(stem, a);
}

std::vector<MelChunk> read_chunks(const std::filesystem::path& stem) {
  auto a = io::read_array(stem);
  if (a.shape.size() != 3 || a.shape[1] != kMelBins || a.shape[2] != kChunkHops)
    throw IoError("chunk array has wrong shape: " + stem.string());
  std::vector<MelChunk> chunks(static_cast<size_t>(a.shape[0]));
  size_t k = 0;
  for (size_t f = 0; f < chunks.size(); ++f) {
    chunks[f].frame_index = static_cast<int>(f);
    for (auto& row : chunks[f].values)
      for (float& v : row) v = a.data[k++];
  }
  return chunks;
}

}  // namespace opt::audio
