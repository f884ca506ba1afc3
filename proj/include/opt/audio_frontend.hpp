#pragma once

#include <array>
#include <filesystem>
#include <vector>

namespace opt::audio {

inline constexpr int kSampleRate = 16000;
inline constexpr int kWindowSize = 800;
inline constexpr int kHopSize = 200;
inline constexpr int kMelBins = 16;
inline constexpr int kChunkHops = 16;
inline constexpr int kFps = 25;
inline constexpr double kLogFloor = 1e-10;
inline constexpr int kSamplesPerFrame = kSampleRate / kFps;  // 640

struct WaveBuffer {
  std::vector<float> samples;
  int sample_rate = kSampleRate;

  double duration_seconds() const { return static_cast<double>(samples.size()) / sample_rate; }
  void validate() const;
};

// 16 mel bins × 16 time hops of log energies. values[bin][hop].
struct MelChunk {
  std::array<std::array<float, kChunkHops>, kMelBins> values{};
  int frame_index = 0;
};

// Mono WAV (8/16/24/32-bit PCM or 32-bit float). Resamples to 16 kHz.
WaveBuffer load_audio(const std::filesystem::path& path);
void write_wav(const std::filesystem::path& path, const WaveBuffer& wave);

// Band-limited windowed-sinc resampling. Output length is floor(n·to/from).
std::vector<float> resample(const std::vector<float>& in, int from_rate, int to_rate);

// Triangular filters on the HTK mel scale spanning 0..8000 Hz, one row per mel
// bin, one column per rfft bin (401 for an 800-point window).
const std::vector<std::vector<double>>& mel_filterbank();
double hz_to_mel(double hz);
double mel_to_hz(double mel);

// Log-mel energies for hops [first_hop, first_hop + n_hops). Hop h is centred on
// sample h·200; samples outside the buffer read as zero. Result[bin][i].
std::vector<std::vector<float>> log_mel_hops(const WaveBuffer& wave, int first_hop, int n_hops);

// Hop index closest to the timestamp of video frame `frame_index` at `fps`.
int center_hop(int frame_index, int fps = kFps);

MelChunk mel_chunk(const WaveBuffer& wave, int frame_index, int fps = kFps);
int frame_count(const WaveBuffer& wave, int fps = kFps);
std::vector<MelChunk> chunks_for_video(const WaveBuffer& wave, int fps = kFps);

// Writes all chunks of an utterance as one [n,16,16] float array plus sidecar.
void write_chunks(const std::filesystem::path& stem, const std::vector<MelChunk>& chunks);
std::vector<MelChunk> read_chunks(const std::filesystem::path& stem);

}  // namespace opt::audio
