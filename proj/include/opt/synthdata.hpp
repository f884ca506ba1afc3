#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "opt/audio_frontend.hpp"
#include "opt/face3d.hpp"
#include "opt/image.hpp"

namespace opt::synth {

namespace fs = std::filesystem;

struct CorpusSpec {
  int n_identities = 8;
  int n_words = 10;
  int clips_per_pair = 2;
  double seconds_per_clip = 1.0;
  uint64_t seed = 0;
  int image_size = 64;
  int64_t frame_budget = 200000;

  int frames_per_clip() const { return static_cast<int>(seconds_per_clip * audio::kFps + 1e-9); }
  int64_t total_frames() const;
  void validate() const;
  nlohmann::json to_json() const;
  static CorpusSpec from_json(const nlohmann::json& j);
};

// Word placement inside a clip, shared by every speaker for a given (word, take).
struct ClipTiming {
  double onset_seconds = 0.05;
  double word_seconds = 0.8;
  double tau(double t_seconds) const { return (t_seconds - onset_seconds) / word_seconds; }
};

struct Appearance {
  std::array<float, 3> skin{0.8F, 0.65F, 0.55F};
  std::array<float, 3> lips{0.7F, 0.3F, 0.35F};
  std::array<float, 3> features{0.2F, 0.15F, 0.1F};  // brows, eyes
  std::array<float, 3> background{0.12F, 0.14F, 0.18F};
};

// Every latent factor of the corpus, derived from one seed. Words own the
// content (syllable envelope, pitch melody, upper-face motion); speakers own
// the voice (base pitch, harmonic profile), the face shape α, a resting
// expression offset on the upper-face components, and the face colours.
class SynthWorld {
 public:
  SynthWorld(uint64_t seed, int n_identities, int n_words);

  int n_identities() const { return n_identities_; }
  int n_words() const { return n_words_; }

  // Syllable envelope in [0,1]; zero outside the word (τ ∉ [0,1]).
  double envelope(int word, double tau) const;
  // Pitch contour in semitones relative to the speaker's base pitch.
  double melody(int word, double tau) const;
  // Mouth components (0..kMouthComponents-1); all zero wherever the envelope is zero.
  Eigen::VectorXd mouth(int word, double tau) const;
  // Smooth low-amplitude motion for expression components ≥ kMouthComponents.
  Eigen::VectorXd upper_motion(int word, double tau) const;

  double base_f0(int speaker) const { return speakers_.at(static_cast<size_t>(speaker)).f0; }
  const std::array<double, 10>& harmonics(int speaker) const { return speakers_.at(static_cast<size_t>(speaker)).harmonics; }
  const face3d::IdentityCoeffs& identity(int speaker) const { return speakers_.at(static_cast<size_t>(speaker)).alpha; }
  const Eigen::VectorXd& expression_style(int speaker) const { return speakers_.at(static_cast<size_t>(speaker)).style; }
  const Appearance& appearance(int speaker) const { return speakers_.at(static_cast<size_t>(speaker)).look; }

  ClipTiming timing(int word, int take, double seconds) const;
  uint64_t seed() const { return seed_; }

 private:
  struct Word {
    std::vector<std::array<double, 3>> syllables;  // centre, width, height
    std::array<std::array<double, 3>, 3> melody;   // amplitude, frequency, phase
    std::vector<std::array<double, 2>> mouth_mix;  // per mouth component: constant, melody gain
    std::vector<std::array<double, 4>> upper;      // per component: amp, freq, phase, offset
  };
  struct Speaker {
    double f0 = 120.0;
    std::array<double, 10> harmonics{};
    face3d::IdentityCoeffs alpha;
    Eigen::VectorXd style;
    Appearance look;
  };
  uint64_t seed_;
  int n_identities_;
  int n_words_;
  std::vector<Word> words_;
  std::vector<Speaker> speakers_;
};

void check_indices(const SynthWorld& world, int speaker, int word);

// Additive-harmonic stand-in for speech: the word sets envelope and melody, the
// speaker sets base pitch and harmonic amplitudes.
audio::WaveBuffer synth_audio(const SynthWorld& world, int speaker, int word, double seconds, const ClipTiming& timing);
// Instantaneous fundamental (Hz) of synth_audio at time t.
double instantaneous_f0(const SynthWorld& world, int speaker, int word, const ClipTiming& timing, double t_seconds);

struct MotionTrack {
  std::vector<face3d::ExpressionCoeffs> beta;  // speaker-independent content part
  std::vector<double> mouth_envelope;          // envelope sampled at frame times
};
// Frame f is sampled at t = f / 25 s, the centre of its audio chunk.
MotionTrack synth_motion(const SynthWorld& world, int word, double seconds, const ClipTiming& timing);

// Smooth bounded yaw/pitch walk (|yaw|, |pitch| ≤ 30°) with small roll and translation.
std::vector<face3d::HeadPose> synth_pose_track(uint64_t seed, int frames);

// Flat-shaded polygons through the projected landmarks.
FrameImage render_face(const face3d::MorphableBasis& basis, const face3d::IdentityCoeffs& alpha,
                       const face3d::ExpressionCoeffs& beta, const face3d::HeadPose& pose,
                       const face3d::Camera& camera, int image_size, const Appearance& look);
FrameImage render_landmarks_image(const face3d::Landmarks2D& lm, int image_size, const Appearance& look);

// ---------------------------------------------------------------------------
// Corpus on disk

struct ClipRecord {
  std::string clip_id;
  int speaker = 0;
  int word = 0;
  int take = 0;
  std::string split;  // "train" or "test"
  int frame_count = 0;
  // Paths relative to the corpus root.
  std::string wav;
  std::string chunks;     // array stem
  std::string frames_dir;
  std::string beta;       // array stem, [T,64]
  std::string pose;       // array stem, [T,12] = R row-major then T
  std::string landmarks;  // CSV
  nlohmann::json checksums = nlohmann::json::object();

  nlohmann::json to_json() const;
  static ClipRecord from_json(const nlohmann::json& j);
};

struct Corpus {
  fs::path root;
  CorpusSpec spec;
  std::vector<ClipRecord> clips;

  fs::path manifest_path() const { return root / "manifest.jsonl"; }
  fs::path basis_path() const { return root / "basis.bin"; }
  // [n_identities, 80] array of per-speaker α
  fs::path identities_path() const { return root / "identities"; }
  const ClipRecord& clip(const std::string& id) const;
  std::vector<const ClipRecord*> split(const std::string& name) const;
};

Corpus build_corpus(const CorpusSpec& spec, const fs::path& root);
Corpus load_corpus(const fs::path& root);

std::string frame_file_name(int index);

// Per-clip readers.
std::vector<face3d::ExpressionCoeffs> read_beta(const fs::path& stem);
void write_beta(const fs::path& stem, const std::vector<face3d::ExpressionCoeffs>& beta);
std::vector<face3d::HeadPose> read_pose(const fs::path& stem);
void write_pose(const fs::path& stem, const std::vector<face3d::HeadPose>& poses);
std::vector<FrameImage> read_frames(const fs::path& dir, int count);

}  // namespace opt::synth
