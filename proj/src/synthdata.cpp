#include "opt/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

#include "opt/array_io.hpp"
#include "opt/error.hpp"

namespace opt::synth {

namespace {

constexpr double kPi = std::numbers::pi;

// Stream of independent generators keyed by purpose, so adding a field to one
// factor never reshuffles another.
std::mt19937_64 stream(uint64_t seed, uint64_t a, uint64_t b = 0, uint64_t c = 0) {
  std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32), static_cast<uint32_t>(a),
                    static_cast<uint32_t>(b), static_cast<uint32_t>(c)};
  return std::mt19937_64(seq);
}

enum : uint64_t { kWordStream = 11, kSpeakerStream = 23, kTimingStream = 37, kPoseStream = 41 };

double raised_cosine(double x) { return std::abs(x) < 1.0 ? 0.5 * (1.0 + std::cos(kPi * x)) : 0.0; }

std::string clip_name(int speaker, int word, int take) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "s%02d_w%02d_t%d", speaker, word, take);
  return buf;
}

}  // namespace

// ---------------------------------------------------------------------------
// CorpusSpec

int64_t CorpusSpec::total_frames() const {
  return static_cast<int64_t>(n_identities) * n_words * clips_per_pair * frames_per_clip();
}

void CorpusSpec::validate() const {
  require(n_identities >= 2, "corpus: n_identities must be >= 2");
  require(n_words >= 2, "corpus: n_words must be >= 2");
  require(clips_per_pair >= 1, "corpus: clips_per_pair must be >= 1");
  require(seconds_per_clip >= 0.4 && seconds_per_clip <= 20.0, "corpus: seconds_per_clip must lie in [0.4, 20]");
  require(image_size >= 32 && image_size <= 256 && image_size % 8 == 0,
          "corpus: image_size must be a multiple of 8 in [32, 256]");
  require(frame_budget > 0, "corpus: frame_budget must be positive");
  require(total_frames() <= frame_budget, "corpus: " + std::to_string(total_frames()) +
                                              " frames exceed the frame budget of " + std::to_string(frame_budget));
}

nlohmann::json CorpusSpec::to_json() const {
  return {{"n_identities", n_identities}, {"n_words", n_words},       {"clips_per_pair", clips_per_pair},
          {"seconds_per_clip", seconds_per_clip}, {"seed", seed},   {"image_size", image_size},
          {"frame_budget", frame_budget}};
}

CorpusSpec CorpusSpec::from_json(const nlohmann::json& j) {
  require(j.is_object(), "corpus: expected an object");
  CorpusSpec s;
  for (const auto& [key, value] : j.items()) {
    if (key == "n_identities") s.n_identities = value.get<int>();
    else if (key == "n_words") s.n_words = value.get<int>();
    else if (key == "clips_per_pair") s.clips_per_pair = value.get<int>();
    else if (key == "seconds_per_clip") s.seconds_per_clip = value.get<double>();
    else if (key == "seed") s.seed = value.get<uint64_t>();
    else if (key == "image_size") s.image_size = value.get<int>();
    else if (key == "frame_budget") s.frame_budget = value.get<int64_t>();
    else throw ValidationError("corpus: unknown key '" + key + "'");
  }
  return s;
}

// ---------------------------------------------------------------------------
// SynthWorld

SynthWorld::SynthWorld(uint64_t seed, int n_identities, int n_words)
    : seed_(seed), n_identities_(n_identities), n_words_(n_words) {
  require(n_identities >= 1 && n_words >= 1, "synth: empty world");
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);

  words_.resize(static_cast<size_t>(n_words));
  for (int w = 0; w < n_words; ++w) {
    auto rng = stream(seed, kWordStream, static_cast<uint64_t>(w));
    Word& word = words_[static_cast<size_t>(w)];
    int n_syl = 2 + static_cast<int>(u01(rng) * 3.0);  // 2..4
    n_syl = std::min(n_syl, 4);
    for (int s = 0; s < n_syl; ++s) {
      double slot = 1.0 / n_syl;
      double width = slot * (0.45 + 0.4 * u01(rng));
      double centre = slot * (s + 0.5) + (u01(rng) - 0.5) * (slot - width) * 0.8;
      centre = std::clamp(centre, width + 0.01, 1.0 - width - 0.01);
      word.syllables.push_back({centre, width, 0.55 + 0.45 * u01(rng)});
    }
    for (auto& m : word.melody) m = {1.0 + 2.5 * u01(rng), 0.4 + 2.2 * u01(rng), 2 * kPi * u01(rng)};
    word.mouth_mix.resize(static_cast<size_t>(face3d::kMouthComponents));
    for (auto& mix : word.mouth_mix) mix = {1.6 * u01(rng) - 0.8, 1.6 * u01(rng) - 0.8};
    word.upper.resize(static_cast<size_t>(face3d::kExpressionDim - face3d::kMouthComponents));
    for (size_t c = 0; c < word.upper.size(); ++c) {
      double amp = c < static_cast<size_t>(face3d::kUpperFaceComponents) ? 0.35 : 0.08;
      word.upper[c] = {amp * (0.5 + 0.5 * u01(rng)), 0.3 + 1.5 * u01(rng), 2 * kPi * u01(rng), 0.3 * amp * normal(rng)};
    }
  }

  speakers_.resize(static_cast<size_t>(n_identities));
  for (int s = 0; s < n_identities; ++s) {
    auto rng = stream(seed, kSpeakerStream, static_cast<uint64_t>(s));
    Speaker& sp = speakers_[static_cast<size_t>(s)];
    // Base pitches spread geometrically over 95–240 Hz with a small jitter.
    double frac = n_identities > 1 ? static_cast<double>(s) / (n_identities - 1) : 0.5;
    sp.f0 = 95.0 * std::pow(240.0 / 95.0, frac) * (1.0 + 0.03 * (u01(rng) - 0.5));
    double tilt = 0.5 + 1.0 * u01(rng);
    double total = 0.0;
    for (size_t k = 0; k < sp.harmonics.size(); ++k) {
      sp.harmonics[k] = std::pow(static_cast<double>(k + 1), -tilt) * (0.4 + 1.2 * u01(rng));
      total += sp.harmonics[k];
    }
    for (auto& h : sp.harmonics) h /= total;
    for (int k = 0; k < face3d::kIdentityDim; ++k) sp.alpha.values(k) = std::clamp(normal(rng), -3.0, 3.0);
    sp.style = Eigen::VectorXd::Zero(face3d::kUpperFaceComponents);
    for (int k = 0; k < face3d::kUpperFaceComponents; ++k) sp.style(k) = 2.4 * u01(rng) - 1.2;
    auto jitter = [&](std::array<float, 3> base, double amount) {
      for (auto& v : base) v = static_cast<float>(std::clamp(v + amount * (u01(rng) - 0.5), 0.0, 1.0));
      return base;
    };
    sp.look.skin = jitter({0.78F, 0.62F, 0.52F}, 0.3);
    sp.look.lips = jitter({0.68F, 0.28F, 0.32F}, 0.2);
    sp.look.features = jitter({0.22F, 0.16F, 0.12F}, 0.15);
  }
}

void check_indices(const SynthWorld& world, int speaker, int word) {
  require(speaker >= 0 && speaker < world.n_identities(), "synth: speaker index " + std::to_string(speaker) +
                                                              " out of range");
  require(word >= 0 && word < world.n_words(), "synth: word index " + std::to_string(word) + " out of range");
}

double SynthWorld::envelope(int word, double tau) const {
  if (tau <= 0.0 || tau >= 1.0) return 0.0;
  double e = 0.0;
  for (const auto& [c, w, h] : words_.at(static_cast<size_t>(word)).syllables) e += h * raised_cosine((tau - c) / w);
  return std::min(e, 1.0);
}

double SynthWorld::melody(int word, double tau) const {
  double t = std::clamp(tau, 0.0, 1.0);
  double m = 0.0;
  for (const auto& [a, f, p] : words_.at(static_cast<size_t>(word)).melody) m += a * std::sin(2 * kPi * f * t + p);
  return m;
}

Eigen::VectorXd SynthWorld::mouth(int word, double tau) const {
  Eigen::VectorXd b = Eigen::VectorXd::Zero(face3d::kMouthComponents);
  double e = envelope(word, tau);
  if (e == 0.0) return b;
  double m = melody(word, tau) / 4.0;
  const auto& mix = words_.at(static_cast<size_t>(word)).mouth_mix;
  b(0) = 1.8 * e;
  for (int c = 1; c < face3d::kMouthComponents; ++c) {
    const auto& [a, g] = mix[static_cast<size_t>(c)];
    b(c) = e * (a + g * m);
  }
  return b;
}

Eigen::VectorXd SynthWorld::upper_motion(int word, double tau) const {
  const auto& up = words_.at(static_cast<size_t>(word)).upper;
  Eigen::VectorXd v(static_cast<Eigen::Index>(up.size()));
  for (size_t c = 0; c < up.size(); ++c) {
    const auto& [amp, f, p, off] = up[c];
    v(static_cast<Eigen::Index>(c)) = off + amp * std::sin(2 * kPi * f * tau + p);
  }
  return v;
}

ClipTiming SynthWorld::timing(int word, int take, double seconds) const {
  auto rng = stream(seed_, kTimingStream, static_cast<uint64_t>(word), static_cast<uint64_t>(take));
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  ClipTiming t;
  t.word_seconds = std::min(0.8 * seconds, seconds * (0.62 + 0.18 * u01(rng)));
  double slack = seconds - t.word_seconds;
  t.onset_seconds = slack * (0.2 + 0.6 * u01(rng));
  return t;
}

// ---------------------------------------------------------------------------
// Audio and motion

double instantaneous_f0(const SynthWorld& world, int speaker, int word, const ClipTiming& timing, double t_seconds) {
  check_indices(world, speaker, word);
  return world.base_f0(speaker) * std::pow(2.0, world.melody(word, timing.tau(t_seconds)) / 12.0);
}

audio::WaveBuffer synth_audio(const SynthWorld& world, int speaker, int word, double seconds, const ClipTiming& timing) {
  check_indices(world, speaker, word);
  require(seconds > 0.0, "synth: clip length must be positive");
  audio::WaveBuffer wave;
  const auto n = static_cast<size_t>(std::llround(seconds * audio::kSampleRate));
  wave.samples.assign(n, 0.0F);
  const auto& h = world.harmonics(speaker);
  const double dt = 1.0 / audio::kSampleRate;
  double phase = 0.0;  // fundamental phase, cycles
  for (size_t i = 0; i < n; ++i) {
    double t = static_cast<double>(i) * dt;
    double e = world.envelope(word, timing.tau(t));
    double x = 0.0;
    if (e > 0.0) {
      for (size_t k = 0; k < h.size(); ++k) x += h[k] * std::sin(2 * kPi * static_cast<double>(k + 1) * phase);
    }
    wave.samples[i] = static_cast<float>(0.8 * e * x);
    phase += instantaneous_f0(world, speaker, word, timing, t) * dt;
    phase -= std::floor(phase);
  }
  return wave;
}

MotionTrack synth_motion(const SynthWorld& world, int word, double seconds, const ClipTiming& timing) {
  check_indices(world, 0, word);
  const int frames = static_cast<int>(seconds * audio::kFps + 1e-9);
  MotionTrack track;
  track.beta.resize(static_cast<size_t>(frames));
  track.mouth_envelope.resize(static_cast<size_t>(frames));
  for (int f = 0; f < frames; ++f) {
    double tau = timing.tau(static_cast<double>(f) / audio::kFps);
    auto& b = track.beta[static_cast<size_t>(f)].values;
    b.head(face3d::kMouthComponents) = world.mouth(word, tau);
    b.tail(face3d::kExpressionDim - face3d::kMouthComponents) = world.upper_motion(word, tau);
    track.mouth_envelope[static_cast<size_t>(f)] = world.envelope(word, tau);
  }
  return track;
}

std::vector<face3d::HeadPose> synth_pose_track(uint64_t seed, int frames) {
  auto rng = stream(seed, kPoseStream);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto wave = [&](double max_amp) {
    // Two incommensurate sinusoids; the sum stays within max_amp.
    std::array<double, 6> p{};
    p[0] = max_amp * (0.35 + 0.3 * u01(rng));
    p[1] = max_amp * 0.35 * u01(rng);
    p[2] = 0.3 + 0.9 * u01(rng);
    p[3] = 0.8 + 1.4 * u01(rng);
    p[4] = 2 * kPi * u01(rng);
    p[5] = 2 * kPi * u01(rng);
    return p;
  };
  const double deg = kPi / 180.0;
  auto yaw = wave(28 * deg), pitch = wave(12 * deg), roll = wave(4 * deg);
  auto tx = wave(0.05), ty = wave(0.04);
  auto eval = [](const std::array<double, 6>& p, double t) {
    return p[0] * std::sin(2 * kPi * p[2] * t + p[4]) + p[1] * std::sin(2 * kPi * p[3] * t + p[5]);
  };
  std::vector<face3d::HeadPose> poses;
  poses.reserve(static_cast<size_t>(frames));
  for (int f = 0; f < frames; ++f) {
    double t = static_cast<double>(f) / audio::kFps;
    poses.push_back(face3d::HeadPose::from_euler(eval(yaw, t), eval(pitch, t), eval(roll, t),
                                                 face3d::Vec3(eval(tx, t), eval(ty, t), 0.0)));
  }
  return poses;
}

// ---------------------------------------------------------------------------
// Corpus files

std::string frame_file_name(int index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%06d.png", index);
  return buf;
}

void write_beta(const fs::path& stem, const std::vector<face3d::ExpressionCoeffs>& beta) {
  io::FloatArray a;
  a.shape = {static_cast<int64_t>(beta.size()), face3d::kExpressionDim};
  a.data.reserve(beta.size() * face3d::kExpressionDim);
  for (const auto& b : beta)
    for (int k = 0; k < face3d::kExpressionDim; ++k) a.data.push_back(static_cast<float>(b.values(k)));
  a.meta["fps"] = audio::kFps;
  io::write_array(stem, a);
}

std::vector<face3d::ExpressionCoeffs> read_beta(const fs::path& stem) {
  auto a = io::read_array(stem);
  require(a.shape.size() == 2 && a.shape[1] == face3d::kExpressionDim, "beta array must be [T,64]: " + stem.string());
  std::vector<face3d::ExpressionCoeffs> out(static_cast<size_t>(a.shape[0]));
  for (size_t f = 0; f < out.size(); ++f)
    for (int k = 0; k < face3d::kExpressionDim; ++k) out[f].values(k) = a.data[f * face3d::kExpressionDim + k];
  return out;
}

void write_pose(const fs::path& stem, const std::vector<face3d::HeadPose>& poses) {
  io::FloatArray a;
  a.shape = {static_cast<int64_t>(poses.size()), 12};
  for (const auto& p : poses) {
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) a.data.push_back(static_cast<float>(p.rotation(r, c)));
    for (int k = 0; k < 3; ++k) a.data.push_back(static_cast<float>(p.translation(k)));
  }
  a.meta["fps"] = audio::kFps;
  a.meta["layout"] = "R row-major (9) then T (3)";
  io::write_array(stem, a);
}

std::vector<face3d::HeadPose> read_pose(const fs::path& stem) {
  auto a = io::read_array(stem);
  require(a.shape.size() == 2 && a.shape[1] == 12, "pose array must be [T,12]: " + stem.string());
  std::vector<face3d::HeadPose> out(static_cast<size_t>(a.shape[0]));
  for (size_t f = 0; f < out.size(); ++f) {
    const float* p = a.data.data() + f * 12;
    face3d::Mat3 r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) r(i, j) = p[3 * i + j];
    // float storage loses orthonormality at the 1e-7 level
    out[f].rotation = face3d::orthonormalize(r);
    out[f].translation = face3d::Vec3(p[9], p[10], p[11]);
  }
  return out;
}

std::vector<FrameImage> read_frames(const fs::path& dir, int count) {
  std::vector<FrameImage> frames;
  frames.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    auto path = dir / frame_file_name(i);
    if (!fs::exists(path)) throw MissingPrerequisite(path.string(), "frame file missing");
    frames.push_back(read_png(path));
  }
  return frames;
}

nlohmann::json ClipRecord::to_json() const {
  return {{"clip_id", clip_id}, {"speaker", speaker},       {"word", word},         {"take", take},
          {"split", split},     {"frame_count", frame_count}, {"wav", wav},         {"chunks", chunks},
          {"frames_dir", frames_dir}, {"beta", beta},       {"pose", pose},         {"landmarks", landmarks},
          {"checksums", checksums}};
}

ClipRecord ClipRecord::from_json(const nlohmann::json& j) {
  ClipRecord r;
  r.clip_id = j.at("clip_id").get<std::string>();
  r.speaker = j.at("speaker").get<int>();
  r.word = j.at("word").get<int>();
  r.take = j.at("take").get<int>();
  r.split = j.at("split").get<std::string>();
  r.frame_count = j.at("frame_count").get<int>();
  r.wav = j.at("wav").get<std::string>();
  r.chunks = j.at("chunks").get<std::string>();
  r.frames_dir = j.at("frames_dir").get<std::string>();
  r.beta = j.at("beta").get<std::string>();
  r.pose = j.at("pose").get<std::string>();
  r.landmarks = j.at("landmarks").get<std::string>();
  r.checksums = j.value("checksums", nlohmann::json::object());
  return r;
}

const ClipRecord& Corpus::clip(const std::string& id) const {
  for (const auto& c : clips)
    if (c.clip_id == id) return c;
  throw ValidationError("corpus: no clip named '" + id + "'");
}

std::vector<const ClipRecord*> Corpus::split(const std::string& name) const {
  std::vector<const ClipRecord*> out;
  for (const auto& c : clips)
    if (c.split == name) out.push_back(&c);
  return out;
}

Corpus build_corpus(const CorpusSpec& spec, const fs::path& root) {
  spec.validate();
  fs::create_directories(root / "clips");
  const auto basis = face3d::make_synthetic_basis(7);
  face3d::save_basis(root / "basis.bin", basis);
  const SynthWorld world(spec.seed, spec.n_identities, spec.n_words);
  const auto camera = face3d::Camera::for_image(spec.image_size);
  const int frames = spec.frames_per_clip();

  Corpus corpus;
  corpus.root = root;
  corpus.spec = spec;
  std::string manifest;
  for (int s = 0; s < spec.n_identities; ++s) {
    for (int w = 0; w < spec.n_words; ++w) {
      for (int take = 0; take < spec.clips_per_pair; ++take) {
        ClipRecord rec;
        rec.clip_id = clip_name(s, w, take);
        rec.speaker = s;
        rec.word = w;
        rec.take = take;
        // The last take of every (speaker, word) pair is held out when there is more than one.
        rec.split = spec.clips_per_pair > 1 && take == spec.clips_per_pair - 1 ? "test" : "train";
        rec.frame_count = frames;
        const fs::path rel = fs::path("clips") / rec.clip_id;
        const fs::path dir = root / rel;
        fs::create_directories(dir / "frames");

        const auto timing = world.timing(w, take, spec.seconds_per_clip);
        const auto wave = synth_audio(world, s, w, spec.seconds_per_clip, timing);
        audio::write_wav(dir / "audio.wav", wave);
        audio::write_chunks(dir / "chunks", audio::chunks_for_video(wave));

        auto motion = synth_motion(world, w, spec.seconds_per_clip, timing);
        for (auto& b : motion.beta)
          b.values.segment(face3d::kMouthComponents, face3d::kUpperFaceComponents) += world.expression_style(s);
        const uint64_t pose_seed = spec.seed * 1000003ULL + static_cast<uint64_t>((s * spec.n_words + w) * 16 + take);
        const auto poses = synth_pose_track(pose_seed, frames);

        std::vector<face3d::Landmarks2D> lms;
        lms.reserve(static_cast<size_t>(frames));
        uint32_t frames_crc = 0;
        for (int f = 0; f < frames; ++f) {
          const auto& b = motion.beta[static_cast<size_t>(f)];
          const auto& p = poses[static_cast<size_t>(f)];
          lms.push_back(face3d::render_landmarks(basis, world.identity(s), b, p, camera));
          auto img = render_face(basis, world.identity(s), b, p, camera, spec.image_size, world.appearance(s));
          write_png(dir / "frames" / frame_file_name(f), img);
          std::vector<float> px(img.pixels);
          uint32_t c = io::crc32_of_floats(px);
          frames_crc = frames_crc * 31U + c;
        }
        write_beta(dir / "beta", motion.beta);
        write_pose(dir / "pose", poses);
        face3d::write_landmarks_csv(dir / "landmarks.csv", lms);

        nlohmann::json video = {{"clip_id", rec.clip_id}, {"reference_clip", rec.clip_id}, {"frame_count", frames},
                                {"fps", audio::kFps},       {"frames_dir", "frames"},      {"landmarks", "landmarks.csv"},
                                {"kind", "ground_truth"}};
        io::write_text(dir / "video.json", video.dump(2) + "\n");

        rec.wav = (rel / "audio.wav").generic_string();
        rec.chunks = (rel / "chunks").generic_string();
        rec.frames_dir = (rel / "frames").generic_string();
        rec.beta = (rel / "beta").generic_string();
        rec.pose = (rel / "pose").generic_string();
        rec.landmarks = (rel / "landmarks.csv").generic_string();
        rec.checksums = {{"wav", io::file_crc32_hex(dir / "audio.wav")},
                         {"beta", io::file_crc32_hex(dir / "beta.f32")},
                         {"pose", io::file_crc32_hex(dir / "pose.f32")},
                         {"landmarks", io::file_crc32_hex(dir / "landmarks.csv")},
                         {"frames", io::crc32_hex(frames_crc)}};
        manifest += rec.to_json().dump() + "\n";
        corpus.clips.push_back(std::move(rec));
      }
    }
  }
  io::FloatArray ids;
  ids.shape = {spec.n_identities, face3d::kIdentityDim};
  for (int s = 0; s < spec.n_identities; ++s)
    for (int k = 0; k < face3d::kIdentityDim; ++k) ids.data.push_back(static_cast<float>(world.identity(s).values(k)));
  io::write_array(corpus.identities_path(), ids);
  io::write_text(root / "corpus.json", spec.to_json().dump(2) + "\n");
  io::write_text(corpus.manifest_path(), manifest);
  return corpus;
}

Corpus load_corpus(const fs::path& root) {
  Corpus corpus;
  corpus.root = root;
  if (!fs::exists(root / "manifest.jsonl") || !fs::exists(root / "corpus.json"))
    throw MissingPrerequisite("corpus", "no corpus manifest under " + root.string() + " (run synth-data first)");
  corpus.spec = CorpusSpec::from_json(nlohmann::json::parse(io::read_text(root / "corpus.json")));
  std::ifstream in(root / "manifest.jsonl");
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    corpus.clips.push_back(ClipRecord::from_json(nlohmann::json::parse(line)));
  }
  require(!corpus.clips.empty(), "corpus: manifest is empty");
  return corpus;
}

}  // namespace opt::synth
