#include "opt/pipeline.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <random>
#include <sstream>

#include "opt/dataset.hpp"
#include "opt/error.hpp"

namespace opt::pipeline {

RunLock::RunLock(const fs::path& dir) {
  fs::create_directories(dir);
  auto path = dir / ".opt.lock";
  fd_ = ::open(path.c_str(), O_CREAT | O_RDWR, 0644);
  if (fd_ < 0) throw IoError("cannot open lockfile " + path.string());
  if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
    ::close(fd_);
    fd_ = -1;
    throw ValidationError("another opt command is running against " + dir.string() + " (lockfile " + path.string() +
                          ")");
  }
}

RunLock::~RunLock() {
  if (fd_ >= 0) {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
}

fs::path checkpoint_path(const RunConfig& cfg, const std::string& module) {
  return cfg.checkpoint_dir() / (module + ".ckpt");
}

namespace {

Checkpoint load_ckpt(const RunConfig& cfg, const std::string& module) {
  return Checkpoint::load(checkpoint_path(cfg, module), module, kCheckpointVersion);
}

void save_ckpt(const RunConfig& cfg, const Checkpoint& ckpt) {
  fs::create_directories(cfg.checkpoint_dir());
  ckpt.save(checkpoint_path(cfg, ckpt.module));
  std::cout << "wrote " << checkpoint_path(cfg, ckpt.module).string() << "\n";
}

nn::JsonlLog open_log(const RunConfig& cfg, const std::string& stage) {
  fs::create_directories(cfg.log_dir());
  return nn::JsonlLog(cfg.log_dir() / (stage + ".jsonl"));
}

void require_checkpoint(const RunConfig& cfg, const std::string& module) {
  if (!fs::exists(checkpoint_path(cfg, module)))
    throw MissingPrerequisite(module, "checkpoint " + checkpoint_path(cfg, module).string() +
                                          " not found; run `opt train` for that stage first");
}

torch::Tensor beta_tensor(const std::vector<face3d::ExpressionCoeffs>& beta) {
  auto t = torch::empty({static_cast<int64_t>(beta.size()), face3d::kExpressionDim}, torch::kDouble);
  auto a = t.accessor<double, 2>();
  for (size_t f = 0; f < beta.size(); ++f)
    for (int k = 0; k < face3d::kExpressionDim; ++k) a[static_cast<int64_t>(f)][k] = beta[f].values(k);
  return t.to(torch::kFloat);
}

std::vector<FrameImage> tensor_frames(const torch::Tensor& frames) {
  std::vector<FrameImage> out;
  out.reserve(static_cast<size_t>(frames.size(0)));
  for (int64_t i = 0; i < frames.size(0); ++i) out.push_back(from_tensor(frames[i]));
  return out;
}

}  // namespace

synth::Corpus cmd_synth_data(const RunConfig& cfg) {
  RunLock lock(cfg.data_dir);
  auto corpus = synth::build_corpus(cfg.corpus, cfg.data_dir);
  std::cout << corpus.manifest_path().string() << "\n";
  return corpus;
}

void cmd_train(const std::string& stage, const RunConfig& cfg) {
  require(stage == "afdm" || stage == "aem" || stage == "vg", "unknown stage '" + stage + "' (expected afdm, aem or vg)");
  RunLock lock(cfg.out_dir);
  const auto checksum = cfg.checksum();
  if (stage == "afdm") {
    auto data = data::load_corpus_data(cfg.data_dir, false);
    auto log = open_log(cfg, "afdm");
    auto model = afdm::train_afdm(data, cfg.afdm, cfg.optimizer, cfg.seed, &log);
    save_ckpt(cfg, afdm::save_afdm(model, cfg.afdm.steps, checksum));
    std::cout << afdm::evaluate_afdm(model, data).to_json().dump() << "\n";
  } else if (stage == "aem") {
    auto afdm_model = afdm::load_afdm(load_ckpt(cfg, "afdm"));
    auto data = data::load_corpus_data(cfg.data_dir, true);
    auto log = open_log(cfg, "aem");
    auto embed = aem::train_face_embed(data, cfg.face_embed, cfg.optimizer, cfg.seed, &log);
    save_ckpt(cfg, aem::save_face_embed(embed, cfg.face_embed.steps, checksum));
    auto model = aem::train_aem(data, &afdm_model, embed, cfg.aem, cfg.afdm, cfg.optimizer, cfg.seed, &log);
    save_ckpt(cfg, aem::save_aem(model, cfg.aem.steps, checksum));
    std::cout << aem::evaluate_aem(model, &afdm_model, embed, data).to_json().dump() << "\n";
  } else {
    auto data = data::load_corpus_data(cfg.data_dir, true);
    auto log = open_log(cfg, "vg");
    auto models = vg::train_generator(data, cfg.vg, cfg.optimizer, cfg.seed, &log);
    save_ckpt(cfg, vg::save_generator(models.gen, cfg.vg.steps, checksum));
    save_ckpt(cfg, vg::save_discriminator(models.disc, cfg.vg.steps, checksum));
    auto det = detector::train_detector(data, cfg.detector, cfg.optimizer, cfg.seed, &log);
    save_ckpt(cfg, detector::save_detector(det, cfg.detector.steps, checksum));
    std::cout << nlohmann::json{{"detector_px_error", detector::evaluate_detector(det, data)}}.dump() << "\n";
  }
}

Models load_models(const RunConfig& cfg) {
  for (const char* m : {"afdm", "face_embed", "aem", "vg_generator", "detector"}) require_checkpoint(cfg, m);
  Models m;
  m.afdm = afdm::load_afdm(load_ckpt(cfg, "afdm"));
  m.embed = aem::load_face_embed(load_ckpt(cfg, "face_embed"));
  m.aem = aem::load_aem(load_ckpt(cfg, "aem"));
  m.gen = vg::load_generator(load_ckpt(cfg, "vg_generator"));
  m.det = detector::load_detector(load_ckpt(cfg, "detector"));
  return m;
}

SourceFit fit_source(detector::Detector& det, const face3d::MorphableBasis& basis, const FrameImage& src) {
  SourceFit s;
  s.landmarks = detector::detect(det, src);
  face3d::FitConfig fc;
  fc.camera = face3d::Camera::for_image(src.height);
  s.fit = face3d::fit_params(s.landmarks, basis, fc);
  require(s.fit.ok, "source face fit diverged");
  return s;
}

face3d::HeadPose fitted_pose(detector::Detector& det, const face3d::MorphableBasis& basis,
                             const face3d::IdentityCoeffs& alpha, const FrameImage& frame,
                             const std::optional<face3d::ExpressionCoeffs>& beta) {
  face3d::FitConfig fc;
  fc.camera = face3d::Camera::for_image(frame.height);
  fc.known_identity = alpha;
  fc.known_expression = beta;
  auto r = face3d::fit_params(detector::detect(det, frame), basis, fc);
  require(r.ok, "frame pose fit diverged");
  return r.pose;
}

GeneratedClip generate_clip(Models& models, const face3d::MorphableBasis& basis, const FrameImage& src,
                            const audio::WaveBuffer& wave, const std::vector<face3d::HeadPose>& pose_track) {
  require(src.height == models.gen->image_size && src.width == models.gen->image_size,
          "source image must be " + std::to_string(models.gen->image_size) + "x" +
              std::to_string(models.gen->image_size));
  const auto chunks = audio::chunks_for_video(wave);
  const int T = static_cast<int>(chunks.size());
  require(T > 0, "driving audio is shorter than one frame (40 ms)");
  if (!pose_track.empty())
    require(static_cast<int>(pose_track.size()) >= T, "pose clip too short: " + std::to_string(pose_track.size()) +
                                                          " poses for " + std::to_string(T) + " audio frames");

  GeneratedClip out;
  out.source = fit_source(models.det, basis, src);
  auto mel = data::chunks_to_tensor(chunks);
  torch::Tensor content;
  {
    torch::NoGradGuard ng;
    models.aem->eval();
    content = models.aem->content(mel, &models.afdm);
  }
  out.beta = aem::predict_expression(models.aem, content, aem::face_embedding(models.embed, src));
  out.poses = pose_track.empty() ? std::vector<face3d::HeadPose>(static_cast<size_t>(T), out.source.fit.pose)
                                 : std::vector<face3d::HeadPose>(pose_track.begin(), pose_track.begin() + T);
  auto [rot, trans] = data::split_pose(data::poses_to_tensor(out.poses));
  out.frames = tensor_frames(vg::generate_frames(models.gen, to_tensor(src), beta_tensor(out.beta), rot, trans));
  const auto camera = face3d::Camera::for_image(src.height);
  for (int t = 0; t < T; ++t)
    out.landmarks.push_back(face3d::render_landmarks(basis, out.source.fit.alpha, out.beta[static_cast<size_t>(t)],
                                                     out.poses[static_cast<size_t>(t)], camera));
  return out;
}

GeneratedClip cmd_generate(const RunConfig& cfg, const GenerateRequest& req) {
  require(!req.out_dir.empty(), "generate: --out is required");
  if (req.mux && std::system("command -v ffmpeg >/dev/null 2>&1") != 0)
    throw MissingPrerequisite("ffmpeg", "--mux needs ffmpeg on PATH; frames can still be written without --mux");
  auto models = load_models(cfg);
  auto corpus = synth::load_corpus(cfg.data_dir);
  auto basis = face3d::load_basis(corpus.basis_path());
  if (!fs::exists(req.src_image)) throw ValidationError("source image not found: " + req.src_image.string());
  if (!fs::exists(req.driving_wav)) throw ValidationError("driving audio not found: " + req.driving_wav.string());
  auto src = read_png(req.src_image);
  auto wave = audio::load_audio(req.driving_wav);
  std::vector<face3d::HeadPose> track;
  const bool fix = req.pose_source == "fix";
  if (!fix) {
    const auto& rec = corpus.clip(req.pose_source);
    track = synth::read_pose(corpus.root / rec.pose);
  }

  RunLock lock(req.out_dir);
  auto clip = generate_clip(models, basis, src, wave, track);
  fs::create_directories(req.out_dir / "frames");
  for (size_t t = 0; t < clip.frames.size(); ++t)
    write_png(req.out_dir / "frames" / synth::frame_file_name(static_cast<int>(t)), clip.frames[t]);
  face3d::write_landmarks_csv(req.out_dir / "landmarks.csv", clip.landmarks);
  const auto& sp = clip.source.fit.pose;
  nlohmann::json meta = {{"kind", "generated"},
                         {"fps", audio::kFps},
                         {"frame_count", clip.frames.size()},
                         {"frames_dir", "frames"},
                         {"landmarks", "landmarks.csv"},
                         {"src_image", fs::absolute(req.src_image).string()},
                         {"driving_wav", fs::absolute(req.driving_wav).string()},
                         {"pose_source", req.pose_source},
                         {"source_pose_deg", {{"yaw", sp.yaw() * 180 / M_PI},
                                              {"pitch", sp.pitch() * 180 / M_PI},
                                              {"roll", sp.roll() * 180 / M_PI}}},
                         {"config_checksum", cfg.checksum()}};
  if (!fix) meta["reference_clip"] = req.pose_source;
  std::ofstream(req.out_dir / "video.json") << meta.dump(2) << "\n";
  if (req.mux) {
    std::ostringstream cmd;
    cmd << "ffmpeg -y -loglevel error -framerate " << audio::kFps << " -i '" << (req.out_dir / "frames").string()
        << "/%06d.png' -i '" << req.driving_wav.string() << "' -shortest -pix_fmt yuv420p '"
        << (req.out_dir / "video.mp4").string() << "'";
    if (std::system(cmd.str().c_str()) != 0) throw IoError("ffmpeg failed while muxing video.mp4");
  }
  std::cout << "wrote " << clip.frames.size() << " frames to " << req.out_dir.string() << "\n";
  return clip;
}

metrics::MetricsReport cmd_evaluate(const RunConfig& cfg, const fs::path& generated, const fs::path& corpus_root,
                                    const fs::path& out, bool mouth_only) {
  auto corpus = synth::load_corpus(corpus_root);
  require_checkpoint(cfg, "face_embed");
  auto embed = aem::load_face_embed(load_ckpt(cfg, "face_embed"));
  metrics::EmbedFn embed_fn = [&](const FrameImage& img) { return aem::face_embedding(embed, img); };

  if (!fs::exists(generated)) throw ValidationError("generated directory not found: " + generated.string());
  std::vector<fs::path> dirs;
  if (fs::exists(generated / "video.json")) {
    dirs.push_back(generated);
  } else {
    for (const auto& e : fs::directory_iterator(generated))
      if (e.is_directory() && fs::exists(e.path() / "video.json")) dirs.push_back(e.path());
    std::sort(dirs.begin(), dirs.end());
  }
  require(!dirs.empty(), "no clip directories with video.json under " + generated.string());

  std::vector<metrics::ClipMetrics> clips;
  for (const auto& dir : dirs) {
    nlohmann::json meta = nlohmann::json::parse(std::ifstream(dir / "video.json"));
    std::string ref = meta.value("reference_clip", "");
    if (ref.empty()) {
      std::cerr << "skipping " << dir.string() << ": no reference clip (fix-pose output has no ground truth)\n";
      continue;
    }
    const auto& rec = corpus.clip(ref);
    const int n = meta.at("frame_count").get<int>();
    require(n <= rec.frame_count, dir.string() + ": more frames than the reference clip " + ref);
    auto gen_frames = synth::read_frames(dir / meta.value("frames_dir", "frames"), n);
    auto gen_lm = face3d::read_landmarks_csv(dir / meta.value("landmarks", "landmarks.csv"));
    auto gt_frames = synth::read_frames(corpus.root / rec.frames_dir, n);
    auto gt_lm = face3d::read_landmarks_csv(corpus.root / rec.landmarks);
    require(static_cast<int>(gen_lm.size()) >= n && static_cast<int>(gt_lm.size()) >= n,
            dir.string() + ": landmark sequences shorter than the frame count");
    gen_lm.resize(static_cast<size_t>(n));
    gt_lm.resize(static_cast<size_t>(n));
    clips.push_back(metrics::evaluate_clip(dir.filename().string(), gen_frames, gt_frames, gen_lm, gt_lm, embed_fn,
                                           mouth_only));
  }
  require(!clips.empty(), "no evaluable clips under " + generated.string());
  auto report = metrics::aggregate(std::move(clips), mouth_only, cfg.to_json());
  if (!out.empty()) {
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    std::ofstream(out) << report.to_json().dump(2) << "\n";
    auto csv = out;
    report.write_csv(csv.replace_extension(".csv"));
    std::cout << "wrote " << out.string() << "\n";
  }
  return report;
}

// ---------------------------------------------------------------------------
// Ablation

double median(std::vector<double> v) {
  require(!v.empty(), "median of an empty set");
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

nlohmann::json AblationReport::to_json() const {
  nlohmann::json rs = nlohmann::json::array();
  for (const auto& r : rows)
    rs.push_back({{"variant", r.variant},
                  {"csim", r.csim},
                  {"lmd", r.lmd},
                  {"ssim", r.ssim},
                  {"median_csim", r.median_csim},
                  {"median_lmd", r.median_lmd},
                  {"median_ssim", r.median_ssim}});
  return {{"seeds", seeds}, {"rows", rs}};
}

std::string AblationReport::table() const {
  std::ostringstream s;
  s << std::left << std::setw(22) << "variant" << std::right << std::setw(10) << "SSIM" << std::setw(10) << "CSIM"
    << std::setw(10) << "LMD" << "   (medians over " << seeds.size() << " seeds)\n";
  s << std::fixed;
  for (const auto& r : rows)
    s << std::left << std::setw(22) << r.variant << std::right << std::setprecision(4) << std::setw(10)
      << r.median_ssim << std::setw(10) << r.median_csim << std::setw(10) << r.median_lmd << "\n";
  return s.str();
}

const AblationRow& AblationReport::row(const std::string& variant) const {
  for (const auto& r : rows)
    if (r.variant == variant) return r;
  throw ValidationError("ablation report has no row '" + variant + "'");
}

AblationReport cmd_ablate(const RunConfig& cfg) {
  RunLock lock(cfg.out_dir);
  auto data = data::load_corpus_data(cfg.data_dir, true);
  const auto checksum = cfg.checksum();
  const auto camera = face3d::Camera::for_image(data.image_size);
  auto log = open_log(cfg, "ablate");

  // The face embedding and the generator do not depend on the audio path, so
  // one copy of each (trained with the run seed) serves every variant.
  aem::FaceEmbed embed{nullptr};
  if (fs::exists(checkpoint_path(cfg, "face_embed"))) {
    embed = aem::load_face_embed(load_ckpt(cfg, "face_embed"));
  } else {
    embed = aem::train_face_embed(data, cfg.face_embed, cfg.optimizer, cfg.seed, &log);
    save_ckpt(cfg, aem::save_face_embed(embed, cfg.face_embed.steps, checksum));
  }
  vg::Generator gen{nullptr};
  if (fs::exists(checkpoint_path(cfg, "vg_generator"))) {
    gen = vg::load_generator(load_ckpt(cfg, "vg_generator"));
  } else {
    auto m = vg::train_generator(data, cfg.vg, cfg.optimizer, cfg.seed, &log);
    gen = m.gen;
    save_ckpt(cfg, vg::save_generator(m.gen, cfg.vg.steps, checksum));
    save_ckpt(cfg, vg::save_discriminator(m.disc, cfg.vg.steps, checksum));
  }
  metrics::EmbedFn embed_fn = [&](const FrameImage& img) { return aem::face_embedding(embed, img); };

  // Cross-identity test pairs: audio of speaker a saying word w, source face of
  // speaker b. The reference is b's own recording of the same (word, take),
  // which shares the motion track and carries b's expression style and pose.
  const auto test = data.clips(true);
  std::vector<std::pair<int, int>> all_pairs;  // (audio clip, reference clip)
  for (int a : test)
    for (int b : test) {
      auto ai = static_cast<size_t>(a), bi = static_cast<size_t>(b);
      if (data.speaker[ai] != data.speaker[bi] && data.word[ai] == data.word[bi] && data.take[ai] == data.take[bi])
        all_pairs.emplace_back(a, b);
    }
  require(!all_pairs.empty(), "ablation needs at least two speakers in the test split");
  std::vector<int> src_clip(static_cast<size_t>(data.n_speakers), -1);
  for (int c : data.clips(false)) {
    auto& s = src_clip[static_cast<size_t>(data.speaker[static_cast<size_t>(c)])];
    if (s < 0) s = c;
  }

  AblationReport rep;
  rep.seeds = cfg.ablation.seeds;
  rep.rows = {{"baseline-entangled"}, {"w/o L_ldmk"}, {"full"}};
  for (uint64_t seed : cfg.ablation.seeds) {
    std::mt19937_64 rng(seed * 1000033 + 17);
    auto pairs = all_pairs;
    std::shuffle(pairs.begin(), pairs.end(), rng);
    pairs.resize(std::min<size_t>(pairs.size(), static_cast<size_t>(cfg.ablation.pairs)));

    auto afdm_model = afdm::train_afdm(data, cfg.afdm, cfg.optimizer, seed, &log);
    auto no_ldmk_cfg = cfg.aem;
    no_ldmk_cfg.lambda_ldmk = 0.0;
    std::vector<std::pair<aem::AemModel, afdm::Afdm*>> variants;
    variants.emplace_back(aem::train_aem(data, nullptr, embed, cfg.aem, cfg.afdm, cfg.optimizer, seed, &log), nullptr);
    variants.emplace_back(aem::train_aem(data, &afdm_model, embed, no_ldmk_cfg, cfg.afdm, cfg.optimizer, seed, &log),
                          &afdm_model);
    variants.emplace_back(aem::train_aem(data, &afdm_model, embed, cfg.aem, cfg.afdm, cfg.optimizer, seed, &log),
                          &afdm_model);

    for (size_t v = 0; v < variants.size(); ++v) {
      auto& [model, afdm_ptr] = variants[v];
      std::vector<metrics::ClipMetrics> clips;
      for (auto [a, b] : pairs) {
        const int sb = data.speaker[static_cast<size_t>(b)];
        const auto src = from_tensor(data.frames[src_clip[static_cast<size_t>(sb)]][0]);
        torch::Tensor content;
        {
          torch::NoGradGuard ng;
          model->eval();
          content = model->content(data.mel[a], afdm_ptr);
        }
        auto beta = aem::predict_expression(model, content, aem::face_embedding(embed, src));
        auto [rot, trans] = data::split_pose(data.pose[b]);
        auto frames = tensor_frames(vg::generate_frames(gen, to_tensor(src), beta_tensor(beta), rot, trans));
        auto gt_frames = tensor_frames(data.frames[b]);
        face3d::IdentityCoeffs alpha;
        for (int k = 0; k < face3d::kIdentityDim; ++k) alpha.values(k) = data.alpha[sb][k].item<double>();
        auto poses = synth::read_pose(data.corpus.root / data.corpus.clips[static_cast<size_t>(b)].pose);
        auto gt_lm = face3d::read_landmarks_csv(data.corpus.root / data.corpus.clips[static_cast<size_t>(b)].landmarks);
        std::vector<face3d::Landmarks2D> lm;
        for (size_t t = 0; t < beta.size(); ++t) lm.push_back(face3d::render_landmarks(data.basis, alpha, beta[t], poses[t], camera));
        clips.push_back(metrics::evaluate_clip(data.corpus.clips[static_cast<size_t>(a)].clip_id + "->" +
                                                   data.corpus.clips[static_cast<size_t>(b)].clip_id,
                                               frames, gt_frames, lm, gt_lm, embed_fn, false));
      }
      auto agg = metrics::aggregate(std::move(clips), false, {});
      auto& row = rep.rows[v];
      row.csim.push_back(agg.csim);
      row.lmd.push_back(agg.lmd);
      row.ssim.push_back(agg.ssim);
      log.write({{"stage", "ablate"}, {"seed", seed}, {"variant", row.variant}, {"ssim", agg.ssim},
                 {"csim", agg.csim}, {"lmd", agg.lmd}});
      std::cout << "seed " << seed << " " << row.variant << ": SSIM " << agg.ssim << " CSIM " << agg.csim << " LMD "
                << agg.lmd << "\n";
    }
  }
  for (auto& r : rep.rows) {
    r.median_csim = median(r.csim);
    r.median_lmd = median(r.lmd);
    r.median_ssim = median(r.ssim);
  }
  fs::create_directories(cfg.out_dir / "reports");
  std::ofstream(cfg.out_dir / "reports" / "ablation.json") << rep.to_json().dump(2) << "\n";
  std::ofstream(cfg.out_dir / "reports" / "ablation.txt") << rep.table();
  std::cout << rep.table();
  return rep;
}

}  // namespace opt::pipeline
