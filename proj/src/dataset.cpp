#include "opt/dataset.hpp"

#include <algorithm>

#include "opt/array_io.hpp"
#include "opt/error.hpp"

namespace opt::data {

std::vector<int> CorpusData::clips(bool test) const {
  std::vector<int> out;
  for (int c = 0; c < clip_count(); ++c)
    if (is_test[static_cast<size_t>(c)] == test) out.push_back(c);
  return out;
}

int CorpusData::find_clip(int speaker_index, int word_index, int take_index) const {
  for (int c = 0; c < clip_count(); ++c) {
    auto i = static_cast<size_t>(c);
    if (speaker[i] == speaker_index && word[i] == word_index && take[i] == take_index) return c;
  }
  return -1;
}

torch::Tensor chunks_to_tensor(const std::vector<audio::MelChunk>& chunks) {
  auto t = torch::empty({static_cast<int64_t>(chunks.size()), audio::kMelBins, audio::kChunkHops});
  auto a = t.accessor<float, 3>();
  for (size_t f = 0; f < chunks.size(); ++f)
    for (int b = 0; b < audio::kMelBins; ++b)
      for (int h = 0; h < audio::kChunkHops; ++h) a[static_cast<int64_t>(f)][b][h] = chunks[f].values[b][h];
  return t;
}

torch::Tensor poses_to_tensor(const std::vector<face3d::HeadPose>& poses) {
  auto t = torch::empty({static_cast<int64_t>(poses.size()), 12});
  auto a = t.accessor<float, 2>();
  for (size_t f = 0; f < poses.size(); ++f) {
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) a[static_cast<int64_t>(f)][3 * r + c] = static_cast<float>(poses[f].rotation(r, c));
    for (int k = 0; k < 3; ++k) a[static_cast<int64_t>(f)][9 + k] = static_cast<float>(poses[f].translation(k));
  }
  return t;
}

torch::Tensor frames_to_tensor(const std::vector<FrameImage>& frames) {
  std::vector<torch::Tensor> ts;
  ts.reserve(frames.size());
  for (const auto& f : frames) ts.push_back(to_tensor(f));
  return torch::stack(ts);
}

std::pair<torch::Tensor, torch::Tensor> split_pose(const torch::Tensor& pose_rows) {
  auto sizes = pose_rows.sizes().vec();
  sizes.pop_back();
  auto rs = sizes;
  rs.push_back(3);
  rs.push_back(3);
  auto ts = sizes;
  ts.push_back(3);
  return {pose_rows.narrow(-1, 0, 9).reshape(rs), pose_rows.narrow(-1, 9, 3).reshape(ts)};
}

CorpusData load_corpus_data(const std::filesystem::path& root, bool with_frames) {
  CorpusData d;
  d.corpus = synth::load_corpus(root);
  if (!std::filesystem::exists(d.corpus.basis_path())) throw MissingPrerequisite("corpus", "basis.bin missing");
  d.basis = face3d::load_basis(d.corpus.basis_path());
  d.frames_per_clip = d.corpus.spec.frames_per_clip();
  d.image_size = d.corpus.spec.image_size;
  d.n_speakers = d.corpus.spec.n_identities;
  d.n_words = d.corpus.spec.n_words;

  auto ids = io::read_array(d.corpus.identities_path());
  require(ids.shape.size() == 2 && ids.shape[0] == d.n_speakers && ids.shape[1] == face3d::kIdentityDim,
          "corpus: identities array has the wrong shape");
  d.alpha = torch::from_blob(ids.data.data(), {ids.shape[0], ids.shape[1]}).clone();

  const int T = d.frames_per_clip;
  std::vector<torch::Tensor> mel, beta, pose, lms, frames;
  for (const auto& rec : d.corpus.clips) {
    require(rec.frame_count == T, "corpus: clip " + rec.clip_id + " has an unexpected frame count");
    d.speaker.push_back(rec.speaker);
    d.word.push_back(rec.word);
    d.take.push_back(rec.take);
    d.is_test.push_back(rec.split == "test");
    mel.push_back(chunks_to_tensor(audio::read_chunks(root / rec.chunks)));
    auto b = io::read_array(root / rec.beta);
    beta.push_back(torch::from_blob(b.data.data(), {b.shape[0], b.shape[1]}).clone());
    auto p = io::read_array(root / rec.pose);
    pose.push_back(torch::from_blob(p.data.data(), {p.shape[0], p.shape[1]}).clone());
    auto lm = face3d::read_landmarks_csv(root / rec.landmarks);
    require(static_cast<int>(lm.size()) == T, "corpus: landmark count mismatch in " + rec.clip_id);
    auto lt = torch::empty({T, face3d::kLandmarkCount, 2});
    auto la = lt.accessor<float, 3>();
    for (int f = 0; f < T; ++f)
      for (int k = 0; k < face3d::kLandmarkCount; ++k)
        for (int a = 0; a < 2; ++a) la[f][k][a] = static_cast<float>(lm[static_cast<size_t>(f)].points(k, a));
    lms.push_back(lt);
    if (with_frames) frames.push_back(frames_to_tensor(synth::read_frames(root / rec.frames_dir, T)));
  }
  d.mel = torch::stack(mel);
  d.beta = torch::stack(beta);
  d.pose = torch::stack(pose);
  d.landmarks = torch::stack(lms);
  if (with_frames) d.frames = torch::stack(frames);
  return d;
}

namespace {
torch::Tensor window_of(const torch::Tensor& mel_clip, int frame, int context) {
  const int T = static_cast<int>(mel_clip.size(0));
  std::vector<int64_t> idx;
  for (int k = 0; k < context; ++k) idx.push_back(std::clamp(frame - context / 2 + k, 0, T - 1));
  auto sel = mel_clip.index_select(0, torch::tensor(idx, torch::kLong));  // [ctx,16,16] (bin, hop)
  return sel.permute({1, 0, 2}).reshape({audio::kMelBins, context * audio::kChunkHops});
}
}  // namespace

torch::Tensor mel_windows(const torch::Tensor& mel_clip, const std::vector<int>& frames, int context) {
  std::vector<torch::Tensor> ws;
  ws.reserve(frames.size());
  for (int f : frames) ws.push_back(window_of(mel_clip, f, context));
  return ((torch::stack(ws) + kMelShift) / kMelScale).unsqueeze(1);
}

torch::Tensor mel_windows(const torch::Tensor& mel, const std::vector<std::pair<int, int>>& items, int context) {
  std::vector<torch::Tensor> ws;
  ws.reserve(items.size());
  for (const auto& [c, f] : items) ws.push_back(window_of(mel[c], f, context));
  return ((torch::stack(ws) + kMelShift) / kMelScale).unsqueeze(1);
}

}  // namespace opt::data
