#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "opt/face3d.hpp"
#include "opt/synthdata.hpp"

namespace opt::data {

// Log-mel values are shifted and scaled to roughly unit range before entering a network.
inline constexpr float kMelShift = 14.0F;
inline constexpr float kMelScale = 8.0F;

// Whole corpus held as tensors, clip-major. Frames are loaded only on request.
struct CorpusData {
  synth::Corpus corpus;
  face3d::MorphableBasis basis;
  int frames_per_clip = 0;
  int image_size = 0;
  int n_speakers = 0;
  int n_words = 0;
  torch::Tensor mel;        // [C, T, 16, 16] raw log-mel
  torch::Tensor beta;       // [C, T, 64]
  torch::Tensor pose;       // [C, T, 12]
  torch::Tensor landmarks;  // [C, T, 68, 2]
  torch::Tensor alpha;      // [n_speakers, 80]
  torch::Tensor frames;     // [C, T, 3, H, W] or undefined
  std::vector<int> speaker, word, take;
  std::vector<bool> is_test;

  int clip_count() const { return static_cast<int>(speaker.size()); }
  std::vector<int> clips(bool test) const;
  // Clip with the same word and take spoken by `other_speaker`, or -1.
  int find_clip(int speaker_index, int word_index, int take_index) const;
};

CorpusData load_corpus_data(const std::filesystem::path& root, bool with_frames);

// Stacks `context` chunks centred on each frame along the time axis:
// mel_clip [T,16,16] → [n, 1, 16, 16·context], normalized. Edge frames repeat the border chunk.
torch::Tensor mel_windows(const torch::Tensor& mel_clip, const std::vector<int>& frames, int context);
// Same for an arbitrary list of (clip, frame) pairs drawn from a [C,T,16,16] tensor.
torch::Tensor mel_windows(const torch::Tensor& mel, const std::vector<std::pair<int, int>>& items, int context);

torch::Tensor chunks_to_tensor(const std::vector<audio::MelChunk>& chunks);

// [T,12] pose rows → rotation [T,3,3] and translation [T,3].
std::pair<torch::Tensor, torch::Tensor> split_pose(const torch::Tensor& pose_rows);
torch::Tensor poses_to_tensor(const std::vector<face3d::HeadPose>& poses);
torch::Tensor frames_to_tensor(const std::vector<FrameImage>& frames);

}  // namespace opt::data
