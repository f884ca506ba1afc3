#pragma once

#include <filesystem>
#include <string>

#include <unistd.h>

#include "opt/synthdata.hpp"

namespace opt::testing {

// A small corpus (3 speakers × 3 words × 2 takes, 32×32 frames) built once per
// test process into a private temporary directory.
inline const std::filesystem::path& tiny_corpus() {
  struct Tiny {
    std::filesystem::path root =
        std::filesystem::temp_directory_path() / ("opt_tiny_corpus_" + std::to_string(::getpid()));
    Tiny() {
      std::filesystem::remove_all(root);
      synth::CorpusSpec spec;
      spec.n_identities = 3;
      spec.n_words = 3;
      spec.clips_per_pair = 2;
      spec.image_size = 32;
      spec.seed = 5;
      synth::build_corpus(spec, root);
    }
    ~Tiny() { std::filesystem::remove_all(root); }
  };
  static const Tiny tiny;
  return tiny.root;
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& name)
      : path(std::filesystem::temp_directory_path() / (name + "_" + std::to_string(::getpid()))) {
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace opt::testing
