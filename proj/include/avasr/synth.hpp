#pragma once

#include <cstdint>
#include <string>

namespace avasr {

// Bundled synthetic corpus: token-correlated "audio" patterns plus topic
// vectors standing in for pooled video features. Each sentence contains at
// least one homophone-style word whose written form is decided by the topic
// alone, so the audio never disambiguates it but the video does.
struct SynthConfig {
  uint64_t seed = 7;
  int n_train = 30;
  int n_dev = 8;
  int n_test = 8;
  int frames_per_word = 8;  // raw 10 ms frames per word
  double audio_noise = 0.05;
  double video_noise = 0.1;
  int min_words = 3;
  int max_words = 6;
  int filler_words = 24;  // distinct non-homophone vocabulary entries
  int audio_cols = 43;
  int video_dim = 2048;
};

struct SynthPaths {
  std::string train_manifest;
  std::string dev_manifest;
  std::string test_manifest;
  std::string corpus;  // train transcripts, tokenizer input
};

// Writes feature files and manifests under out_dir; byte-identical output
// for identical config.
SynthPaths synth_corpus(const std::string& out_dir, const SynthConfig& cfg);

}  // namespace avasr
