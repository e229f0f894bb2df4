#include "avasr/synth.hpp"

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <vector>

#include "avasr/data.hpp"
#include "avasr/rng.hpp"

namespace avasr {

namespace {

// two-syllable filler inventory; enough distinct rare words that subword
// units are each seen only a handful of times while characters stay dense
std::vector<std::string> filler_words(int count) {
  static const std::vector<std::string> heads{"ba", "do", "ki",  "lu",
                                              "men", "tor", "sa", "vel"};
  static const std::vector<std::string> tails{"ra", "te", "go",
                                              "mi", "pol", "nu"};
  std::vector<std::string> words;
  for (const auto& t : tails)
    for (const auto& h : heads) {
      if (static_cast<int>(words.size()) >= count) return words;
      words.push_back(h + t);
    }
  return words;
}
// pair member 0 belongs to topic 0, member 1 to topic 1; both members share
// one audio signature
const std::vector<std::array<std::string, 2>> kHomophones{
    {"flour", "flower"}, {"sale", "sail"}};

std::vector<float> audio_signature(int audio_class, int frames, int cols) {
  Rng rng(9000 + static_cast<uint64_t>(audio_class));
  std::vector<float> sig(static_cast<std::size_t>(frames) * cols);
  for (auto& v : sig) v = static_cast<float>(rng.uniform(-1, 1));
  return sig;
}

std::vector<float> topic_vector(int topic, int dim) {
  Rng rng(500 + static_cast<uint64_t>(topic));
  std::vector<float> v(static_cast<std::size_t>(dim));
  for (auto& x : v) x = static_cast<float>(rng.uniform(-1, 1));
  return v;
}

int audio_class_of(const std::vector<std::string>& fillers,
                   const std::string& word) {
  for (std::size_t i = 0; i < fillers.size(); ++i)
    if (fillers[i] == word) return static_cast<int>(i);
  for (std::size_t k = 0; k < kHomophones.size(); ++k)
    if (kHomophones[k][0] == word || kHomophones[k][1] == word)
      return static_cast<int>(fillers.size() + k);
  throw ContractError("unknown synthetic word: " + word);
}

}  // namespace

SynthPaths synth_corpus(const std::string& out_dir, const SynthConfig& cfg) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(out_dir) / "audio");
  fs::create_directories(fs::path(out_dir) / "video");

  const std::vector<std::string> fillers = filler_words(cfg.filler_words);
  Rng rng(cfg.seed);
  int total = cfg.n_train + cfg.n_dev + cfg.n_test;
  std::vector<UtteranceRecord> records;
  records.reserve(static_cast<std::size_t>(total));

  for (int i = 0; i < total; ++i) {
    int topic = rng.uniform_int(0, 1);
    int len = rng.uniform_int(cfg.min_words, cfg.max_words);
    int homophone_slot = rng.uniform_int(0, len - 1);
    std::vector<std::string> sentence;
    for (int w = 0; w < len; ++w) {
      if (w == homophone_slot) {
        int pair = rng.uniform_int(
            0, static_cast<int>(kHomophones.size()) - 1);
        sentence.push_back(kHomophones[static_cast<std::size_t>(pair)]
                                      [static_cast<std::size_t>(topic)]);
      } else {
        sentence.push_back(fillers[static_cast<std::size_t>(rng.uniform_int(
            0, static_cast<int>(fillers.size()) - 1))]);
      }
    }

    FeatureMatrix audio;
    audio.cols = cfg.audio_cols;
    audio.rows = len * cfg.frames_per_word;
    audio.data.reserve(static_cast<std::size_t>(audio.rows) * audio.cols);
    for (const std::string& word : sentence) {
      std::vector<float> sig = audio_signature(
          audio_class_of(fillers, word), cfg.frames_per_word, cfg.audio_cols);
      for (float v : sig)
        audio.data.push_back(
            v + static_cast<float>(rng.normal(0.0, cfg.audio_noise)));
    }

    std::vector<float> video = topic_vector(topic, cfg.video_dim);
    for (auto& v : video)
      v += static_cast<float>(rng.normal(0.0, cfg.video_noise));
    FeatureMatrix vm;
    vm.rows = 1;
    vm.cols = cfg.video_dim;
    vm.data = std::move(video);

    char idbuf[16];
    std::snprintf(idbuf, sizeof idbuf, "utt%04d", i);
    UtteranceRecord rec;
    rec.id = idbuf;
    rec.audio_path = (fs::path(out_dir) / "audio" / (rec.id + ".af")).string();
    rec.video_path = (fs::path(out_dir) / "video" / (rec.id + ".vf")).string();
    rec.duration_s = audio.rows * 0.01;
    std::string transcript;
    for (std::size_t w = 0; w < sentence.size(); ++w) {
      if (w) transcript += ' ';
      transcript += sentence[w];
    }
    rec.transcript = transcript;
    write_feature_file(rec.audio_path, audio);
    write_feature_file(rec.video_path, vm);
    records.push_back(std::move(rec));
  }

  SynthPaths paths;
  paths.train_manifest = (fs::path(out_dir) / "train.tsv").string();
  paths.dev_manifest = (fs::path(out_dir) / "dev.tsv").string();
  paths.test_manifest = (fs::path(out_dir) / "test.tsv").string();
  paths.corpus = (fs::path(out_dir) / "corpus.txt").string();

  auto slice = [&](int from, int count) {
    return std::vector<UtteranceRecord>(records.begin() + from,
                                        records.begin() + from + count);
  };
  save_manifest(paths.train_manifest, slice(0, cfg.n_train));
  save_manifest(paths.dev_manifest, slice(cfg.n_train, cfg.n_dev));
  save_manifest(paths.test_manifest,
                slice(cfg.n_train + cfg.n_dev, cfg.n_test));

  std::ofstream corpus(paths.corpus, std::ios::binary);
  if (!corpus) throw IoError("cannot write corpus: " + paths.corpus);
  for (int i = 0; i < cfg.n_train; ++i)
    corpus << records[static_cast<std::size_t>(i)].transcript << '\n';
  return paths;
}

}  // namespace avasr
