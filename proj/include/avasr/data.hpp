#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "avasr/tensor.hpp"
#include "avasr/tokenizer.hpp"

namespace avasr {

// Audio feature storage: 16-byte header (magic "AVF1", u32 rows, u32 cols,
// u32 reserved) followed by rows*cols little-endian float32.
struct FeatureMatrix {
  int rows = 0;
  int cols = 0;
  std::vector<float> data;  // row-major

  float at(int r, int c) const {
    return data[static_cast<std::size_t>(r) * cols + c];
  }
};

FeatureMatrix read_feature_file(const std::string& path);
void write_feature_file(const std::string& path, const FeatureMatrix& m);

struct ChunkSpan {
  int start_frame = 0;
  int end_frame = 0;  // exclusive
  std::string transcript;
};

struct UtteranceRecord {
  std::string id;
  std::string audio_path;
  std::string video_path;  // empty when absent
  double duration_s = 0;
  std::string transcript;
  std::vector<ChunkSpan> chunks;
  // optional row slice into the audio file, set by chunk_records
  int frame_start = -1;
  int frame_end = -1;

  bool has_video() const { return !video_path.empty(); }
  bool sliced() const { return frame_start >= 0; }
};

struct ManifestOptions {
  bool skip_bad = false;    // log and continue instead of failing fast
  bool check_files = true;  // verify audio files exist at load time
};

// Tab-separated, one record per line:
//   id  audio_path  video_path|-  duration_s  transcript  [spans]
// spans: "s0:e0:text0|s1:e1:text1". A 4-field line omits the video column.
std::vector<UtteranceRecord> load_manifest(const std::string& path,
                                           const ManifestOptions& opts = {},
                                           std::ostream* log = nullptr);
void save_manifest(const std::string& path,
                   const std::vector<UtteranceRecord>& records);

// Reads the record's features, applying its frame slice when present. Raw
// 43-column files are checked against duration_s (one frame of slack).
FeatureMatrix load_features(const UtteranceRecord& rec, int expected_cols = 0);
std::vector<float> load_video_vector(const UtteranceRecord& rec, int dim);

struct FilterResult {
  std::vector<UtteranceRecord> kept;
  int dropped = 0;
  double retained_seconds = 0;
  double total_seconds = 0;

  double retained_fraction() const {
    return total_seconds > 0 ? retained_seconds / total_seconds : 1.0;
  }
};

// Keeps records with duration_s <= max_seconds (boundary inclusive).
FilterResult filter_long(const std::vector<UtteranceRecord>& records,
                         double max_seconds = 15.0);

// Expands chunk spans into standalone sliced records; span boundaries must
// be ordered and disjoint. Records without spans pass through.
std::vector<UtteranceRecord> chunk_records(
    const std::vector<UtteranceRecord>& records);

// Concatenates k consecutive frames feature-wise: [T, c] -> [ceil(T/k), c*k],
// zero-padding the final partial group. Values are only rearranged.
FeatureMatrix stack_frames(const FeatureMatrix& m, int k);

// One utterance with features loaded, stacked, and targets tokenized at both
// resolutions; the unit make_batches consumes.
struct PreppedUtterance {
  std::string id;
  FeatureMatrix audio;  // after stacking
  std::vector<float> video;  // empty when absent
  std::vector<int> char_ids;
  std::vector<int> sub_ids;
  std::string transcript_norm;
};

std::vector<PreppedUtterance> prep_utterances(
    const std::vector<UtteranceRecord>& records, const CharVocab& chars,
    const BpeModel& bpe, int stack_factor, int audio_cols, int video_dim);

struct Batch {
  Tensor audio;       // [b, T, D]
  Tensor audio_real;  // [b, T], 1 = real frame
  Tensor video;       // [b, 1, Dv]; undefined when no record has video
  std::vector<uint8_t> video_avail;
  int char_len = 0;  // padded target length incl. the shifted EOS slot
  std::vector<int> char_in, char_out;  // [b * char_len]
  std::vector<uint8_t> char_mask;
  int sub_len = 0;
  std::vector<int> sub_in, sub_out;
  std::vector<uint8_t> sub_mask;
  std::vector<std::string> ids;
  int size = 0;
  std::size_t real_frames = 0;
};

struct BatchOptions {
  long frame_budget = 6000;  // padded frames (rows x max len) per batch
  uint64_t shuffle_seed = 0;
  bool shuffle = true;
};

// Buckets by length under the frame budget, then shuffles batch order with
// the seed. Targets carry BOS..EOS framing at both resolutions.
std::vector<Batch> make_batches(const std::vector<PreppedUtterance>& utts,
                                const BatchOptions& opts);

}  // namespace avasr
