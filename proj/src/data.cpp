#include "avasr/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

namespace avasr {

namespace {

constexpr char kMagic[4] = {'A', 'V', 'F', '1'};

uint32_t read_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) |
         (static_cast<uint32_t>(b[3]) << 24);
}

void write_u32(std::ostream& out, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  out.write(reinterpret_cast<char*>(b), 4);
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  while (true) {
    std::size_t tab = line.find('\t', start);
    if (tab == std::string::npos) {
      fields.push_back(line.substr(start));
      break;
    }
    fields.push_back(line.substr(start, tab - start));
    start = tab + 1;
  }
  return fields;
}

std::vector<ChunkSpan> parse_spans(const std::string& field, int line_no) {
  std::vector<ChunkSpan> spans;
  std::size_t start = 0;
  while (start <= field.size()) {
    std::size_t bar = field.find('|', start);
    std::string part = bar == std::string::npos
                           ? field.substr(start)
                           : field.substr(start, bar - start);
    if (!part.empty()) {
      std::size_t c1 = part.find(':');
      std::size_t c2 = c1 == std::string::npos ? std::string::npos
                                               : part.find(':', c1 + 1);
      if (c1 == std::string::npos || c2 == std::string::npos)
        throw IoError("manifest line " + std::to_string(line_no) +
                      ": malformed chunk span '" + part + "'");
      ChunkSpan s;
      s.start_frame = std::stoi(part.substr(0, c1));
      s.end_frame = std::stoi(part.substr(c1 + 1, c2 - c1 - 1));
      s.transcript = part.substr(c2 + 1);
      spans.push_back(std::move(s));
    }
    if (bar == std::string::npos) break;
    start = bar + 1;
  }
  return spans;
}

std::string spans_to_field(const std::vector<ChunkSpan>& spans) {
  std::string out;
  for (std::size_t i = 0; i < spans.size(); ++i) {
    if (i) out += '|';
    out += std::to_string(spans[i].start_frame) + ':' +
           std::to_string(spans[i].end_frame) + ':' + spans[i].transcript;
  }
  return out;
}

}  // namespace

FeatureMatrix read_feature_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open feature file: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    throw IoError("bad magic in feature file: " + path);
  FeatureMatrix m;
  m.rows = static_cast<int>(read_u32(in));
  m.cols = static_cast<int>(read_u32(in));
  read_u32(in);  // reserved
  if (m.rows < 0 || m.cols <= 0)
    throw IoError("bad dimensions in feature file: " + path);
  m.data.resize(static_cast<std::size_t>(m.rows) * m.cols);
  in.read(reinterpret_cast<char*>(m.data.data()),
          static_cast<std::streamsize>(m.data.size() * sizeof(float)));
  if (!in) throw IoError("truncated feature file: " + path);
  return m;
}

void write_feature_file(const std::string& path, const FeatureMatrix& m) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write feature file: " + path);
  out.write(kMagic, 4);
  write_u32(out, static_cast<uint32_t>(m.rows));
  write_u32(out, static_cast<uint32_t>(m.cols));
  write_u32(out, 0);
  out.write(reinterpret_cast<const char*>(m.data.data()),
            static_cast<std::streamsize>(m.data.size() * sizeof(float)));
  if (!out) throw IoError("failed writing feature file: " + path);
}

std::vector<UtteranceRecord> load_manifest(const std::string& path,
                                           const ManifestOptions& opts,
                                           std::ostream* log) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open manifest: " + path);
  std::vector<UtteranceRecord> records;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      auto fields = split_tabs(line);
      if (fields.size() < 4)
        throw IoError("manifest line " + std::to_string(line_no) +
                      ": expected at least 4 tab-separated fields, got " +
                      std::to_string(fields.size()));
      UtteranceRecord rec;
      rec.id = fields[0];
      rec.audio_path = fields[1];
      std::size_t next;
      if (fields.size() == 4) {
        // video column omitted entirely
        next = 2;
      } else {
        rec.video_path = fields[2] == "-" ? "" : fields[2];
        next = 3;
      }
      try {
        rec.duration_s = std::stod(fields[next]);
      } catch (const std::exception&) {
        throw IoError("manifest line " + std::to_string(line_no) +
                      ": bad duration '" + fields[next] + "'");
      }
      rec.transcript = fields[next + 1];
      if (fields.size() > next + 2 && !fields[next + 2].empty())
        rec.chunks = parse_spans(fields[next + 2], line_no);
      if (rec.id.empty() || rec.audio_path.empty())
        throw IoError("manifest line " + std::to_string(line_no) +
                      ": empty id or audio path");
      if (opts.check_files && !std::filesystem::exists(rec.audio_path))
        throw IoError("utterance '" + rec.id + "': missing audio file " +
                      rec.audio_path);
      if (opts.check_files && rec.has_video() &&
          !std::filesystem::exists(rec.video_path))
        throw IoError("utterance '" + rec.id + "': missing video file " +
                      rec.video_path);
      records.push_back(std::move(rec));
    } catch (const IoError& e) {
      if (!opts.skip_bad) throw;
      if (log) *log << "skipping: " << e.what() << '\n';
    }
  }
  if (records.empty() && log) *log << "manifest " << path << " is empty\n";
  return records;
}

void save_manifest(const std::string& path,
                   const std::vector<UtteranceRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write manifest: " + path);
  char buf[32];
  for (const auto& rec : records) {
    std::snprintf(buf, sizeof buf, "%.6f", rec.duration_s);
    out << rec.id << '\t' << rec.audio_path << '\t'
        << (rec.has_video() ? rec.video_path : "-") << '\t' << buf << '\t'
        << rec.transcript;
    if (!rec.chunks.empty()) out << '\t' << spans_to_field(rec.chunks);
    out << '\n';
  }
}

FeatureMatrix load_features(const UtteranceRecord& rec, int expected_cols) {
  FeatureMatrix m = read_feature_file(rec.audio_path);
  if (expected_cols > 0 && m.cols != expected_cols)
    throw IoError("utterance '" + rec.id + "': feature file has " +
                  std::to_string(m.cols) + " columns, expected " +
                  std::to_string(expected_cols));
  if (rec.sliced()) {
    if (rec.frame_end > m.rows || rec.frame_start >= rec.frame_end)
      throw IoError("utterance '" + rec.id + "': slice [" +
                    std::to_string(rec.frame_start) + ", " +
                    std::to_string(rec.frame_end) + ") outside " +
                    std::to_string(m.rows) + " rows");
    FeatureMatrix s;
    s.rows = rec.frame_end - rec.frame_start;
    s.cols = m.cols;
    s.data.assign(
        m.data.begin() + static_cast<std::size_t>(rec.frame_start) * m.cols,
        m.data.begin() + static_cast<std::size_t>(rec.frame_end) * m.cols);
    return s;
  }
  // raw-resolution files must agree with the declared duration
  if (m.cols == 43 &&
      std::abs(rec.duration_s - m.rows * 0.01) > 0.011)
    throw IoError("utterance '" + rec.id + "': duration " +
                  std::to_string(rec.duration_s) + "s disagrees with " +
                  std::to_string(m.rows) + " frames");
  return m;
}

std::vector<float> load_video_vector(const UtteranceRecord& rec, int dim) {
  FeatureMatrix m = read_feature_file(rec.video_path);
  if (m.rows != 1 || m.cols != dim)
    throw IoError("utterance '" + rec.id + "': video file must be [1, " +
                  std::to_string(dim) + "], got [" + std::to_string(m.rows) +
                  ", " + std::to_string(m.cols) + "]");
  return m.data;
}

FilterResult filter_long(const std::vector<UtteranceRecord>& records,
                         double max_seconds) {
  FilterResult r;
  for (const auto& rec : records) {
    r.total_seconds += rec.duration_s;
    if (rec.duration_s <= max_seconds) {
      r.retained_seconds += rec.duration_s;
      r.kept.push_back(rec);
    } else {
      ++r.dropped;
    }
  }
  return r;
}

std::vector<UtteranceRecord> chunk_records(
    const std::vector<UtteranceRecord>& records) {
  std::vector<UtteranceRecord> out;
  for (const auto& rec : records) {
    if (rec.chunks.empty()) {
      out.push_back(rec);
      continue;
    }
    int prev_end = 0;
    for (std::size_t k = 0; k < rec.chunks.size(); ++k) {
      const ChunkSpan& span = rec.chunks[k];
      if (span.start_frame < prev_end || span.end_frame <= span.start_frame)
        throw IoError("utterance '" + rec.id +
                      "': chunk spans must be ordered and disjoint");
      prev_end = span.end_frame;
      UtteranceRecord c;
      c.id = rec.id + "#" + std::to_string(k);
      c.audio_path = rec.audio_path;
      c.video_path = rec.video_path;
      c.transcript = span.transcript;
      c.frame_start = span.start_frame;
      c.frame_end = span.end_frame;
      c.duration_s = (span.end_frame - span.start_frame) * 0.01;
      out.push_back(std::move(c));
    }
  }
  return out;
}

FeatureMatrix stack_frames(const FeatureMatrix& m, int k) {
  if (k < 1) throw ConfigError("stack factor must be >= 1");
  if (k == 1) return m;
  FeatureMatrix out;
  out.rows = (m.rows + k - 1) / k;
  out.cols = m.cols * k;
  out.data.assign(static_cast<std::size_t>(out.rows) * out.cols, 0.0f);
  for (int r = 0; r < m.rows; ++r) {
    int group = r / k, slot = r % k;
    std::copy(m.data.begin() + static_cast<std::size_t>(r) * m.cols,
              m.data.begin() + static_cast<std::size_t>(r + 1) * m.cols,
              out.data.begin() +
                  (static_cast<std::size_t>(group) * out.cols) +
                  static_cast<std::size_t>(slot) * m.cols);
  }
  return out;
}

std::vector<PreppedUtterance> prep_utterances(
    const std::vector<UtteranceRecord>& records, const CharVocab& chars,
    const BpeModel& bpe, int stack_factor, int audio_cols, int video_dim) {
  std::vector<PreppedUtterance> out;
  out.reserve(records.size());
  for (const auto& rec : records) {
    PreppedUtterance p;
    p.id = rec.id;
    FeatureMatrix feats = load_features(rec);
    if (feats.cols == audio_cols) {
      p.audio = stack_frames(feats, stack_factor);
    } else if (feats.cols == audio_cols * stack_factor) {
      p.audio = feats;  // already stacked upstream
    } else {
      throw IoError("utterance '" + rec.id + "': feature width " +
                    std::to_string(feats.cols) + " fits neither raw " +
                    std::to_string(audio_cols) + " nor stacked " +
                    std::to_string(audio_cols * stack_factor));
    }
    if (rec.has_video()) p.video = load_video_vector(rec, video_dim);
    p.transcript_norm = normalize_text(rec.transcript);
    p.char_ids = chars.encode(p.transcript_norm);
    p.sub_ids = bpe.encode(p.transcript_norm);
    out.push_back(std::move(p));
  }
  return out;
}

namespace {

void fill_targets(const std::vector<const PreppedUtterance*>& group,
                  bool subword, int& out_len, std::vector<int>& in_ids,
                  std::vector<int>& out_ids, std::vector<uint8_t>& mask) {
  std::size_t longest = 0;
  for (const auto* u : group)
    longest = std::max(longest, (subword ? u->sub_ids : u->char_ids).size());
  int len = static_cast<int>(longest) + 1;  // room for BOS shift / EOS
  out_len = len;
  in_ids.assign(group.size() * static_cast<std::size_t>(len), special::kPad);
  out_ids.assign(group.size() * static_cast<std::size_t>(len), special::kPad);
  mask.assign(group.size() * static_cast<std::size_t>(len), 0);
  for (std::size_t b = 0; b < group.size(); ++b) {
    const auto& ids = subword ? group[b]->sub_ids : group[b]->char_ids;
    std::size_t base = b * static_cast<std::size_t>(len);
    in_ids[base] = special::kBos;
    for (std::size_t t = 0; t < ids.size(); ++t) {
      in_ids[base + t + 1] = ids[t];
      out_ids[base + t] = ids[t];
    }
    out_ids[base + ids.size()] = special::kEos;
    for (std::size_t t = 0; t <= ids.size(); ++t) mask[base + t] = 1;
  }
}

}  // namespace

std::vector<Batch> make_batches(const std::vector<PreppedUtterance>& utts,
                                const BatchOptions& opts) {
  std::vector<std::size_t> order(utts.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) {
                     if (utts[a].audio.rows != utts[b].audio.rows)
                       return utts[a].audio.rows < utts[b].audio.rows;
                     return utts[a].id < utts[b].id;
                   });

  std::vector<std::vector<std::size_t>> groups;
  std::vector<std::size_t> current;
  long cur_maxlen = 0;
  for (std::size_t idx : order) {
    long rows = utts[idx].audio.rows;
    if (rows > opts.frame_budget)
      throw ContractError("utterance '" + utts[idx].id + "' has " +
                          std::to_string(rows) +
                          " frames, over the batch budget of " +
                          std::to_string(opts.frame_budget));
    long newmax = std::max(cur_maxlen, rows);
    if (!current.empty() &&
        static_cast<long>(current.size() + 1) * newmax > opts.frame_budget) {
      groups.push_back(std::move(current));
      current.clear();
      newmax = rows;
    }
    current.push_back(idx);
    cur_maxlen = newmax;
  }
  if (!current.empty()) groups.push_back(std::move(current));

  if (opts.shuffle && groups.size() > 1) {
    Rng rng(opts.shuffle_seed);
    for (std::size_t i = groups.size() - 1; i > 0; --i) {
      std::size_t j = static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<int>(i)));
      std::swap(groups[i], groups[j]);
    }
  }

  std::vector<Batch> batches;
  batches.reserve(groups.size());
  for (const auto& group_idx : groups) {
    std::vector<const PreppedUtterance*> group;
    for (std::size_t idx : group_idx) group.push_back(&utts[idx]);
    Batch b;
    b.size = static_cast<int>(group.size());
    int tmax = 0, feat_dim = 0, video_dim = 0;
    bool any_video = false;
    for (const auto* u : group) {
      tmax = std::max(tmax, u->audio.rows);
      feat_dim = u->audio.cols;
      if (!u->video.empty()) {
        any_video = true;
        video_dim = static_cast<int>(u->video.size());
      }
    }
    std::vector<real> audio(
        static_cast<std::size_t>(b.size) * tmax * feat_dim, real(0));
    std::vector<real> mask(static_cast<std::size_t>(b.size) * tmax, real(0));
    for (int bi = 0; bi < b.size; ++bi) {
      const FeatureMatrix& fm = group[bi]->audio;
      for (int t = 0; t < fm.rows; ++t) {
        mask[static_cast<std::size_t>(bi) * tmax + t] = real(1);
        for (int c = 0; c < feat_dim; ++c)
          audio[(static_cast<std::size_t>(bi) * tmax + t) * feat_dim + c] =
              static_cast<real>(fm.at(t, c));
      }
      b.real_frames += static_cast<std::size_t>(fm.rows);
    }
    b.audio = Tensor::from_data({b.size, tmax, feat_dim}, std::move(audio));
    b.audio_real = Tensor::from_data({b.size, tmax}, std::move(mask));
    b.video_avail.assign(group.size(), 0);
    if (any_video) {
      std::vector<real> video(
          static_cast<std::size_t>(b.size) * video_dim, real(0));
      for (int bi = 0; bi < b.size; ++bi) {
        if (group[bi]->video.empty()) continue;
        b.video_avail[static_cast<std::size_t>(bi)] = 1;
        for (int c = 0; c < video_dim; ++c)
          video[static_cast<std::size_t>(bi) * video_dim + c] =
              static_cast<real>(group[bi]->video[c]);
      }
      b.video = Tensor::from_data({b.size, 1, video_dim}, std::move(video));
    }
    fill_targets(group, false, b.char_len, b.char_in, b.char_out, b.char_mask);
    fill_targets(group, true, b.sub_len, b.sub_in, b.sub_out, b.sub_mask);
    for (const auto* u : group) b.ids.push_back(u->id);
    batches.push_back(std::move(b));
  }
  return batches;
}

}  // namespace avasr
