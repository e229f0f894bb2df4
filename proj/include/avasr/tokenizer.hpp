#pragma once

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace avasr {

// Reserved ids shared by both vocabularies.
namespace special {
constexpr int kPad = 0;
constexpr int kBos = 1;
constexpr int kEos = 2;
constexpr int kUnk = 3;
constexpr int kCount = 4;
}  // namespace special

// Shared text normalization, applied identically at train and eval time:
// ASCII lowercase, punctuation stripped except apostrophes, whitespace
// collapsed to single spaces, trimmed.
std::string normalize_text(const std::string& text);

std::vector<std::string> split_words(const std::string& normalized);

// Fixed grapheme inventory extracted from training transcripts. One id per
// grapheme including the space symbol; ids are dense with specials first.
class CharVocab {
 public:
  CharVocab() = default;

  static CharVocab train(const std::vector<std::string>& lines);
  static CharVocab load(const std::string& path);
  void save(const std::string& path) const;

  int size() const { return static_cast<int>(id_to_sym_.size()); }
  // expects normalized text; unknown graphemes map to <unk>
  std::vector<int> encode(const std::string& text) const;
  std::string decode(const std::vector<int>& ids) const;

 private:
  std::vector<std::string> id_to_sym_;
  std::unordered_map<std::string, int> sym_to_id_;
  void index();
};

// Byte-pair encoding model: ordered merge list over a character alphabet
// with a word-boundary marker prefixed to each word. Encoding greedily
// applies merges in training order per word; both encode and decode are
// pure functions once trained.
class BpeModel {
 public:
  static const std::string kMarker;  // word-boundary symbol

  BpeModel() = default;

  // Classic BPE: repeatedly merge the most frequent adjacent pair until
  // `vocab_size` total symbols exist (specials + alphabet + merges) or no
  // pair repeats. Ties break to the lexicographically smaller pair.
  static BpeModel train(const std::vector<std::string>& lines, int vocab_size);
  static BpeModel load(const std::string& path);
  void save(const std::string& path) const;

  int size() const { return static_cast<int>(id_to_sym_.size()); }
  const std::vector<std::pair<std::string, std::string>>& merges() const {
    return merges_;
  }

  // expects normalized text; out-of-alphabet characters become <unk> and
  // bump *unk_count when provided
  std::vector<int> encode(const std::string& text,
                          long* unk_count = nullptr) const;
  std::string decode(const std::vector<int>& ids) const;

 private:
  std::vector<std::string> base_;  // sorted alphabet incl. marker
  std::vector<std::pair<std::string, std::string>> merges_;
  std::vector<std::string> id_to_sym_;
  std::unordered_map<std::string, int> sym_to_id_;
  void rebuild_vocab();
};

}  // namespace avasr
