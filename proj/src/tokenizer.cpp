#include "avasr/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "avasr/errors.hpp"

namespace avasr {

const std::string BpeModel::kMarker = "\xE2\x96\x81";  // U+2581

std::string normalize_text(const std::string& text) {
  std::string out;
  out.reserve(text.size());
  bool pending_space = false;
  for (unsigned char c : text) {
    if (std::isalnum(c) || c == '\'') {
      if (pending_space && !out.empty()) out.push_back(' ');
      pending_space = false;
      out.push_back(static_cast<char>(std::tolower(c)));
    } else if (std::isspace(c)) {
      pending_space = true;
    }
    // anything else (punctuation, non-ASCII bytes) is stripped
  }
  return out;
}

std::vector<std::string> split_words(const std::string& normalized) {
  std::vector<std::string> words;
  std::istringstream in(normalized);
  std::string w;
  while (in >> w) words.push_back(std::move(w));
  return words;
}

namespace {

const char* kSpecialNames[special::kCount] = {"<pad>", "<s>", "</s>", "<unk>"};
const char* kSpaceSentinel = "<space>";

}  // namespace

void CharVocab::index() {
  sym_to_id_.clear();
  for (int i = 0; i < static_cast<int>(id_to_sym_.size()); ++i)
    sym_to_id_[id_to_sym_[i]] = i;
}

CharVocab CharVocab::train(const std::vector<std::string>& lines) {
  std::set<char> graphemes;
  for (const std::string& line : lines)
    for (char c : normalize_text(line)) graphemes.insert(c);
  CharVocab v;
  for (const char* s : kSpecialNames) v.id_to_sym_.emplace_back(s);
  for (char c : graphemes) v.id_to_sym_.emplace_back(1, c);
  v.index();
  return v;
}

std::vector<int> CharVocab::encode(const std::string& text) const {
  std::vector<int> ids;
  ids.reserve(text.size());
  for (char c : text) {
    auto it = sym_to_id_.find(std::string(1, c));
    ids.push_back(it == sym_to_id_.end() ? special::kUnk : it->second);
  }
  return ids;
}

std::string CharVocab::decode(const std::vector<int>& ids) const {
  std::string out;
  for (int id : ids) {
    if (id < 0 || id >= size())
      throw ContractError("char id " + std::to_string(id) + " out of range");
    if (id < special::kCount) continue;
    out += id_to_sym_[id];
  }
  return out;
}

void CharVocab::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write char vocab: " + path);
  for (int i = 0; i < size(); ++i) {
    if (i < special::kCount)
      out << kSpecialNames[i] << '\n';
    else if (id_to_sym_[i] == " ")
      out << kSpaceSentinel << '\n';
    else
      out << id_to_sym_[i] << '\n';
  }
}

CharVocab CharVocab::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read char vocab: " + path);
  CharVocab v;
  std::string line;
  while (std::getline(in, line)) {
    if (line == kSpaceSentinel)
      v.id_to_sym_.emplace_back(" ");
    else
      v.id_to_sym_.push_back(line);
  }
  if (static_cast<int>(v.id_to_sym_.size()) < special::kCount)
    throw IoError("char vocab too short: " + path);
  for (int i = 0; i < special::kCount; ++i)
    if (v.id_to_sym_[i] != kSpecialNames[i])
      throw IoError("char vocab specials corrupt: " + path);
  v.index();
  return v;
}

// --- BPE --------------------------------------------------------------

namespace {

using SymSeq = std::vector<std::string>;

SymSeq word_symbols(const std::string& word) {
  SymSeq syms;
  syms.push_back(BpeModel::kMarker);
  for (char c : word) syms.emplace_back(1, c);
  return syms;
}

// left-to-right, non-overlapping single-rule application
void apply_merge(SymSeq& syms, const std::string& l, const std::string& r) {
  SymSeq out;
  out.reserve(syms.size());
  std::size_t i = 0;
  while (i < syms.size()) {
    if (i + 1 < syms.size() && syms[i] == l && syms[i + 1] == r) {
      out.push_back(l + r);
      i += 2;
    } else {
      out.push_back(syms[i]);
      ++i;
    }
  }
  syms = std::move(out);
}

}  // namespace

void BpeModel::rebuild_vocab() {
  id_to_sym_.clear();
  sym_to_id_.clear();
  for (const char* s : kSpecialNames) id_to_sym_.emplace_back(s);
  for (const std::string& s : base_) id_to_sym_.push_back(s);
  for (const auto& [l, r] : merges_) id_to_sym_.push_back(l + r);
  for (int i = 0; i < static_cast<int>(id_to_sym_.size()); ++i)
    sym_to_id_[id_to_sym_[i]] = i;
}

BpeModel BpeModel::train(const std::vector<std::string>& lines,
                         int vocab_size) {
  std::map<std::string, long> word_freq;
  for (const std::string& line : lines)
    for (const std::string& w : split_words(normalize_text(line)))
      ++word_freq[w];
  if (word_freq.empty()) throw ConfigError("bpe training corpus is empty");

  std::set<std::string> alphabet;
  alphabet.insert(kMarker);
  for (const auto& [w, f] : word_freq)
    for (char c : w) alphabet.insert(std::string(1, c));

  BpeModel m;
  m.base_.assign(alphabet.begin(), alphabet.end());
  int base_total = special::kCount + static_cast<int>(m.base_.size());
  if (vocab_size <= base_total)
    throw ConfigError("bpe vocab_size " + std::to_string(vocab_size) +
                      " must exceed specials + alphabet = " +
                      std::to_string(base_total));

  std::vector<std::pair<SymSeq, long>> words;
  words.reserve(word_freq.size());
  for (const auto& [w, f] : word_freq) words.emplace_back(word_symbols(w), f);

  while (base_total + static_cast<int>(m.merges_.size()) < vocab_size) {
    std::map<std::pair<std::string, std::string>, long> pair_freq;
    for (const auto& [syms, f] : words)
      for (std::size_t i = 0; i + 1 < syms.size(); ++i)
        pair_freq[{syms[i], syms[i + 1]}] += f;

    long best = 0;
    std::pair<std::string, std::string> best_pair;
    for (const auto& [p, f] : pair_freq) {
      if (f > best) {  // map order makes ties resolve to the smaller pair
        best = f;
        best_pair = p;
      }
    }
    if (best < 2) break;  // no pair repeats

    for (auto& [syms, f] : words)
      apply_merge(syms, best_pair.first, best_pair.second);
    m.merges_.push_back(std::move(best_pair));
  }
  m.rebuild_vocab();
  return m;
}

std::vector<int> BpeModel::encode(const std::string& text,
                                  long* unk_count) const {
  // out-of-alphabet characters become a sentinel no merge can touch
  static const std::string kUnkSym = "\x01";
  std::vector<int> ids;
  for (const std::string& w : split_words(text)) {
    SymSeq syms = word_symbols(w);
    for (std::string& s : syms)
      if (!sym_to_id_.count(s)) {
        s = kUnkSym;
        if (unk_count) ++*unk_count;
      }
    for (const auto& [l, r] : merges_) apply_merge(syms, l, r);
    for (const std::string& s : syms) {
      if (s == kUnkSym) {
        ids.push_back(special::kUnk);
      } else {
        auto it = sym_to_id_.find(s);
        if (it == sym_to_id_.end())
          throw ContractError("bpe symbol vanished from vocab: " + s);
        ids.push_back(it->second);
      }
    }
  }
  return ids;
}

std::string BpeModel::decode(const std::vector<int>& ids) const {
  std::string joined;
  for (int id : ids) {
    if (id < 0 || id >= size())
      throw ContractError("bpe id " + std::to_string(id) + " out of range");
    if (id < special::kCount) continue;
    joined += id_to_sym_[id];
  }
  std::string out;
  std::size_t i = 0;
  while (i < joined.size()) {
    if (joined.compare(i, kMarker.size(), kMarker) == 0) {
      if (!out.empty()) out.push_back(' ');
      i += kMarker.size();
    } else {
      out.push_back(joined[i]);
      ++i;
    }
  }
  return out;
}

void BpeModel::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write bpe model: " + path);
  out << base_.size() << '\t' << merges_.size() << '\n';
  for (const std::string& s : base_) out << s << '\n';
  for (const auto& [l, r] : merges_) out << l << '\t' << r << '\n';
}

BpeModel BpeModel::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read bpe model: " + path);
  std::string header;
  if (!std::getline(in, header)) throw IoError("bpe model empty: " + path);
  std::istringstream hs(header);
  std::size_t nbase = 0, nmerge = 0;
  char tab;
  if (!(hs >> nbase >> std::noskipws >> tab >> std::skipws >> nmerge))
    throw IoError("bpe model header corrupt: " + path);
  BpeModel m;
  std::string line;
  for (std::size_t i = 0; i < nbase; ++i) {
    if (!std::getline(in, line)) throw IoError("bpe model truncated: " + path);
    m.base_.push_back(line);
  }
  for (std::size_t i = 0; i < nmerge; ++i) {
    if (!std::getline(in, line)) throw IoError("bpe model truncated: " + path);
    auto tabpos = line.find('\t');
    if (tabpos == std::string::npos)
      throw IoError("bpe merge line " + std::to_string(i) + " corrupt: " + path);
    m.merges_.emplace_back(line.substr(0, tabpos), line.substr(tabpos + 1));
  }
  m.rebuild_vocab();
  return m;
}

}  // namespace avasr
