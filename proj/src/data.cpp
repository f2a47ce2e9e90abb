#include "dhicm/data.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include "dhicm/rng.hpp"

namespace dhicm {

Vocab Vocab::from_tokens(const std::vector<std::string>& tokens) {
  Vocab v;
  v.id_to_token = {"<pad>", "<s>", "</s>", "<unk>"};
  for (const auto& t : tokens) {
    if (t.empty()) throw std::invalid_argument("vocab: empty token");
    if (v.token_to_id.count(t)) throw std::invalid_argument("vocab: duplicate token '" + t + "'");
    v.token_to_id[t] = static_cast<int>(v.id_to_token.size());
    v.id_to_token.push_back(t);
  }
  for (int i = 0; i < 4; ++i) v.token_to_id[v.id_to_token[static_cast<std::size_t>(i)]] = i;
  return v;
}

int Vocab::lookup(const std::string& token) const {
  auto it = token_to_id.find(token);
  return it == token_to_id.end() ? unk_id : it->second;
}

std::vector<int> Vocab::encode(const std::vector<std::string>& tokens) const {
  std::vector<int> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(lookup(t));
  return ids;
}

std::vector<std::string> Vocab::decode(const std::vector<int>& ids) const {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (int id : ids) {
    if (id < 0 || id >= size()) {
      throw std::out_of_range("vocab: id " + std::to_string(id) + " outside vocab of " +
                              std::to_string(size()));
    }
    out.push_back(id_to_token[static_cast<std::size_t>(id)]);
  }
  return out;
}

void Vocab::save(const std::string& path) const {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("vocab: cannot write " + path);
  for (std::size_t i = 4; i < id_to_token.size(); ++i) f << id_to_token[i] << "\n";
}

Vocab Vocab::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("vocab: cannot read " + path);
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(f, line)) {
    if (!line.empty()) tokens.push_back(line);
  }
  return from_tokens(tokens);
}

ParallelCorpus ParallelCorpus::prefix(std::size_t n) const {
  if (n > pairs.size()) {
    throw std::invalid_argument("corpus: prefix " + std::to_string(n) + " exceeds size " +
                                std::to_string(pairs.size()));
  }
  ParallelCorpus out;
  out.split = split;
  out.pairs.assign(pairs.begin(), pairs.begin() + static_cast<std::ptrdiff_t>(n));
  return out;
}

void TaskSpec::validate() const {
  if (vocab_size < 2) throw std::invalid_argument("task: vocab_size must be >= 2");
  if (min_len < 1 || max_len < min_len) throw std::invalid_argument("task: bad length range");
  if (train_size < 1 || valid_size < 1 || test_size < 1) {
    throw std::invalid_argument("task: split sizes must be >= 1");
  }
}

TaskSpec::Kind TaskSpec::parse_kind(const std::string& name) {
  if (name == "copy") return Kind::Copy;
  if (name == "reverse") return Kind::Reverse;
  if (name == "lexicon") return Kind::Lexicon;
  throw std::invalid_argument("task: unknown kind '" + name + "' (copy|reverse|lexicon)");
}

std::string TaskSpec::kind_name(Kind k) {
  switch (k) {
    case Kind::Copy: return "copy";
    case Kind::Reverse: return "reverse";
    case Kind::Lexicon: return "lexicon";
  }
  return "?";
}

namespace {

std::string word_name(const char* prefix, int i) {
  std::ostringstream os;
  os << prefix;
  if (i < 10) os << "0";
  os << i;
  return os.str();
}

std::vector<int> make_target(const TaskSpec& spec, const std::vector<int>& src,
                             const std::vector<int>& lex_map) {
  std::vector<int> tgt;
  switch (spec.kind) {
    case TaskSpec::Kind::Copy:
      tgt = src;
      break;
    case TaskSpec::Kind::Reverse:
      tgt.assign(src.rbegin(), src.rend());
      break;
    case TaskSpec::Kind::Lexicon: {
      tgt.reserve(src.size());
      for (int id : src) tgt.push_back(lex_map[static_cast<std::size_t>(id)]);
      for (std::size_t i = 0; i + 1 < tgt.size(); i += 2) std::swap(tgt[i], tgt[i + 1]);
      break;
    }
  }
  return tgt;
}

}  // namespace

GeneratedTask gen_task(const TaskSpec& spec) {
  spec.validate();

  const bool lexicon = spec.kind == TaskSpec::Kind::Lexicon;
  std::vector<std::string> tokens;
  for (int i = 0; i < spec.vocab_size; ++i) tokens.push_back(word_name(lexicon ? "a" : "w", i));
  if (lexicon) {
    for (int i = 0; i < spec.vocab_size; ++i) tokens.push_back(word_name("b", i));
  }

  GeneratedTask task;
  task.vocab = Vocab::from_tokens(tokens);

  const int first_src = 4;  // ids of source word types start after reserved ids

  // Token-level bijection for the lexicon task; identity elsewhere.
  std::vector<int> lex_map(static_cast<std::size_t>(task.vocab.size()));
  std::iota(lex_map.begin(), lex_map.end(), 0);
  Rng root(spec.seed);
  if (lexicon) {
    Rng map_rng = root.split("lexicon-map");
    auto perm = map_rng.permutation(static_cast<std::size_t>(spec.vocab_size));
    for (int i = 0; i < spec.vocab_size; ++i) {
      lex_map[static_cast<std::size_t>(first_src + i)] =
          first_src + spec.vocab_size + static_cast<int>(perm[static_cast<std::size_t>(i)]);
    }
  }

  std::set<SentencePair> seen;
  auto fill_split = [&](const char* name, int count, ParallelCorpus& out) {
    out.split = name;
    Rng rng = root.split(name);
    const long attempts_cap = 1000L * count + 100000L;
    long attempts = 0;
    while (static_cast<int>(out.pairs.size()) < count) {
      if (++attempts > attempts_cap) {
        throw std::runtime_error(std::string("gen_task: cannot draw ") + std::to_string(count) +
                                 " unique pairs for split '" + name +
                                 "'; vocabulary or length range too small");
      }
      const int len = spec.min_len + static_cast<int>(rng.below(
                                         static_cast<std::uint64_t>(spec.max_len - spec.min_len + 1)));
      std::vector<int> src(static_cast<std::size_t>(len));
      for (auto& id : src) {
        id = first_src + static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.vocab_size)));
      }
      SentencePair pair{src, make_target(spec, src, lex_map)};
      if (!seen.insert(pair).second) continue;
      out.pairs.push_back(std::move(pair));
    }
  };

  // Fixed evaluation splits first so nested training prefixes stay disjoint
  // from them.
  fill_split("valid", spec.valid_size, task.valid);
  fill_split("test", spec.test_size, task.test);
  fill_split("train", spec.train_size, task.train);
  return task;
}

std::vector<int> frame(const std::vector<int>& ids) {
  std::vector<int> out;
  out.reserve(ids.size() + 2);
  out.push_back(Vocab::bos_id);
  out.insert(out.end(), ids.begin(), ids.end());
  out.push_back(Vocab::eos_id);
  return out;
}

std::size_t Batch::target_tokens() const {
  std::size_t n = 0;
  for (auto m : tgt_pad) n += m ? 1 : 0;
  return n;
}

std::vector<Batch> batchify(const ParallelCorpus& corpus, int max_tokens) {
  if (corpus.pairs.empty()) throw std::invalid_argument("batchify: empty corpus");
  int longest = 0;
  for (const auto& [src, tgt] : corpus.pairs) {
    if (src.empty() || tgt.empty()) throw std::invalid_argument("batchify: empty sentence");
    longest = std::max({longest, static_cast<int>(src.size()) + 2, static_cast<int>(tgt.size()) + 2});
  }
  if (max_tokens < longest) {
    throw std::invalid_argument("batchify: max_tokens " + std::to_string(max_tokens) +
                                " below longest framed sequence " + std::to_string(longest));
  }

  std::vector<std::size_t> order(corpus.pairs.size());
  std::iota(order.begin(), order.end(), 0);
  auto framed_len = [&](std::size_t i) {
    const auto& [src, tgt] = corpus.pairs[i];
    return std::max(static_cast<int>(src.size()), static_cast<int>(tgt.size())) + 2;
  };
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return framed_len(a) < framed_len(b); });

  std::vector<std::vector<std::size_t>> groups;
  std::vector<std::size_t> current;
  int current_max = 0;
  for (std::size_t idx : order) {
    const int len = framed_len(idx);
    const int new_max = std::max(current_max, len);
    if (!current.empty() &&
        static_cast<long>(current.size() + 1) * new_max > static_cast<long>(max_tokens)) {
      groups.push_back(std::move(current));
      current.clear();
      current_max = 0;
    }
    current.push_back(idx);
    current_max = std::max(current_max, len);
  }
  if (!current.empty()) groups.push_back(std::move(current));

  std::vector<Batch> batches;
  batches.reserve(groups.size());
  for (const auto& group : groups) {
    Batch b;
    b.size = static_cast<int>(group.size());
    int src_max = 0, tgt_max = 0;
    for (std::size_t idx : group) {
      src_max = std::max(src_max, static_cast<int>(corpus.pairs[idx].first.size()) + 2);
      tgt_max = std::max(tgt_max, static_cast<int>(corpus.pairs[idx].second.size()) + 2);
    }
    b.src_len = src_max;
    b.tgt_len = tgt_max - 1;
    b.src.assign(static_cast<std::size_t>(b.size) * b.src_len, Vocab::pad_id);
    b.tgt_in.assign(static_cast<std::size_t>(b.size) * b.tgt_len, Vocab::pad_id);
    b.tgt_out.assign(static_cast<std::size_t>(b.size) * b.tgt_len, Vocab::pad_id);
    b.src_pad.assign(b.src.size(), 0);
    b.tgt_pad.assign(b.tgt_in.size(), 0);
    for (int row = 0; row < b.size; ++row) {
      const auto& [src, tgt] = corpus.pairs[group[static_cast<std::size_t>(row)]];
      const auto fs = frame(src);
      const auto ft = frame(tgt);
      for (std::size_t i = 0; i < fs.size(); ++i) {
        b.src[static_cast<std::size_t>(row) * b.src_len + i] = fs[i];
        b.src_pad[static_cast<std::size_t>(row) * b.src_len + i] = 1;
      }
      for (std::size_t i = 0; i + 1 < ft.size(); ++i) {
        b.tgt_in[static_cast<std::size_t>(row) * b.tgt_len + i] = ft[i];
        b.tgt_out[static_cast<std::size_t>(row) * b.tgt_len + i] = ft[i + 1];
        b.tgt_pad[static_cast<std::size_t>(row) * b.tgt_len + i] = 1;
      }
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

void save_corpus(const ParallelCorpus& corpus, const Vocab& vocab, const std::string& prefix) {
  std::ofstream fsrc(prefix + ".src");
  std::ofstream ftgt(prefix + ".tgt");
  if (!fsrc || !ftgt) throw std::runtime_error("corpus: cannot write " + prefix + ".src/.tgt");
  for (const auto& [src, tgt] : corpus.pairs) {
    auto write_line = [&vocab](std::ofstream& f, const std::vector<int>& ids) {
      const auto tokens = vocab.decode(ids);
      for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i) f << ' ';
        f << tokens[i];
      }
      f << '\n';
    };
    write_line(fsrc, src);
    write_line(ftgt, tgt);
  }
}

namespace {
std::vector<std::vector<std::string>> read_token_lines(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("corpus: cannot read " + path);
  std::vector<std::vector<std::string>> lines;
  std::string line;
  while (std::getline(f, line)) {
    std::istringstream is(line);
    std::vector<std::string> tokens;
    std::string tok;
    while (is >> tok) tokens.push_back(tok);
    lines.push_back(std::move(tokens));
  }
  return lines;
}
}  // namespace

ParallelCorpus load_corpus(const std::string& prefix, const Vocab& vocab, const std::string& split) {
  auto src_lines = read_token_lines(prefix + ".src");
  auto tgt_lines = read_token_lines(prefix + ".tgt");
  if (src_lines.size() != tgt_lines.size()) {
    throw std::runtime_error("corpus: " + prefix + " has " + std::to_string(src_lines.size()) +
                             " source lines but " + std::to_string(tgt_lines.size()) + " target lines");
  }
  ParallelCorpus corpus;
  corpus.split = split;
  corpus.pairs.reserve(src_lines.size());
  for (std::size_t i = 0; i < src_lines.size(); ++i) {
    if (src_lines[i].empty() || tgt_lines[i].empty()) {
      throw std::runtime_error("corpus: empty sentence at line " + std::to_string(i + 1) + " of " +
                               prefix);
    }
    corpus.pairs.emplace_back(vocab.encode(src_lines[i]), vocab.encode(tgt_lines[i]));
  }
  return corpus;
}

Vocab build_vocab_from_files(const std::vector<std::string>& paths) {
  std::set<std::string> tokens;
  for (const auto& p : paths) {
    for (const auto& line : read_token_lines(p)) tokens.insert(line.begin(), line.end());
  }
  return Vocab::from_tokens({tokens.begin(), tokens.end()});
}

}  // namespace dhicm
