#include "lmlab/tokenizer.hpp"

#include <algorithm>
#include <cstdint>
#include <map>
#include <set>
#include <sstream>

namespace lmlab {

int find_eos(const TokenSpace& space, const TokenSeq& seq) {
    if (space.eos == 0) return -1;
    for (std::size_t i = 0; i < seq.size(); ++i) {
        if (seq[i] == space.eos) return static_cast<int>(i);
    }
    return -1;
}

std::size_t effective_length(const TokenSpace& space, const TokenSeq& seq) {
    const int e = find_eos(space, seq);
    return e < 0 ? seq.size() : static_cast<std::size_t>(e) + 1;
}

void validate_sequence(const TokenSpace& space, const TokenSeq& seq) {
    bool seen_eos = false;
    for (std::size_t i = 0; i < seq.size(); ++i) {
        const int id = seq[i];
        require(id >= 1 && id <= space.size, "token id out of range");
        if (space.pad != 0 && id == space.pad) {
            require(seen_eos, "PAD before EOS");
        } else {
            require(!seen_eos, "non-PAD token after EOS");
        }
        if (space.eos != 0 && id == space.eos) {
            seen_eos = true;
        }
    }
}

std::vector<std::string> utf8_split(const std::string& text) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < text.size()) {
        const unsigned char c = static_cast<unsigned char>(text[i]);
        std::size_t n = 1;
        if (c >= 0xF0) {
            n = 4;
        } else if (c >= 0xE0) {
            n = 3;
        } else if (c >= 0xC0) {
            n = 2;
        } else if (c >= 0x80) {
            throw ConfigError("malformed UTF-8 at byte " + std::to_string(i));
        }
        if (i + n > text.size()) {
            throw ConfigError("truncated UTF-8 sequence at byte " + std::to_string(i));
        }
        out.push_back(text.substr(i, n));
        i += n;
    }
    return out;
}

Vocabulary train_bpe(const std::vector<std::string>& corpus, std::size_t max_merges,
                     std::vector<std::string> base) {
    bool any = false;
    for (const auto& doc : corpus) any |= !doc.empty();
    if (!any) {
        throw ContractViolation("train_bpe: empty corpus");
    }

    if (base.empty()) {
        std::set<std::string> seen;
        for (const auto& doc : corpus) {
            for (auto& cp : utf8_split(doc)) seen.insert(cp);
        }
        base.assign(seen.begin(), seen.end());
    }

    Vocabulary vocab;
    vocab.base_symbols = base;
    std::map<std::string, int> sym_id;
    for (std::size_t i = 0; i < base.size(); ++i) sym_id[base[i]] = static_cast<int>(i) + 1;

    std::vector<TokenSeq> seqs;
    for (const auto& doc : corpus) {
        TokenSeq s;
        std::size_t off = 0;
        for (auto& cp : utf8_split(doc)) {
            auto it = sym_id.find(cp);
            if (it == sym_id.end()) {
                throw ContractViolation("character '" + cp + "' at offset " + std::to_string(off) +
                                        " is outside the base alphabet");
            }
            s.push_back(it->second);
            off += 1;
        }
        if (!s.empty()) seqs.push_back(std::move(s));
    }

    int next_id = static_cast<int>(base.size());
    for (std::size_t round = 0; round < max_merges; ++round) {
        std::map<std::pair<int, int>, std::size_t> counts;
        for (const auto& s : seqs) {
            for (std::size_t i = 0; i + 1 < s.size(); ++i) counts[{s[i], s[i + 1]}] += 1;
        }
        std::pair<int, int> best{0, 0};
        std::size_t best_count = 0;
        for (const auto& [pair, c] : counts) {
            if (c > best_count) {  // map order gives lowest (left,right) on ties
                best_count = c;
                best = pair;
            }
        }
        if (best_count < 2) break;  // no pair repeats: nothing left to compress

        next_id += 1;
        MergeRule rule{best.first, best.second, next_id, static_cast<int>(round)};
        vocab.merges.push_back(rule);
        for (auto& s : seqs) {
            TokenSeq merged;
            merged.reserve(s.size());
            std::size_t i = 0;
            while (i < s.size()) {
                if (i + 1 < s.size() && s[i] == rule.left && s[i + 1] == rule.right) {
                    merged.push_back(rule.new_id);
                    i += 2;
                } else {
                    merged.push_back(s[i]);
                    i += 1;
                }
            }
            s = std::move(merged);
        }
    }
    return vocab;
}

TokenSeq encode(const Vocabulary& vocab, const std::string& text) {
    TokenSeq s;
    std::size_t off = 0;
    for (auto& cp : utf8_split(text)) {
        auto it = std::find(vocab.base_symbols.begin(), vocab.base_symbols.end(), cp);
        if (it == vocab.base_symbols.end()) {
            throw ContractViolation("character '" + cp + "' at offset " + std::to_string(off) +
                                    " is outside the base alphabet");
        }
        s.push_back(static_cast<int>(it - vocab.base_symbols.begin()) + 1);
        off += 1;
    }
    bool changed = true;
    while (changed) {
        changed = false;
        for (const auto& rule : vocab.merges) {
            TokenSeq merged;
            merged.reserve(s.size());
            std::size_t i = 0;
            while (i < s.size()) {
                if (i + 1 < s.size() && s[i] == rule.left && s[i + 1] == rule.right) {
                    merged.push_back(rule.new_id);
                    i += 2;
                    changed = true;
                } else {
                    merged.push_back(s[i]);
                    i += 1;
                }
            }
            s = std::move(merged);
        }
    }
    return s;
}

namespace {

void expand(const Vocabulary& vocab, int id, const DecodeSentinels& sent, std::string& out) {
    const int n_base = static_cast<int>(vocab.base_symbols.size());
    if (id >= 1 && id <= n_base) {
        out += vocab.base_symbols[static_cast<std::size_t>(id - 1)];
        return;
    }
    if (id == vocab.bos_id()) {
        out += sent.bos;
        return;
    }
    if (id == vocab.eos_id()) {
        out += sent.eos;
        return;
    }
    if (id == vocab.pad_id()) {
        out += sent.pad;
        return;
    }
    const int mi = id - n_base - 1;
    if (mi < 0 || mi >= static_cast<int>(vocab.merges.size())) {
        throw ContractViolation("decode: token id " + std::to_string(id) + " out of range");
    }
    expand(vocab, vocab.merges[static_cast<std::size_t>(mi)].left, sent, out);
    expand(vocab, vocab.merges[static_cast<std::size_t>(mi)].right, sent, out);
}

std::string escape_symbol(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case ' ': out += "\\s"; break;
            case '\n': out += "\\n"; break;
            case '\r': out += "\\r"; break;
            case '\t': out += "\\t"; break;
            case '\\': out += "\\\\"; break;
            default: out += c;
        }
    }
    return out;
}

std::string unescape_symbol(const std::string& s) {
    std::string out;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] != '\\') {
            out += s[i];
            continue;
        }
        i += 1;
        if (i >= s.size()) throw ConfigError("dangling escape in vocabulary file");
        switch (s[i]) {
            case 's': out += ' '; break;
            case 'n': out += '\n'; break;
            case 'r': out += '\r'; break;
            case 't': out += '\t'; break;
            case '\\': out += '\\'; break;
            default: throw ConfigError("unknown escape in vocabulary file");
        }
    }
    return out;
}

}  // namespace

std::string decode(const Vocabulary& vocab, const TokenSeq& seq, const DecodeSentinels& sent) {
    std::string out;
    for (int id : seq) expand(vocab, id, sent, out);
    return out;
}

std::string save_vocabulary(const Vocabulary& vocab) {
    std::ostringstream os;
    os << "bpe-vocab v1 |V0|=" << vocab.base_symbols.size() << " merges=" << vocab.merges.size()
       << "\n";
    for (std::size_t i = 0; i < vocab.base_symbols.size(); ++i) {
        os << (i + 1) << " " << escape_symbol(vocab.base_symbols[i]) << "\n";
    }
    for (const auto& m : vocab.merges) {
        os << m.rank << " " << m.left << " " << m.right << " " << m.new_id << "\n";
    }
    os << "BOS " << vocab.bos_id() << "\nEOS " << vocab.eos_id() << "\nPAD " << vocab.pad_id()
       << "\n";
    return os.str();
}

Vocabulary load_vocabulary(const std::string& text) {
    std::istringstream is(text);
    std::string line;
    if (!std::getline(is, line)) throw ConfigError("empty vocabulary file");
    std::size_t n0 = 0, nm = 0;
    {
        std::istringstream hd(line);
        std::string tag, ver, f0, fm;
        hd >> tag >> ver >> f0 >> fm;
        if (tag != "bpe-vocab" || ver != "v1") throw ConfigError("bad vocabulary header: " + line);
        if (f0.rfind("|V0|=", 0) != 0 || fm.rfind("merges=", 0) != 0) {
            throw ConfigError("bad vocabulary header fields: " + line);
        }
        n0 = std::stoul(f0.substr(5));
        nm = std::stoul(fm.substr(7));
    }
    Vocabulary vocab;
    for (std::size_t i = 0; i < n0; ++i) {
        if (!std::getline(is, line)) throw ConfigError("vocabulary file truncated in base symbols");
        const auto sp = line.find(' ');
        if (sp == std::string::npos) throw ConfigError("bad base symbol line: " + line);
        if (std::stoul(line.substr(0, sp)) != i + 1) {
            throw ConfigError("base symbol ids must be consecutive from 1");
        }
        vocab.base_symbols.push_back(unescape_symbol(line.substr(sp + 1)));
    }
    for (std::size_t i = 0; i < nm; ++i) {
        if (!std::getline(is, line)) throw ConfigError("vocabulary file truncated in merges");
        std::istringstream ls(line);
        MergeRule m;
        if (!(ls >> m.rank >> m.left >> m.right >> m.new_id)) {
            throw ConfigError("bad merge line: " + line);
        }
        if (m.rank != static_cast<int>(i) || m.new_id != static_cast<int>(n0 + i) + 1 ||
            m.left >= m.new_id || m.right >= m.new_id || m.left < 1 || m.right < 1) {
            throw ConfigError("inconsistent merge line: " + line);
        }
        vocab.merges.push_back(m);
    }
    auto expect_special = [&](const char* name, int want) {
        if (!std::getline(is, line)) throw ConfigError("vocabulary file missing special ids");
        std::istringstream ls(line);
        std::string tag;
        int id = 0;
        ls >> tag >> id;
        if (tag != name || id != want) throw ConfigError("bad special id line: " + line);
    };
    expect_special("BOS", vocab.bos_id());
    expect_special("EOS", vocab.eos_id());
    expect_special("PAD", vocab.pad_id());
    return vocab;
}

std::uint64_t vocabulary_hash(const Vocabulary& vocab) {
    const std::string bytes = save_vocabulary(vocab);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace lmlab
