#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "qalign/common.hpp"

// Byte-level tokenization with reserved structural ids. User text maps onto
// ids 0..255 only, so delimiter tokens can never be forged from input text;
// the structure of a rendered prompt is decided entirely by the renderer.

namespace qalign {

inline constexpr int kByteVocab = 256;
inline constexpr int kBos = 256;
inline constexpr int kEos = 257;
inline constexpr int kInstOpen = 258;
inline constexpr int kInstClose = 259;
inline constexpr int kDataOpen = 260;
inline constexpr int kDataClose = 261;
inline constexpr int kRespOpen = 262;
inline constexpr int kVocabSize = 263;

struct Span {
    std::size_t begin = 0;
    std::size_t end = 0;

    std::size_t size() const { return end - begin; }
    bool empty() const { return begin >= end; }
    bool contains(std::size_t i) const { return i >= begin && i < end; }
};

// Token ids plus provenance spans marking the instruction / data / response
// regions of a rendered prompt. Plain text sequences leave the spans empty.
struct TokenSequence {
    std::vector<int> ids;
    Span instruction;
    Span data;
    Span response;

    std::size_t size() const { return ids.size(); }
};

inline TokenSequence tokenize(const std::string& text) {
    TokenSequence seq;
    seq.ids.reserve(text.size() + 1);
    seq.ids.push_back(kBos);
    for (unsigned char c : text) seq.ids.push_back(static_cast<int>(c));
    return seq;
}

// Inverse of tokenize on the byte portion; structural ids contribute nothing.
inline std::string detokenize(const std::vector<int>& ids) {
    std::string out;
    out.reserve(ids.size());
    for (int id : ids) {
        if (id >= 0 && id < kByteVocab) out.push_back(static_cast<char>(id));
    }
    return out;
}

namespace detail {
inline void append_bytes(std::vector<int>& ids, const std::string& text) {
    for (unsigned char c : text) ids.push_back(static_cast<int>(c));
}
}  // namespace detail

// [BOS] <inst> instruction </inst> <data> data </data> <resp> response-prefix
// Each region is wrapped by its delimiter pair exactly once, in order.
inline TokenSequence render_prompt(const std::string& instruction, const std::string& data,
                                   const std::string& response_prefix = "") {
    TokenSequence seq;
    seq.ids.push_back(kBos);
    seq.ids.push_back(kInstOpen);
    seq.instruction.begin = seq.ids.size();
    detail::append_bytes(seq.ids, instruction);
    seq.instruction.end = seq.ids.size();
    seq.ids.push_back(kInstClose);
    seq.ids.push_back(kDataOpen);
    seq.data.begin = seq.ids.size();
    detail::append_bytes(seq.ids, data);
    seq.data.end = seq.ids.size();
    seq.ids.push_back(kDataClose);
    seq.ids.push_back(kRespOpen);
    seq.response.begin = seq.ids.size();
    detail::append_bytes(seq.ids, response_prefix);
    seq.response.end = seq.ids.size();
    return seq;
}

// Extends a rendered prompt with the response text followed by EOS; the
// response span covers the appended tokens so loss scoping can exclude the
// prompt.
inline TokenSequence with_response(TokenSequence seq, const std::string& response) {
    if (seq.response.begin != seq.ids.size() || !seq.response.empty()) {
        throw DataError("with_response: sequence already carries a response");
    }
    detail::append_bytes(seq.ids, response);
    seq.ids.push_back(kEos);
    seq.response.end = seq.ids.size();
    return seq;
}

}  // namespace qalign
