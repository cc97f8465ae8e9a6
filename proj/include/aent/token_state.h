#pragma once

#include <cstddef>
#include <functional>
#include <vector>

namespace aent {

/// A node of a concatenation MDP: the query it started from plus every action
/// appended so far. Equal prefixes are equal states, so the pair is a
/// canonical key for tabular storage.
struct TokenState {
    int query = 0;
    std::vector<int> prefix;

    /// Time step at which this state is visited.
    std::size_t step() const { return prefix.size(); }

    TokenState extended(int action) const {
        TokenState next{query, prefix};
        next.prefix.push_back(action);
        return next;
    }

    friend bool operator==(const TokenState&, const TokenState&) = default;
};

struct TokenStateHash {
    std::size_t operator()(const TokenState& s) const noexcept {
        std::size_t h = std::hash<int>{}(s.query) + 0x9e3779b97f4a7c15ULL;
        for (int a : s.prefix) {
            h ^= std::hash<int>{}(a) + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
        }
        return h;
    }
};

}  // namespace aent
