#pragma once

#include <cstddef>
#include <numeric>
#include <utility>
#include <vector>

namespace flankid {

// Disjoint sets over [0, n) with union by size and path halving.
class UnionFind {
public:
    explicit UnionFind(std::size_t n = 0) { reset(n); }

    void reset(std::size_t n) {
        parent_.resize(n);
        std::iota(parent_.begin(), parent_.end(), std::size_t{0});
        size_.assign(n, 1);
        sets_ = n;
    }

    std::size_t add() {
        parent_.push_back(parent_.size());
        size_.push_back(1);
        ++sets_;
        return parent_.size() - 1;
    }

    std::size_t find(std::size_t x) {
        while (parent_[x] != x) {
            parent_[x] = parent_[parent_[x]];
            x = parent_[x];
        }
        return x;
    }

    // Returns true when two distinct sets were merged.
    bool unite(std::size_t a, std::size_t b) {
        a = find(a);
        b = find(b);
        if (a == b) return false;
        if (size_[a] < size_[b]) std::swap(a, b);
        parent_[b] = a;
        size_[a] += size_[b];
        --sets_;
        return true;
    }

    bool connected(std::size_t a, std::size_t b) { return find(a) == find(b); }
    std::size_t set_size(std::size_t x) { return size_[find(x)]; }
    std::size_t sets() const noexcept { return sets_; }
    std::size_t size() const noexcept { return parent_.size(); }

private:
    std::vector<std::size_t> parent_;
    std::vector<std::size_t> size_;
    std::size_t sets_ = 0;
};

}  // namespace flankid
