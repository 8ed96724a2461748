#pragma once

#include <algorithm>
#include <compare>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace retmask {

using TokenId = std::int32_t;

// ----------------------------- errors -----------------------------
// Mapped to CLI exit codes: ConfigError -> 2, PrerequisiteError -> 3,
// DivergenceError -> 4, everything else -> 1.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct PrerequisiteError : Error {
    using Error::Error;
};
struct DivergenceError : Error {
    using Error::Error;
};
struct IoError : Error {
    using Error::Error;
};

// ----------------------------- head identity -----------------------------
struct HeadId {
    int layer = 0;
    int head = 0;
    friend bool operator==(const HeadId&, const HeadId&) = default;
    friend auto operator<=>(const HeadId&, const HeadId&) = default;
};

// Set of heads to deactivate. Stored sorted and duplicate-free.
class HeadMask {
public:
    HeadMask() = default;
    explicit HeadMask(std::vector<HeadId> ids) : ids_(std::move(ids)) {
        std::sort(ids_.begin(), ids_.end());
        ids_.erase(std::unique(ids_.begin(), ids_.end()), ids_.end());
    }

    static const HeadMask& none() {
        static const HeadMask m;
        return m;
    }

    void insert(HeadId id) {
        auto it = std::lower_bound(ids_.begin(), ids_.end(), id);
        if (it == ids_.end() || *it != id) ids_.insert(it, id);
    }

    bool contains(HeadId id) const {
        return std::binary_search(ids_.begin(), ids_.end(), id);
    }

    bool empty() const { return ids_.empty(); }
    std::size_t size() const { return ids_.size(); }
    const std::vector<HeadId>& ids() const { return ids_; }

    friend bool operator==(const HeadMask&, const HeadMask&) = default;

private:
    std::vector<HeadId> ids_;
};

}  // namespace retmask
