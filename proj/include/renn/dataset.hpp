// dataset.hpp — synthetic labeled data for desk-scale training runs.

#pragma once

#include <cstddef>
#include <vector>

#include "renn/core.hpp"

namespace renn {

struct LabeledDataset {
    std::vector<std::vector<double>> inputs;
    std::vector<std::size_t> labels;

    std::size_t size() const { return inputs.size(); }
};

// Two Gaussian blobs in the plane, centered at (+-separation/2, 0),
// labels 0/1, deterministic per seed.
inline LabeledDataset two_blobs(std::size_t count, double separation, double noise, Seed seed) {
    if (count == 0) throw ShapeError("two_blobs: count must be positive");
    LabeledDataset ds;
    ds.inputs.reserve(count);
    ds.labels.reserve(count);
    CounterRng rng(seed);
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t label = i % 2;
        const double cx = (label == 0 ? -0.5 : 0.5) * separation;
        ds.inputs.push_back({cx + noise * rng.next_normal(), noise * rng.next_normal()});
        ds.labels.push_back(label);
    }
    return ds;
}

} // namespace renn
