#pragma once

#include <algorithm>
#include <cstdint>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "fedseg/serialize.hpp"
#include "fedseg/tensor.hpp"

namespace fedseg {

// Canonical ordered modality universe for one experiment. The order is the
// channel layout of every packed tensor, so it is persisted with the run.
struct ModalityRegistry {
    std::vector<std::string> names;

    int64_t size() const { return static_cast<int64_t>(names.size()); }

    bool contains(const std::string& name) const {
        return std::find(names.begin(), names.end(), name) != names.end();
    }

    int64_t index_of(const std::string& name) const {
        auto it = std::find(names.begin(), names.end(), name);
        if (it == names.end())
            throw std::invalid_argument("modality '" + name + "' not in registry");
        return it - names.begin();
    }

    json to_json() const { return json(names); }

    static ModalityRegistry from_json(const json& j) {
        ModalityRegistry r;
        r.names = j.get<std::vector<std::string>>();
        std::set<std::string> seen(r.names.begin(), r.names.end());
        if (seen.size() != r.names.size())
            throw std::invalid_argument("registry contains duplicate modality names");
        if (r.names.empty()) throw std::invalid_argument("registry is empty");
        return r;
    }
};

// Union of all client modality lists in sorted (lexicographic) order, which
// makes the channel layout independent of client enumeration order.
inline ModalityRegistry build_registry(const std::vector<std::vector<std::string>>& client_lists) {
    if (client_lists.empty()) throw std::invalid_argument("build_registry: no clients");
    std::set<std::string> all;
    for (size_t i = 0; i < client_lists.size(); ++i) {
        if (client_lists[i].empty())
            throw std::invalid_argument("build_registry: client " + std::to_string(i) +
                                        " has no modalities");
        for (const auto& m : client_lists[i]) all.insert(m);
    }
    ModalityRegistry r;
    r.names.assign(all.begin(), all.end());
    return r;
}

struct ClientModalities {
    int64_t client_id = 0;
    std::vector<std::string> subset;  // in registry order
    std::vector<uint8_t> mask;        // length p, mask[i]=1 iff names[i] in subset
};

inline ClientModalities make_client_modalities(const ModalityRegistry& reg, int64_t client_id,
                                               const std::vector<std::string>& subset) {
    if (subset.empty())
        throw std::invalid_argument("client " + std::to_string(client_id) +
                                    ": modality subset is empty");
    ClientModalities cm;
    cm.client_id = client_id;
    cm.mask.assign(static_cast<size_t>(reg.size()), 0);
    for (const auto& name : subset) {
        const int64_t idx = reg.index_of(name);  // throws on unknown names
        cm.mask[static_cast<size_t>(idx)] = 1;
    }
    for (int64_t i = 0; i < reg.size(); ++i)
        if (cm.mask[static_cast<size_t>(i)]) cm.subset.push_back(reg.names[static_cast<size_t>(i)]);
    return cm;
}

// One sample's per-modality images, keyed by registry name.
using ModalSample = std::vector<std::pair<std::string, Tensor>>;

// Packs a sample into the canonical [p,H,W] layout; channels for modalities
// the sample lacks are exactly zero.
inline Tensor zero_fill(const ModalSample& sample, const ModalityRegistry& reg) {
    if (sample.empty()) throw std::invalid_argument("zero_fill: sample has no images");
    const Tensor& first = sample.front().second;
    detail::check(first.rank() == 2,
                  "zero_fill: images must be rank-2 [H,W], got " + shape_str(first.shape()));
    const int64_t H = first.dim(0), W = first.dim(1);
    Tensor out = Tensor::zeros({reg.size(), H, W});
    std::set<std::string> seen;
    for (const auto& [name, img] : sample) {
        if (!seen.insert(name).second)
            throw std::invalid_argument("zero_fill: duplicate modality '" + name + "'");
        const int64_t idx = reg.index_of(name);
        detail::check(img.shape() == first.shape(),
                      "zero_fill: image shapes differ, " + shape_str(first.shape()) + " vs " +
                          shape_str(img.shape()) + " for '" + name + "'");
        std::copy(img.data().begin(), img.data().end(), out.data().begin() + idx * H * W);
    }
    return out;
}

struct DropResult {
    Tensor x;
    std::vector<uint8_t> applied_mask;  // 1 = present and survived
};

// Z(X, phi): independently zeroes each present channel with probability phi,
// resampling until at least one present channel survives. phi = 1 is the
// limit of that conditional law: exactly one survivor, uniformly chosen.
// Channels absent from present_mask pass through untouched.
inline DropResult modality_drop(const Tensor& x, double phi,
                                const std::vector<uint8_t>& present_mask, Rng& rng) {
    detail::check(x.rank() == 3, "modality_drop: expected [p,H,W], got " + shape_str(x.shape()));
    detail::check(phi >= 0.0 && phi <= 1.0,
                  "modality_drop: phi must lie in [0,1], got " + std::to_string(phi));
    const int64_t p = x.dim(0);
    detail::check(static_cast<int64_t>(present_mask.size()) == p,
                  "modality_drop: present_mask has " + std::to_string(present_mask.size()) +
                      " entries for " + std::to_string(p) + " channels");
    std::vector<int64_t> present;
    for (int64_t i = 0; i < p; ++i)
        if (present_mask[static_cast<size_t>(i)]) present.push_back(i);

    DropResult res;
    res.applied_mask.assign(present_mask.begin(), present_mask.end());
    res.x = x.clone();
    if (present.empty() || phi == 0.0) return res;

    std::vector<uint8_t> survive(present.size(), 0);
    if (phi >= 1.0) {
        survive[static_cast<size_t>(
            rng.uniform_int(0, static_cast<int64_t>(present.size()) - 1))] = 1;
    } else {
        bool any = false;
        while (!any) {
            for (size_t i = 0; i < present.size(); ++i) {
                survive[i] = rng.bernoulli(phi) ? 0 : 1;
                any = any || survive[i];
            }
        }
    }
    const int64_t hw = x.dim(1) * x.dim(2);
    for (size_t i = 0; i < present.size(); ++i) {
        if (survive[i]) continue;
        const int64_t ch = present[i];
        res.applied_mask[static_cast<size_t>(ch)] = 0;
        std::fill_n(res.x.data().begin() + ch * hw, hw, 0.0);
    }
    return res;
}

// Z-score normalization over the whole image, or over the pixels selected by
// `region` when given (stats from the region, transform applied everywhere).
// Population (biased) variance. Runs per modality per sample before packing,
// so zero-filled channels stay exactly zero.
inline Tensor zscore(const Tensor& image, const Tensor* region = nullptr) {
    detail::check(image.rank() == 2,
                  "zscore: expected rank-2 [H,W], got " + shape_str(image.shape()));
    if (region)
        detail::check(region->shape() == image.shape(),
                      "zscore: region mask shape " + shape_str(region->shape()) +
                          " does not match image " + shape_str(image.shape()));
    double s = 0.0;
    int64_t n = 0;
    for (size_t i = 0; i < image.data().size(); ++i) {
        if (region && region->data()[i] <= 0.5) continue;
        s += image.data()[i];
        ++n;
    }
    detail::check(n > 0, "zscore: normalization region is empty");
    const double mu = s / static_cast<double>(n);
    double v = 0.0;
    for (size_t i = 0; i < image.data().size(); ++i) {
        if (region && region->data()[i] <= 0.5) continue;
        const double d = image.data()[i] - mu;
        v += d * d;
    }
    v /= static_cast<double>(n);
    if (v == 0.0)
        throw std::invalid_argument(
            "zscore: constant image over the normalization region (all values equal " +
            std::to_string(mu) + "); cannot standardize");
    const double inv = 1.0 / std::sqrt(v);
    Tensor out = Tensor::zeros(image.shape());
    for (size_t i = 0; i < image.data().size(); ++i)
        out.data()[i] = (image.data()[i] - mu) * inv;
    return out;
}

}  // namespace fedseg
