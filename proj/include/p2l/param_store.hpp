#pragma once

#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "p2l/tensor.hpp"

namespace p2l {

struct Param {
    Tensor value;
    Tensor grad;
    bool trainable = true;
};

// Ordered name -> (value, grad, trainable) map. Iteration order is insertion
// order; that order is part of the determinism contract (optimizer steps,
// checksums and checkpoints all walk it).
class ParameterStore {
public:
    Tensor& add(const std::string& name, Tensor init, bool trainable = true) {
        if (index_.count(name)) throw std::invalid_argument("ParameterStore: duplicate name " + name);
        index_[name] = params_.size();
        order_.push_back(name);
        Param p;
        p.grad = Tensor(init.shape());
        p.value = std::move(init);
        p.trainable = trainable;
        params_.push_back(std::move(p));
        return params_.back().value;
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    Param& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::invalid_argument("ParameterStore: unknown name " + name);
        return params_[it->second];
    }
    const Param& at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::invalid_argument("ParameterStore: unknown name " + name);
        return params_[it->second];
    }

    Tensor& value(const std::string& name) { return at(name).value; }
    const Tensor& value(const std::string& name) const { return at(name).value; }
    Tensor& grad(const std::string& name) { return at(name).grad; }

    std::size_t size() const { return params_.size(); }
    const std::vector<std::string>& names() const { return order_; }
    Param& param(std::size_t i) { return params_[i]; }
    const Param& param(std::size_t i) const { return params_[i]; }

    void zero_grads() {
        for (auto& p : params_) p.grad.zero();
    }

    std::size_t scalar_count(bool trainable_only = false) const {
        std::size_t n = 0;
        for (const auto& p : params_)
            if (!trainable_only || p.trainable) n += p.value.size();
        return n;
    }

    // FNV-1a over names and little-endian value bytes, in insertion order.
    // Used for the frozen-model guarantee and checkpoint binding.
    std::uint64_t checksum() const {
        std::uint64_t h = 0xCBF29CE484222325ULL;
        auto mix_byte = [&h](unsigned char b) {
            h ^= b;
            h *= 0x100000001B3ULL;
        };
        for (std::size_t i = 0; i < params_.size(); ++i) {
            for (char c : order_[i]) mix_byte(static_cast<unsigned char>(c));
            for (double v : params_[i].value.vec()) {
                std::uint64_t bits;
                std::memcpy(&bits, &v, sizeof bits);
                for (int k = 0; k < 8; ++k) mix_byte(static_cast<unsigned char>((bits >> (8 * k)) & 0xFF));
            }
        }
        return h;
    }

private:
    std::vector<std::string> order_;
    std::unordered_map<std::string, std::size_t> index_;
    std::vector<Param> params_;
};

} // namespace p2l
