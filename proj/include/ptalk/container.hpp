#pragma once

#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "ptalk/nn.hpp"
#include "ptalk/tensor.hpp"

namespace ptalk {

// PTLK1 checkpoint container: magic "PTLK1", u32-LE header length, JSON
// header, then raw little-endian float32 blocks in header order.
class Container {
public:
    nlohmann::json meta = nlohmann::json::object();

    void put(const std::string& name, const Tensor& t);
    bool has(const std::string& name) const;
    const Tensor& get(const std::string& name) const;
    std::vector<std::string> names() const;

    void save(const std::string& path) const;
    static Container load(const std::string& path);

    // Parameter round-trip for modules; names are taken from the parameters.
    void put_module(nn::Module& m);
    void load_into(nn::Module& m) const;

private:
    std::vector<std::pair<std::string, Tensor>> tensors_;
};

}  // namespace ptalk
