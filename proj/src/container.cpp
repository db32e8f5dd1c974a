#include "ptalk/container.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

#include "ptalk/errors.hpp"

namespace ptalk {

namespace {
constexpr char kMagic[5] = {'P', 'T', 'L', 'K', '1'};
}

void Container::put(const std::string& name, const Tensor& t) {
    for (auto& [n, v] : tensors_)
        if (n == name) {
            v = t;
            return;
        }
    tensors_.emplace_back(name, t);
}

bool Container::has(const std::string& name) const {
    for (const auto& [n, v] : tensors_)
        if (n == name) return true;
    return false;
}

const Tensor& Container::get(const std::string& name) const {
    for (const auto& [n, v] : tensors_)
        if (n == name) return v;
    throw DataError("container: missing tensor '" + name + "'");
}

std::vector<std::string> Container::names() const {
    std::vector<std::string> out;
    out.reserve(tensors_.size());
    for (const auto& [n, v] : tensors_) out.push_back(n);
    return out;
}

void Container::save(const std::string& path) const {
    nlohmann::json header;
    header["version"] = 1;
    header["meta"] = meta;
    nlohmann::json tl = nlohmann::json::array();
    int64_t offset = 0;
    for (const auto& [n, t] : tensors_) {
        tl.push_back({{"name", n}, {"shape", t.shape}, {"offset", offset}, {"count", t.size()}});
        offset += t.size();
    }
    header["tensors"] = tl;
    const std::string hs = header.dump();

    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("container: cannot open for write: " + path);
    f.write(kMagic, 5);
    const uint32_t hlen = static_cast<uint32_t>(hs.size());
    char lenb[4] = {static_cast<char>(hlen & 0xff), static_cast<char>((hlen >> 8) & 0xff),
                    static_cast<char>((hlen >> 16) & 0xff), static_cast<char>((hlen >> 24) & 0xff)};
    f.write(lenb, 4);
    f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    std::vector<float> block;
    for (const auto& [n, t] : tensors_) {
        block.resize(static_cast<size_t>(t.size()));
        for (int64_t i = 0; i < t.size(); ++i) block[static_cast<size_t>(i)] = static_cast<float>(t[i]);
        f.write(reinterpret_cast<const char*>(block.data()),
                static_cast<std::streamsize>(block.size() * sizeof(float)));
    }
    if (!f) throw DataError("container: write failed: " + path);
}

Container Container::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("container: cannot open: " + path);
    char magic[5];
    f.read(magic, 5);
    if (!f || std::memcmp(magic, kMagic, 5) != 0)
        throw DataError("container: bad magic in " + path + " (not a PTLK1 file)");
    unsigned char lenb[4];
    f.read(reinterpret_cast<char*>(lenb), 4);
    if (!f) throw DataError("container: truncated header length in " + path);
    const uint32_t hlen = static_cast<uint32_t>(lenb[0]) | (static_cast<uint32_t>(lenb[1]) << 8) |
                          (static_cast<uint32_t>(lenb[2]) << 16) | (static_cast<uint32_t>(lenb[3]) << 24);
    std::string hs(hlen, '\0');
    f.read(hs.data(), hlen);
    if (!f) throw DataError("container: truncated header in " + path);

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(hs);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("container: corrupt header JSON in " + path + ": " + e.what());
    }
    if (header.value("version", 0) != 1) throw DataError("container: unsupported version in " + path);

    Container c;
    c.meta = header.value("meta", nlohmann::json::object());
    for (const auto& entry : header.at("tensors")) {
        const std::string name = entry.at("name");
        const std::vector<int> shape = entry.at("shape").get<std::vector<int>>();
        const int64_t count = entry.at("count");
        if (count != numel(shape)) throw DataError("container: shape/count mismatch for '" + name + "'");
        std::vector<float> block(static_cast<size_t>(count));
        f.read(reinterpret_cast<char*>(block.data()),
               static_cast<std::streamsize>(block.size() * sizeof(float)));
        if (!f) throw DataError("container: truncated tensor block '" + name + "' in " + path);
        Tensor t(shape);
        for (int64_t i = 0; i < count; ++i) t[i] = static_cast<Scalar>(block[static_cast<size_t>(i)]);
        c.tensors_.emplace_back(name, std::move(t));
    }
    return c;
}

void Container::put_module(nn::Module& m) {
    for (nn::Parameter* p : m.parameters()) put(p->name, p->value);
}

void Container::load_into(nn::Module& m) const {
    for (nn::Parameter* p : m.parameters()) {
        const Tensor& t = get(p->name);
        if (!t.same_shape(p->value))
            throw DataError("container: shape mismatch for parameter '" + p->name + "': stored " +
                            shape_str(t.shape) + ", expected " + shape_str(p->value.shape));
        p->value = t;
    }
}

}  // namespace ptalk
