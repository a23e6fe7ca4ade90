// Flat tensor container: a structured-text (JSON) header listing name, shape
// and byte offset, followed by little-endian 32-bit float payloads.
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "tomoe/tensor.hpp"

namespace tomoe {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

struct TensorFile {
    // sorted by name so that serialization is canonical
    std::map<std::string, Tensor> tensors;
    nlohmann::json meta;

    static constexpr const char* kMagic = "TOMOETENSORS1\n";

    void put(const std::string& name, Tensor t) { tensors[name] = std::move(t); }

    const Tensor& get(const std::string& name) const {
        auto it = tensors.find(name);
        op_require(it != tensors.end(), "checkpoint: missing tensor " + name);
        return it->second;
    }

    bool has(const std::string& name) const { return tensors.count(name) != 0; }

    std::vector<uint8_t> serialize() const {
        nlohmann::json header;
        header["meta"] = meta.is_null() ? nlohmann::json::object() : meta;
        nlohmann::json list = nlohmann::json::array();
        uint64_t offset = 0;
        for (const auto& [name, t] : tensors) {
            nlohmann::json e;
            e["name"] = name;
            e["shape"] = t.shape;
            e["offset"] = offset;
            offset += t.size() * sizeof(float);
            list.push_back(e);
        }
        header["tensors"] = list;
        std::string htext = header.dump();

        std::vector<uint8_t> out;
        out.insert(out.end(), kMagic, kMagic + std::strlen(kMagic));
        std::string hlen = std::to_string(htext.size()) + "\n";
        out.insert(out.end(), hlen.begin(), hlen.end());
        out.insert(out.end(), htext.begin(), htext.end());
        for (const auto& [name, t] : tensors) {
            const uint8_t* p = reinterpret_cast<const uint8_t*>(t.data.data());
            out.insert(out.end(), p, p + t.size() * sizeof(float));
        }
        return out;
    }

    static TensorFile deserialize(const std::vector<uint8_t>& bytes) {
        size_t mlen = std::strlen(kMagic);
        op_require(bytes.size() > mlen &&
                       std::memcmp(bytes.data(), kMagic, mlen) == 0,
                   "checkpoint: bad magic");
        size_t pos = mlen;
        std::string hlen;
        while (pos < bytes.size() && bytes[pos] != '\n') hlen.push_back(static_cast<char>(bytes[pos++]));
        op_require(pos < bytes.size(), "checkpoint: truncated header length");
        ++pos;
        size_t hsize = std::stoull(hlen);
        op_require(pos + hsize <= bytes.size(), "checkpoint: truncated header");
        nlohmann::json header = nlohmann::json::parse(bytes.begin() + pos, bytes.begin() + pos + hsize);
        pos += hsize;

        TensorFile tf;
        tf.meta = header.value("meta", nlohmann::json::object());
        for (const auto& e : header.at("tensors")) {
            std::string name = e.at("name");
            std::vector<int> shape = e.at("shape").get<std::vector<int>>();
            uint64_t offset = e.at("offset");
            Tensor t = Tensor::zeros(shape);
            size_t nbytes = t.size() * sizeof(float);
            op_require(pos + offset + nbytes <= bytes.size(), "checkpoint: truncated payload");
            std::memcpy(t.data.data(), bytes.data() + pos + offset, nbytes);
            tf.tensors[name] = std::move(t);
        }
        return tf;
    }

    void save(const std::string& path) const {
        std::vector<uint8_t> bytes = serialize();
        std::ofstream f(path, std::ios::binary);
        op_require(f.good(), "cannot open for writing: " + path);
        f.write(reinterpret_cast<const char*>(bytes.data()),
                static_cast<std::streamsize>(bytes.size()));
        op_require(f.good(), "write failed: " + path);
    }

    static TensorFile load(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        op_require(f.good(), "cannot open: " + path);
        std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
        return deserialize(bytes);
    }
};

// ---- SHA-256 (used for the frozen-backbone digest) ----

class Sha256 {
  public:
    void update(const uint8_t* data, size_t len) {
        total_ += len;
        while (len > 0) {
            size_t take = std::min(len, sizeof(buf_) - fill_);
            std::memcpy(buf_ + fill_, data, take);
            fill_ += take;
            data += take;
            len -= take;
            if (fill_ == sizeof(buf_)) {
                block(buf_);
                fill_ = 0;
            }
        }
    }

    std::string hex_digest() {
        uint64_t bits = total_ * 8;
        uint8_t pad = 0x80;
        update(&pad, 1);
        uint8_t zero = 0;
        while (fill_ != 56) update(&zero, 1);
        uint8_t lenb[8];
        for (int i = 0; i < 8; ++i) lenb[i] = static_cast<uint8_t>(bits >> (56 - 8 * i));
        update(lenb, 8);
        static const char* hexd = "0123456789abcdef";
        std::string out;
        for (uint32_t w : h_) {
            for (int i = 28; i >= 0; i -= 4) out.push_back(hexd[(w >> i) & 0xF]);
        }
        return out;
    }

  private:
    static uint32_t rotr(uint32_t x, int n) { return (x >> n) | (x << (32 - n)); }

    void block(const uint8_t* p) {
        static const uint32_t K[64] = {
            0x428a2f98, 0x71374491, 0xb5c0fbcf, 0xe9b5dba5, 0x3956c25b, 0x59f111f1, 0x923f82a4,
            0xab1c5ed5, 0xd807aa98, 0x12835b01, 0x243185be, 0x550c7dc3, 0x72be5d74, 0x80deb1fe,
            0x9bdc06a7, 0xc19bf174, 0xe49b69c1, 0xefbe4786, 0x0fc19dc6, 0x240ca1cc, 0x2de92c6f,
            0x4a7484aa, 0x5cb0a9dc, 0x76f988da, 0x983e5152, 0xa831c66d, 0xb00327c8, 0xbf597fc7,
            0xc6e00bf3, 0xd5a79147, 0x06ca6351, 0x14292967, 0x27b70a85, 0x2e1b2138, 0x4d2c6dfc,
            0x53380d13, 0x650a7354, 0x766a0abb, 0x81c2c92e, 0x92722c85, 0xa2bfe8a1, 0xa81a664b,
            0xc24b8b70, 0xc76c51a3, 0xd192e819, 0xd6990624, 0xf40e3585, 0x106aa070, 0x19a4c116,
            0x1e376c08, 0x2748774c, 0x34b0bcb5, 0x391c0cb3, 0x4ed8aa4a, 0x5b9cca4f, 0x682e6ff3,
            0x748f82ee, 0x78a5636f, 0x84c87814, 0x8cc70208, 0x90befffa, 0xa4506ceb, 0xbef9a3f7,
            0xc67178f2};
        uint32_t w[64];
        for (int i = 0; i < 16; ++i)
            w[i] = (uint32_t(p[4 * i]) << 24) | (uint32_t(p[4 * i + 1]) << 16) |
                   (uint32_t(p[4 * i + 2]) << 8) | uint32_t(p[4 * i + 3]);
        for (int i = 16; i < 64; ++i) {
            uint32_t s0 = rotr(w[i - 15], 7) ^ rotr(w[i - 15], 18) ^ (w[i - 15] >> 3);
            uint32_t s1 = rotr(w[i - 2], 17) ^ rotr(w[i - 2], 19) ^ (w[i - 2] >> 10);
            w[i] = w[i - 16] + s0 + w[i - 7] + s1;
        }
        uint32_t a = h_[0], b = h_[1], c = h_[2], d = h_[3];
        uint32_t e = h_[4], f = h_[5], g = h_[6], h = h_[7];
        for (int i = 0; i < 64; ++i) {
            uint32_t S1 = rotr(e, 6) ^ rotr(e, 11) ^ rotr(e, 25);
            uint32_t ch = (e & f) ^ (~e & g);
            uint32_t t1 = h + S1 + ch + K[i] + w[i];
            uint32_t S0 = rotr(a, 2) ^ rotr(a, 13) ^ rotr(a, 22);
            uint32_t maj = (a & b) ^ (a & c) ^ (b & c);
            uint32_t t2 = S0 + maj;
            h = g; g = f; f = e; e = d + t1;
            d = c; c = b; b = a; a = t1 + t2;
        }
        h_[0] += a; h_[1] += b; h_[2] += c; h_[3] += d;
        h_[4] += e; h_[5] += f; h_[6] += g; h_[7] += h;
    }

    uint32_t h_[8] = {0x6a09e667, 0xbb67ae85, 0x3c6ef372, 0xa54ff53a,
                      0x510e527f, 0x9b05688c, 0x1f83d9ab, 0x5be0cd19};
    uint8_t buf_[64];
    size_t fill_ = 0;
    uint64_t total_ = 0;
};

inline std::string sha256_hex(const uint8_t* data, size_t len) {
    Sha256 s;
    s.update(data, len);
    return s.hex_digest();
}

inline std::string digest_tensors(const std::vector<const Tensor*>& ts) {
    Sha256 s;
    for (const Tensor* t : ts)
        s.update(reinterpret_cast<const uint8_t*>(t->data.data()), t->size() * sizeof(float));
    return s.hex_digest();
}

}  // namespace tomoe
