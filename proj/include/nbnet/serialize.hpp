#ifndef NBNET_SERIALIZE_HPP
#define NBNET_SERIALIZE_HPP

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "nbnet/errors.hpp"
#include "nbnet/tensor.hpp"

namespace nbnet {

/**
 * Checkpoint container: a flat file of named records, either raw tensors or
 * text blobs (JSON metadata). All integers little-endian; element type is
 * recorded per tensor so float and double checkpoints round-trip bitwise.
 *
 * Layout: magic[8] version:u32 { tag:u8 name:str payload } ... tag 0 = end.
 * str = len:u32 bytes. tensor payload = elem:u8 rank:u32 dims:u64* data.
 */
class CheckpointWriter {
public:
    CheckpointWriter(const std::string& path, const std::string& magic, std::uint32_t version)
        : os_(path, std::ios::binary), path_(path) {
        if (!os_) throw CheckpointError("cannot open for write: " + path);
        char m[8] = {0};
        std::memcpy(m, magic.data(), std::min<std::size_t>(8, magic.size()));
        os_.write(m, 8);
        write_u32(version);
    }

    void add_text(const std::string& name, const std::string& text) {
        write_u8(2);
        write_str(name);
        write_str(text);
    }

    template <class T>
    void add_tensor(const std::string& name, const Tensor<T>& t) {
        write_u8(1);
        write_str(name);
        write_u8(sizeof(T));
        write_u32(std::uint32_t(t.rank()));
        for (std::size_t d : t.shape) write_u64(d);
        os_.write(reinterpret_cast<const char*>(t.data()),
                  std::streamsize(t.numel() * sizeof(T)));
    }

    void finish() {
        write_u8(0);
        os_.flush();
        if (!os_) throw CheckpointError("write failed: " + path_);
        os_.close();
    }

private:
    void write_u8(std::uint8_t x) { os_.write(reinterpret_cast<char*>(&x), 1); }
    void write_u32(std::uint32_t x) { os_.write(reinterpret_cast<char*>(&x), 4); }
    void write_u64(std::uint64_t x) { os_.write(reinterpret_cast<char*>(&x), 8); }
    void write_str(const std::string& s) {
        write_u32(std::uint32_t(s.size()));
        os_.write(s.data(), std::streamsize(s.size()));
    }

    std::ofstream os_;
    std::string path_;
};

class CheckpointReader {
public:
    CheckpointReader(const std::string& path, const std::string& magic,
                     std::uint32_t expect_version)
        : is_(path, std::ios::binary), path_(path) {
        if (!is_) throw CheckpointError("cannot open: " + path);
        char m[8] = {0};
        is_.read(m, 8);
        std::string got(m, m + std::min<std::size_t>(8, magic.size()));
        if (!is_ || got != magic)
            throw CheckpointError("bad magic in " + path + ": expected '" + magic +
                                  "', file is not a valid checkpoint");
        version_ = read_u32();
        if (version_ != expect_version)
            throw CheckpointError("version mismatch in " + path + ": file version " +
                                  std::to_string(version_) + ", supported version " +
                                  std::to_string(expect_version));
        load_records();
    }

    std::uint32_t version() const { return version_; }

    bool has(const std::string& name) const {
        return texts_.count(name) || raw_.count(name);
    }

    const std::string& text(const std::string& name) const {
        auto it = texts_.find(name);
        if (it == texts_.end())
            throw CheckpointError("missing text record '" + name + "' in " + path_ +
                                  " (version " + std::to_string(version_) + ")");
        return it->second;
    }

    template <class T>
    Tensor<T> tensor(const std::string& name) const {
        auto it = raw_.find(name);
        if (it == raw_.end())
            throw CheckpointError("missing tensor record '" + name + "' in " + path_ +
                                  " (version " + std::to_string(version_) + ")");
        const RawTensor& r = it->second;
        if (r.elem_size != sizeof(T))
            throw CheckpointError("tensor '" + name + "' element size " +
                                  std::to_string(r.elem_size) + " != requested " +
                                  std::to_string(sizeof(T)));
        Tensor<T> t(r.shape);
        std::memcpy(t.data(), r.bytes.data(), r.bytes.size());
        return t;
    }

    std::vector<std::string> tensor_names() const {
        std::vector<std::string> names;
        for (auto& kv : raw_) names.push_back(kv.first);
        return names;
    }

private:
    struct RawTensor {
        std::size_t elem_size = 0;
        Shape shape;
        std::vector<char> bytes;
    };

    void load_records() {
        for (;;) {
            int tag = is_.get();
            if (tag < 0) throw CheckpointError("truncated checkpoint: " + path_);
            if (tag == 0) break;
            std::string name = read_str();
            if (tag == 2) {
                texts_[name] = read_str();
            } else if (tag == 1) {
                RawTensor r;
                r.elem_size = std::size_t(read_u8());
                std::uint32_t rank = read_u32();
                std::size_t n = 1;
                for (std::uint32_t i = 0; i < rank; ++i) {
                    r.shape.push_back(std::size_t(read_u64()));
                    n *= r.shape.back();
                }
                r.bytes.resize(n * r.elem_size);
                is_.read(r.bytes.data(), std::streamsize(r.bytes.size()));
                if (!is_) throw CheckpointError("truncated tensor '" + name + "' in " + path_);
                raw_[name] = std::move(r);
            } else {
                throw CheckpointError("unknown record tag " + std::to_string(tag) +
                                      " in " + path_);
            }
        }
    }

    std::uint8_t read_u8() {
        std::uint8_t x = 0;
        is_.read(reinterpret_cast<char*>(&x), 1);
        return x;
    }
    std::uint32_t read_u32() {
        std::uint32_t x = 0;
        is_.read(reinterpret_cast<char*>(&x), 4);
        return x;
    }
    std::uint64_t read_u64() {
        std::uint64_t x = 0;
        is_.read(reinterpret_cast<char*>(&x), 8);
        return x;
    }
    std::string read_str() {
        std::uint32_t n = read_u32();
        if (!is_ || n > (1u << 30)) throw CheckpointError("corrupt string in " + path_);
        std::string s(n, '\0');
        is_.read(s.data(), n);
        return s;
    }

    std::ifstream is_;
    std::string path_;
    std::uint32_t version_ = 0;
    std::map<std::string, std::string> texts_;
    std::map<std::string, RawTensor> raw_;
};

}

#endif
