#include "vox/checkpoint.h"

#include "vox/errors.h"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

VOX_BEGIN

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

std::filesystem::path with_ext(const std::filesystem::path & stem, const char * ext) {
    auto p = stem;
    p += ext;
    return p;
}

void write_all(const std::vector<std::pair<std::string, Tensor>> & items, const std::filesystem::path & stem) {
    std::ofstream manifest(with_ext(stem, ".manifest"));
    std::ofstream blob(with_ext(stem, ".bin"), std::ios::binary);
    if (!manifest || !blob) throw IoError("checkpoint: cannot write " + stem.string());
    for (const auto & [name, t] : items) {
        manifest << name << " f32 ";
        const auto & s = t.shape();
        for (size_t i = 0; i < s.size(); ++i) manifest << (i ? "," : "") << s[i];
        if (s.empty()) manifest << "-";
        manifest << "\n";
        for (real v : t.data()) {
            const float f = static_cast<float>(v);
            blob.write(reinterpret_cast<const char *>(&f), sizeof(float));
        }
    }
    if (!manifest || !blob) throw IoError("checkpoint: write failed for " + stem.string());
}

struct Entry {
    std::string name;
    Shape shape;
};

std::vector<Entry> read_manifest(const std::filesystem::path & stem) {
    std::ifstream in(with_ext(stem, ".manifest"));
    if (!in) throw IoError("checkpoint: cannot open " + with_ext(stem, ".manifest").string());
    std::vector<Entry> entries;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        Entry e;
        std::string dtype, dims;
        if (!(ls >> e.name >> dtype >> dims)) throw IoError("checkpoint: malformed manifest line: " + line);
        if (dtype != "f32") throw IoError("checkpoint: unsupported dtype " + dtype);
        if (dims != "-") {
            std::istringstream ds(dims);
            std::string tok;
            while (std::getline(ds, tok, ',')) e.shape.push_back(std::stoul(tok));
        }
        entries.push_back(std::move(e));
    }
    return entries;
}

std::vector<float> read_blob(const std::filesystem::path & stem, size_t expected_floats) {
    const auto path = with_ext(stem, ".bin");
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw IoError("checkpoint: cannot open " + path.string());
    const auto bytes = static_cast<size_t>(in.tellg());
    if (bytes != expected_floats * sizeof(float)) {
        throw IoError("checkpoint: " + path.string() + " has " + std::to_string(bytes) + " bytes, manifest implies " +
                      std::to_string(expected_floats * sizeof(float)));
    }
    in.seekg(0);
    std::vector<float> buf(expected_floats);
    in.read(reinterpret_cast<char *>(buf.data()), std::streamsize(bytes));
    return buf;
}

}  // namespace

void save_checkpoint(const ParamSet & params, const std::filesystem::path & stem) { write_all(params.items, stem); }

void write_tensors(const std::map<std::string, Tensor> & tensors, const std::filesystem::path & stem) {
    write_all({tensors.begin(), tensors.end()}, stem);
}

std::map<std::string, Tensor> read_checkpoint(const std::filesystem::path & stem) {
    const auto entries = read_manifest(stem);
    size_t total = 0;
    for (const auto & e : entries) total += shape_numel(e.shape);
    const auto blob = read_blob(stem, total);
    std::map<std::string, Tensor> out;
    size_t off = 0;
    for (const auto & e : entries) {
        const size_t n = shape_numel(e.shape);
        out.emplace(e.name, Tensor(e.shape, std::vector<real>(blob.begin() + off, blob.begin() + off + n)));
        off += n;
    }
    return out;
}

void load_checkpoint(ParamSet & params, const std::filesystem::path & stem) {
    const auto entries = read_manifest(stem);
    if (entries.size() != params.items.size()) {
        throw IoError("checkpoint: " + std::to_string(entries.size()) + " tensors in file, model expects " +
                      std::to_string(params.items.size()));
    }
    size_t total = 0;
    for (size_t i = 0; i < entries.size(); ++i) {
        const auto & [name, t] = params.items[i];
        if (entries[i].name != name || entries[i].shape != t.shape()) {
            throw IoError("checkpoint: entry " + entries[i].name + shape_str(entries[i].shape) + " does not match " +
                          name + shape_str(t.shape()));
        }
        total += t.numel();
    }
    const auto blob = read_blob(stem, total);
    size_t off = 0;
    for (auto & [_, t] : params.items) {
        auto dst = t.mutable_data();
        for (size_t i = 0; i < dst.size(); ++i) dst[i] = real(blob[off + i]);
        off += dst.size();
    }
}

VOX_END
