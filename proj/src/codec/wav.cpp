#include "vox/codec.h"

#include "vox/errors.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

VOX_BEGIN

namespace {

uint32_t le32(const unsigned char * p) { return uint32_t(p[0]) | uint32_t(p[1]) << 8 | uint32_t(p[2]) << 16 | uint32_t(p[3]) << 24; }
uint16_t le16(const unsigned char * p) { return uint16_t(p[0] | p[1] << 8); }

void put32(std::ostream & o, uint32_t v) {
    for (int i = 0; i < 4; ++i) o.put(char((v >> (8 * i)) & 0xff));
}
void put16(std::ostream & o, uint16_t v) {
    o.put(char(v & 0xff));
    o.put(char(v >> 8));
}

}  // namespace

Wav read_wav(const std::filesystem::path & path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("wav: cannot open " + path.string());
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buf.size() < 12 || std::memcmp(buf.data(), "RIFF", 4) || std::memcmp(buf.data() + 8, "WAVE", 4)) {
        throw IoError("wav: " + path.string() + " is not a RIFF/WAVE file");
    }
    Wav w;
    bool have_fmt = false;
    size_t pos = 12;
    while (pos + 8 <= buf.size()) {
        const unsigned char * h = buf.data() + pos;
        const uint32_t size = le32(h + 4);
        const size_t body = pos + 8;
        if (body + size > buf.size()) throw IoError("wav: truncated chunk in " + path.string());
        if (!std::memcmp(h, "fmt ", 4)) {
            if (size < 16) throw IoError("wav: short fmt chunk");
            const uint16_t format = le16(buf.data() + body), channels = le16(buf.data() + body + 2);
            const uint16_t bits = le16(buf.data() + body + 14);
            if (format != 1 || channels != 1 || bits != 16) {
                throw IoError("wav: only 16-bit PCM mono is supported (" + path.string() + ")");
            }
            w.sample_rate = le32(buf.data() + body + 4);
            have_fmt = true;
        } else if (!std::memcmp(h, "data", 4)) {
            if (!have_fmt) throw IoError("wav: data chunk before fmt chunk");
            w.samples.resize(size / 2);
            for (size_t i = 0; i < size / 2; ++i) {
                w.samples[i] = real(int16_t(le16(buf.data() + body + 2 * i))) / real(32768);
            }
            return w;
        }
        pos = body + size + (size & 1);
    }
    throw IoError("wav: no data chunk in " + path.string());
}

void write_wav(const std::filesystem::path & path, std::span<const real> samples, size_t sample_rate) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("wav: cannot write " + path.string());
    const uint32_t data_bytes = uint32_t(samples.size() * 2);
    out.write("RIFF", 4);
    put32(out, 36 + data_bytes);
    out.write("WAVE", 4);
    out.write("fmt ", 4);
    put32(out, 16);
    put16(out, 1);
    put16(out, 1);
    put32(out, uint32_t(sample_rate));
    put32(out, uint32_t(sample_rate * 2));
    put16(out, 2);
    put16(out, 16);
    out.write("data", 4);
    put32(out, data_bytes);
    for (real s : samples) {
        const double v = std::isfinite(double(s)) ? std::clamp(double(s), -1.0, 1.0) : 0.0;
        put16(out, uint16_t(int16_t(std::lround(v * 32767.0))));
    }
    if (!out) throw IoError("wav: write failed for " + path.string());
}

VOX_END
