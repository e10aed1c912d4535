#include "flowreg/fvol.hpp"

#include <cstring>
#include <fstream>
#include <vector>

namespace flowreg {

namespace {

constexpr char kMagic[4] = {'F', 'V', 'O', 'L'};
constexpr std::uint8_t kVersion = 1;

void put_u32(std::string& buf, std::uint32_t v) {
    buf.push_back(char(v & 0xFF));
    buf.push_back(char((v >> 8) & 0xFF));
    buf.push_back(char((v >> 16) & 0xFF));
    buf.push_back(char((v >> 24) & 0xFF));
}

void put_f32(std::string& buf, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(buf, bits);
}

struct Reader {
    std::vector<char> bytes;
    std::size_t pos = 0;
    std::string path;

    void need(std::size_t n) {
        if (pos + n > bytes.size()) throw FvolError(path + ": truncated FVOL file");
    }
    std::uint8_t u8() {
        need(1);
        return std::uint8_t(bytes[pos++]);
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = std::uint32_t(std::uint8_t(bytes[pos])) |
                          std::uint32_t(std::uint8_t(bytes[pos + 1])) << 8 |
                          std::uint32_t(std::uint8_t(bytes[pos + 2])) << 16 |
                          std::uint32_t(std::uint8_t(bytes[pos + 3])) << 24;
        pos += 4;
        return v;
    }
    float f32() {
        std::uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
};

struct Header {
    Dims3 dims;
    Spacing3 spacing;
    std::uint32_t channels = 0;
    std::uint32_t dtype = 0;
};

void write_header(std::string& buf, const Dims3& d, const Spacing3& s, std::uint32_t channels,
                  std::uint32_t dtype) {
    buf.append(kMagic, 4);
    buf.push_back(char(kVersion));
    put_u32(buf, std::uint32_t(d.nx));
    put_u32(buf, std::uint32_t(d.ny));
    put_u32(buf, std::uint32_t(d.nz));
    put_u32(buf, channels);
    put_u32(buf, dtype);
    put_f32(buf, float(s.x));
    put_f32(buf, float(s.y));
    put_f32(buf, float(s.z));
}

Header read_header(Reader& r) {
    r.need(4);
    if (std::memcmp(r.bytes.data(), kMagic, 4) != 0) {
        throw FvolError(r.path + ": bad magic, not an FVOL file");
    }
    r.pos = 4;
    const std::uint8_t ver = r.u8();
    if (ver != kVersion) {
        throw FvolError(r.path + ": unsupported FVOL version " + std::to_string(ver));
    }
    Header h;
    h.dims.nx = int(r.u32());
    h.dims.ny = int(r.u32());
    h.dims.nz = int(r.u32());
    h.channels = r.u32();
    h.dtype = r.u32();
    h.spacing.x = double(r.f32());
    h.spacing.y = double(r.f32());
    h.spacing.z = double(r.f32());
    if (h.dims.nx <= 0 || h.dims.ny <= 0 || h.dims.nz <= 0) {
        throw FvolError(r.path + ": non-positive dims in header");
    }
    return h;
}

// write to a temp file, then rename, so readers never see a partial file
void atomic_write(const std::filesystem::path& path, const std::string& buf) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw FvolError(path.string() + ": cannot open for writing");
        f.write(buf.data(), std::streamsize(buf.size()));
        if (!f) throw FvolError(path.string() + ": write failed");
    }
    std::filesystem::rename(tmp, path);
}

Reader open_reader(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FvolError(path.string() + ": cannot open");
    Reader r;
    r.path = path.string();
    f.seekg(0, std::ios::end);
    r.bytes.resize(std::size_t(f.tellg()));
    f.seekg(0);
    f.read(r.bytes.data(), std::streamsize(r.bytes.size()));
    return r;
}

}  // namespace

FvolKind peek_fvol_kind(const std::filesystem::path& path) {
    Reader r = open_reader(path);
    const Header h = read_header(r);
    if (h.dtype == 1) return FvolKind::kLabels;
    return h.channels == 3 ? FvolKind::kField : FvolKind::kVolume;
}

void write_fvol(const std::filesystem::path& path, const Volume& v) {
    std::string buf;
    buf.reserve(33 + v.data.size() * 4);
    write_header(buf, v.dims, v.spacing, 1, 0);
    for (double x : v.data) put_f32(buf, float(x));
    atomic_write(path, buf);
}

void write_fvol(const std::filesystem::path& path, const DisplacementField& f) {
    std::string buf;
    buf.reserve(33 + f.data.size() * 4);
    write_header(buf, f.dims, f.spacing, 3, 0);
    for (double x : f.data) put_f32(buf, float(x));
    atomic_write(path, buf);
}

void write_fvol(const std::filesystem::path& path, const LabelMap& l) {
    std::string buf;
    buf.reserve(33 + l.data.size());
    write_header(buf, l.dims, l.spacing, 1, 1);
    buf.append(reinterpret_cast<const char*>(l.data.data()), l.data.size());
    atomic_write(path, buf);
}

Volume read_fvol_volume(const std::filesystem::path& path) {
    Reader r = open_reader(path);
    const Header h = read_header(r);
    if (h.channels != 1 || h.dtype != 0) {
        throw FvolError(r.path + ": expected a 1-channel float volume");
    }
    Volume v(h.dims, h.spacing);
    for (auto& x : v.data) x = double(r.f32());
    return v;
}

DisplacementField read_fvol_field(const std::filesystem::path& path) {
    Reader r = open_reader(path);
    const Header h = read_header(r);
    if (h.channels != 3 || h.dtype != 0) {
        throw FvolError(r.path + ": expected a 3-channel float field");
    }
    DisplacementField f(h.dims, h.spacing);
    for (auto& x : f.data) x = double(r.f32());
    return f;
}

LabelMap read_fvol_labels(const std::filesystem::path& path) {
    Reader r = open_reader(path);
    const Header h = read_header(r);
    if (h.channels != 1 || h.dtype != 1) {
        throw FvolError(r.path + ": expected a 1-channel uint8 label map");
    }
    LabelMap l(h.dims, h.spacing);
    r.need(l.data.size());
    std::memcpy(l.data.data(), r.bytes.data() + r.pos, l.data.size());
    return l;
}

}  // namespace flowreg
