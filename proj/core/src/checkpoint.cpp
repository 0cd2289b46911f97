#include "floc/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>

namespace floc {

namespace le {

namespace {

template <typename T>
void put(std::ostream& out, T v) {
    unsigned char bytes[sizeof(T)];
    for (std::size_t i = 0; i < sizeof(T); ++i) bytes[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
    unsigned char bytes[sizeof(T)];
    if (!in.read(reinterpret_cast<char*>(bytes), sizeof(T))) throw FormatError("unexpected end of stream");
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(bytes[i]) << (8 * i);
    return v;
}

}  // namespace

void put_u8(std::ostream& out, std::uint8_t v) { put(out, v); }
void put_u16(std::ostream& out, std::uint16_t v) { put(out, v); }
void put_u32(std::ostream& out, std::uint32_t v) { put(out, v); }
void put_u64(std::ostream& out, std::uint64_t v) { put(out, v); }
void put_f64(std::ostream& out, double v) { put(out, std::bit_cast<std::uint64_t>(v)); }
std::uint8_t get_u8(std::istream& in) { return get<std::uint8_t>(in); }
std::uint16_t get_u16(std::istream& in) { return get<std::uint16_t>(in); }
std::uint32_t get_u32(std::istream& in) { return get<std::uint32_t>(in); }
std::uint64_t get_u64(std::istream& in) { return get<std::uint64_t>(in); }
double get_f64(std::istream& in) { return std::bit_cast<double>(get<std::uint64_t>(in)); }

}  // namespace le

namespace {
constexpr char kMagic[4] = {'F', 'L', 'O', 'C'};
}

void write_checkpoint(std::ostream& out, const NamedTensors& tensors) {
    out.write(kMagic, 4);
    le::put_u32(out, kCheckpointVersion);
    le::put_u32(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        if (name.size() > std::numeric_limits<std::uint16_t>::max()) throw FormatError("tensor name too long: " + name);
        if (t.rank() > std::numeric_limits<std::uint8_t>::max()) throw FormatError("tensor rank too large: " + name);
        le::put_u16(out, static_cast<std::uint16_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        le::put_u8(out, static_cast<std::uint8_t>(t.rank()));
        for (auto d : t.shape()) le::put_u64(out, d);
        for (double v : t.values()) le::put_f64(out, v);
    }
    if (!out) throw FormatError("failed writing checkpoint");
}

NamedTensors read_checkpoint(std::istream& in) {
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw FormatError("not a FLOC checkpoint");
    const auto version = le::get_u32(in);
    if (version != kCheckpointVersion) {
        throw FormatError("unsupported checkpoint version " + std::to_string(version));
    }
    const auto count = le::get_u32(in);
    NamedTensors tensors;
    for (std::uint32_t n = 0; n < count; ++n) {
        const auto len = le::get_u16(in);
        std::string name(len, '\0');
        if (!in.read(name.data(), len)) throw FormatError("truncated tensor name");
        const auto rank = le::get_u8(in);
        Shape shape(rank);
        for (auto& d : shape) d = le::get_u64(in);
        std::vector<double> values(shape_product(shape));
        for (auto& v : values) v = le::get_f64(in);
        if (!tensors.emplace(name, Tensor(std::move(shape), std::move(values))).second) {
            throw FormatError("duplicate tensor name " + name);
        }
    }
    return tensors;
}

void save_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot open " + path.string() + " for writing");
    write_checkpoint(out, tensors);
}

NamedTensors load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    return read_checkpoint(in);
}

}  // namespace floc
