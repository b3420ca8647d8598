#include "lanmt/checkpoint.hpp"

#include <array>
#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace lanmt {

namespace {

constexpr std::array<char, 8> kMagic = {'L', 'A', 'N', 'M', 'T', 'C', 'K', 'P'};

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

void write_u32(std::ostream& out, std::uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint32_t read_u32(std::istream& in, const std::filesystem::path& path) {
    std::uint32_t v = 0;
    if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) {
        throw std::runtime_error("truncated checkpoint: " + path.string());
    }
    return v;
}

std::string read_bytes(std::istream& in, std::uint32_t n, const std::filesystem::path& path) {
    std::string s(n, '\0');
    if (n > 0 && !in.read(s.data(), n)) {
        throw std::runtime_error("truncated checkpoint: " + path.string());
    }
    return s;
}

CheckpointHeader parse_header(const std::string& text) {
    CheckpointHeader h;
    std::istringstream lines(text);
    std::string line;
    while (std::getline(lines, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            continue;
        }
        h[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return h;
}

CheckpointHeader open_and_read_header(std::ifstream& in, const std::filesystem::path& path) {
    if (!in) {
        throw std::runtime_error("cannot open checkpoint: " + path.string());
    }
    std::array<char, 8> magic{};
    if (!in.read(magic.data(), magic.size()) || magic != kMagic) {
        throw std::runtime_error("not a checkpoint file: " + path.string());
    }
    const std::uint32_t version = read_u32(in, path);
    if (version != kCheckpointVersion) {
        throw std::runtime_error("unsupported checkpoint version " + std::to_string(version) +
                                 " in " + path.string());
    }
    const std::uint32_t header_len = read_u32(in, path);
    return parse_header(read_bytes(in, header_len, path));
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const CheckpointHeader& header,
                     const ParamStore& params) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw std::runtime_error("cannot write checkpoint: " + path.string());
    }
    std::string text;
    for (const auto& [k, v] : header) {
        if (k.find('=') != std::string::npos || k.find('\n') != std::string::npos ||
            v.find('\n') != std::string::npos) {
            throw std::invalid_argument("checkpoint header entry not representable: " + k);
        }
        text += k + "=" + v + "\n";
    }
    out.write(kMagic.data(), kMagic.size());
    write_u32(out, kCheckpointVersion);
    write_u32(out, static_cast<std::uint32_t>(text.size()));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    write_u32(out, static_cast<std::uint32_t>(params.size()));
    for (const auto& [name, p] : params) {
        write_u32(out, static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_u32(out, static_cast<std::uint32_t>(p->value.rows()));
        write_u32(out, static_cast<std::uint32_t>(p->value.cols()));
        out.write(reinterpret_cast<const char*>(p->value.data()),
                  static_cast<std::streamsize>(p->value.size() * sizeof(double)));
    }
    if (!out) {
        throw std::runtime_error("failed writing checkpoint: " + path.string());
    }
}

CheckpointHeader read_checkpoint_header(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    return open_and_read_header(in, path);
}

CheckpointHeader load_checkpoint(const std::filesystem::path& path, ParamStore& params) {
    std::ifstream in(path, std::ios::binary);
    CheckpointHeader header = open_and_read_header(in, path);
    const std::uint32_t count = read_u32(in, path);
    std::set<std::string> seen;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::string name = read_bytes(in, read_u32(in, path), path);
        const std::uint32_t rows = read_u32(in, path);
        const std::uint32_t cols = read_u32(in, path);
        if (!params.contains(name)) {
            throw std::runtime_error("checkpoint tensor '" + name + "' has no model counterpart");
        }
        Parameter& p = params.get(name);
        if (p.value.rows() != rows || p.value.cols() != cols) {
            throw std::runtime_error("checkpoint tensor '" + name + "' has shape " +
                                     std::to_string(rows) + "x" + std::to_string(cols) +
                                     ", model expects " + std::to_string(p.value.rows()) + "x" +
                                     std::to_string(p.value.cols()));
        }
        if (!in.read(reinterpret_cast<char*>(p.value.data()),
                     static_cast<std::streamsize>(p.value.size() * sizeof(double)))) {
            throw std::runtime_error("truncated checkpoint: " + path.string());
        }
        seen.insert(name);
    }
    if (seen.size() != params.size()) {
        for (const auto& [name, p] : params) {
            if (!seen.contains(name)) {
                throw std::runtime_error("checkpoint is missing tensor '" + name + "'");
            }
        }
    }
    return header;
}

const std::string& header_string(const CheckpointHeader& h, const std::string& key) {
    auto it = h.find(key);
    if (it == h.end()) {
        throw std::runtime_error("checkpoint header lacks '" + key + "'");
    }
    return it->second;
}

int header_int(const CheckpointHeader& h, const std::string& key) {
    const std::string& v = header_string(h, key);
    try {
        std::size_t used = 0;
        const int out = std::stoi(v, &used);
        if (used == v.size()) {
            return out;
        }
    } catch (const std::exception&) {
    }
    throw std::runtime_error("checkpoint header '" + key + "' is not an integer: " + v);
}

double header_double(const CheckpointHeader& h, const std::string& key) {
    const std::string& v = header_string(h, key);
    try {
        std::size_t used = 0;
        const double out = std::stod(v, &used);
        if (used == v.size()) {
            return out;
        }
    } catch (const std::exception&) {
    }
    throw std::runtime_error("checkpoint header '" + key + "' is not a number: " + v);
}

std::string format_double(double v) {
    std::array<char, 64> buf{};
    auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    return std::string(buf.data(), end);
}

}  // namespace lanmt
