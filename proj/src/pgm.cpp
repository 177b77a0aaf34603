#include "gci/pgm.hpp"

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "gci/errors.hpp"

namespace gci {

namespace {

// Consumes whitespace and '#' comment lines between header tokens.
void skip_separators(std::istream& in) {
    for (;;) {
        int c = in.peek();
        if (c == '#') {
            std::string line;
            std::getline(in, line);
        } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
            in.get();
        } else {
            return;
        }
    }
}

long read_header_int(std::istream& in, const std::string& path, const char* field) {
    skip_separators(in);
    long value = -1;
    if (!(in >> value) || value < 0) {
        throw IoError("pgm: malformed " + std::string(field) + " in '" + path + "'");
    }
    return value;
}

}  // namespace

void write_pgm(const std::string& path, const Tensor& gray) {
    if (gray.rank() != 2) {
        throw IoError("pgm: expected [H,W] image for '" + path + "'");
    }
    const std::size_t h = gray.extent(0);
    const std::size_t w = gray.extent(1);
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("pgm: cannot open '" + path + "' for writing");
    }
    out << "P5\n" << w << " " << h << "\n255\n";
    std::vector<unsigned char> row(w);
    for (std::size_t i = 0; i < h; ++i) {
        for (std::size_t j = 0; j < w; ++j) {
            double v = std::llround(gray.at(i, j));
            if (v < 0.0) v = 0.0;
            if (v > 255.0) v = 255.0;
            row[j] = static_cast<unsigned char>(v);
        }
        out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(w));
    }
    if (!out) {
        throw IoError("pgm: write failed for '" + path + "'");
    }
}

Tensor read_pgm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("pgm: cannot open '" + path + "' for reading");
    }
    char magic[2] = {0, 0};
    in.read(magic, 2);
    if (!in || magic[0] != 'P' || magic[1] != '5') {
        throw IoError("pgm: '" + path + "' is not a binary PGM (P5) file");
    }
    const long w = read_header_int(in, path, "width");
    const long h = read_header_int(in, path, "height");
    const long maxval = read_header_int(in, path, "maxval");
    if (maxval != 255) {
        throw IoError("pgm: unsupported maxval " + std::to_string(maxval) + " in '" + path +
                      "' (only 255 is supported)");
    }
    if (w == 0 || h == 0) {
        throw IoError("pgm: empty image in '" + path + "'");
    }
    in.get();  // single separator byte after maxval
    std::vector<unsigned char> raw(static_cast<std::size_t>(w) * static_cast<std::size_t>(h));
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (static_cast<std::size_t>(in.gcount()) != raw.size()) {
        throw IoError("pgm: truncated pixel data in '" + path + "'");
    }
    Tensor img({static_cast<std::size_t>(h), static_cast<std::size_t>(w)});
    for (std::size_t i = 0; i < raw.size(); ++i) {
        img[i] = static_cast<double>(raw[i]);
    }
    return img;
}

}  // namespace gci
