#pragma once

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include <png.h>

#include "specdiff/core.hpp"

namespace specdiff::io {

/** Loads an 8-bit PNG as values in [0, 1]. Palette and 16-bit inputs are
    reduced to 8 bits, alpha is stripped; the result has 1 or 3 channels. */
inline ImageBuf read_png(const std::string& path) {
    FILE* fp = std::fopen(path.c_str(), "rb");
    require(fp != nullptr, "read_png: cannot open " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
        std::fclose(fp);
        throw std::invalid_argument("read_png: failed to decode " + path);
    }
    png_init_io(png, fp);
    png_read_info(png, info);
    png_uint_32 w = png_get_image_width(png, info);
    png_uint_32 h = png_get_image_height(png, info);
    int color = png_get_color_type(png, info);
    int depth = png_get_bit_depth(png, info);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (depth == 16) png_set_strip_16(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) {
        png_set_tRNS_to_alpha(png);
        png_set_strip_alpha(png);
    }
    png_read_update_info(png, info);
    int channels = png_get_channels(png, info);
    ImageBuf img(int(h), int(w), channels == 1 ? 1 : 3);
    std::vector<png_byte> row(size_t(w) * channels);
    for (png_uint_32 r = 0; r < h; ++r) {
        png_read_row(png, row.data(), nullptr);
        for (png_uint_32 c = 0; c < w; ++c)
            for (int k = 0; k < img.channels; ++k)
                img.at(int(r), int(c), k) = row[size_t(c) * channels + k] / 255.0;
    }
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    return img;
}

inline unsigned char quantize_u8(double v) {
    double s = std::round(std::clamp(v, 0.0, 1.0) * 255.0);
    return static_cast<unsigned char>(s);
}

namespace detail {
inline void write_png_impl(const std::string& path, int rows, int cols, int channels,
                           const std::vector<unsigned char>& bytes) {
    FILE* fp = std::fopen(path.c_str(), "wb");
    require(fp != nullptr, "write_png: cannot open " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
        std::fclose(fp);
        throw std::invalid_argument("write_png: failed to encode " + path);
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, png_uint_32(cols), png_uint_32(rows), 8,
                 channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int r = 0; r < rows; ++r)
        png_write_row(png, const_cast<png_bytep>(bytes.data() + size_t(r) * cols * channels));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}
}  // namespace detail

/** Writes a single-channel plane as 8-bit grayscale; values clamp to [0, 1]. */
inline void write_png(const std::string& path, const Plane& p) {
    std::vector<unsigned char> bytes(p.size());
    for (size_t i = 0; i < p.size(); ++i) bytes[i] = quantize_u8(p.v[i]);
    detail::write_png_impl(path, p.rows, p.cols, 1, bytes);
}

/** Writes a 1- or 3-channel buffer; values clamp to [0, 1]. */
inline void write_png(const std::string& path, const ImageBuf& img) {
    std::vector<unsigned char> bytes(img.v.size());
    for (size_t i = 0; i < img.v.size(); ++i) bytes[i] = quantize_u8(img.v[i]);
    detail::write_png_impl(path, img.rows, img.cols, img.channels, bytes);
}

/** Bilinear resize with clamped borders; identity when sizes already match. */
inline Plane resize_bilinear(const Plane& src, int rows, int cols) {
    require(rows > 0 && cols > 0, "resize_bilinear: target size must be positive");
    if (src.rows == rows && src.cols == cols) return src;
    Plane out(rows, cols);
    double sr = double(src.rows) / rows, sc = double(src.cols) / cols;
    for (int r = 0; r < rows; ++r) {
        double y = std::clamp((r + 0.5) * sr - 0.5, 0.0, double(src.rows - 1));
        int y0 = int(y);
        int y1 = std::min(y0 + 1, src.rows - 1);
        double fy = y - y0;
        for (int c = 0; c < cols; ++c) {
            double x = std::clamp((c + 0.5) * sc - 0.5, 0.0, double(src.cols - 1));
            int x0 = int(x);
            int x1 = std::min(x0 + 1, src.cols - 1);
            double fx = x - x0;
            out.at(r, c) = (1 - fy) * ((1 - fx) * src.at(y0, x0) + fx * src.at(y0, x1)) +
                           fy * ((1 - fx) * src.at(y1, x0) + fx * src.at(y1, x1));
        }
    }
    return out;
}

/** Parses a flat key=value file: one pair per line, '#' starts a comment,
    blank lines skipped, whitespace around keys and values trimmed. Later
    lines override earlier ones. */
inline std::map<std::string, std::string> parse_config_file(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), "parse_config_file: cannot open " + path);
    auto trim = [](std::string s) {
        size_t a = s.find_first_not_of(" \t\r\n");
        size_t b = s.find_last_not_of(" \t\r\n");
        return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    std::map<std::string, std::string> out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        size_t hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        std::string body = trim(line);
        if (body.empty()) continue;
        size_t eq = body.find('=');
        require(eq != std::string::npos,
                "parse_config_file: missing '=' at " + path + ":" + std::to_string(lineno));
        std::string key = trim(body.substr(0, eq));
        require(!key.empty(),
                "parse_config_file: empty key at " + path + ":" + std::to_string(lineno));
        out[key] = trim(body.substr(eq + 1));
    }
    return out;
}

}  // namespace specdiff::io
