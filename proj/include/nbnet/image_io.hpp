#ifndef NBNET_IMAGE_IO_HPP
#define NBNET_IMAGE_IO_HPP

#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include <jpeglib.h>
#include <png.h>

#include "nbnet/errors.hpp"

namespace nbnet {

// 8-bit interleaved RGB, row-major.
struct RawImage {
    int width = 0;
    int height = 0;
    std::vector<unsigned char> rgb;

    unsigned char* px(int y, int x) { return rgb.data() + 3 * (std::size_t(y) * width + x); }
    const unsigned char* px(int y, int x) const {
        return rgb.data() + 3 * (std::size_t(y) * width + x);
    }
};

namespace detail {

struct JpegErr {
    jpeg_error_mgr mgr;
    std::jmp_buf jump;
    char msg[JMSG_LENGTH_MAX];
};

inline void jpeg_err_exit(j_common_ptr cinfo) {
    auto* e = reinterpret_cast<JpegErr*>(cinfo->err);
    (*cinfo->err->format_message)(cinfo, e->msg);
    std::longjmp(e->jump, 1);
}

inline bool has_suffix(const std::string& s, const std::string& suf) {
    if (s.size() < suf.size()) return false;
    std::string tail = s.substr(s.size() - suf.size());
    for (auto& ch : tail) ch = char(std::tolower(ch));
    return tail == suf;
}

}  // namespace detail

inline RawImage read_png(const std::string& path) {
    png_image im;
    std::memset(&im, 0, sizeof im);
    im.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&im, path.c_str()))
        throw ValidationError("png read failed: " + path + ": " + im.message);
    im.format = PNG_FORMAT_RGB;
    RawImage out;
    out.width = int(im.width);
    out.height = int(im.height);
    out.rgb.resize(PNG_IMAGE_SIZE(im));
    if (!png_image_finish_read(&im, nullptr, out.rgb.data(), 0, nullptr)) {
        png_image_free(&im);
        throw ValidationError("png decode failed: " + path + ": " + im.message);
    }
    return out;
}

inline void write_png(const std::string& path, const RawImage& img) {
    png_image im;
    std::memset(&im, 0, sizeof im);
    im.version = PNG_IMAGE_VERSION;
    im.width = png_uint_32(img.width);
    im.height = png_uint_32(img.height);
    im.format = PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&im, path.c_str(), 0, img.rgb.data(), 0, nullptr))
        throw ValidationError("png write failed: " + path + ": " + im.message);
}

inline RawImage read_jpeg(const std::string& path) {
    FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) throw ValidationError("cannot open image: " + path);
    jpeg_decompress_struct cinfo;
    detail::JpegErr err;
    cinfo.err = jpeg_std_error(&err.mgr);
    err.mgr.error_exit = detail::jpeg_err_exit;
    RawImage out;
    if (setjmp(err.jump)) {
        jpeg_destroy_decompress(&cinfo);
        std::fclose(f);
        throw ValidationError("jpeg decode failed: " + path + ": " + err.msg);
    }
    jpeg_create_decompress(&cinfo);
    jpeg_stdio_src(&cinfo, f);
    jpeg_read_header(&cinfo, TRUE);
    cinfo.out_color_space = JCS_RGB;
    jpeg_start_decompress(&cinfo);
    out.width = int(cinfo.output_width);
    out.height = int(cinfo.output_height);
    out.rgb.resize(std::size_t(out.width) * out.height * 3);
    while (cinfo.output_scanline < cinfo.output_height) {
        unsigned char* row = out.rgb.data() + std::size_t(cinfo.output_scanline) * out.width * 3;
        jpeg_read_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_decompress(&cinfo);
    jpeg_destroy_decompress(&cinfo);
    std::fclose(f);
    return out;
}

inline void write_jpeg(const std::string& path, const RawImage& img, int quality = 95) {
    FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw ValidationError("cannot open for write: " + path);
    jpeg_compress_struct cinfo;
    detail::JpegErr err;
    cinfo.err = jpeg_std_error(&err.mgr);
    err.mgr.error_exit = detail::jpeg_err_exit;
    if (setjmp(err.jump)) {
        jpeg_destroy_compress(&cinfo);
        std::fclose(f);
        throw ValidationError("jpeg write failed: " + path + ": " + err.msg);
    }
    jpeg_create_compress(&cinfo);
    jpeg_stdio_dest(&cinfo, f);
    cinfo.image_width = JDIMENSION(img.width);
    cinfo.image_height = JDIMENSION(img.height);
    cinfo.input_components = 3;
    cinfo.in_color_space = JCS_RGB;
    jpeg_set_defaults(&cinfo);
    jpeg_set_quality(&cinfo, quality, TRUE);
    jpeg_start_compress(&cinfo, TRUE);
    while (cinfo.next_scanline < cinfo.image_height) {
        const unsigned char* row =
            img.rgb.data() + std::size_t(cinfo.next_scanline) * img.width * 3;
        unsigned char* rows[1] = {const_cast<unsigned char*>(row)};
        jpeg_write_scanlines(&cinfo, rows, 1);
    }
    jpeg_finish_compress(&cinfo);
    jpeg_destroy_compress(&cinfo);
    std::fclose(f);
}

// Dispatches on file extension; grayscale sources are expanded to RGB by the
// decoders above.
inline RawImage read_image(const std::string& path) {
    if (detail::has_suffix(path, ".png")) return read_png(path);
    if (detail::has_suffix(path, ".jpg") || detail::has_suffix(path, ".jpeg"))
        return read_jpeg(path);
    throw ValidationError("unsupported image format (need .png/.jpg/.jpeg): " + path);
}

}

#endif
