#pragma once

#include <cstdio>
#include <jpeglib.h>

#include <csetjmp>
#include <cstdlib>
#include <vector>

#include "semsr/image/image.hpp"

namespace semsr {

namespace detail {

struct JpegErrorMgr {
    jpeg_error_mgr pub;
    std::jmp_buf jump;
};

inline void jpeg_error_exit(j_common_ptr cinfo) {
    auto* err = reinterpret_cast<JpegErrorMgr*>(cinfo->err);
    std::longjmp(err->jump, 1);
}

}  // namespace detail

// Encodes to an in-memory JPEG at the given quality and decodes it back.
inline ImageTensor jpeg_roundtrip(const ImageTensor& img, int quality) {
    if (quality < 1 || quality > 100) throw ArgumentError("jpeg quality must be in [1, 100]");
    auto bytes = quantize8(img);
    unsigned char* buffer = nullptr;
    unsigned long length = 0;
    {
        jpeg_compress_struct cinfo{};
        detail::JpegErrorMgr jerr{};
        cinfo.err = jpeg_std_error(&jerr.pub);
        jerr.pub.error_exit = detail::jpeg_error_exit;
        if (setjmp(jerr.jump)) {
            jpeg_destroy_compress(&cinfo);
            std::free(buffer);
            throw DegradationError("jpeg encode failed");
        }
        jpeg_create_compress(&cinfo);
        jpeg_mem_dest(&cinfo, &buffer, &length);
        cinfo.image_width = img.width;
        cinfo.image_height = img.height;
        cinfo.input_components = img.channels;
        cinfo.in_color_space = img.channels == 3 ? JCS_RGB : JCS_GRAYSCALE;
        jpeg_set_defaults(&cinfo);
        jpeg_set_quality(&cinfo, quality, TRUE);
        jpeg_start_compress(&cinfo, TRUE);
        while (cinfo.next_scanline < cinfo.image_height) {
            JSAMPROW row = bytes.data() + static_cast<std::size_t>(cinfo.next_scanline) * img.width * img.channels;
            jpeg_write_scanlines(&cinfo, &row, 1);
        }
        jpeg_finish_compress(&cinfo);
        jpeg_destroy_compress(&cinfo);
    }
    std::vector<std::uint8_t> decoded(bytes.size());
    {
        jpeg_decompress_struct dinfo{};
        detail::JpegErrorMgr jerr{};
        dinfo.err = jpeg_std_error(&jerr.pub);
        jerr.pub.error_exit = detail::jpeg_error_exit;
        if (setjmp(jerr.jump)) {
            jpeg_destroy_decompress(&dinfo);
            std::free(buffer);
            throw DegradationError("jpeg decode failed");
        }
        jpeg_create_decompress(&dinfo);
        jpeg_mem_src(&dinfo, buffer, length);
        jpeg_read_header(&dinfo, TRUE);
        dinfo.out_color_space = img.channels == 3 ? JCS_RGB : JCS_GRAYSCALE;
        dinfo.dct_method = JDCT_ISLOW;
        jpeg_start_decompress(&dinfo);
        while (dinfo.output_scanline < dinfo.output_height) {
            JSAMPROW row = decoded.data() + static_cast<std::size_t>(dinfo.output_scanline) * img.width * img.channels;
            jpeg_read_scanlines(&dinfo, &row, 1);
        }
        jpeg_finish_decompress(&dinfo);
        jpeg_destroy_decompress(&dinfo);
    }
    std::free(buffer);
    return from8(decoded.data(), img.height, img.width, img.channels);
}

}  // namespace semsr
