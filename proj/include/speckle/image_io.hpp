#pragma once

#include <string>

#include "speckle/image.hpp"

namespace speckle::io {

/// Decodes an 8/16-bit grayscale PGM or PNG to intensities in [0, 255].
/// Color PNG inputs are converted with luminance weights 0.299/0.587/0.114;
/// sub-8-bit or 16-bit samples are rescaled linearly so max value maps
/// to 255. Format is detected from the file magic, not the extension.
ImageD load_grayscale(const std::string& path);

/// 8-bit binary PGM (P5), values clamped to [0, 255] and rounded.
void save_pgm(const std::string& path, const ImageD& img);

/// Grayscale PNG, bit_depth 8 or 16, same clamping semantics.
void save_png(const std::string& path, const ImageD& img, int bit_depth = 8);

/// Lossless raster: one text header line "H W\n" followed by H*W
/// little-endian 32-bit floats in row-major order.
ImageD load_rawf(const std::string& path);
void save_rawf(const std::string& path, const ImageD& img);

/// Writes in the format matching the file extension (.pgm/.png/.rawf).
void save_image(const std::string& path, const ImageD& img);

}  // namespace speckle::io
