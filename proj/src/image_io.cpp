#include "pmdet/image_io.hpp"

#include <fstream>

#include "pmdet/common.hpp"

namespace pmdet {

void write_ppm(const std::string& path, const Image8& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("write_ppm: cannot open " + path);
  out << "P6\n" << image.width << " " << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()),
            static_cast<std::streamsize>(image.pixels.size()));
  if (!out) throw IoError("write_ppm: write failed for " + path);
}

Image8 read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("read_ppm: cannot open " + path);
  std::string magic;
  in >> magic;
  if (magic != "P6") throw ParseError("read_ppm: not a P6 file: " + path);
  int w = 0, h = 0, maxval = 0;
  in >> w >> h >> maxval;
  if (w <= 0 || h <= 0 || maxval != 255)
    throw ParseError("read_ppm: bad header in " + path);
  in.get();  // single whitespace after header
  Image8 img;
  img.width = w;
  img.height = h;
  img.pixels.resize(static_cast<std::size_t>(3) * w * h);
  in.read(reinterpret_cast<char*>(img.pixels.data()),
          static_cast<std::streamsize>(img.pixels.size()));
  if (!in) throw ParseError("read_ppm: truncated pixel data in " + path);
  return img;
}

}  // namespace pmdet
