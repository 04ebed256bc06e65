#include <cstdlib>
#include <iostream>

#include "io/images.hpp"

// write_synthetic <out.png|out.mtok> <resolution> <seed>
int main(int argc, char** argv) {
  if (argc != 4) {
    std::cerr << "usage: write_synthetic <out> <resolution> <seed>\n";
    return 1;
  }
  const auto image = mingtok::io::synthetic_image(std::strtoull(argv[2], nullptr, 10), std::strtoull(argv[3], nullptr, 10));
  const std::filesystem::path out = argv[1];
  if (out.extension() == ".png") mingtok::io::write_png(out, image);
  else mingtok::io::write_image_tensor(out, image);
  return 0;
}
