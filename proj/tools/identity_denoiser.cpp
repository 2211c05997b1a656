// Minimal external denoiser: echoes each request payload back unchanged.
// Frame protocol (little-endian, over stdin/stdout):
//   request:  int32 t, int32 width, int32 height, width*height float32
//   response: width*height float32
// Exits 0 on clean EOF, 1 on a malformed frame.

#include <cstdint>
#include <cstdio>
#include <vector>

int main() {
  for (;;) {
    int32_t header[3];
    size_t got = std::fread(header, sizeof(int32_t), 3, stdin);
    if (got == 0) return 0;  // clean end of stream
    if (got != 3) return 1;
    int64_t n = int64_t(header[1]) * header[2];
    if (n <= 0 || n > (int64_t(1) << 28)) return 1;
    std::vector<float> buf(static_cast<size_t>(n), 0.0f);
    if (std::fread(buf.data(), sizeof(float), buf.size(), stdin) != buf.size()) return 1;
    if (std::fwrite(buf.data(), sizeof(float), buf.size(), stdout) != buf.size()) return 1;
    std::fflush(stdout);
  }
}
