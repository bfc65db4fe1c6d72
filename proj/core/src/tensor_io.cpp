#include "sponge/tensor_io.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "sponge/error.hpp"

namespace sponge {

namespace {

constexpr char kMagic[4] = {'S', 'P', 'T', 'N'};

void need(const std::vector<std::uint8_t>& in, std::size_t offset, std::size_t n) {
  if (offset + n > in.size())
    throw FormatError("unexpected end of data (need " + std::to_string(n) + " bytes)", offset);
}

}  // namespace

void put_u8(std::vector<std::uint8_t>& out, std::uint8_t v) { out.push_back(v); }

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f64(std::vector<std::uint8_t>& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

std::uint8_t get_u8(const std::vector<std::uint8_t>& in, std::size_t& offset) {
  need(in, offset, 1);
  return in[offset++];
}

std::uint32_t get_u32(const std::vector<std::uint8_t>& in, std::size_t& offset) {
  need(in, offset, 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in[offset + i]) << (8 * i);
  offset += 4;
  return v;
}

std::uint64_t get_u64(const std::vector<std::uint8_t>& in, std::size_t& offset) {
  need(in, offset, 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(in[offset + i]) << (8 * i);
  offset += 8;
  return v;
}

double get_f64(const std::vector<std::uint8_t>& in, std::size_t& offset) {
  return std::bit_cast<double>(get_u64(in, offset));
}

std::vector<std::uint8_t> encode_sptn(const Tensor& t, StorageType dtype) {
  if (t.empty()) throw ShapeError("cannot encode an empty tensor");
  std::vector<std::uint8_t> out;
  const std::size_t width = dtype == StorageType::kF64 ? 8 : 4;
  out.reserve(7 + 4 * t.rank() + width * t.size());
  out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
  put_u8(out, kSptnVersion);
  put_u8(out, static_cast<std::uint8_t>(dtype));
  put_u8(out, static_cast<std::uint8_t>(t.rank()));
  for (auto d : t.dims()) put_u32(out, static_cast<std::uint32_t>(d));
  for (double v : t.data()) {
    if (dtype == StorageType::kF64)
      put_f64(out, v);
    else
      put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  return out;
}

Tensor decode_sptn(const std::vector<std::uint8_t>& bytes, std::size_t& offset) {
  const std::size_t start = offset;
  need(bytes, offset, 4);
  if (std::memcmp(bytes.data() + offset, kMagic, 4) != 0)
    throw FormatError("bad SPTN magic", offset);
  offset += 4;
  const std::size_t version_at = offset;
  if (get_u8(bytes, offset) != kSptnVersion)
    throw FormatError("unsupported SPTN version", version_at);
  const std::size_t dtype_at = offset;
  const std::uint8_t dtype = get_u8(bytes, offset);
  if (dtype > 1) throw FormatError("unknown SPTN dtype " + std::to_string(dtype), dtype_at);
  const std::size_t rank_at = offset;
  const std::uint8_t rank = get_u8(bytes, offset);
  if (rank == 0 || rank > Tensor::kMaxRank)
    throw FormatError("SPTN rank " + std::to_string(rank) + " out of range", rank_at);
  Shape dims;
  std::uint64_t count = 1;
  for (std::uint8_t i = 0; i < rank; ++i) {
    const std::size_t at = offset;
    const std::uint32_t d = get_u32(bytes, offset);
    if (d == 0) throw FormatError("SPTN extent is zero", at);
    dims.push_back(d);
    count *= d;
    if (count > (std::uint64_t{1} << 34)) throw FormatError("SPTN tensor too large", at);
  }
  const std::size_t width = dtype == 0 ? 8 : 4;
  need(bytes, offset, static_cast<std::size_t>(count) * width);
  std::vector<double> data(static_cast<std::size_t>(count));
  for (auto& v : data) {
    if (dtype == 0)
      v = get_f64(bytes, offset);
    else
      v = static_cast<double>(std::bit_cast<float>(get_u32(bytes, offset)));
    if (!std::isfinite(v)) throw FormatError("SPTN payload contains a non-finite value", offset);
  }
  (void)start;
  return Tensor(std::move(dims), std::move(data));
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in),
                                   std::istreambuf_iterator<char>());
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("short write to " + path.string());
}

void write_sptn(const std::filesystem::path& path, const Tensor& t, StorageType dtype) {
  write_file_bytes(path, encode_sptn(t, dtype));
}

Tensor read_sptn(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  std::size_t offset = 0;
  Tensor t = decode_sptn(bytes, offset);
  if (offset != bytes.size()) throw FormatError("trailing bytes after SPTN tensor", offset);
  return t;
}

namespace {

// Skips whitespace and '#' comments, then parses an unsigned decimal token.
std::size_t ppm_token(const std::vector<std::uint8_t>& in, std::size_t& offset) {
  for (;;) {
    if (offset >= in.size()) throw FormatError("PPM header truncated", offset);
    const char ch = static_cast<char>(in[offset]);
    if (ch == '#') {
      while (offset < in.size() && in[offset] != '\n') ++offset;
    } else if (std::isspace(static_cast<unsigned char>(ch))) {
      ++offset;
    } else {
      break;
    }
  }
  const std::size_t start = offset;
  std::size_t value = 0;
  while (offset < in.size() && std::isdigit(in[offset])) {
    value = value * 10 + (in[offset] - '0');
    if (value > (std::size_t{1} << 24)) throw FormatError("PPM header value too large", start);
    ++offset;
  }
  if (offset == start) throw FormatError("PPM header expects a number", start);
  return value;
}

}  // namespace

Tensor decode_ppm(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6')
    throw FormatError("not a binary PPM (expected P6 magic)", 0);
  std::size_t offset = 2;
  const std::size_t w = ppm_token(bytes, offset);
  const std::size_t h = ppm_token(bytes, offset);
  const std::size_t maxval_at = offset;
  const std::size_t maxval = ppm_token(bytes, offset);
  if (w == 0 || h == 0) throw FormatError("PPM image has a zero extent", maxval_at);
  if (maxval != 255) throw FormatError("only 8-bit PPM (maxval 255) is supported", maxval_at);
  if (offset >= bytes.size() || !std::isspace(bytes[offset]))
    throw FormatError("PPM header must end in one whitespace byte", offset);
  ++offset;
  const std::size_t need = 3 * w * h;
  if (bytes.size() - offset < need) throw FormatError("PPM pixel data truncated", bytes.size());
  if (bytes.size() - offset > need) throw FormatError("trailing bytes after PPM pixels", offset + need);
  Tensor t({3, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        t.at(c, y, x) = static_cast<double>(bytes[offset + (y * w + x) * 3 + c]) / 255.0;
  return t;
}

Tensor read_ppm(const std::filesystem::path& path) { return decode_ppm(read_file_bytes(path)); }

std::vector<std::uint8_t> encode_ppm(const Tensor& image) {
  require_rank(image, 3, "PPM image");
  if (image.channels() != 3) throw ShapeError("PPM needs exactly 3 channels");
  const std::string header =
      "P6\n" + std::to_string(image.width()) + " " + std::to_string(image.height()) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  for (std::size_t y = 0; y < image.height(); ++y)
    for (std::size_t x = 0; x < image.width(); ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = std::clamp(image.at(c, y, x), 0.0, 1.0);
        out.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0)));
      }
  return out;
}

Tensor read_image(const std::filesystem::path& path) {
  if (path.extension() == ".ppm") return read_ppm(path);
  return read_sptn(path);
}

}  // namespace sponge
