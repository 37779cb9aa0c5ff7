#include "nifti.hpp"

#include "halos/core_data.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <memory>
#include <string>

namespace halos::nifti {
namespace {

#pragma pack(push, 1)
struct Header {
  std::int32_t sizeof_hdr;
  char data_type[10];
  char db_name[18];
  std::int32_t extents;
  std::int16_t session_error;
  char regular;
  char dim_info;
  std::int16_t dim[8];
  float intent_p1;
  float intent_p2;
  float intent_p3;
  std::int16_t intent_code;
  std::int16_t datatype;
  std::int16_t bitpix;
  std::int16_t slice_start;
  float pixdim[8];
  float vox_offset;
  float scl_slope;
  float scl_inter;
  std::int16_t slice_end;
  char slice_code;
  char xyzt_units;
  float cal_max;
  float cal_min;
  float slice_duration;
  float toffset;
  std::int32_t glmax;
  std::int32_t glmin;
  char descrip[80];
  char aux_file[24];
  std::int16_t qform_code;
  std::int16_t sform_code;
  float quatern_b;
  float quatern_c;
  float quatern_d;
  float qoffset_x;
  float qoffset_y;
  float qoffset_z;
  float srow_x[4];
  float srow_y[4];
  float srow_z[4];
  char intent_name[16];
  char magic[4];
};
#pragma pack(pop)
static_assert(sizeof(Header) == 348, "NIfTI-1 header must be 348 bytes");

static_assert(std::endian::native == std::endian::little, "little-endian host assumed");

template <typename T>
T byteswap(T v) {
  auto* p = reinterpret_cast<unsigned char*>(&v);
  std::reverse(p, p + sizeof(T));
  return v;
}

void swap_header(Header& h) {
  h.sizeof_hdr = byteswap(h.sizeof_hdr);
  for (auto& d : h.dim) d = byteswap(d);
  h.datatype = byteswap(h.datatype);
  h.bitpix = byteswap(h.bitpix);
  for (auto& p : h.pixdim) p = byteswap(p);
  h.vox_offset = byteswap(h.vox_offset);
  h.scl_slope = byteswap(h.scl_slope);
  h.scl_inter = byteswap(h.scl_inter);
}

int bytes_per_voxel(std::int16_t datatype) {
  switch (datatype) {
    case kUInt8:
    case kInt8:
      return 1;
    case kInt16:
    case kUInt16:
      return 2;
    case kInt32:
    case kUInt32:
    case kFloat32:
      return 4;
    case kFloat64:
      return 8;
    default:
      return 0;
  }
}

template <typename T>
void decode(const unsigned char* raw, std::int64_t n, bool swap, std::vector<double>& out) {
  out.resize(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    T v;
    std::memcpy(&v, raw + i * sizeof(T), sizeof(T));
    if (swap) v = byteswap(v);
    out[static_cast<std::size_t>(i)] = static_cast<double>(v);
  }
}

template <typename T>
void encode(const std::vector<double>& in, std::vector<unsigned char>& raw) {
  raw.resize(in.size() * sizeof(T));
  for (std::size_t i = 0; i < in.size(); ++i) {
    const T v = static_cast<T>(in[i]);
    std::memcpy(raw.data() + i * sizeof(T), &v, sizeof(T));
  }
}

struct GzCloser {
  void operator()(gzFile f) const {
    if (f) gzclose(f);
  }
};
using GzHandle = std::unique_ptr<std::remove_pointer_t<gzFile>, GzCloser>;

bool has_gz_suffix(const std::filesystem::path& p) { return p.extension() == ".gz"; }

}  // namespace

std::int64_t Image::count() const {
  std::int64_t n = 1;
  for (int i = 0; i < ndim; ++i) n *= dims[static_cast<std::size_t>(i)];
  return n;
}

Image read(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw FormatError("missing file: " + path.string());
  // gzread reads uncompressed files transparently.
  GzHandle f(gzopen(path.c_str(), "rb"));
  if (!f) throw FormatError("cannot open " + path.string());

  Header h{};
  if (gzread(f.get(), &h, sizeof(Header)) != static_cast<int>(sizeof(Header)))
    throw FormatError("truncated NIfTI header: " + path.string());
  bool swap = false;
  if (h.sizeof_hdr != 348) {
    if (byteswap(h.sizeof_hdr) != 348)
      throw FormatError("malformed NIfTI header (sizeof_hdr) in " + path.string());
    swap = true;
    swap_header(h);
  }
  if (std::strncmp(h.magic, "n+1", 3) != 0)
    throw FormatError("unsupported NIfTI magic in " + path.string() +
                      " (single-file NIfTI-1 expected)");
  if (h.dim[0] < 1 || h.dim[0] > 7)
    throw FormatError("malformed NIfTI header (dim[0]) in " + path.string());

  Image img;
  img.ndim = h.dim[0];
  for (int i = 0; i < img.ndim; ++i) {
    if (h.dim[i + 1] < 1) throw FormatError("malformed NIfTI dimension in " + path.string());
    img.dims[static_cast<std::size_t>(i)] = h.dim[i + 1];
  }
  // Trailing singleton dimensions do not add dimensionality.
  while (img.ndim > 3 && img.dims[static_cast<std::size_t>(img.ndim - 1)] == 1) --img.ndim;
  for (int i = 0; i < 3; ++i) {
    if (i >= img.ndim) img.dims[static_cast<std::size_t>(i)] = 1;
    img.spacing[i] = h.pixdim[i + 1];
  }
  img.datatype = h.datatype;

  const int bpv = bytes_per_voxel(h.datatype);
  if (bpv == 0)
    throw FormatError("unsupported NIfTI datatype " + std::to_string(h.datatype) + " in " +
                      path.string());
  const auto offset = static_cast<std::int64_t>(h.vox_offset);
  if (offset < 348) throw FormatError("malformed NIfTI vox_offset in " + path.string());
  std::vector<unsigned char> skip(static_cast<std::size_t>(offset - 348));
  if (!skip.empty() && gzread(f.get(), skip.data(), static_cast<unsigned>(skip.size())) !=
                           static_cast<int>(skip.size()))
    throw FormatError("truncated NIfTI file: " + path.string());

  const std::int64_t n = img.count();
  std::vector<unsigned char> raw(static_cast<std::size_t>(n * bpv));
  std::size_t got = 0;
  while (got < raw.size()) {
    const auto chunk = static_cast<unsigned>(std::min<std::size_t>(raw.size() - got, 1u << 30));
    const int r = gzread(f.get(), raw.data() + got, chunk);
    if (r <= 0) throw FormatError("truncated NIfTI data in " + path.string());
    got += static_cast<std::size_t>(r);
  }

  switch (h.datatype) {
    case kUInt8: decode<std::uint8_t>(raw.data(), n, swap, img.values); break;
    case kInt8: decode<std::int8_t>(raw.data(), n, swap, img.values); break;
    case kInt16: decode<std::int16_t>(raw.data(), n, swap, img.values); break;
    case kUInt16: decode<std::uint16_t>(raw.data(), n, swap, img.values); break;
    case kInt32: decode<std::int32_t>(raw.data(), n, swap, img.values); break;
    case kUInt32: decode<std::uint32_t>(raw.data(), n, swap, img.values); break;
    case kFloat32: decode<float>(raw.data(), n, swap, img.values); break;
    case kFloat64: decode<double>(raw.data(), n, swap, img.values); break;
    default: break;
  }

  const bool scaled = h.scl_slope != 0.0f && (h.scl_slope != 1.0f || h.scl_inter != 0.0f);
  if (scaled) {
    for (auto& v : img.values) v = v * h.scl_slope + h.scl_inter;
  }
  return img;
}

void write(const std::filesystem::path& path, const Image& image) {
  const int bpv = bytes_per_voxel(image.datatype);
  if (bpv == 0) throw std::invalid_argument("nifti::write: unsupported datatype");
  if (static_cast<std::int64_t>(image.values.size()) != image.count())
    throw std::invalid_argument("nifti::write: value count does not match dimensions");

  Header h{};
  h.sizeof_hdr = 348;
  h.regular = 'r';
  h.dim[0] = static_cast<std::int16_t>(image.ndim);
  for (int i = 0; i < 7; ++i)
    h.dim[i + 1] = static_cast<std::int16_t>(i < image.ndim ? image.dims[static_cast<std::size_t>(i)] : 1);
  h.datatype = image.datatype;
  h.bitpix = static_cast<std::int16_t>(bpv * 8);
  h.pixdim[0] = 1.0f;
  for (int i = 0; i < 3; ++i) h.pixdim[i + 1] = static_cast<float>(image.spacing[i]);
  for (int i = 4; i < 8; ++i) h.pixdim[i] = 1.0f;
  h.vox_offset = 352.0f;
  h.scl_slope = 1.0f;
  h.xyzt_units = 2;  // mm
  h.sform_code = 2;
  h.qform_code = 0;
  h.srow_x[0] = static_cast<float>(image.spacing[0]);
  h.srow_y[1] = static_cast<float>(image.spacing[1]);
  h.srow_z[2] = static_cast<float>(image.spacing[2]);
  std::memcpy(h.magic, "n+1\0", 4);

  std::vector<unsigned char> raw;
  switch (image.datatype) {
    case kUInt8: encode<std::uint8_t>(image.values, raw); break;
    case kInt8: encode<std::int8_t>(image.values, raw); break;
    case kInt16: encode<std::int16_t>(image.values, raw); break;
    case kUInt16: encode<std::uint16_t>(image.values, raw); break;
    case kInt32: encode<std::int32_t>(image.values, raw); break;
    case kUInt32: encode<std::uint32_t>(image.values, raw); break;
    case kFloat32: encode<float>(image.values, raw); break;
    case kFloat64: encode<double>(image.values, raw); break;
    default: break;
  }

  std::vector<unsigned char> bytes(352 + raw.size(), 0);
  std::memcpy(bytes.data(), &h, sizeof(Header));
  std::memcpy(bytes.data() + 352, raw.data(), raw.size());

  if (has_gz_suffix(path)) {
    GzHandle f(gzopen(path.c_str(), "wb6"));
    if (!f) throw std::runtime_error("cannot write " + path.string());
    std::size_t put = 0;
    while (put < bytes.size()) {
      const auto chunk = static_cast<unsigned>(std::min<std::size_t>(bytes.size() - put, 1u << 30));
      if (gzwrite(f.get(), bytes.data() + put, chunk) != static_cast<int>(chunk))
        throw std::runtime_error("write failed: " + path.string());
      put += chunk;
    }
  } else {
    std::unique_ptr<FILE, int (*)(FILE*)> f(std::fopen(path.c_str(), "wb"), &std::fclose);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    if (std::fwrite(bytes.data(), 1, bytes.size(), f.get()) != bytes.size())
      throw std::runtime_error("write failed: " + path.string());
  }
}

}  // namespace halos::nifti
