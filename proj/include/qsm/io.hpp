#pragma once

// Volume file I/O: NIfTI-1 (single file, little-endian) and raw float32 with
// a JSON sidecar.
//
// Raw layout: `name.raw` holds little-endian float32 samples, x fastest
// (complex data interleaves re/im, echo-major). `name.json` holds
//   {"kind": "scalar"|"mask"|"multi_echo", "dims": [nx,ny,nz],
//    "spacing_mm": [...], "origin_mm": [...], "unit": "ppm", ...}
// NIfTI files get the same sidecar when extra metadata (echo times,
// provenance) must travel with them.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "qsm/volume.hpp"

namespace qsm {

static_assert(std::endian::native == std::endian::little, "only little-endian hosts are supported");

class FormatError : public Error {
 public:
  using Error::Error;
};
class ConsistencyError : public Error {
 public:
  using Error::Error;
};
class IoError : public Error {
 public:
  using Error::Error;
};

enum class VolumeFormat { Nifti1, RawF32 };

namespace fs = std::filesystem;

inline VolumeFormat format_for_path(const fs::path& p) {
  const auto ext = p.extension().string();
  if (ext == ".nii") return VolumeFormat::Nifti1;
  if (ext == ".raw" || ext == ".f32") return VolumeFormat::RawF32;
  throw FormatError("cannot infer volume format from extension of " + p.string());
}

inline fs::path sidecar_path(const fs::path& p) {
  auto s = p;
  s.replace_extension(".json");
  return s;
}

using Volume = std::variant<ScalarVolume, MaskVolume, MultiEchoVolume>;

namespace detail {

inline std::vector<char> read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open " + p.string());
  in.seekg(0, std::ios::end);
  const auto n = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  std::vector<char> buf(n);
  if (n && !in.read(buf.data(), static_cast<std::streamsize>(n)))
    throw IoError("read failed: " + p.string());
  return buf;
}

inline void write_file(const fs::path& p, const std::vector<char>& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + p.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + p.string());
}

inline void write_text(const fs::path& p, const std::string& s) {
  write_file(p, std::vector<char>(s.begin(), s.end()));
}

inline nlohmann::json grid_json(const VoxelGrid& g) {
  return {{"dims", g.dims}, {"spacing_mm", g.spacing}, {"origin_mm", g.origin}};
}

inline VoxelGrid grid_from_json(const nlohmann::json& j) {
  try {
    VoxelGrid g;
    g.dims = j.at("dims").get<Index3>();
    g.spacing = j.at("spacing_mm").get<Vec3>();
    if (j.contains("origin_mm")) g.origin = j.at("origin_mm").get<Vec3>();
    g.validate();
    return g;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad grid metadata: ") + e.what());
  } catch (const InvalidArgument& e) {
    throw FormatError(std::string("bad grid metadata: ") + e.what());
  }
}

template <typename T>
void put(std::vector<char>& buf, std::size_t off, T v) {
  std::memcpy(buf.data() + off, &v, sizeof(T));
}
template <typename T>
T get(const std::vector<char>& buf, std::size_t off) {
  T v;
  std::memcpy(&v, buf.data() + off, sizeof(T));
  return v;
}

// NIfTI-1 field offsets
constexpr std::size_t kHdrSize = 348;
constexpr std::size_t kDim = 40, kDatatype = 70, kBitpix = 72, kPixdim = 76, kVoxOffset = 108,
                      kSclSlope = 112, kSclInter = 116, kXyztUnits = 123, kDescrip = 148,
                      kQformCode = 252, kSformCode = 254, kQoffset = 268, kSrow = 280, kMagic = 344;
constexpr std::int16_t kUint8 = 2, kInt16 = 4, kInt32 = 8, kFloat32 = 16, kComplex64 = 32,
                       kFloat64 = 64;

inline std::vector<char> nifti_header(const VoxelGrid& g, std::size_t nt, std::int16_t datatype,
                                      std::int16_t bitpix, const std::string& descrip) {
  std::vector<char> h(352, 0);
  put<std::int32_t>(h, 0, 348);
  put<std::int16_t>(h, kDim, static_cast<std::int16_t>(nt > 1 ? 4 : 3));
  for (int a = 0; a < 3; ++a)
    put<std::int16_t>(h, kDim + 2 * (a + 1), static_cast<std::int16_t>(g.dims[a]));
  put<std::int16_t>(h, kDim + 8, static_cast<std::int16_t>(nt));
  for (int a = 5; a < 8; ++a) put<std::int16_t>(h, kDim + 2 * a, 1);
  put<std::int16_t>(h, kDatatype, datatype);
  put<std::int16_t>(h, kBitpix, bitpix);
  put<float>(h, kPixdim, 1.0f);
  for (int a = 0; a < 3; ++a)
    put<float>(h, kPixdim + 4 * (a + 1), static_cast<float>(g.spacing[a]));
  put<float>(h, kPixdim + 16, 1.0f);
  put<float>(h, kVoxOffset, 352.0f);
  put<float>(h, kSclSlope, 1.0f);
  put<float>(h, kSclInter, 0.0f);
  h[kXyztUnits] = 2;  // mm
  std::strncpy(h.data() + kDescrip, descrip.c_str(), 79);
  put<std::int16_t>(h, kQformCode, 1);
  put<std::int16_t>(h, kSformCode, 1);
  for (int a = 0; a < 3; ++a) put<float>(h, kQoffset + 4 * a, static_cast<float>(g.origin[a]));
  for (int r = 0; r < 3; ++r) {
    put<float>(h, kSrow + 16 * r + 4 * r, static_cast<float>(g.spacing[r]));
    put<float>(h, kSrow + 16 * r + 12, static_cast<float>(g.origin[r]));
  }
  std::memcpy(h.data() + kMagic, "n+1\0", 4);
  return h;
}

struct NiftiImage {
  VoxelGrid grid;
  std::size_t nt = 1;
  bool is_complex = false;
  std::int16_t datatype = 0;
  std::string descrip;
  std::vector<double> re, im;  // im empty unless complex
};

inline NiftiImage read_nifti(const fs::path& p) {
  const auto buf = read_file(p);
  if (buf.size() < kHdrSize) throw FormatError(p.string() + ": file shorter than NIfTI header");
  if (get<std::int32_t>(buf, 0) != 348)
    throw FormatError(p.string() + ": not a little-endian NIfTI-1 file");
  if (std::memcmp(buf.data() + kMagic, "n+1", 3) != 0)
    throw FormatError(p.string() + ": missing n+1 magic (only single-file NIfTI-1 is supported)");
  const auto ndim = get<std::int16_t>(buf, kDim);
  if (ndim < 1 || ndim > 4) throw FormatError(p.string() + ": unsupported dimensionality");
  NiftiImage img;
  for (int a = 0; a < 3; ++a) {
    const auto d = a < ndim ? get<std::int16_t>(buf, kDim + 2 * (a + 1)) : std::int16_t{1};
    if (d < 1) throw FormatError(p.string() + ": non-positive dimension");
    img.grid.dims[a] = static_cast<std::size_t>(d);
    const float s = get<float>(buf, kPixdim + 4 * (a + 1));
    img.grid.spacing[a] = s > 0.0f ? static_cast<double>(s) : 1.0;
    img.grid.origin[a] = get<std::int16_t>(buf, kQformCode) > 0
                             ? static_cast<double>(get<float>(buf, kQoffset + 4 * a))
                             : 0.0;
  }
  img.nt = ndim == 4 ? static_cast<std::size_t>(std::max<std::int16_t>(get<std::int16_t>(buf, kDim + 8), 1)) : 1;
  char desc[81] = {};
  std::memcpy(desc, buf.data() + kDescrip, 80);
  img.descrip = desc;

  const auto dt = get<std::int16_t>(buf, kDatatype);
  const auto off = static_cast<std::size_t>(get<float>(buf, kVoxOffset));
  const std::size_t n = img.grid.size() * img.nt;
  std::size_t bytes = 0;
  switch (dt) {
    case kUint8: bytes = 1; break;
    case kInt16: bytes = 2; break;
    case kInt32: case kFloat32: bytes = 4; break;
    case kComplex64: case kFloat64: bytes = 8; break;
    default: throw FormatError(p.string() + ": unsupported NIfTI datatype " + std::to_string(dt));
  }
  if (off < kHdrSize || buf.size() < off + n * bytes)
    throw FormatError(p.string() + ": data section truncated");
  img.re.resize(n);
  img.datatype = dt;
  img.is_complex = dt == kComplex64;
  if (img.is_complex) img.im.resize(n);
  const char* d = buf.data() + off;
  for (std::size_t q = 0; q < n; ++q) {
    switch (dt) {
      case kUint8: img.re[q] = static_cast<unsigned char>(d[q]); break;
      case kInt16: { std::int16_t v; std::memcpy(&v, d + 2 * q, 2); img.re[q] = v; break; }
      case kInt32: { std::int32_t v; std::memcpy(&v, d + 4 * q, 4); img.re[q] = v; break; }
      case kFloat32: { float v; std::memcpy(&v, d + 4 * q, 4); img.re[q] = v; break; }
      case kFloat64: { double v; std::memcpy(&v, d + 8 * q, 8); img.re[q] = v; break; }
      case kComplex64: {
        float v[2];
        std::memcpy(v, d + 8 * q, 8);
        img.re[q] = v[0];
        img.im[q] = v[1];
        break;
      }
      default: break;
    }
  }
  const float slope = get<float>(buf, kSclSlope);
  const float inter = get<float>(buf, kSclInter);
  if (!img.is_complex && slope != 0.0f && (slope != 1.0f || inter != 0.0f))
    for (auto& v : img.re) v = v * slope + inter;
  return img;
}

inline std::string descrip_value(const std::string& descrip, const std::string& key) {
  const auto pos = descrip.find(key + "=");
  if (pos == std::string::npos) return {};
  const auto start = pos + key.size() + 1;
  const auto end = descrip.find(';', start);
  return descrip.substr(start, end == std::string::npos ? std::string::npos : end - start);
}

inline std::vector<char> f32_bytes(std::span<const double> v) {
  std::vector<char> out(v.size() * 4);
  for (std::size_t q = 0; q < v.size(); ++q) {
    const auto f = static_cast<float>(v[q]);
    std::memcpy(out.data() + 4 * q, &f, 4);
  }
  return out;
}

inline std::vector<double> f32_values(const std::vector<char>& bytes) {
  std::vector<double> out(bytes.size() / 4);
  for (std::size_t q = 0; q < out.size(); ++q) {
    float f;
    std::memcpy(&f, bytes.data() + 4 * q, 4);
    out[q] = f;
  }
  return out;
}

inline nlohmann::json read_sidecar(const fs::path& p) {
  const auto bytes = read_file(p);
  try {
    return nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
}

}  // namespace detail

/// Optional metadata that travels with a saved volume.
struct VolumeMetadata {
  nlohmann::json provenance = nlohmann::json::object();
};

inline void save_volume(const Volume& v, const fs::path& path, VolumeFormat format,
                        const VolumeMetadata& meta = {}) {
  using nlohmann::json;
  json side;
  std::vector<char> payload;
  std::size_t nt = 1;
  bool cplx = false, is_mask = false;
  std::string unit = "dimensionless";
  const VoxelGrid* grid = nullptr;

  if (const auto* s = std::get_if<ScalarVolume>(&v)) {
    grid = &s->grid();
    side["kind"] = "scalar";
    unit = std::string(to_string(s->unit()));
    payload = detail::f32_bytes(s->data());
  } else if (const auto* m = std::get_if<MaskVolume>(&v)) {
    grid = &m->grid();
    side["kind"] = "mask";
    is_mask = true;
    if (format == VolumeFormat::RawF32) {
      std::vector<double> vals(m->size());
      for (std::size_t n = 0; n < m->size(); ++n) vals[n] = (*m)[n] ? 1.0 : 0.0;
      payload = detail::f32_bytes(vals);
    } else {
      payload.assign(m->data().begin(), m->data().end());
    }
  } else {
    const auto& e = std::get<MultiEchoVolume>(v);
    grid = &e.grid();
    side["kind"] = "multi_echo";
    side["echo_times_s"] = e.echo_times();
    nt = e.echoes();
    cplx = true;
    std::vector<double> inter(e.data().size() * 2);
    for (std::size_t q = 0; q < e.data().size(); ++q) {
      inter[2 * q] = e.data()[q].real();
      inter[2 * q + 1] = e.data()[q].imag();
    }
    payload = detail::f32_bytes(inter);
  }
  side.update(detail::grid_json(*grid));
  side["unit"] = unit;
  if (!meta.provenance.empty()) side["provenance"] = meta.provenance;

  if (format == VolumeFormat::RawF32) {
    detail::write_file(path, payload);
    detail::write_text(sidecar_path(path), side.dump(2) + "\n");
    return;
  }
  const std::int16_t dt = is_mask ? detail::kUint8 : (cplx ? detail::kComplex64 : detail::kFloat32);
  const std::int16_t bitpix = is_mask ? 8 : (cplx ? 64 : 32);
  auto bytes = detail::nifti_header(*grid, nt, dt, bitpix, "qsm;unit=" + unit + ";");
  bytes.insert(bytes.end(), payload.begin(), payload.end());
  detail::write_file(path, bytes);
  if (cplx || !meta.provenance.empty())
    detail::write_text(sidecar_path(path), side.dump(2) + "\n");
}

/// Rounds samples to the float32 precision used on disk, so in-memory
/// results match what a reader of the saved file sees.
inline void round_to_storage(ScalarVolume& v) {
  for (auto& x : v.values()) x = static_cast<float>(x);
}

inline void round_to_storage(MultiEchoVolume& v) {
  for (std::size_t j = 0; j < v.echoes(); ++j)
    for (auto& z : v.echo(j)) z = {static_cast<float>(z.real()), static_cast<float>(z.imag())};
}

inline void save_volume(const Volume& v, const fs::path& path, const VolumeMetadata& meta = {}) {
  save_volume(v, path, format_for_path(path), meta);
}

inline Volume load_volume(const fs::path& path, VolumeFormat format) {
  if (!fs::exists(path)) throw IoError("no such file: " + path.string());
  if (format == VolumeFormat::RawF32) {
    const auto side = detail::read_sidecar(sidecar_path(path));
    const auto grid = detail::grid_from_json(side);
    const std::string kind = side.value("kind", "scalar");
    const auto bytes = detail::read_file(path);
    if (bytes.size() % 4 != 0) throw ConsistencyError(path.string() + ": size not a multiple of 4");
    auto vals = detail::f32_values(bytes);
    if (kind == "multi_echo") {
      const auto tes = side.at("echo_times_s").get<std::vector<double>>();
      if (vals.size() != 2 * grid.size() * tes.size())
        throw ConsistencyError(path.string() + ": sample count does not match sidecar dims/echoes");
      MultiEchoVolume e(grid, tes);
      for (std::size_t j = 0; j < tes.size(); ++j) {
        auto s = e.echo(j);
        for (std::size_t n = 0; n < grid.size(); ++n) {
          const std::size_t q = j * grid.size() + n;
          s[n] = {vals[2 * q], vals[2 * q + 1]};
        }
      }
      return e;
    }
    if (vals.size() != grid.size())
      throw ConsistencyError(path.string() + ": " + std::to_string(vals.size()) +
                             " samples but sidecar dims give " + std::to_string(grid.size()));
    if (kind == "mask") {
      std::vector<std::uint8_t> bits(vals.size());
      for (std::size_t n = 0; n < vals.size(); ++n) bits[n] = vals[n] != 0.0;
      return MaskVolume(grid, std::move(bits));
    }
    return ScalarVolume(grid, std::move(vals), unit_from_string(side.value("unit", "dimensionless")));
  }

  auto img = detail::read_nifti(path);
  nlohmann::json side = nlohmann::json::object();
  if (fs::exists(sidecar_path(path))) side = detail::read_sidecar(sidecar_path(path));
  if (img.is_complex) {
    std::vector<double> tes;
    if (side.contains("echo_times_s")) tes = side.at("echo_times_s").get<std::vector<double>>();
    if (tes.size() != img.nt)
      throw ConsistencyError(path.string() + ": echo times missing or inconsistent with 4th dim");
    MultiEchoVolume e(img.grid, tes);
    for (std::size_t j = 0; j < img.nt; ++j) {
      auto s = e.echo(j);
      for (std::size_t n = 0; n < img.grid.size(); ++n)
        s[n] = {img.re[j * img.grid.size() + n], img.im[j * img.grid.size() + n]};
    }
    return e;
  }
  if (img.nt != 1) throw FormatError(path.string() + ": 4D real NIfTI is not supported");
  if (img.datatype == detail::kUint8 ||
      side.value("kind", "") == "mask") {
    std::vector<std::uint8_t> bits(img.re.size());
    for (std::size_t n = 0; n < bits.size(); ++n) bits[n] = img.re[n] != 0.0;
    return MaskVolume(img.grid, std::move(bits));
  }
  auto unit = detail::descrip_value(img.descrip, "unit");
  return ScalarVolume(img.grid, std::move(img.re), unit_from_string(unit));
}

inline Volume load_volume(const fs::path& path) { return load_volume(path, format_for_path(path)); }

inline ScalarVolume load_scalar(const fs::path& path) {
  auto v = load_volume(path);
  if (auto* s = std::get_if<ScalarVolume>(&v)) return std::move(*s);
  if (auto* m = std::get_if<MaskVolume>(&v)) {
    ScalarVolume out(m->grid());
    for (std::size_t n = 0; n < m->size(); ++n) out[n] = (*m)[n] ? 1.0 : 0.0;
    return out;
  }
  throw FormatError(path.string() + ": expected a scalar volume");
}

inline MaskVolume load_mask(const fs::path& path) {
  auto v = load_volume(path);
  if (auto* m = std::get_if<MaskVolume>(&v)) return std::move(*m);
  if (auto* s = std::get_if<ScalarVolume>(&v)) {
    MaskVolume out(s->grid());
    for (std::size_t n = 0; n < s->size(); ++n) out.set(n, (*s)[n] != 0.0);
    return out;
  }
  throw FormatError(path.string() + ": expected a mask volume");
}

inline MultiEchoVolume load_multi_echo(const fs::path& path) {
  auto v = load_volume(path);
  if (auto* e = std::get_if<MultiEchoVolume>(&v)) return std::move(*e);
  throw FormatError(path.string() + ": expected multi-echo complex data");
}

}  // namespace qsm
