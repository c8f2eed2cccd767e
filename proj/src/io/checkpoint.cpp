#include "calora/io/checkpoint.hpp"

#include <bit>
#include <boost/crc.hpp>
#include <fstream>
#include <iterator>

namespace calora {

namespace {

constexpr char kMagic[4] = {'C', 'A', 'L', 'R'};

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  std::vector<std::uint8_t>& buffer() { return out_; }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  Reader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}

  void need(std::size_t n) const {
    if (size_ - pos_ < n) throw IoError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  std::uint8_t u8() {
    need(1);
    return data_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data_[pos_++]) << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == size_; }
  std::size_t pos() const { return pos_; }

 private:
  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

}  // namespace

std::uint64_t crc64(const std::uint8_t* data, std::size_t size) {
  boost::crc_optimal<64, 0x42F0E1EBA9EA3693ULL, ~0ULL, ~0ULL, true, true> crc;
  crc.process_bytes(data, size);
  return crc.checksum();
}

std::vector<double> Record::as_f64() const {
  switch (dtype) {
    case DType::kF32: return {f32.begin(), f32.end()};
    case DType::kF64: return f64;
    case DType::kI8: return {i8.begin(), i8.end()};
  }
  return {};
}

template <typename T>
void Checkpoint::put(const std::string& name, const Tensor<T>& t) {
  Record r;
  r.name = name;
  r.dtype = dtype_of<T>();
  r.shape = t.shape();
  if constexpr (std::is_same_v<T, float>) {
    r.f32 = t.vec();
  } else {
    r.f64 = t.vec();
  }
  add(std::move(r));
}

void Checkpoint::put_scalar(const std::string& name, double value) {
  Record r;
  r.name = name;
  r.dtype = DType::kF64;
  r.shape = {1};
  r.f64 = {value};
  add(std::move(r));
}

void Checkpoint::put_i8(const std::string& name, Shape shape, std::vector<std::int8_t> codes,
                        std::vector<float> scale) {
  if (shape.empty() || codes.size() != numel_of(shape) || scale.size() != shape[0]) {
    throw DimensionError("i8 record '" + name + "' needs codes of its shape and one scale per row");
  }
  Record r;
  r.name = name;
  r.dtype = DType::kI8;
  r.shape = std::move(shape);
  r.i8 = std::move(codes);
  r.scale = std::move(scale);
  add(std::move(r));
}

void Checkpoint::add(Record r) {
  if (contains(r.name)) throw IoError("duplicate checkpoint record '" + r.name + "'");
  records_.push_back(std::move(r));
}

void Checkpoint::merge(const Checkpoint& other) {
  for (const Record& r : other.records_) add(r);
}

const Record* Checkpoint::find(const std::string& name) const {
  for (const Record& r : records_)
    if (r.name == name) return &r;
  return nullptr;
}

const Record& Checkpoint::at(const std::string& name) const {
  const Record* r = find(name);
  if (r == nullptr) throw IoError("checkpoint has no record '" + name + "'");
  return *r;
}

double Checkpoint::scalar(const std::string& name) const {
  const Record& r = at(name);
  if (r.numel() != 1 || r.dtype == DType::kI8) throw IoError("record '" + name + "' is not a scalar");
  return r.as_f64()[0];
}

template <typename T>
Tensor<T> Checkpoint::tensor(const std::string& name) const {
  const Record& r = at(name);
  if (r.dtype == DType::kI8) throw IoError("record '" + name + "' holds integer codes");
  const std::vector<double> v = r.as_f64();
  if constexpr (std::is_same_v<T, float>) {
    if (r.dtype == DType::kF32) return Tensor<T>(r.shape, r.f32);
  } else {
    if (r.dtype == DType::kF64) return Tensor<T>(r.shape, r.f64);
  }
  return Tensor<T>(r.shape, std::vector<T>(v.begin(), v.end()));
}

std::vector<std::string> Checkpoint::names_with_prefix(const std::string& prefix) const {
  std::vector<std::string> out;
  for (const Record& r : records_)
    if (r.name.rfind(prefix, 0) == 0) out.push_back(r.name);
  return out;
}

std::vector<std::uint8_t> Checkpoint::encode() const {
  Writer w;
  w.bytes(kMagic, 4);
  w.u32(kCheckpointVersion);
  for (const Record& r : records_) {
    w.u32(static_cast<std::uint32_t>(r.name.size()));
    w.bytes(r.name.data(), r.name.size());
    w.u8(static_cast<std::uint8_t>(r.dtype));
    w.u8(static_cast<std::uint8_t>(r.shape.size()));
    for (std::size_t d : r.shape) w.u32(static_cast<std::uint32_t>(d));
    switch (r.dtype) {
      case DType::kF32:
        for (float v : r.f32) w.f32(v);
        break;
      case DType::kF64:
        for (double v : r.f64) w.f64(v);
        break;
      case DType::kI8:
        w.bytes(r.i8.data(), r.i8.size());
        for (float v : r.scale) w.f32(v);
        break;
    }
  }
  std::vector<std::uint8_t>& out = w.buffer();
  const std::uint64_t crc = crc64(out.data(), out.size());
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(crc >> (8 * i)));
  return std::move(out);
}

Checkpoint Checkpoint::decode(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 16) throw IoError("checkpoint too short");
  const std::size_t body = bytes.size() - 8;
  Reader trailer(bytes.data() + body, 8);
  const std::uint64_t stored = trailer.u64();
  if (crc64(bytes.data(), body) != stored) throw IoError("checkpoint CRC mismatch");

  Reader r(bytes.data(), body);
  if (r.str(4) != std::string(kMagic, 4)) throw IoError("not a CALR checkpoint");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ck;
  while (!r.done()) {
    Record rec;
    rec.name = r.str(r.u32());
    const std::uint8_t dtype = r.u8();
    if (dtype > 2) throw IoError("record '" + rec.name + "' has unknown dtype");
    rec.dtype = static_cast<DType>(dtype);
    const std::uint8_t ndim = r.u8();
    for (std::uint8_t i = 0; i < ndim; ++i) {
      const std::uint32_t d = r.u32();
      if (d == 0) throw IoError("record '" + rec.name + "' has a zero extent");
      rec.shape.push_back(d);
    }
    const std::size_t n = numel_of(rec.shape);
    switch (rec.dtype) {
      case DType::kF32:
        r.need(4 * n);
        rec.f32.resize(n);
        for (float& v : rec.f32) v = r.f32();
        break;
      case DType::kF64:
        r.need(8 * n);
        rec.f64.resize(n);
        for (double& v : rec.f64) v = r.f64();
        break;
      case DType::kI8: {
        if (ndim == 0) throw IoError("i8 record '" + rec.name + "' must have rank >= 1");
        r.need(n);
        const std::string raw = r.str(n);
        rec.i8.assign(raw.begin(), raw.end());
        rec.scale.resize(rec.shape[0]);
        for (float& v : rec.scale) v = r.f32();
        break;
      }
    }
    ck.add(std::move(rec));
  }
  return ck;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  const std::vector<std::uint8_t> bytes = encode();
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode(bytes);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

template void Checkpoint::put(const std::string&, const Tensor<float>&);
template void Checkpoint::put(const std::string&, const Tensor<double>&);
template Tensor<float> Checkpoint::tensor(const std::string&) const;
template Tensor<double> Checkpoint::tensor(const std::string&) const;

}  // namespace calora
