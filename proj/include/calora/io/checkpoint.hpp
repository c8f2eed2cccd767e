#pragma once

// CALR checkpoint container.
//
// Layout (little-endian): magic "CALR", u32 version, then records
//   {u32 name_len, name, u8 dtype, u8 ndim, u32 dims[ndim], payload}
// where i8 payloads are followed by an f32 scale per leading row, and a
// trailing u64 CRC-64/XZ over every preceding byte.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "calora/tensor/tensor.hpp"

namespace calora {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Record {
  std::string name;
  DType dtype = DType::kF32;
  Shape shape;
  std::vector<float> f32;
  std::vector<double> f64;
  std::vector<std::int8_t> i8;
  std::vector<float> scale;  // i8 only, one per row

  std::size_t numel() const { return numel_of(shape); }
  // Values widened to double; i8 records are not dequantized.
  std::vector<double> as_f64() const;
};

std::uint64_t crc64(const std::uint8_t* data, std::size_t size);

class Checkpoint {
 public:
  template <typename T>
  void put(const std::string& name, const Tensor<T>& t);
  void put_scalar(const std::string& name, double value);
  void put_i8(const std::string& name, Shape shape, std::vector<std::int8_t> codes,
              std::vector<float> scale);

  const std::vector<Record>& records() const { return records_; }
  bool contains(const std::string& name) const { return find(name) != nullptr; }
  const Record* find(const std::string& name) const;
  // Throws IoError if missing.
  const Record& at(const std::string& name) const;
  double scalar(const std::string& name) const;
  template <typename T>
  Tensor<T> tensor(const std::string& name) const;
  // Names starting with `prefix`, in record order.
  std::vector<std::string> names_with_prefix(const std::string& prefix) const;

  std::vector<std::uint8_t> encode() const;
  // Throws IoError on bad magic, unsupported version, truncation or CRC mismatch.
  static Checkpoint decode(const std::vector<std::uint8_t>& bytes);

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

  // Merges records of `other`; a duplicate name throws IoError.
  void merge(const Checkpoint& other);

 private:
  void add(Record r);
  std::vector<Record> records_;
};

}  // namespace calora
