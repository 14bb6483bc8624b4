#pragma once

// Single-file checkpoint container: an 8-byte little-endian header length H,
// H bytes of JSON header, then the packed tensor data region. The layout is
// byte-compatible with safetensors.

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <limits>
#include <map>
#include <memory>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <system_error>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "patchkit/dtype.hpp"
#include "patchkit/error.hpp"

namespace patchkit {

using Shape = std::vector<std::uint64_t>;
using Metadata = std::map<std::string, std::string>;

inline constexpr std::string_view kRoleKey = "role";
inline constexpr std::string_view kRoleModel = "model";
inline constexpr std::string_view kRoleTaskVector = "task_vector";
inline constexpr std::string_view kMetadataKey = "__metadata__";

// Upper bound on the JSON header; guards against reading garbage lengths.
inline constexpr std::uint64_t kMaxHeaderBytes = 100ull << 20;

inline std::uint64_t element_count(const Shape& shape) {
  std::uint64_t count = 1;
  for (auto dim : shape) {
    if (dim != 0 && count > std::numeric_limits<std::uint64_t>::max() / dim) {
      throw validation_error("ShapeOverflow", "element count overflows 64 bits");
    }
    count *= dim;
  }
  return count;
}

inline std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

struct TensorRecord {
  std::string name;
  DType dtype = DType::F32;
  Shape shape;
  std::uint64_t begin = 0;  // byte range [begin, end) within the data region
  std::uint64_t end = 0;

  std::uint64_t elements() const { return element_count(shape); }
  std::uint64_t byte_size() const { return end - begin; }

  bool operator==(const TensorRecord&) const = default;
};

namespace detail {

// Read-only file handle shared by a manifest and its copies. pread() keeps
// concurrent reads of distinct tensors independent.
class ReadFile {
 public:
  explicit ReadFile(const std::filesystem::path& path) : fd_(::open(path.c_str(), O_RDONLY | O_CLOEXEC)) {
    if (fd_ < 0) {
      throw io_error("OpenFailed", path.string() + ": " + std::strerror(errno));
    }
  }
  ReadFile(const ReadFile&) = delete;
  ReadFile& operator=(const ReadFile&) = delete;
  ~ReadFile() { ::close(fd_); }

  std::uint64_t size() const {
    struct stat st {};
    if (::fstat(fd_, &st) != 0) throw io_error("StatFailed", std::strerror(errno));
    return static_cast<std::uint64_t>(st.st_size);
  }

  void read_at(std::uint64_t offset, std::span<std::byte> out) const {
    std::size_t done = 0;
    while (done < out.size()) {
      const ssize_t got = ::pread(fd_, out.data() + done, out.size() - done,
                                  static_cast<off_t>(offset + done));
      if (got < 0) {
        if (errno == EINTR) continue;
        throw io_error("ReadFailed", std::strerror(errno));
      }
      if (got == 0) throw io_error("ReadFailed", "unexpected end of file");
      done += static_cast<std::size_t>(got);
    }
  }

 private:
  int fd_;
};

inline std::uint64_t load_u64_le(const std::byte* p) {
  std::uint64_t v;
  std::memcpy(&v, p, 8);
  return v;
}

inline std::uint64_t json_u64(const nlohmann::json& value, const std::string& where) {
  if (!value.is_number_unsigned() && !(value.is_number_integer() && value.get<std::int64_t>() >= 0)) {
    throw validation_error("MalformedHeader", where + " must be a nonnegative integer");
  }
  return value.get<std::uint64_t>();
}

}  // namespace detail

// Validated, immutable view of a container's header. Holds an open handle to
// the file; no tensor data is resident.
class CheckpointManifest {
 public:
  const std::filesystem::path& path() const noexcept { return path_; }
  std::span<const TensorRecord> records() const noexcept { return records_; }
  const Metadata& metadata() const noexcept { return metadata_; }
  std::uint64_t total_data_bytes() const noexcept { return total_data_bytes_; }
  std::uint64_t data_start() const noexcept { return data_start_; }
  std::size_t size() const noexcept { return records_.size(); }

  std::string role() const {
    auto it = metadata_.find(std::string(kRoleKey));
    return it == metadata_.end() ? std::string() : it->second;
  }

  const TensorRecord* find(std::string_view name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &records_[it->second];
  }

  const TensorRecord& at(std::string_view name) const {
    if (const auto* record = find(name)) return *record;
    throw validation_error("UnknownTensor", "no tensor named '" + std::string(name) + "' in " + path_.string());
  }

  bool contains(std::string_view name) const { return find(name) != nullptr; }

  std::vector<std::string> sorted_names() const {
    std::vector<std::string> names;
    names.reserve(index_.size());
    for (const auto& [name, _] : index_) names.push_back(name);
    return names;
  }

  void read_bytes(const TensorRecord& record, std::span<std::byte> out) const {
    if (out.size() != record.byte_size()) {
      throw validation_error("SizeMismatch", "output buffer size differs from tensor '" + record.name + "'");
    }
    file_->read_at(data_start_ + record.begin, out);
  }

  // Logical equality: same records, metadata, and data size. Ignores path.
  friend bool operator==(const CheckpointManifest& a, const CheckpointManifest& b) {
    return a.records_ == b.records_ && a.metadata_ == b.metadata_ &&
           a.total_data_bytes_ == b.total_data_bytes_;
  }

  friend CheckpointManifest open_checkpoint(const std::filesystem::path& path);

 private:
  CheckpointManifest() = default;

  std::filesystem::path path_;
  std::shared_ptr<const detail::ReadFile> file_;
  std::vector<TensorRecord> records_;
  std::map<std::string, std::size_t, std::less<>> index_;
  Metadata metadata_;
  std::uint64_t data_start_ = 0;
  std::uint64_t total_data_bytes_ = 0;
};

inline CheckpointManifest open_checkpoint(const std::filesystem::path& path) {
  auto file = std::make_shared<const detail::ReadFile>(path);
  const std::uint64_t file_size = file->size();
  if (file_size < 8) throw validation_error("TruncatedFile", path.string() + ": shorter than the 8-byte header length");

  std::byte prefix[8];
  file->read_at(0, prefix);
  const std::uint64_t header_len = detail::load_u64_le(prefix);
  if (header_len > kMaxHeaderBytes) {
    throw validation_error("MalformedHeader", "header length " + std::to_string(header_len) + " exceeds limit");
  }
  if (header_len > file_size - 8) {
    throw validation_error("TruncatedFile", path.string() + ": header extends past end of file");
  }

  std::string text(header_len, '\0');
  file->read_at(8, std::as_writable_bytes(std::span(text)));

  // Reject duplicate top-level keys; nlohmann would otherwise keep the last.
  std::set<std::string> seen;
  std::string duplicate;
  auto on_event = [&](int depth, nlohmann::json::parse_event_t event, nlohmann::json& parsed) {
    if (event == nlohmann::json::parse_event_t::key && depth == 1) {
      auto key = parsed.get<std::string>();
      if (!seen.insert(key).second && duplicate.empty()) duplicate = key;
    }
    return true;
  };
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text, on_event);
  } catch (const nlohmann::json::parse_error& e) {
    throw validation_error("MalformedHeader", path.string() + ": " + e.what());
  }
  if (!duplicate.empty()) throw validation_error("DuplicateName", "tensor '" + duplicate + "' appears twice");
  if (!header.is_object()) throw validation_error("MalformedHeader", "header must be a JSON object");

  CheckpointManifest manifest;
  manifest.path_ = path;
  manifest.data_start_ = 8 + header_len;

  for (const auto& [name, entry] : header.items()) {
    if (name == kMetadataKey) {
      if (!entry.is_object()) throw validation_error("MalformedHeader", "__metadata__ must be an object");
      for (const auto& [key, value] : entry.items()) {
        if (!value.is_string()) {
          throw validation_error("MalformedHeader", "__metadata__." + key + " must be a string");
        }
        manifest.metadata_[key] = value.get<std::string>();
      }
      continue;
    }
    if (name.empty()) throw validation_error("MalformedHeader", "tensor names must be nonempty");
    if (!entry.is_object()) throw validation_error("MalformedHeader", "entry '" + name + "' must be an object");
    for (const auto& [key, _] : entry.items()) {
      if (key != "dtype" && key != "shape" && key != "data_offsets") {
        throw validation_error("MalformedHeader", "entry '" + name + "' has unknown field '" + key + "'");
      }
    }
    if (!entry.contains("dtype") || !entry.contains("shape") || !entry.contains("data_offsets")) {
      throw validation_error("MalformedHeader", "entry '" + name + "' needs dtype, shape and data_offsets");
    }
    TensorRecord record;
    record.name = name;
    if (!entry["dtype"].is_string()) throw validation_error("MalformedHeader", name + ".dtype must be a string");
    const auto tag = entry["dtype"].get<std::string>();
    const auto dtype = parse_dtype(tag);
    if (!dtype) throw validation_error("UnknownDtype", "tensor '" + name + "' has dtype '" + tag + "'");
    record.dtype = *dtype;

    const auto& shape = entry["shape"];
    if (!shape.is_array()) throw validation_error("MalformedHeader", name + ".shape must be an array");
    for (const auto& dim : shape) record.shape.push_back(detail::json_u64(dim, name + ".shape"));

    const auto& offsets = entry["data_offsets"];
    if (!offsets.is_array() || offsets.size() != 2) {
      throw validation_error("MalformedHeader", name + ".data_offsets must be [begin, end]");
    }
    record.begin = detail::json_u64(offsets[0], name + ".data_offsets");
    record.end = detail::json_u64(offsets[1], name + ".data_offsets");
    if (record.end < record.begin) {
      throw validation_error("MalformedHeader", name + ".data_offsets has end before begin");
    }
    const std::uint64_t elements = record.elements();
    if (elements > std::numeric_limits<std::uint64_t>::max() / byte_width(record.dtype) ||
        record.end - record.begin != elements * byte_width(record.dtype)) {
      throw validation_error("SizeMismatch", "tensor '" + name + "' byte range does not match dtype and shape");
    }
    manifest.records_.push_back(std::move(record));
  }

  std::sort(manifest.records_.begin(), manifest.records_.end(), [](const auto& a, const auto& b) {
    return a.begin != b.begin ? a.begin < b.begin : a.end < b.end;
  });
  std::uint64_t cursor = 0;
  for (const auto& record : manifest.records_) {
    if (record.begin < cursor) {
      throw validation_error("OverlappingOffsets", "tensor '" + record.name + "' overlaps its predecessor");
    }
    if (record.begin > cursor) {
      throw validation_error("GappedOffsets", "gap before tensor '" + record.name + "'");
    }
    cursor = record.end;
  }
  manifest.total_data_bytes_ = cursor;

  const std::uint64_t available = file_size - manifest.data_start_;
  if (available < cursor) {
    throw validation_error("TruncatedFile", path.string() + ": data region holds " + std::to_string(available) +
                                                " bytes, header needs " + std::to_string(cursor));
  }
  if (available > cursor) {
    throw validation_error("TrailingBytes", path.string() + ": " + std::to_string(available - cursor) +
                                                " bytes after the last tensor");
  }

  for (std::size_t i = 0; i < manifest.records_.size(); ++i) {
    manifest.index_.emplace(manifest.records_[i].name, i);
  }
  manifest.file_ = std::move(file);
  return manifest;
}

// One tensor materialized in memory. Floating tensors are widened to F32 in
// `values`; I64/BOOL tensors keep their stored bytes in `raw`.
struct Tensor {
  std::string name;
  DType dtype = DType::F32;
  Shape shape;
  std::vector<float> values;
  std::vector<std::byte> raw;

  bool arithmetic() const noexcept { return is_arithmetic(dtype); }
};

inline std::vector<std::byte> read_raw(const CheckpointManifest& manifest, const TensorRecord& record) {
  std::vector<std::byte> raw(record.byte_size());
  manifest.read_bytes(record, raw);
  return raw;
}

// Reads a floating tensor straight into F32, widening in place for 16-bit
// dtypes so no second buffer is needed.
inline std::vector<float> read_values(const CheckpointManifest& manifest, const TensorRecord& record) {
  if (!is_arithmetic(record.dtype)) {
    throw validation_error("NonArithmeticDtype", "tensor '" + record.name + "' is " +
                                                     std::string(dtype_name(record.dtype)));
  }
  std::vector<float> values(record.elements());
  auto bytes = std::as_writable_bytes(std::span(values));
  if (record.dtype == DType::F32) {
    manifest.read_bytes(record, bytes);
    return values;
  }
  // 16-bit payload lands in the first half; widen back to front so no
  // unread element is overwritten.
  manifest.read_bytes(record, bytes.first(record.byte_size()));
  for (std::size_t i = values.size(); i-- > 0;) {
    std::uint16_t bits;
    std::memcpy(&bits, bytes.data() + 2 * i, 2);
    values[i] = record.dtype == DType::F16 ? f16_to_f32(bits) : bf16_to_f32(bits);
  }
  return values;
}

inline Tensor read_tensor(const CheckpointManifest& manifest, std::string_view name) {
  const auto& record = manifest.at(name);
  Tensor tensor{record.name, record.dtype, record.shape, {}, {}};
  if (record.dtype == DType::F32 || record.dtype == DType::F16 || record.dtype == DType::BF16) {
    tensor.values = read_values(manifest, record);
  } else {
    tensor.raw = read_raw(manifest, record);
  }
  return tensor;
}

// ---------------------------------------------------------------------------
// Writing

struct TensorSpec {
  std::string name;
  DType dtype = DType::F32;
  Shape shape;

  bool operator==(const TensorSpec&) const = default;
};

enum class WriteMode { fail_if_exists, overwrite };

// Renders the JSON header for `layout` in stream order. Keys come out in
// lexicographic order (nlohmann::json objects are std::map backed) and the
// header is space-padded to a multiple of 8 bytes, as safetensors does.
inline std::string render_header(std::span<const TensorSpec> layout, const Metadata& metadata,
                                 std::uint64_t* total_bytes = nullptr) {
  nlohmann::json header = nlohmann::json::object();
  std::set<std::string_view> names;
  std::uint64_t cursor = 0;
  for (const auto& spec : layout) {
    if (spec.name.empty()) throw validation_error("MalformedHeader", "tensor names must be nonempty");
    if (spec.name == kMetadataKey) throw validation_error("MalformedHeader", "reserved tensor name __metadata__");
    if (!names.insert(spec.name).second) {
      throw validation_error("DuplicateName", "tensor '" + spec.name + "' appears twice");
    }
    const std::uint64_t bytes = element_count(spec.shape) * byte_width(spec.dtype);
    header[spec.name] = {{"dtype", dtype_name(spec.dtype)},
                         {"shape", spec.shape},
                         {"data_offsets", {cursor, cursor + bytes}}};
    cursor += bytes;
  }
  if (!metadata.empty()) header[std::string(kMetadataKey)] = metadata;
  std::string text = header.dump();
  text.append((8 - text.size() % 8) % 8, ' ');
  if (total_bytes) *total_bytes = cursor;
  return text;
}

// Streams tensors into a new container, one tensor at a time. Tensors are
// stored in name order whatever order the layout lists them in, so equal
// content always serializes to equal bytes; write them in next() order.
// Bytes go to "<path>.partial", which is renamed on commit() and deleted if
// the writer is destroyed without committing.
class CheckpointWriter {
 public:
  CheckpointWriter(std::filesystem::path path, std::vector<TensorSpec> layout, const Metadata& metadata,
                   WriteMode mode = WriteMode::fail_if_exists)
      : path_(std::move(path)), partial_(path_.string() + ".partial"), layout_(std::move(layout)) {
    std::stable_sort(layout_.begin(), layout_.end(),
                     [](const TensorSpec& a, const TensorSpec& b) { return a.name < b.name; });
    if (mode == WriteMode::fail_if_exists && std::filesystem::exists(path_)) {
      throw validation_error("OutputExists", path_.string() + " already exists (use --force to overwrite)");
    }
    const std::string header = render_header(layout_, metadata);
    fd_ = ::open(partial_.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
    if (fd_ < 0) throw io_error("OpenFailed", partial_.string() + ": " + std::strerror(errno));
    const std::uint64_t length = header.size();
    std::byte prefix[8];
    std::memcpy(prefix, &length, 8);
    put(prefix);
    put(std::as_bytes(std::span(header)));
  }

  CheckpointWriter(const CheckpointWriter&) = delete;
  CheckpointWriter& operator=(const CheckpointWriter&) = delete;

  ~CheckpointWriter() {
    if (fd_ >= 0) ::close(fd_);
    if (!committed_) {
      std::error_code ignored;
      std::filesystem::remove(partial_, ignored);
    }
  }

  bool done() const noexcept { return next_ == layout_.size(); }

  const TensorSpec& next() const {
    if (done()) throw validation_error("WriterFinished", "all tensors already written");
    return layout_[next_];
  }

  void write_raw(std::span<const std::byte> bytes) {
    const auto& spec = next();
    if (bytes.size() != element_count(spec.shape) * byte_width(spec.dtype)) {
      throw validation_error("SizeMismatch", "data for '" + spec.name + "' does not match its shape");
    }
    put(bytes);
    ++next_;
  }

  // Narrows to the next tensor's dtype in bounded chunks.
  void write_values(std::span<const float> values) {
    const auto& spec = next();
    if (!is_arithmetic(spec.dtype)) {
      throw validation_error("NonArithmeticDtype", "tensor '" + spec.name + "' expects raw bytes");
    }
    if (values.size() != element_count(spec.shape)) {
      throw validation_error("SizeMismatch", "values for '" + spec.name + "' do not match its shape");
    }
    if (spec.dtype == DType::F32) {
      put(std::as_bytes(values));
    } else {
      constexpr std::size_t kChunk = 1 << 18;
      std::vector<std::byte> buffer(std::min(values.size(), kChunk) * byte_width(spec.dtype));
      for (std::size_t offset = 0; offset < values.size(); offset += kChunk) {
        const auto chunk = values.subspan(offset, std::min(kChunk, values.size() - offset));
        const auto out = std::span(buffer).first(chunk.size() * byte_width(spec.dtype));
        narrow(chunk, spec.dtype, out);
        put(out);
      }
    }
    ++next_;
  }

  CheckpointManifest commit() {
    if (!done()) {
      throw validation_error("IncompleteWrite", "tensor '" + layout_[next_].name + "' was never written");
    }
    if (::fsync(fd_) != 0 || ::close(fd_) != 0) {
      fd_ = -1;
      throw io_error("WriteFailed", partial_.string() + ": " + std::strerror(errno));
    }
    fd_ = -1;
    std::error_code ec;
    std::filesystem::rename(partial_, path_, ec);
    if (ec) throw io_error("WriteFailed", "rename to " + path_.string() + ": " + ec.message());
    committed_ = true;
    return open_checkpoint(path_);
  }

 private:
  void put(std::span<const std::byte> bytes) {
    std::size_t done = 0;
    while (done < bytes.size()) {
      const ssize_t n = ::write(fd_, bytes.data() + done, bytes.size() - done);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw io_error("WriteFailed", partial_.string() + ": " + std::strerror(errno));
      }
      done += static_cast<std::size_t>(n);
    }
  }

  std::filesystem::path path_;
  std::filesystem::path partial_;
  std::vector<TensorSpec> layout_;
  std::size_t next_ = 0;
  int fd_ = -1;
  bool committed_ = false;
};

// In-memory entry for write_checkpoint. `data` is the stored byte payload.
struct TensorEntry {
  TensorSpec spec;
  std::vector<std::byte> data;
};

inline TensorEntry make_entry(std::string name, DType dtype, Shape shape, std::span<const float> values) {
  TensorEntry entry{{std::move(name), dtype, std::move(shape)}, {}};
  if (values.size() != element_count(entry.spec.shape)) {
    throw validation_error("SizeMismatch", "values for '" + entry.spec.name + "' do not match its shape");
  }
  entry.data.resize(values.size() * byte_width(dtype));
  narrow(values, dtype, entry.data);
  return entry;
}

inline CheckpointManifest write_checkpoint(std::span<const TensorEntry> entries, const std::filesystem::path& path,
                                           const Metadata& metadata, WriteMode mode = WriteMode::fail_if_exists) {
  std::vector<const TensorEntry*> order;
  order.reserve(entries.size());
  for (const auto& entry : entries) order.push_back(&entry);
  std::stable_sort(order.begin(), order.end(),
                   [](const TensorEntry* a, const TensorEntry* b) { return a->spec.name < b->spec.name; });
  std::vector<TensorSpec> layout;
  layout.reserve(order.size());
  for (const auto* entry : order) layout.push_back(entry->spec);
  CheckpointWriter writer(path, std::move(layout), metadata, mode);
  for (const auto* entry : order) writer.write_raw(entry->data);
  return writer.commit();
}

// ---------------------------------------------------------------------------

struct CompatReport {
  std::vector<std::string> only_in_a;
  std::vector<std::string> only_in_b;
  std::vector<std::string> shape_mismatches;
  std::vector<std::string> dtype_mismatches;

  bool compatible() const {
    return only_in_a.empty() && only_in_b.empty() && shape_mismatches.empty() && dtype_mismatches.empty();
  }

  std::string summary() const {
    std::string out;
    auto list = [&out](const char* label, const std::vector<std::string>& names) {
      if (names.empty()) return;
      if (!out.empty()) out += "; ";
      out += label;
      out += ": ";
      for (std::size_t i = 0; i < names.size() && i < 5; ++i) out += (i ? ", " : "") + names[i];
      if (names.size() > 5) out += ", ... (" + std::to_string(names.size()) + " total)";
    };
    list("only in first", only_in_a);
    list("only in second", only_in_b);
    list("shape mismatch", shape_mismatches);
    list("dtype mismatch", dtype_mismatches);
    return out.empty() ? "compatible" : out;
  }
};

// All name lists are sorted.
inline CompatReport validate_compat(const CheckpointManifest& a, const CheckpointManifest& b) {
  CompatReport report;
  for (const auto& name : a.sorted_names()) {
    const auto* other = b.find(name);
    if (!other) {
      report.only_in_a.push_back(name);
      continue;
    }
    const auto& mine = a.at(name);
    if (mine.shape != other->shape) report.shape_mismatches.push_back(name);
    if (mine.dtype != other->dtype) report.dtype_mismatches.push_back(name);
  }
  for (const auto& name : b.sorted_names()) {
    if (!a.contains(name)) report.only_in_b.push_back(name);
  }
  return report;
}

}  // namespace patchkit
