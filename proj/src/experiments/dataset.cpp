#include "afflow/experiments/dataset.hpp"

#include <bit>
#include <fstream>
#include <iterator>

#include "afflow/errors.hpp"

namespace afflow::experiments {

namespace {

constexpr char kMagic[4] = {'A', 'F', 'D', 'S'};
constexpr std::size_t kHeaderBytes = 4 + 4 * 4 + 1;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

std::uint32_t get_u32(const std::string& b, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(b[at + i])) << (8 * i);
  return v;
}

std::uint32_t to_u32(std::size_t v, const char* what) {
  if (v > 0xffffffffu) throw FormatError(std::string("dataset: ") + what + " exceeds u32");
  return static_cast<std::uint32_t>(v);
}

}  // namespace

void validate(const Dataset& ds) {
  if (ds.data.size() != ds.n * ds.row_size())
    throw ShapeError("dataset: " + std::to_string(ds.data.size()) + " values for n=" +
                     std::to_string(ds.n) + ", D=" + std::to_string(ds.positions) +
                     ", C=" + std::to_string(ds.channels));
  if (ds.labels.size() != (ds.labeled ? ds.n : 0))
    throw ShapeError("dataset: " + std::to_string(ds.labels.size()) + " labels for n=" +
                     std::to_string(ds.n));
}

std::string encode_dataset(const Dataset& ds) {
  validate(ds);
  std::string out(kMagic, 4);
  put_u32(out, kDatasetVersion);
  put_u32(out, to_u32(ds.n, "n"));
  put_u32(out, to_u32(ds.positions, "D"));
  put_u32(out, to_u32(ds.channels, "C"));
  out.push_back(ds.labeled ? 1 : 0);
  out.reserve(out.size() + 4 * (ds.data.size() + ds.labels.size()));
  for (float v : ds.data) put_u32(out, std::bit_cast<std::uint32_t>(v));
  for (std::uint32_t l : ds.labels) put_u32(out, l);
  return out;
}

Dataset decode_dataset(const std::string& bytes) {
  if (bytes.size() < 4 || bytes.compare(0, 4, kMagic, 4) != 0)
    throw FormatError("dataset: bad magic (expected AFDS)");
  if (bytes.size() < kHeaderBytes)
    throw FormatError("dataset: truncated header: expected " + std::to_string(kHeaderBytes) +
                      " bytes, got " + std::to_string(bytes.size()));
  const std::uint32_t version = get_u32(bytes, 4);
  if (version != kDatasetVersion)
    throw FormatError("dataset: version " + std::to_string(version) + ", expected " +
                      std::to_string(kDatasetVersion));
  Dataset ds;
  ds.n = get_u32(bytes, 8);
  ds.positions = get_u32(bytes, 12);
  ds.channels = get_u32(bytes, 16);
  const unsigned char flag = static_cast<unsigned char>(bytes[20]);
  if (flag > 1) throw FormatError("dataset: has_labels must be 0 or 1");
  ds.labeled = flag == 1;
  const std::size_t values = ds.n * ds.row_size();
  const std::size_t expected = kHeaderBytes + 4 * values + (ds.labeled ? 4 * ds.n : 0);
  if (bytes.size() != expected)
    throw FormatError("dataset: expected " + std::to_string(expected) + " bytes, got " +
                      std::to_string(bytes.size()));
  ds.data.resize(values);
  for (std::size_t i = 0; i < values; ++i)
    ds.data[i] = std::bit_cast<float>(get_u32(bytes, kHeaderBytes + 4 * i));
  if (ds.labeled) {
    ds.labels.resize(ds.n);
    for (std::size_t i = 0; i < ds.n; ++i)
      ds.labels[i] = get_u32(bytes, kHeaderBytes + 4 * (values + i));
  }
  return ds;
}

void save_dataset(const Dataset& ds, const std::string& path) {
  const std::string bytes = encode_dataset(ds);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("dataset: cannot open '" + path + "' for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw FormatError("dataset: write to '" + path + "' failed");
}

Dataset load_dataset(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("dataset: cannot open '" + path + "'");
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_dataset(bytes);
}

ad::Tensor rows_tensor(const Dataset& ds, std::size_t begin, std::size_t end) {
  if (begin > end || end > ds.n) throw ShapeError("dataset: row range out of bounds");
  const std::size_t per = ds.row_size();
  std::vector<double> v(ds.data.begin() + static_cast<std::ptrdiff_t>(begin * per),
                        ds.data.begin() + static_cast<std::ptrdiff_t>(end * per));
  return ad::Tensor({end - begin, ds.positions, ds.channels}, std::move(v));
}

ad::Tensor gather_rows(const Dataset& ds, std::span<const std::size_t> rows) {
  const std::size_t per = ds.row_size();
  std::vector<double> v;
  v.reserve(rows.size() * per);
  for (std::size_t r : rows) {
    if (r >= ds.n) throw ShapeError("dataset: row " + std::to_string(r) + " out of range");
    v.insert(v.end(), ds.data.begin() + static_cast<std::ptrdiff_t>(r * per),
             ds.data.begin() + static_cast<std::ptrdiff_t>((r + 1) * per));
  }
  return ad::Tensor({rows.size(), ds.positions, ds.channels}, std::move(v));
}

Dataset from_tensor(const ad::Tensor& t, std::vector<std::uint32_t> labels) {
  if (t.rank() != 3) throw ShapeError("dataset: expected a [n, D, C] tensor");
  Dataset ds;
  ds.n = t.extent(0);
  ds.positions = t.extent(1);
  ds.channels = t.extent(2);
  ds.data.reserve(t.size());
  for (double v : t.values()) ds.data.push_back(static_cast<float>(v));
  ds.labeled = !labels.empty();
  ds.labels = std::move(labels);
  validate(ds);
  return ds;
}

}  // namespace afflow::experiments
