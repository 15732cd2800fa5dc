#include "afflow/flow/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "afflow/errors.hpp"

namespace afflow::flow {

namespace {

constexpr char kMagic[4] = {'A', 'F', 'C', 'K'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

std::uint32_t checked_u32(std::size_t v, const char* what) {
  if (v > 0xffffffffu) throw FormatError(std::string("checkpoint: ") + what + " exceeds u32");
  return static_cast<std::uint32_t>(v);
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  void need(std::size_t n, const std::string& what) const {
    if (pos_ + n > bytes_.size())
      throw FormatError("checkpoint truncated reading " + what + ": expected " +
                        std::to_string(pos_ + n) + " bytes, file has " +
                        std::to_string(bytes_.size()));
  }
  std::uint32_t u32(const std::string& what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::string text(std::size_t n, const std::string& what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

std::string opt_name(const char* which, const std::string& name) {
  return std::string("opt.") + which + "." + name;
}

}  // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& r : records)
    if (r.name == name) return &r.tensor;
  return nullptr;
}

const Tensor& Checkpoint::require(const std::string& name) const {
  const Tensor* t = find(name);
  if (!t) throw FormatError("checkpoint: missing tensor '" + name + "'");
  return *t;
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::string out(kMagic, 4);
  put_u32(out, kCheckpointVersion);
  const std::string meta = ckpt.meta.dump();
  put_u32(out, checked_u32(meta.size(), "config length"));
  out += meta;
  for (const auto& r : ckpt.records) {
    put_u32(out, checked_u32(r.name.size(), "name length"));
    out += r.name;
    put_u32(out, checked_u32(r.tensor.rank(), "rank"));
    for (std::size_t e : r.tensor.shape()) put_u32(out, checked_u32(e, "extent"));
    for (double v : r.tensor.values()) {
      const float f = static_cast<float>(v);
      if (!std::isfinite(f))
        throw NumericError("checkpoint: non-finite value in '" + r.name + "'");
      put_u32(out, std::bit_cast<std::uint32_t>(f));
    }
  }
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  Reader in(bytes);
  if (in.text(4, "magic") != std::string(kMagic, 4)) throw FormatError("checkpoint: bad magic");
  const std::uint32_t version = in.u32("version");
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint: version " + std::to_string(version) + ", expected " +
                      std::to_string(kCheckpointVersion));
  Checkpoint ckpt;
  const std::uint32_t meta_len = in.u32("config length");
  try {
    ckpt.meta = nlohmann::json::parse(in.text(meta_len, "config"));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("checkpoint: config is not valid JSON: ") + e.what());
  }
  while (!in.done()) {
    TensorRecord r;
    r.name = in.text(in.u32("name length"), "name");
    const std::uint32_t rank = in.u32("rank of " + r.name);
    ad::Shape shape(rank);
    std::size_t count = 1;
    for (auto& e : shape) {
      e = in.u32("extents of " + r.name);
      count *= e;
    }
    in.need(4 * count, "payload of " + r.name);
    std::vector<double> values(count);
    for (double& v : values) v = static_cast<double>(std::bit_cast<float>(in.u32(r.name)));
    r.tensor = Tensor(shape, std::move(values));
    ckpt.records.push_back(std::move(r));
  }
  return ckpt;
}

void write_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  const std::string bytes = encode_checkpoint(ckpt);
  // write then rename so an interrupted save keeps the previous file
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("checkpoint: cannot open '" + tmp + "' for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw FormatError("checkpoint: write to '" + tmp + "' failed");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw FormatError("checkpoint: cannot rename to '" + path + "'");
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("checkpoint: cannot open '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

Checkpoint flow_checkpoint(FlowModel& model, const ad::OptimState* opt) {
  Checkpoint ckpt;
  ckpt.meta["flow"] = to_json(model.config);
  const auto params = named_params(model);
  for (const auto& p : params) ckpt.records.push_back({p.name, p.tensor});
  if (opt) {
    ckpt.meta["opt_step"] = opt->step;
    if (!opt->m.empty()) {
      if (opt->m.size() != params.size() || opt->v.size() != params.size())
        throw ShapeError("checkpoint: optimizer state does not match parameter list");
      for (std::size_t i = 0; i < params.size(); ++i) {
        ckpt.records.push_back({opt_name("m", params[i].name),
                                Tensor(params[i].tensor.shape(), opt->m[i])});
        ckpt.records.push_back({opt_name("v", params[i].name),
                                Tensor(params[i].tensor.shape(), opt->v[i])});
      }
    }
  }
  return ckpt;
}

namespace {

void copy_into(const Tensor& src, Tensor& dst, const std::string& name) {
  if (src.shape() != dst.shape())
    throw FormatError("checkpoint: '" + name + "' has shape " + ad::shape_string(src.shape()) +
                      ", model expects " + ad::shape_string(dst.shape()));
  const auto s = src.values();
  auto d = dst.mutable_values();
  std::copy(s.begin(), s.end(), d.begin());
}

}  // namespace

FlowModel model_from_checkpoint(const Checkpoint& ckpt) {
  if (!ckpt.meta.contains("flow")) throw FormatError("checkpoint: no flow config");
  FlowModel model = init_flow(flow_config_from_json(ckpt.meta.at("flow")), 0, OutputInit::kZero);
  for (auto& p : named_params(model)) copy_into(ckpt.require(p.name), p.tensor, p.name);
  return model;
}

ad::OptimState optimizer_from_checkpoint(const Checkpoint& ckpt, FlowModel& model,
                                         const ad::AdamWConfig& config) {
  ad::OptimState state;
  state.config = config;
  state.step = ckpt.meta.value("opt_step", std::uint64_t{0});
  const auto params = named_params(model);
  if (!ckpt.find(opt_name("m", params.front().name))) return state;
  for (const auto& p : params) {
    const Tensor& m = ckpt.require(opt_name("m", p.name));
    const Tensor& v = ckpt.require(opt_name("v", p.name));
    if (m.shape() != p.tensor.shape() || v.shape() != p.tensor.shape())
      throw FormatError("checkpoint: moment shape mismatch for '" + p.name + "'");
    state.m.emplace_back(m.values().begin(), m.values().end());
    state.v.emplace_back(v.values().begin(), v.values().end());
  }
  return state;
}

}  // namespace afflow::flow
