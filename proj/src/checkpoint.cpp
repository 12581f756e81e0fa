#include <zlib.h>

#include <bit>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>

#include "parshare/errors.hpp"
#include "parshare/training.hpp"

namespace parshare {

namespace {

constexpr char kMagic[8] = {'P', 'S', 'H', 'R', 'C', 'K', 'P', 'T'};
constexpr std::uint8_t kFloat32 = 1;

std::uint32_t crc(const char* data, std::size_t size) {
  return static_cast<std::uint32_t>(
      crc32(crc32(0L, Z_NULL, 0), reinterpret_cast<const Bytef*>(data), static_cast<uInt>(size)));
}

class Writer {
 public:
  void bytes(const char* p, std::size_t n) { out_.append(p, n); }
  void u8(std::uint8_t v) { out_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  std::size_t size() const { return out_.size(); }
  const std::string& str() const { return out_; }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(const std::string& data) : data_(data) {}
  const char* take(std::size_t n) {
    if (n > data_.size() - pos_) throw IntegrityError("checkpoint is truncated");
    const char* p = data_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::uint8_t u8() { return static_cast<std::uint8_t>(*take(1)); }
  std::uint32_t u32() {
    const auto* p = reinterpret_cast<const unsigned char*>(take(4));
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    const auto* p = reinterpret_cast<const unsigned char*>(take(8));
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
  }
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == data_.size(); }
  const char* at(std::size_t pos) const { return data_.data() + pos; }

 private:
  const std::string& data_;
  std::size_t pos_ = 0;
};

std::string real(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::string header_text(const Checkpoint& c) {
  std::ostringstream h;
  const auto& m = c.model;
  h << "[model]\n"
    << "num_layers = " << m.num_layers << '\n'
    << "d_model = " << m.d_model << '\n'
    << "d_ff = " << m.d_ff << '\n'
    << "heads = " << m.heads << '\n'
    << "vocab_size = " << m.vocab_size << '\n'
    << "dropout = " << real(m.dropout) << '\n'
    << "max_position = " << m.max_position << '\n'
    << "norm = " << to_string(m.norm) << '\n'
    << "scaling = " << to_string(m.scaling) << '\n'
    << "[plan]\n"
    << c.plan.serialize() << "[state]\n"
    << "vocab_hash = " << c.vocab_hash << '\n'
    << "step = " << c.step << '\n'
    << "epoch = " << c.epoch << '\n'
    << "batch_in_epoch = " << c.batch_in_epoch << '\n'
    << "best_metric = " << real(c.best_metric) << '\n'
    << "best_dev_loss = " << real(c.best_dev_loss) << '\n'
    << "best_step = " << c.best_step << '\n'
    << "evals_since_best = " << c.evals_since_best << '\n'
    << "adam_steps = " << c.adam_steps << '\n';
  return h.str();
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

void parse_header(const std::string& text, Checkpoint& c) {
  std::istringstream in(text);
  std::string line, section, plan_text;
  std::map<std::string, std::string> model, state;
  while (std::getline(in, line)) {
    const auto t = trim(line);
    if (t.empty()) continue;
    if (t.front() == '[') {
      section = t;
      continue;
    }
    if (section == "[plan]") {
      plan_text += t + '\n';
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw IntegrityError("malformed checkpoint header line: " + t);
    auto& dst = section == "[model]" ? model : state;
    if (section != "[model]" && section != "[state]") throw IntegrityError("unknown checkpoint header section");
    dst[trim(t.substr(0, eq))] = trim(t.substr(eq + 1));
  }
  auto get = [](std::map<std::string, std::string>& kv, const char* key) {
    auto it = kv.find(key);
    if (it == kv.end()) throw IntegrityError(std::string("checkpoint header lacks ") + key);
    return it->second;
  };
  try {
    c.model.num_layers = std::stoi(get(model, "num_layers"));
    c.model.d_model = std::stoi(get(model, "d_model"));
    c.model.d_ff = std::stoi(get(model, "d_ff"));
    c.model.heads = std::stoi(get(model, "heads"));
    c.model.vocab_size = std::stoi(get(model, "vocab_size"));
    c.model.dropout = std::stod(get(model, "dropout"));
    c.model.max_position = std::stoi(get(model, "max_position"));
    c.model.norm = parse_norm_placement(get(model, "norm"));
    c.model.scaling = parse_score_scaling(get(model, "scaling"));
    c.vocab_hash = std::stoull(get(state, "vocab_hash"));
    c.step = std::stoull(get(state, "step"));
    c.epoch = std::stoull(get(state, "epoch"));
    c.batch_in_epoch = std::stoull(get(state, "batch_in_epoch"));
    c.best_metric = std::stod(get(state, "best_metric"));
    c.best_dev_loss = std::stod(get(state, "best_dev_loss"));
    c.best_step = std::stoull(get(state, "best_step"));
    c.evals_since_best = std::stoull(get(state, "evals_since_best"));
    c.adam_steps = std::stoull(get(state, "adam_steps"));
  } catch (const std::logic_error&) {
    throw IntegrityError("checkpoint header has a malformed number");
  }
  c.plan = SharingPlan::parse(plan_text, c.model);
}

void write_record(Writer& w, const std::string& name, const Shape& shape, std::span<const float> values) {
  const std::size_t start = w.size();
  w.u32(static_cast<std::uint32_t>(name.size()));
  w.bytes(name.data(), name.size());
  w.u8(kFloat32);
  w.u32(static_cast<std::uint32_t>(shape.size()));
  for (auto e : shape) w.u64(e);
  for (float x : values) w.u32(std::bit_cast<std::uint32_t>(x));
  w.u32(crc(w.str().data() + start, w.size() - start));
}

struct Record {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

Record read_record(Reader& r) {
  const std::size_t start = r.pos();
  Record rec;
  const auto len = r.u32();
  rec.name.assign(r.take(len), len);
  if (r.u8() != kFloat32) throw IntegrityError("checkpoint record " + rec.name + " has an unknown dtype");
  const auto rank = r.u32();
  if (rank > 8) throw IntegrityError("checkpoint record " + rec.name + " has rank " + std::to_string(rank));
  for (std::uint32_t i = 0; i < rank; ++i) rec.shape.push_back(r.u64());
  const std::size_t n = shape_size(rec.shape);
  if (n > (1ull << 34)) throw IntegrityError("checkpoint record " + rec.name + " is implausibly large");
  rec.values.resize(n);
  for (auto& x : rec.values) x = std::bit_cast<float>(r.u32());
  const std::size_t end = r.pos();
  if (r.u32() != crc(r.at(start), end - start)) throw IntegrityError("checksum mismatch in record " + rec.name);
  return rec;
}

}  // namespace

void save_checkpoint(const Checkpoint& c, const std::string& path) {
  const std::size_t n = c.cells.size();
  if (c.names.size() != n || c.adam_m.size() != n || c.adam_v.size() != n) {
    throw IntegrityError("inconsistent checkpoint: names, cells and optimizer state differ in count");
  }
  Writer w;
  w.bytes(kMagic, sizeof kMagic);
  w.u32(kCheckpointVersion);
  const auto header = header_text(c);
  w.u64(header.size());
  w.bytes(header.data(), header.size());
  w.u32(crc(header.data(), header.size()));
  w.u64(3 * n);
  for (std::size_t i = 0; i < n; ++i) write_record(w, "cell/" + c.names[i], c.cells[i].shape(), c.cells[i].data());
  for (std::size_t i = 0; i < n; ++i) {
    write_record(w, "adam.m/" + c.names[i], c.cells[i].shape(), c.adam_m[i]);
  }
  for (std::size_t i = 0; i < n; ++i) {
    write_record(w, "adam.v/" + c.names[i], c.cells[i].shape(), c.adam_v[i]);
  }
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IntegrityError("cannot write checkpoint " + tmp);
    out.write(w.str().data(), static_cast<std::streamsize>(w.size()));
    if (!out) throw IntegrityError("failed writing checkpoint " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IntegrityError("cannot open checkpoint " + path);
  const std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Reader r(data);
  if (data.size() < sizeof kMagic || std::string(r.take(sizeof kMagic), sizeof kMagic) !=
                                         std::string(kMagic, sizeof kMagic)) {
    throw IntegrityError(path + " is not a checkpoint");
  }
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    throw IntegrityError("checkpoint format version " + std::to_string(version) + " is not supported");
  }
  const auto header_size = r.u64();
  if (header_size > data.size()) throw IntegrityError("checkpoint is truncated");
  const std::string header(r.take(header_size), header_size);
  if (r.u32() != crc(header.data(), header.size())) throw IntegrityError("checksum mismatch in checkpoint header");
  Checkpoint c;
  parse_header(header, c);
  const auto count = r.u64();
  if (count % 3 != 0 || count > data.size()) throw IntegrityError("checkpoint has a malformed record count");
  const std::size_t n = count / 3;
  for (std::size_t i = 0; i < n; ++i) {
    auto rec = read_record(r);
    if (rec.name.rfind("cell/", 0) != 0) throw IntegrityError("unexpected checkpoint record " + rec.name);
    c.names.push_back(rec.name.substr(5));
    c.cells.emplace_back(rec.shape, std::move(rec.values));
  }
  for (auto* moments : {&c.adam_m, &c.adam_v}) {
    const std::string prefix = moments == &c.adam_m ? "adam.m/" : "adam.v/";
    for (std::size_t i = 0; i < n; ++i) {
      auto rec = read_record(r);
      if (rec.name != prefix + c.names[i] || rec.shape != c.cells[i].shape()) {
        throw IntegrityError("unexpected checkpoint record " + rec.name);
      }
      moments->push_back(std::move(rec.values));
    }
  }
  if (!r.done()) throw IntegrityError("checkpoint has trailing bytes");
  return c;
}

}  // namespace parshare
