#include "mars/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>
#include <utility>
#include <sstream>

#include "json.hpp"
#include "mars/errors.hpp"

namespace mars {
namespace {

using nlohmann::json;

constexpr uint16_t kFormatVersion = 1;

std::string printable_magic(const std::string& m) {
  std::string out;
  for (char c : m) out.push_back(c >= 32 && c < 127 ? c : '?');
  return out;
}

class ByteWriter {
 public:
  void raw(const void* p, size_t n) {
    const auto* b = static_cast<const uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void magic(const char m[5]) { raw(m, 4); }
  void u8(uint8_t v) { buf_.push_back(v); }
  void u16(uint32_t v) {
    if (v > 0xFFFF) throw FormatError("value " + std::to_string(v) + " exceeds a 16-bit field");
    u8(static_cast<uint8_t>(v & 0xFF));
    u8(static_cast<uint8_t>(v >> 8));
  }
  void u32(uint64_t v) {
    if (v > 0xFFFFFFFFull)
      throw FormatError("value " + std::to_string(v) + " exceeds a 32-bit field");
    for (int i = 0; i < 4; ++i) u8(static_cast<uint8_t>((v >> (8 * i)) & 0xFF));
  }
  void i32(int64_t v) {
    if (v < std::numeric_limits<int32_t>::min() || v > std::numeric_limits<int32_t>::max())
      throw FormatError("value " + std::to_string(v) + " exceeds a signed 32-bit field");
    u32(static_cast<uint32_t>(static_cast<int32_t>(v)));
  }
  void i16(int64_t v) {
    if (v < std::numeric_limits<int16_t>::min() || v > std::numeric_limits<int16_t>::max())
      throw FormatError("value " + std::to_string(v) + " exceeds a signed 16-bit field");
    u16(static_cast<uint16_t>(static_cast<int16_t>(v)));
  }
  void f32(double v) { u32(std::bit_cast<uint32_t>(static_cast<float>(v))); }
  void f64(double v) {
    const uint64_t bits = std::bit_cast<uint64_t>(v);
    for (int i = 0; i < 8; ++i) u8(static_cast<uint8_t>((bits >> (8 * i)) & 0xFF));
  }
  const std::vector<uint8_t>& bytes() const { return buf_; }

 private:
  std::vector<uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::vector<uint8_t> b) : buf_(std::move(b)) {}
  size_t remaining() const { return buf_.size() - pos_; }
  void need(size_t n) const {
    if (remaining() < n) throw FormatError("truncated file");
  }
  std::string magic() {
    need(4);
    std::string m(reinterpret_cast<const char*>(buf_.data() + pos_), 4);
    pos_ += 4;
    return m;
  }
  uint8_t u8() {
    need(1);
    return buf_[pos_++];
  }
  uint16_t u16() {
    need(2);
    uint16_t v = static_cast<uint16_t>(buf_[pos_] | (buf_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(buf_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  int32_t i32() { return static_cast<int32_t>(u32()); }
  int16_t i16() { return static_cast<int16_t>(u16()); }
  double f32() { return static_cast<double>(std::bit_cast<float>(u32())); }
  double f64() {
    need(8);
    uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<uint64_t>(buf_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return std::bit_cast<double>(bits);
  }
  const uint8_t* take(size_t n) {
    need(n);
    const uint8_t* p = buf_.data() + pos_;
    pos_ += n;
    return p;
  }
  void expect_end() const {
    if (remaining() != 0)
      throw FormatError("trailing bytes after the last record (" + std::to_string(remaining()) +
                        " left)");
  }

 private:
  std::vector<uint8_t> buf_;
  size_t pos_ = 0;
};

void check_header(ByteReader& r, const char expected[5], const std::string& kind) {
  const std::string m = r.magic();
  if (m != expected)
    throw FormatError("not a " + kind + " file (magic '" + printable_magic(m) + "')");
  const uint16_t version = r.u16();
  if (version != kFormatVersion)
    throw FormatError("unsupported " + kind + " version " + std::to_string(version) +
                      " (expected " + std::to_string(kFormatVersion) + ")");
}

class BitWriter {
 public:
  explicit BitWriter(ByteWriter& out) : out_(out) {}
  void put(uint32_t value, int bits) {
    for (int b = 0; b < bits; ++b) {
      cur_ |= static_cast<uint8_t>(((value >> b) & 1u) << nbits_);
      if (++nbits_ == 8) flush();
    }
  }
  void align() {
    if (nbits_ > 0) flush();
  }

 private:
  void flush() {
    out_.u8(cur_);
    cur_ = 0;
    nbits_ = 0;
  }
  ByteWriter& out_;
  uint8_t cur_ = 0;
  int nbits_ = 0;
};

class BitReader {
 public:
  BitReader(const uint8_t* data, size_t nbytes) : data_(data), nbits_(nbytes * 8) {}
  uint32_t get(int bits) {
    uint32_t v = 0;
    for (int b = 0; b < bits; ++b) {
      if (pos_ >= nbits_) throw FormatError("truncated weight bit stream");
      const uint32_t bit = (data_[pos_ / 8] >> (pos_ % 8)) & 1u;
      v |= bit << b;
      ++pos_;
    }
    return v;
  }

 private:
  const uint8_t* data_;
  size_t nbits_;
  size_t pos_ = 0;
};

int32_t sign_extend(uint32_t value, int bits) {
  const uint32_t sign = 1u << (bits - 1);
  return static_cast<int32_t>((value ^ sign) - sign);
}

int ceil16(int v) { return (v + 15) / 16 * 16; }

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace

// ---------------------------------------------------------------- raw files

std::vector<uint8_t> read_bytes_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open file: " + path);
  f.seekg(0, std::ios::end);
  const std::streamoff size = f.tellg();
  f.seekg(0, std::ios::beg);
  std::vector<uint8_t> bytes(static_cast<size_t>(size));
  if (size > 0) f.read(reinterpret_cast<char*>(bytes.data()), size);
  if (!f) throw FormatError("failed to read file: " + path);
  return bytes;
}

void write_bytes_file(const std::string& path, const std::vector<uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot create file: " + path);
  if (!bytes.empty()) f.write(reinterpret_cast<const char*>(bytes.data()),
                              static_cast<std::streamsize>(bytes.size()));
  if (!f) throw FormatError("failed to write file: " + path);
}

std::string read_text_file(const std::string& path) {
  const std::vector<uint8_t> bytes = read_bytes_file(path);
  return std::string(bytes.begin(), bytes.end());
}

void write_text_file(const std::string& path, const std::string& text) {
  write_bytes_file(path, std::vector<uint8_t>(text.begin(), text.end()));
}

std::string sniff_magic(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open file: " + path);
  char m[4];
  f.read(m, 4);
  if (f.gcount() < 4) return "";
  return std::string(m, 4);
}

// ------------------------------------------------------- MRSW float tensors

void write_tensors(const std::string& path, const std::vector<Tensor>& tensors) {
  ByteWriter w;
  w.magic("MRSW");
  w.u16(kFormatVersion);
  w.u16(static_cast<uint32_t>(tensors.size()));
  for (const Tensor& t : tensors) {
    t.validate();
    if (t.dims.size() > 255) throw FormatError("tensor rank exceeds 255");
    w.u8(static_cast<uint8_t>(t.dims.size()));
    for (int d : t.dims) {
      if (d < 0) throw FormatError("negative tensor dimension");
      w.u32(static_cast<uint64_t>(d));
    }
    for (double v : t.data) w.f32(v);
  }
  write_bytes_file(path, w.bytes());
}

std::vector<Tensor> read_tensors(const std::string& path) {
  ByteReader r(read_bytes_file(path));
  check_header(r, "MRSW", "float tensor container");
  const int count = r.u16();
  std::vector<Tensor> tensors;
  tensors.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    const int rank = r.u8();
    std::vector<int> dims(static_cast<size_t>(rank));
    for (int& d : dims) {
      const uint32_t v = r.u32();
      if (v > static_cast<uint32_t>(std::numeric_limits<int>::max()))
        throw FormatError("tensor dimension exceeds the supported range");
      d = static_cast<int>(v);
    }
    const int64_t n = numel(dims);
    if (n < 0 || static_cast<uint64_t>(n) * 4 > r.remaining())
      throw FormatError("truncated tensor payload");
    Tensor t(dims);
    for (int64_t k = 0; k < n; ++k) t.data[static_cast<size_t>(k)] = r.f32();
    tensors.push_back(std::move(t));
  }
  r.expect_end();
  return tensors;
}

// ----------------------------------------------------- MRSQ quantized model

void write_quantized(const std::string& path, const QuantizedModel& model) {
  model.validate();
  ByteWriter w;
  w.magic("MRSQ");
  w.u16(kFormatVersion);
  w.u16(static_cast<uint32_t>(model.layers.size()));
  w.u16(static_cast<uint32_t>(model.in_ch));
  w.u16(static_cast<uint32_t>(model.in_h));
  w.u16(static_cast<uint32_t>(model.in_w));
  w.u8(static_cast<uint8_t>(model.b_w));
  w.u8(static_cast<uint8_t>(model.b_a));
  for (const QuantizedLayer& l : model.layers) {
    w.u8(l.type == LayerType::conv ? 0 : 1);
    w.u16(static_cast<uint32_t>(l.conv.out_ch));
    w.u16(static_cast<uint32_t>(l.conv.in_ch));
    w.u8(static_cast<uint8_t>(l.conv.kernel_h));
    w.u8(static_cast<uint8_t>(l.conv.kernel_w));
    w.u8(static_cast<uint8_t>(l.conv.stride));
    w.u8(static_cast<uint8_t>(l.conv.pad));
    w.u8(l.relu ? 1 : 0);
    w.u8(static_cast<uint8_t>(l.pool.window));
    w.u8(static_cast<uint8_t>(l.pool.stride));
    w.f64(l.scale);
    if (static_cast<int>(l.bias_codes.size()) != l.conv.out_ch)
      throw FormatError("bias code count does not match out_ch");
    for (int32_t b : l.bias_codes) w.i32(b);
    if (static_cast<int64_t>(l.codes.size()) != l.code_count())
      throw FormatError("weight code count does not match the layer shape");
    for (int32_t c : l.codes) w.i16(c);
  }
  write_bytes_file(path, w.bytes());
}

QuantizedModel read_quantized(const std::string& path) {
  ByteReader r(read_bytes_file(path));
  check_header(r, "MRSQ", "quantized model");
  QuantizedModel m;
  const int layer_count = r.u16();
  m.in_ch = r.u16();
  m.in_h = r.u16();
  m.in_w = r.u16();
  m.b_w = r.u8();
  m.b_a = r.u8();
  for (int i = 0; i < layer_count; ++i) {
    QuantizedLayer l;
    const int type = r.u8();
    if (type > 1) throw FormatError("unknown layer type " + std::to_string(type));
    l.type = type == 0 ? LayerType::conv : LayerType::fc;
    l.conv.out_ch = r.u16();
    l.conv.in_ch = r.u16();
    l.conv.kernel_h = r.u8();
    l.conv.kernel_w = r.u8();
    l.conv.stride = r.u8();
    l.conv.pad = r.u8();
    l.relu = r.u8() != 0;
    l.pool.window = r.u8();
    l.pool.stride = r.u8();
    l.scale = r.f64();
    if (!std::isfinite(l.scale)) throw FormatError("layer scale is not finite");
    l.bias_codes.resize(static_cast<size_t>(l.conv.out_ch));
    for (int32_t& b : l.bias_codes) b = r.i32();
    const int64_t n = l.code_count();
    if (static_cast<uint64_t>(n) * 2 > r.remaining()) throw FormatError("truncated weight codes");
    l.codes.resize(static_cast<size_t>(n));
    for (int32_t& c : l.codes) c = r.i16();
    l.name = (l.type == LayerType::conv ? "conv" : "fc") + std::to_string(i);
    m.layers.push_back(std::move(l));
  }
  r.expect_end();
  m.validate();
  return m;
}

// ------------------------------------------------------- MRSM keep mask

void write_mask(const std::string& path, const GroupMask& mask, int alpha, int n) {
  ByteWriter w;
  w.magic("MRSM");
  w.u16(kFormatVersion);
  w.u16(static_cast<uint32_t>(alpha));
  w.u16(static_cast<uint32_t>(n));
  w.u16(static_cast<uint32_t>(mask.keep.size()));
  for (const auto& layer : mask.keep) {
    w.u32(layer.size());
    uint8_t cur = 0;
    int nbits = 0;
    for (uint8_t bit : layer) {
      cur |= static_cast<uint8_t>((bit ? 1 : 0) << nbits);
      if (++nbits == 8) {
        w.u8(cur);
        cur = 0;
        nbits = 0;
      }
    }
    if (nbits > 0) w.u8(cur);
  }
  write_bytes_file(path, w.bytes());
}

MaskFile read_mask(const std::string& path) {
  ByteReader r(read_bytes_file(path));
  check_header(r, "MRSM", "group mask");
  MaskFile f;
  f.alpha = r.u16();
  f.n = r.u16();
  if (f.alpha <= 0 || f.n <= 0) throw FormatError("mask group geometry must be positive");
  const int layers = r.u16();
  for (int i = 0; i < layers; ++i) {
    const uint32_t count = r.u32();
    const size_t nbytes = (count + 7) / 8;
    const uint8_t* bytes = r.take(nbytes);
    std::vector<uint8_t> keep(count);
    for (uint32_t b = 0; b < count; ++b) keep[b] = (bytes[b / 8] >> (b % 8)) & 1;
    f.mask.keep.push_back(std::move(keep));
  }
  r.expect_end();
  return f;
}

// -------------------------------------------------- MRSI mapped accelerator

void write_mapped(const std::string& path, const MappedNetwork& net) {
  ByteWriter w;
  w.magic("MRSI");
  w.u16(kFormatVersion);
  w.u16(static_cast<uint32_t>(net.layers.size()));
  w.u16(static_cast<uint32_t>(net.in_ch));
  w.u16(static_cast<uint32_t>(net.in_h));
  w.u16(static_cast<uint32_t>(net.in_w));
  for (const MappedLayer& l : net.layers) {
    w.u8(l.type == LayerType::conv ? 0 : 1);
    w.u16(static_cast<uint32_t>(l.conv.out_ch));
    w.u16(static_cast<uint32_t>(l.conv.in_ch));
    w.u8(static_cast<uint8_t>(l.conv.kernel_h));
    w.u8(static_cast<uint8_t>(l.conv.kernel_w));
    w.u8(static_cast<uint8_t>(l.conv.stride));
    w.u8(static_cast<uint8_t>(l.conv.pad));
    w.u8(l.relu ? 1 : 0);
    w.u8(static_cast<uint8_t>(l.pool.window));
    w.u8(static_cast<uint8_t>(l.pool.stride));
    w.u8(static_cast<uint8_t>(l.b_w));
    w.u8(static_cast<uint8_t>(l.b_a));
    w.f64(l.scale);
    if (static_cast<int>(l.bias_codes.size()) != l.conv.out_ch)
      throw FormatError("bias code count does not match out_ch");
    for (int32_t b : l.bias_codes) w.i32(b);
    w.u16(static_cast<uint32_t>(l.present_slabs.size()));
    for (int s : l.present_slabs) w.u16(static_cast<uint32_t>(s));
    w.u16(static_cast<uint32_t>(l.batches.size()));
    for (const MappedBatch& b : l.batches) {
      w.u16(static_cast<uint32_t>(b.core));
      w.u16(static_cast<uint32_t>(b.index));
      w.u16(static_cast<uint32_t>(b.set_ids.size()));
    }
    for (const MappedBatch& b : l.batches)
      for (int id : b.set_ids) w.u16(l.index_words[static_cast<size_t>(id)]);
    BitWriter bits(w);
    const uint32_t mask = (1u << l.b_w) - 1;
    for (const MappedBatch& b : l.batches)
      for (int id : b.set_ids)
        for (const WeightGroup& g : l.sets[static_cast<size_t>(id)].groups)
          for (int32_t code : g.codes)
            bits.put(static_cast<uint32_t>(code) & mask, l.b_w);
    bits.align();
  }
  write_bytes_file(path, w.bytes());
}

MappedNetwork read_mapped(const std::string& path) {
  ByteReader r(read_bytes_file(path));
  check_header(r, "MRSI", "mapped accelerator image");
  MappedNetwork net;
  const int layer_count = r.u16();
  net.in_ch = r.u16();
  net.in_h = r.u16();
  net.in_w = r.u16();
  constexpr int kCores = 4;

  for (int li = 0; li < layer_count; ++li) {
    const std::string where = " at layer " + std::to_string(li);
    QuantizedLayer ql;
    const int type = r.u8();
    if (type > 1) throw FormatError("unknown layer type " + std::to_string(type) + where);
    ql.type = type == 0 ? LayerType::conv : LayerType::fc;
    ql.conv.out_ch = r.u16();
    ql.conv.in_ch = r.u16();
    ql.conv.kernel_h = r.u8();
    ql.conv.kernel_w = r.u8();
    ql.conv.stride = r.u8();
    ql.conv.pad = r.u8();
    ql.relu = r.u8() != 0;
    ql.pool.window = r.u8();
    ql.pool.stride = r.u8();
    const int b_w = r.u8();
    const int b_a = r.u8();
    if (b_w < 2 || b_w > 8) throw FormatError("weight bit width out of range" + where);
    ql.scale = r.f64();
    if (!std::isfinite(ql.scale)) throw FormatError("layer scale is not finite" + where);
    ql.bias_codes.resize(static_cast<size_t>(ql.conv.out_ch));
    for (int32_t& b : ql.bias_codes) b = r.i32();
    ql.name = (ql.type == LayerType::conv ? "conv" : "fc") + std::to_string(li);

    const int padded_out = ceil16(ql.conv.out_ch);
    const int padded_in = ceil16(ql.conv.in_ch);
    const int n_slabs = padded_out / 16;
    const int n_chunks = padded_in / 16;

    const int n_present = r.u16();
    std::vector<int> present(static_cast<size_t>(n_present));
    for (int i = 0; i < n_present; ++i) {
      present[static_cast<size_t>(i)] = r.u16();
      if (present[static_cast<size_t>(i)] >= n_slabs)
        throw FormatError("slab directory entry outside the kernel slabs" + where);
      if (i > 0 && present[static_cast<size_t>(i)] <= present[static_cast<size_t>(i - 1)])
        throw FormatError("slab directory must be strictly ascending" + where);
    }

    struct BatchEntry {
      int core = 0, index = 0, count = 0;
    };
    const int n_batches = r.u16();
    std::vector<BatchEntry> table(static_cast<size_t>(n_batches));
    int64_t total_sets = 0;
    for (BatchEntry& e : table) {
      e.core = r.u16();
      e.index = r.u16();
      e.count = r.u16();
      if (e.core >= kCores) throw FormatError("batch core outside the four cores" + where);
      if (e.count < 1 || e.count > 64)
        throw FormatError("batch slot count " + std::to_string(e.count) +
                          " outside [1, 64]" + where);
      total_sets += e.count;
    }
    std::vector<uint16_t> words(static_cast<size_t>(total_sets));
    for (uint16_t& wd : words) wd = r.u16();
    const size_t stream_bytes =
        (static_cast<size_t>(total_sets) * 256 * static_cast<size_t>(b_w) + 7) / 8;
    BitReader bits(r.take(stream_bytes), stream_bytes);

    // Walk the index stream against the slab directory, scattering codes
    // back into a logical weight grid.
    std::vector<std::vector<int>> core_slabs(kCores);
    for (int s : present) core_slabs[static_cast<size_t>(s % kCores)].push_back(s);
    std::vector<size_t> cursor(kCores, 0);
    std::vector<int> remaining(kCores, 0), cur_slab(kCores, -1);
    ql.codes.assign(static_cast<size_t>(ql.code_count()), 0);
    std::set<int64_t> seen_positions;
    const int wmax = (1 << (b_w - 1)) - 1;
    size_t wi = 0;
    for (const BatchEntry& e : table) {
      for (int k = 0; k < e.count; ++k, ++wi) {
        IndexFields f;
        try {
          f = decode_index(words[wi]);
        } catch (const MappingError& err) {
          throw FormatError(std::string("bad index word: ") + err.what() + where);
        }
        const size_t core = static_cast<size_t>(e.core);
        if (f.first) {
          if (remaining[core] != 0)
            throw FormatError("index stream opens a slab run before closing one" + where);
          if (cursor[core] >= core_slabs[core].size())
            throw FormatError("index stream has more slab runs than directory slabs" + where);
          cur_slab[core] = core_slabs[core][cursor[core]++];
          remaining[core] = f.count;
        }
        if (remaining[core] <= 0)
          throw FormatError("index stream carries a set outside any slab run" + where);
        --remaining[core];
        const int ky = f.spatial / 3, kx = f.spatial % 3;
        if (ky >= ql.conv.kernel_h || kx >= ql.conv.kernel_w)
          throw FormatError("index spatial position outside the kernel" + where);
        if (f.chunk >= n_chunks)
          throw FormatError("index chunk outside the input channels" + where);
        const int64_t key = (static_cast<int64_t>(cur_slab[core]) * 9 + f.spatial) * 32 + f.chunk;
        if (!seen_positions.insert(key).second)
          throw FormatError("duplicate group-set position in the index stream" + where);

        bool any_nonzero = false;
        for (int kk = 0; kk < 16; ++kk) {
          for (int ii = 0; ii < 16; ++ii) {
            const int32_t code = sign_extend(bits.get(b_w), b_w);
            if (code < -wmax || code > wmax)
              throw FormatError("weight code " + std::to_string(code) + " outside " +
                                std::to_string(b_w) + "-bit symmetric range" + where);
            any_nonzero = any_nonzero || code != 0;
            const int oc = cur_slab[core] * 16 + kk;
            const int ic = f.chunk * 16 + ii;
            if (oc < ql.conv.out_ch && ic < ql.conv.in_ch) {
              const size_t at = ((static_cast<size_t>(oc) * ql.conv.in_ch + ic) *
                                     ql.conv.kernel_h +
                                 ky) *
                                    ql.conv.kernel_w +
                                kx;
              ql.codes[at] = code;
            } else if (code != 0) {
              throw FormatError("padded region carries nonzero weight codes" + where);
            }
          }
        }
        if (!any_nonzero)
          throw FormatError("stored group-set is all zero" + where);
      }
    }
    for (int c = 0; c < kCores; ++c) {
      if (remaining[static_cast<size_t>(c)] != 0)
        throw FormatError("index stream truncates a slab run" + where);
      if (cursor[static_cast<size_t>(c)] != core_slabs[static_cast<size_t>(c)].size())
        throw FormatError("slab directory lists a slab the stream never opens" + where);
    }

    MappedLayer remapped;
    try {
      remapped = map_layer(ql, b_w, b_a);
    } catch (const MappingError& err) {
      throw FormatError(std::string("mapped image violates mapping constraints: ") + err.what() +
                        where);
    }
    // Round-trip check: re-encoding the reconstructed weights must reproduce
    // the stored schedule and stream bit for bit.
    bool same = remapped.present_slabs == present &&
                remapped.batches.size() == table.size();
    if (same) {
      size_t vi = 0;
      for (size_t b = 0; b < table.size() && same; ++b) {
        const MappedBatch& mb = remapped.batches[b];
        same = mb.core == table[b].core && mb.index == table[b].index &&
               static_cast<int>(mb.set_ids.size()) == table[b].count;
        for (size_t k = 0; same && k < mb.set_ids.size(); ++k, ++vi)
          same = remapped.index_words[static_cast<size_t>(mb.set_ids[k])] == words[vi];
      }
    }
    if (!same)
      throw FormatError("mapped image fails round-trip validation" + where);
    net.layers.push_back(std::move(remapped));
  }
  r.expect_end();
  return net;
}

// -------------------------------------------------------- descriptor JSON

namespace {

void reject_unknown(const json& obj, const std::set<std::string>& allowed,
                    const std::string& ctx) {
  for (auto it = obj.begin(); it != obj.end(); ++it)
    if (!allowed.count(it.key()))
      throw FormatError("unknown key '" + it.key() + "' in " + ctx);
}

int get_int(const json& obj, const std::string& key, const std::string& ctx,
            bool required = true, int fallback = 0) {
  if (!obj.contains(key)) {
    if (required) throw FormatError("missing key '" + key + "' in " + ctx);
    return fallback;
  }
  if (!obj[key].is_number_integer())
    throw FormatError("key '" + key + "' in " + ctx + " must be an integer");
  return obj[key].get<int>();
}

double get_double(const json& obj, const std::string& key, const std::string& ctx,
                  double fallback) {
  if (!obj.contains(key)) return fallback;
  if (!obj[key].is_number())
    throw FormatError("key '" + key + "' in " + ctx + " must be a number");
  return obj[key].get<double>();
}

bool get_bool(const json& obj, const std::string& key, const std::string& ctx, bool fallback) {
  if (!obj.contains(key)) return fallback;
  if (!obj[key].is_boolean())
    throw FormatError("key '" + key + "' in " + ctx + " must be a boolean");
  return obj[key].get<bool>();
}

std::vector<int> get_int_array(const json& obj, const std::string& key, const std::string& ctx) {
  if (!obj.contains(key)) throw FormatError("missing key '" + key + "' in " + ctx);
  if (!obj[key].is_array())
    throw FormatError("key '" + key + "' in " + ctx + " must be an array");
  std::vector<int> out;
  for (const json& v : obj[key]) {
    if (!v.is_number_integer())
      throw FormatError("key '" + key + "' in " + ctx + " must hold integers");
    out.push_back(v.get<int>());
  }
  return out;
}

}  // namespace

NetworkDescriptor parse_descriptor(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("descriptor JSON parse error: ") + e.what());
  }
  if (!j.is_object()) throw FormatError("descriptor root must be an object");
  reject_unknown(j, {"input", "layers", "quant", "sparsity"}, "descriptor");

  NetworkDescriptor d;
  const std::vector<int> input = get_int_array(j, "input", "descriptor");
  if (input.size() != 3 || input[0] <= 0 || input[1] <= 0 || input[2] <= 0)
    throw FormatError("descriptor input must be [channels, height, width], all positive");
  d.in_ch = input[0];
  d.in_h = input[1];
  d.in_w = input[2];

  if (!j.contains("layers") || !j["layers"].is_array())
    throw FormatError("descriptor needs a 'layers' array");
  int li = 0;
  for (const json& jl : j["layers"]) {
    const std::string ctx = "layer " + std::to_string(li);
    if (!jl.is_object()) throw FormatError(ctx + " must be an object");
    if (!jl.contains("type") || !jl["type"].is_string())
      throw FormatError(ctx + " needs a string 'type'");
    const std::string type = jl["type"].get<std::string>();

    if (type == "conv") {
      reject_unknown(jl,
                     {"type", "shape", "stride", "pad", "has_bn", "has_relu", "pool",
                      "pool_stride", "name"},
                     ctx);
      LayerDescriptor ld;
      ld.type = "conv";
      ld.shape = get_int_array(jl, "shape", ctx);
      if (ld.shape.size() != 3 || ld.shape[0] <= 0 || ld.shape[1] <= 0 || ld.shape[2] <= 0)
        throw FormatError("conv shape must be [out_ch, kernel_h, kernel_w] in " + ctx);
      ld.stride = get_int(jl, "stride", ctx, false, 1);
      ld.pad = get_int(jl, "pad", ctx, false, 0);
      ld.has_bn = get_bool(jl, "has_bn", ctx, false);
      ld.has_relu = get_bool(jl, "has_relu", ctx, true);
      ld.pool = get_int(jl, "pool", ctx, false, 0);
      ld.pool_stride = get_int(jl, "pool_stride", ctx, false, 0);
      if (ld.pool < 0 || (ld.pool == 0 && ld.pool_stride != 0))
        throw FormatError("pool settings are inconsistent in " + ctx);
      if (ld.pool > 0 && ld.pool_stride == 0) ld.pool_stride = ld.pool;
      if (ld.stride < 1 || ld.pad < 0)
        throw FormatError("stride must be >= 1 and pad >= 0 in " + ctx);
      if (jl.contains("name")) {
        if (!jl["name"].is_string()) throw FormatError("name must be a string in " + ctx);
        ld.name = jl["name"].get<std::string>();
      }
      d.layers.push_back(std::move(ld));
    } else if (type == "fc") {
      reject_unknown(jl, {"type", "shape", "has_bn", "has_relu", "name"}, ctx);
      LayerDescriptor ld;
      ld.type = "fc";
      ld.shape = get_int_array(jl, "shape", ctx);
      if (ld.shape.size() != 1 || ld.shape[0] <= 0)
        throw FormatError("fc shape must be [out_ch] in " + ctx);
      ld.has_bn = get_bool(jl, "has_bn", ctx, false);
      ld.has_relu = get_bool(jl, "has_relu", ctx, true);
      if (jl.contains("name")) {
        if (!jl["name"].is_string()) throw FormatError("name must be a string in " + ctx);
        ld.name = jl["name"].get<std::string>();
      }
      d.layers.push_back(std::move(ld));
    } else if (type == "pool") {
      reject_unknown(jl, {"type", "shape", "stride"}, ctx);
      const std::vector<int> shape = get_int_array(jl, "shape", ctx);
      if (shape.size() != 1 || shape[0] < 1)
        throw FormatError("pool shape must be [window] in " + ctx);
      if (d.layers.empty() || d.layers.back().type != "conv" || d.layers.back().pool != 0)
        throw FormatError("pool layer needs a preceding unpooled conv in " + ctx);
      d.layers.back().pool = shape[0];
      d.layers.back().pool_stride = get_int(jl, "stride", ctx, false, shape[0]);
      if (d.layers.back().pool_stride < 1)
        throw FormatError("pool stride must be >= 1 in " + ctx);
    } else {
      throw FormatError("unknown layer type '" + type + "' in " + ctx);
    }
    ++li;
  }

  if (j.contains("quant")) {
    const json& q = j["quant"];
    if (!q.is_object()) throw FormatError("quant must be an object");
    reject_unknown(q, {"b_w", "b_a", "g", "eps"}, "quant");
    d.quant.b_w = get_int(q, "b_w", "quant", false, d.quant.b_w);
    d.quant.b_a = get_int(q, "b_a", "quant", false, d.quant.b_a);
    d.quant.g = get_int(q, "g", "quant", false, d.quant.g);
    d.quant.eps = get_double(q, "eps", "quant", d.quant.eps);
  }
  if (j.contains("sparsity")) {
    const json& s = j["sparsity"];
    if (!s.is_object()) throw FormatError("sparsity must be an object");
    reject_unknown(s, {"alpha", "n", "lambda", "lambda_g", "target_zero_ratio"}, "sparsity");
    d.sparsity.alpha = get_int(s, "alpha", "sparsity", false, d.sparsity.alpha);
    d.sparsity.n = get_int(s, "n", "sparsity", false, d.sparsity.n);
    d.sparsity.lambda = get_double(s, "lambda", "sparsity", d.sparsity.lambda);
    d.sparsity.lambda_g = get_double(s, "lambda_g", "sparsity", d.sparsity.lambda_g);
    d.sparsity.target_zero_ratio =
        get_double(s, "target_zero_ratio", "sparsity", d.sparsity.target_zero_ratio);
  }
  d.quant.validate();
  d.sparsity.validate();
  return d;
}

NetworkDescriptor load_descriptor(const std::string& path) {
  return parse_descriptor(read_text_file(path));
}

NetworkModel build_model(const NetworkDescriptor& d, const std::vector<Tensor>& tensors) {
  NetworkModel m;
  m.in_ch = d.in_ch;
  m.in_h = d.in_h;
  m.in_w = d.in_w;
  size_t ti = 0;
  auto take = [&](const std::string& what) -> const Tensor& {
    if (ti >= tensors.size())
      throw FormatError("weight container ran out of tensors: missing " + what);
    return tensors[ti++];
  };
  auto expect_dims = [](const Tensor& t, const std::vector<int>& dims, const std::string& what) {
    if (t.dims != dims) {
      std::string got = "[", want = "[";
      for (size_t i = 0; i < t.dims.size(); ++i)
        got += (i ? "," : "") + std::to_string(t.dims[i]);
      for (size_t i = 0; i < dims.size(); ++i)
        want += (i ? "," : "") + std::to_string(dims[i]);
      throw FormatError(what + " has shape " + got + "], expected " + want + "]");
    }
  };
  auto take_channel_vec = [&](int out_ch, const std::string& what) {
    const Tensor& t = take(what);
    expect_dims(t, {out_ch}, what);
    return t.data;
  };

  int c = d.in_ch, h = d.in_h, w = d.in_w;
  for (size_t li = 0; li < d.layers.size(); ++li) {
    const LayerDescriptor& ld = d.layers[li];
    const std::string at = " for layer " + std::to_string(li);
    LayerSpec L;
    L.name = ld.name.empty() ? ld.type + std::to_string(li) : ld.name;
    L.relu = ld.has_relu;

    if (ld.type == "conv") {
      L.type = LayerType::conv;
      L.conv = ConvSpec{ld.shape[1], ld.shape[2], c, ld.shape[0], ld.stride, ld.pad};
      const Tensor& wt = take("weights" + at);
      expect_dims(wt, {L.conv.out_ch, L.conv.in_ch, L.conv.kernel_h, L.conv.kernel_w},
                  "weights" + at);
      L.weights = wt;
      L.pool = PoolSpec{ld.pool, ld.pool_stride};
    } else {
      L.type = LayerType::fc;
      const int in_flat = c * h * w;
      if (in_flat <= 0) throw FormatError("flattened input is empty" + at);
      L.conv = ConvSpec{1, 1, in_flat, ld.shape[0], 1, 0};
      const Tensor& wt = take("weights" + at);
      if (wt.dims.size() == 2) {
        expect_dims(wt, {L.conv.out_ch, in_flat}, "weights" + at);
        L.weights = wt;
        L.weights.dims = {L.conv.out_ch, in_flat, 1, 1};
      } else {
        expect_dims(wt, {L.conv.out_ch, in_flat, 1, 1}, "weights" + at);
        L.weights = wt;
      }
    }
    L.bias = take_channel_vec(L.conv.out_ch, "bias" + at);
    if (ld.has_bn) {
      BnParams bn;
      bn.gamma = take_channel_vec(L.conv.out_ch, "gamma" + at);
      bn.beta = take_channel_vec(L.conv.out_ch, "beta" + at);
      bn.mu = take_channel_vec(L.conv.out_ch, "mu" + at);
      bn.sigma2 = take_channel_vec(L.conv.out_ch, "sigma2" + at);
      bn.eps = d.quant.eps;
      L.bn = std::move(bn);
    }

    c = L.conv.out_ch;
    if (L.type == LayerType::fc) {
      h = 1;
      w = 1;
    } else {
      h = L.conv.out_h(h);
      w = L.conv.out_w(w);
      if (L.pool.window > 0 && h >= L.pool.window && w >= L.pool.window) {
        h = (h - L.pool.window) / L.pool.stride + 1;
        w = (w - L.pool.window) / L.pool.stride + 1;
      }
    }
    m.layers.push_back(std::move(L));
  }
  if (ti != tensors.size())
    throw FormatError("weight container has " + std::to_string(tensors.size() - ti) +
                      " unused tensors");
  m.validate();
  return m;
}

// ------------------------------------------------------------- sim reports

namespace {

json counters_to_json(const LayerCounters& c) {
  return json{{"core_cycles", c.core_cycles},
              {"system_cycles", c.system_cycles},
              {"macro_accesses", c.macro_accesses},
              {"groupsets_activated", c.groupsets_activated},
              {"weight_reload_cycles", c.weight_reload_cycles},
              {"fm_reads", c.fm_reads},
              {"fm_writes", c.fm_writes},
              {"tile_stage_words", c.tile_stage_words},
              {"energy", c.energy}};
}

LayerCounters counters_from_json(const json& j) {
  LayerCounters c;
  c.core_cycles = j.value("core_cycles", int64_t{0});
  c.system_cycles = j.value("system_cycles", int64_t{0});
  c.macro_accesses = j.value("macro_accesses", int64_t{0});
  c.groupsets_activated = j.value("groupsets_activated", int64_t{0});
  c.weight_reload_cycles = j.value("weight_reload_cycles", int64_t{0});
  c.fm_reads = j.value("fm_reads", int64_t{0});
  c.fm_writes = j.value("fm_writes", int64_t{0});
  c.tile_stage_words = j.value("tile_stage_words", int64_t{0});
  c.energy = j.value("energy", 0.0);
  return c;
}

json ratio_to_json(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

double ratio_from_json(const json& j, const std::string& key) {
  if (!j.contains(key)) return 1.0;
  if (j[key].is_null()) return std::numeric_limits<double>::infinity();
  return j[key].get<double>();
}

}  // namespace

std::string report_to_json(const SimReport& report, const SimConfig& cfg) {
  json j;
  j["config"] = {{"n_cores", cfg.n_cores},
                 {"reload_cycles_per_groupset", cfg.reload_cycles_per_groupset},
                 {"batch_setup_cycles", cfg.batch_setup_cycles},
                 {"bit_serial", cfg.bit_serial}};
  j["totals"] = {{"sparse", counters_to_json(report.total_sparse)},
                 {"dense", counters_to_json(report.total_dense)},
                 {"speedup_vs_dense", ratio_to_json(report.speedup_vs_dense)},
                 {"fm_access_reduction", ratio_to_json(report.fm_access_reduction)}};
  j["layers"] = json::array();
  for (const LayerReport& l : report.layers) {
    j["layers"].push_back({{"name", l.name},
                           {"out_ch", l.out_ch},
                           {"in_ch", l.in_ch},
                           {"kernel_h", l.kernel_h},
                           {"kernel_w", l.kernel_w},
                           {"stored_sets", l.stored_sets},
                           {"total_sets", l.total_sets},
                           {"sparse", counters_to_json(l.sparse)},
                           {"dense", counters_to_json(l.dense)},
                           {"speedup_vs_dense", ratio_to_json(l.speedup_vs_dense)},
                           {"fm_access_reduction", ratio_to_json(l.fm_access_reduction)}});
  }
  return j.dump(2) + "\n";
}

SimReport report_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("report JSON parse error: ") + e.what());
  }
  SimReport r;
  if (j.contains("totals")) {
    const json& t = j["totals"];
    if (t.contains("sparse")) r.total_sparse = counters_from_json(t["sparse"]);
    if (t.contains("dense")) r.total_dense = counters_from_json(t["dense"]);
    r.speedup_vs_dense = ratio_from_json(t, "speedup_vs_dense");
    r.fm_access_reduction = ratio_from_json(t, "fm_access_reduction");
  }
  if (j.contains("layers"))
    for (const json& jl : j["layers"]) {
      LayerReport l;
      l.name = jl.value("name", std::string{});
      l.out_ch = jl.value("out_ch", 0);
      l.in_ch = jl.value("in_ch", 0);
      l.kernel_h = jl.value("kernel_h", 0);
      l.kernel_w = jl.value("kernel_w", 0);
      l.stored_sets = jl.value("stored_sets", int64_t{0});
      l.total_sets = jl.value("total_sets", int64_t{0});
      if (jl.contains("sparse")) l.sparse = counters_from_json(jl["sparse"]);
      if (jl.contains("dense")) l.dense = counters_from_json(jl["dense"]);
      l.speedup_vs_dense = ratio_from_json(jl, "speedup_vs_dense");
      l.fm_access_reduction = ratio_from_json(jl, "fm_access_reduction");
      r.layers.push_back(std::move(l));
    }
  return r;
}

namespace {

void csv_counters(std::ostringstream& out, const LayerCounters& c) {
  out << ',' << c.core_cycles << ',' << c.system_cycles << ',' << c.macro_accesses << ','
      << c.groupsets_activated << ',' << c.weight_reload_cycles << ',' << c.fm_reads << ','
      << c.fm_writes << ',' << c.tile_stage_words << ',' << fmt_double(c.energy);
}

}  // namespace

std::string report_to_csv(const SimReport& report) {
  std::ostringstream out;
  out << "name,out_ch,in_ch,kernel_h,kernel_w,stored_sets,total_sets";
  for (const char* mode : {"sparse", "dense"})
    out << ',' << mode << "_core_cycles," << mode << "_system_cycles," << mode
        << "_macro_accesses," << mode << "_groupsets_activated," << mode
        << "_weight_reload_cycles," << mode << "_fm_reads," << mode << "_fm_writes," << mode
        << "_tile_stage_words," << mode << "_energy";
  out << ",speedup_vs_dense,fm_access_reduction\n";
  auto ratios = [&](double a, double b) {
    out << ',' << fmt_double(a) << ',' << fmt_double(b) << '\n';
  };
  for (const LayerReport& l : report.layers) {
    out << l.name << ',' << l.out_ch << ',' << l.in_ch << ',' << l.kernel_h << ',' << l.kernel_w
        << ',' << l.stored_sets << ',' << l.total_sets;
    csv_counters(out, l.sparse);
    csv_counters(out, l.dense);
    ratios(l.speedup_vs_dense, l.fm_access_reduction);
  }
  out << "TOTAL,,,,,,";
  csv_counters(out, report.total_sparse);
  csv_counters(out, report.total_dense);
  ratios(report.speedup_vs_dense, report.fm_access_reduction);
  return out.str();
}

std::string storage_to_csv(const std::vector<std::pair<std::string, StorageReport>>& rows) {
  std::ostringstream out;
  out << "name,original_mb,weight_kb,index_kb,zero_groupset_ratio,compression_rate\n";
  int64_t original = 0;
  double weight = 0.0, index = 0.0;
  for (const auto& [name, r] : rows) {
    out << name << ',' << fmt_double(r.original_mb()) << ',' << fmt_double(r.weight_kb()) << ','
        << fmt_double(r.index_kb()) << ',' << fmt_double(r.zero_groupset_ratio) << ','
        << fmt_double(r.compression_rate()) << '\n';
    original += r.original_bits;
    weight += r.weight_bits;
    index += r.index_bits;
  }
  StorageReport total;
  total.original_bits = original;
  total.weight_bits = weight;
  total.index_bits = index;
  out << "TOTAL," << fmt_double(total.original_mb()) << ',' << fmt_double(total.weight_kb())
      << ',' << fmt_double(total.index_kb()) << ",,"
      << fmt_double(original > 0 && weight + index > 0 ? total.compression_rate() : 1.0) << '\n';
  return out.str();
}

}  // namespace mars
