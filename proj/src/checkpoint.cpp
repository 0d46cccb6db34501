#include "hydra/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace hydra {

namespace {

constexpr std::string_view kMagic = "HYDRA-PEFT-CHECKPOINT";
constexpr char kHex[] = "0123456789abcdef";

int hex_value(char c) {
  if (c >= '0' && c <= '9') return c - '0';
  if (c >= 'a' && c <= 'f') return c - 'a' + 10;
  return -1;
}

void write_tensor(std::string& out, const std::string& name, const Matrix& m) {
  out += "tensor " + name + " " + std::to_string(m.rows()) + " " + std::to_string(m.cols()) + " ";
  out.reserve(out.size() + m.size() * 16 + 1);
  for (double v : m.data()) out += encode_f64(v);
  out += '\n';
}

// Line cursor that remembers the byte offset of every token for diagnostics.
class Reader {
 public:
  explicit Reader(std::string_view text) : text_(text) {}

  bool at_end() const { return pos_ >= text_.size(); }

  // Splits the next line into whitespace-separated tokens with their offsets.
  std::vector<std::pair<std::string_view, std::size_t>> next_line() {
    if (at_end()) throw ParseError("unexpected end of checkpoint at byte " + std::to_string(pos_), pos_);
    const std::size_t nl = text_.find('\n', pos_);
    if (nl == std::string_view::npos) {
      throw ParseError("truncated checkpoint: missing newline after byte " + std::to_string(pos_), text_.size());
    }
    line_start_ = pos_;
    std::vector<std::pair<std::string_view, std::size_t>> tokens;
    std::size_t i = pos_;
    while (i < nl) {
      while (i < nl && text_[i] == ' ') ++i;
      const std::size_t start = i;
      while (i < nl && text_[i] != ' ') ++i;
      if (i > start) tokens.emplace_back(text_.substr(start, i - start), start);
    }
    pos_ = nl + 1;
    return tokens;
  }

  // Rest of the current line after the first `skip` characters.
  std::string_view line_tail(std::size_t skip) const {
    const std::size_t nl = text_.find('\n', line_start_);
    const std::size_t start = std::min(line_start_ + skip, nl);
    return text_.substr(start, nl - start);
  }

  std::size_t line_start() const { return line_start_; }

 private:
  std::string_view text_;
  std::size_t pos_ = 0;
  std::size_t line_start_ = 0;
};

[[noreturn]] void fail(const std::string& what, std::size_t offset) {
  throw ParseError(what + " at byte " + std::to_string(offset), offset);
}

std::uint64_t parse_u64(std::string_view tok, std::size_t offset) {
  if (tok.empty()) fail("expected an unsigned integer", offset);
  std::uint64_t v = 0;
  for (char c : tok) {
    if (c < '0' || c > '9') fail("invalid unsigned integer '" + std::string(tok) + "'", offset);
    v = v * 10 + static_cast<std::uint64_t>(c - '0');
  }
  return v;
}

struct RawTensor {
  std::string name;
  Matrix value;
};

RawTensor parse_tensor(const std::vector<std::pair<std::string_view, std::size_t>>& tok) {
  if (tok.size() != 5) fail("tensor line needs: tensor <name> <rows> <cols> <data>", tok.front().second);
  const auto rows = parse_u64(tok[2].first, tok[2].second);
  const auto cols = parse_u64(tok[3].first, tok[3].second);
  if (rows == 0 || cols == 0) fail("tensor dimensions must be positive", tok[2].second);
  const auto& [payload, at] = tok[4];
  if (payload.size() != rows * cols * 16) {
    fail("tensor '" + std::string(tok[1].first) + "' payload has " + std::to_string(payload.size()) +
             " hex digits, expected " + std::to_string(rows * cols * 16),
         at + std::min<std::size_t>(payload.size(), rows * cols * 16));
  }
  std::vector<double> data(rows * cols);
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = decode_f64(payload.substr(i * 16, 16), at + i * 16);
  return RawTensor{std::string(tok[1].first), Matrix(rows, cols, std::move(data))};
}

Adapter assemble(const std::string& scheme, double alpha, SplitRouting routing,
                 std::vector<RawTensor>& tensors, std::size_t offset) {
  auto take = [&](const std::string& name) -> Matrix {
    for (auto& t : tensors) {
      if (t.name == name) return std::move(t.value);
    }
    fail("adapter is missing tensor '" + name + "'", offset);
  };
  auto count_prefix = [&](char prefix) {
    std::size_t n = 0;
    while (true) {
      const std::string want = std::string(1, prefix) + std::to_string(n);
      bool found = false;
      for (const auto& t : tensors) found = found || t.name == want;
      if (!found) return n;
      ++n;
    }
  };

  Adapter adapter;
  if (scheme == "lora") {
    if (tensors.size() != 2) fail("lora adapter needs exactly tensors A and B", offset);
    LoraAdapter l;
    l.a = take("A");
    l.b = take("B");
    l.alpha = alpha;
    adapter = std::move(l);
  } else if (scheme == "split") {
    const std::size_t n = count_prefix('A');
    if (n == 0 || tensors.size() != 2 * n) fail("split adapter needs tensors A0,B0,...", offset);
    SplitAdapter s;
    s.routing = routing;
    for (std::size_t i = 0; i < n; ++i) {
      LoraAdapter h;
      h.a = take("A" + std::to_string(i));
      h.b = take("B" + std::to_string(i));
      h.alpha = alpha;
      s.heads.push_back(std::move(h));
    }
    adapter = std::move(s);
  } else if (scheme == "hydra") {
    const std::size_t n = count_prefix('B');
    if (n == 0 || tensors.size() != n + 2) fail("hydra adapter needs tensors A, B0.., router", offset);
    HydraAdapter h;
    h.a = take("A");
    for (std::size_t i = 0; i < n; ++i) h.experts.push_back(take("B" + std::to_string(i)));
    h.router = take("router");
    h.alpha = alpha;
    adapter = std::move(h);
  } else {
    fail("unknown adapter scheme '" + scheme + "'", offset);
  }
  try {
    validate(adapter);
  } catch (const std::exception& e) {
    fail(std::string("inconsistent adapter: ") + e.what(), offset);
  }
  return adapter;
}

}  // namespace

const Adapter* Checkpoint::find_adapter(std::string_view name) const {
  for (const auto& [n, a] : adapters)
    if (n == name) return &a;
  return nullptr;
}

const Matrix* Checkpoint::find_tensor(std::string_view name) const {
  for (const auto& [n, m] : tensors)
    if (n == name) return &m;
  return nullptr;
}

std::string encode_f64(double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  std::string out(16, '0');
  for (int byte = 0; byte < 8; ++byte) {
    const auto b = static_cast<unsigned>((bits >> (8 * byte)) & 0xffu);
    out[2 * byte] = kHex[b >> 4];
    out[2 * byte + 1] = kHex[b & 0xfu];
  }
  return out;
}

double decode_f64(std::string_view hex, std::size_t offset) {
  if (hex.size() != 16) fail("float needs 16 hex digits", offset);
  std::uint64_t bits = 0;
  for (int byte = 0; byte < 8; ++byte) {
    const int hi = hex_value(hex[2 * byte]);
    const int lo = hex_value(hex[2 * byte + 1]);
    if (hi < 0 || lo < 0) fail("invalid hex digit", offset + 2 * byte + (hi < 0 ? 0 : 1));
    bits |= static_cast<std::uint64_t>(hi * 16 + lo) << (8 * byte);
  }
  return std::bit_cast<double>(bits);
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  std::string out;
  out += kMagic;
  out += "\nversion " + std::to_string(kCheckpointVersion) + "\n";
  out += "seed " + std::to_string(ckpt.seed) + "\n";
  for (const auto& [key, value] : ckpt.meta) {
    if (key.empty() || key.find_first_of(" \n") != std::string::npos ||
        value.find('\n') != std::string::npos) {
      throw UsageError("checkpoint meta entries must be single-line with a space-free key");
    }
    out += "meta " + key + " " + value + "\n";
  }
  for (const auto& [name, adapter] : ckpt.adapters) {
    if (name.empty() || name.find_first_of(" \n") != std::string::npos) {
      throw UsageError("adapter names must be nonempty and space-free");
    }
    validate(adapter);
    out += "adapter " + name + " " + scheme_name(adapter) + "\n";
    double alpha = 0.0;
    if (const auto* l = std::get_if<LoraAdapter>(&adapter)) alpha = l->alpha;
    if (const auto* h = std::get_if<HydraAdapter>(&adapter)) alpha = h->alpha;
    if (const auto* s = std::get_if<SplitAdapter>(&adapter)) {
      alpha = s->heads.front().alpha;
      for (const auto& head : s->heads) {
        if (std::bit_cast<std::uint64_t>(head.alpha) != std::bit_cast<std::uint64_t>(alpha)) {
          throw UsageError("split heads must share alpha to be checkpointed");
        }
      }
    }
    out += "alpha " + encode_f64(alpha) + "\n";
    if (const auto* s = std::get_if<SplitAdapter>(&adapter)) {
      out += std::string("routing ") + (s->routing == SplitRouting::Task ? "task" : "sum") + "\n";
    }
    for (const auto& [tname, m] : named_tensors(adapter)) write_tensor(out, tname, *m);
    out += "end\n";
  }
  for (const auto& [name, m] : ckpt.tensors) {
    if (name.empty() || name.find_first_of(" \n") != std::string::npos) {
      throw UsageError("tensor names must be nonempty and space-free");
    }
    write_tensor(out, name, m);
  }
  return out;
}

Checkpoint parse_checkpoint(std::string_view text) {
  Reader in(text);
  auto line = in.next_line();
  if (line.size() != 1 || line[0].first != kMagic) fail("missing checkpoint magic", 0);

  line = in.next_line();
  if (line.size() != 2 || line[0].first != "version") fail("expected 'version <n>'", in.line_start());
  const auto version = parse_u64(line[1].first, line[1].second);
  if (version != static_cast<std::uint64_t>(kCheckpointVersion)) {
    throw VersionError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                           std::to_string(kCheckpointVersion) + ") at byte " +
                           std::to_string(line[1].second),
                       line[1].second, static_cast<int>(version));
  }

  Checkpoint ckpt;
  line = in.next_line();
  if (line.size() != 2 || line[0].first != "seed") fail("expected 'seed <n>'", in.line_start());
  ckpt.seed = parse_u64(line[1].first, line[1].second);

  while (!in.at_end()) {
    line = in.next_line();
    if (line.empty()) fail("blank line", in.line_start());
    const auto kind = line[0].first;
    if (kind == "meta") {
      if (line.size() < 2) fail("meta needs a key", in.line_start());
      const std::size_t skip = line[1].second - in.line_start() + line[1].first.size() + 1;
      ckpt.meta[std::string(line[1].first)] = std::string(in.line_tail(skip));
    } else if (kind == "adapter") {
      if (line.size() != 3) fail("adapter line needs: adapter <name> <scheme>", in.line_start());
      const std::size_t block_start = in.line_start();
      const std::string name(line[1].first);
      const std::string scheme(line[2].first);
      double alpha = 0.0;
      bool have_alpha = false;
      SplitRouting routing = SplitRouting::Sum;
      std::vector<RawTensor> tensors;
      while (true) {
        auto inner = in.next_line();
        if (inner.empty()) fail("blank line", in.line_start());
        const auto k = inner[0].first;
        if (k == "end") break;
        if (k == "alpha" && inner.size() == 2) {
          alpha = decode_f64(inner[1].first, inner[1].second);
          have_alpha = true;
        } else if (k == "routing" && inner.size() == 2) {
          if (inner[1].first == "sum") {
            routing = SplitRouting::Sum;
          } else if (inner[1].first == "task") {
            routing = SplitRouting::Task;
          } else {
            fail("unknown routing '" + std::string(inner[1].first) + "'", inner[1].second);
          }
        } else if (k == "tensor") {
          tensors.push_back(parse_tensor(inner));
        } else {
          fail("unexpected '" + std::string(k) + "' inside adapter block", inner[0].second);
        }
      }
      if (!have_alpha) fail("adapter '" + name + "' has no alpha", block_start);
      ckpt.adapters.emplace_back(name, assemble(scheme, alpha, routing, tensors, block_start));
    } else if (kind == "tensor") {
      auto t = parse_tensor(line);
      ckpt.tensors.emplace_back(std::move(t.name), std::move(t.value));
    } else {
      fail("unexpected '" + std::string(kind) + "'", line[0].second);
    }
  }
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  const auto text = serialize_checkpoint(ckpt);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_checkpoint(buf.str());
}

}  // namespace hydra
