#include "mlstmfcn/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <map>
#include <string>

#include "mlstmfcn/error.hpp"
#include "mlstmfcn/fsio.hpp"

namespace mlstmfcn {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'M', 'L', 'F', 'C', 'N', 'C', 'K', 'P'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof v);
}

void put_u64(std::string& out, std::uint64_t v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof v);
}

struct Reader {
  const std::string& bytes;
  std::size_t pos = 0;

  void take(void* dst, std::size_t n, const char* what) {
    if (pos + n > bytes.size()) {
      throw ParseError(std::string("checkpoint truncated while reading ") + what);
    }
    std::memcpy(dst, bytes.data() + pos, n);
    pos += n;
  }
  std::uint32_t u32(const char* what) {
    std::uint32_t v;
    take(&v, sizeof v, what);
    return v;
  }
  std::uint64_t u64(const char* what) {
    std::uint64_t v;
    take(&v, sizeof v, what);
    return v;
  }
  std::string str(std::size_t n, const char* what) {
    std::string s(n, '\0');
    take(s.data(), n, what);
    return s;
  }
};

std::string triple_str(const std::array<std::size_t, 3>& v) {
  return std::to_string(v[0]) + "," + std::to_string(v[1]) + "," + std::to_string(v[2]);
}

std::array<std::size_t, 3> parse_triple(const std::string& text) {
  std::array<std::size_t, 3> out{};
  std::size_t pos = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    std::size_t comma = text.find(',', pos);
    std::string part = text.substr(pos, comma == std::string::npos ? comma : comma - pos);
    out[i] = static_cast<std::size_t>(std::stoull(part));
    if (comma == std::string::npos && i != 2) throw ParseError("checkpoint: bad triple " + text);
    pos = comma + 1;
  }
  return out;
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

KvMap config_to_kv(const ModelConfig& c) {
  KvMap kv;
  kv["num_variables"] = std::to_string(c.num_variables);
  kv["max_length"] = std::to_string(c.max_length);
  kv["num_classes"] = std::to_string(c.num_classes);
  kv["conv_filters"] = triple_str(c.conv_filters);
  kv["conv_kernel_widths"] = triple_str(c.conv_kernel_widths);
  kv["se_reduction"] = std::to_string(c.se_reduction);
  kv["lstm_cells"] = std::to_string(c.lstm_cells);
  kv["attention"] = c.attention ? "1" : "0";
  kv["dropout_rate"] = format_double(c.dropout_rate);
  kv["lstm_stride"] = std::to_string(c.lstm_stride);
  return kv;
}

ModelConfig config_from_kv(const KvMap& kv) {
  ModelConfig c;
  auto need = [&](const char* key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw ParseError(std::string("checkpoint config misses ") + key);
    return it->second;
  };
  c.num_variables = std::stoull(need("num_variables"));
  c.max_length = std::stoull(need("max_length"));
  c.num_classes = std::stoull(need("num_classes"));
  c.conv_filters = parse_triple(need("conv_filters"));
  c.conv_kernel_widths = parse_triple(need("conv_kernel_widths"));
  c.se_reduction = std::stoull(need("se_reduction"));
  c.lstm_cells = std::stoull(need("lstm_cells"));
  c.attention = need("attention") == "1";
  c.dropout_rate = std::stod(need("dropout_rate"));
  c.lstm_stride = std::stoull(need("lstm_stride"));
  return c;
}

}  // namespace

ModelParams allocate_params(const ModelConfig& c) {
  validate(c);
  ModelParams p;
  p.conv1 = ConvBlockParams::make(c.num_variables, c.conv_filters[0], c.conv_kernel_widths[0]);
  p.conv2 = ConvBlockParams::make(c.conv_filters[0], c.conv_filters[1], c.conv_kernel_widths[1]);
  p.conv3 = ConvBlockParams::make(c.conv_filters[1], c.conv_filters[2], c.conv_kernel_widths[2]);
  p.se1 = SEParams::make(c.conv_filters[0], c.se_reduction);
  p.se2 = SEParams::make(c.conv_filters[1], c.se_reduction);
  std::size_t lstm_in = lstm_input_dim(c);
  p.lstm = LSTMParams::make(c.lstm_cells, lstm_in);
  p.has_attention = c.attention;
  if (c.attention) p.attention = AttentionParams::make(c.lstm_cells, c.lstm_cells, c.lstm_cells);
  p.has_reduce = c.lstm_stride > 1;
  if (p.has_reduce) {
    p.reduce_kernels = Tensor({lstm_in, c.lstm_stride, lstm_in});
    p.reduce_bias = Tensor({lstm_in});
  }
  p.dense_weight = Tensor({c.num_classes, c.conv_filters[2] + c.lstm_cells});
  p.dense_bias = Tensor({c.num_classes});
  return p;
}

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config,
                     const ModelParams& params) {
  std::string out;
  out.append(kMagic, sizeof kMagic);
  put_u32(out, kVersion);

  std::string config_text = render_kv(config_to_kv(config));
  put_u64(out, config_text.size());
  out += config_text;

  std::uint32_t count = 0;
  params.for_each_tensor([&](std::string_view, const Tensor&) { ++count; });
  put_u32(out, count);
  params.for_each_tensor([&](std::string_view name, const Tensor& t) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.append(name.data(), name.size());
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put_u64(out, d);
    out.append(reinterpret_cast<const char*>(t.data().data()), t.size() * sizeof(double));
  });
  atomic_write_file(path, out);
}

std::pair<ModelConfig, ModelParams> load_checkpoint(const std::filesystem::path& path) {
  std::string bytes = read_file(path);
  Reader r{bytes};
  char magic[8];
  r.take(magic, sizeof magic, "magic");
  if (std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw ParseError(path.string() + " is not a checkpoint file");
  }
  std::uint32_t version = r.u32("version");
  if (version != kVersion) {
    throw ParseError("unsupported checkpoint version " + std::to_string(version));
  }
  std::uint64_t config_len = r.u64("config length");
  ModelConfig config = config_from_kv(parse_kv(r.str(config_len, "config")));
  ModelParams params = allocate_params(config);

  std::map<std::string, Tensor, std::less<>> tensors;
  std::uint32_t count = r.u32("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str(r.u32("name length"), "tensor name");
    std::uint32_t rank = r.u32("rank");
    std::vector<std::size_t> shape(rank);
    std::size_t volume = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      shape[d] = r.u64("dimension");
      volume *= shape[d];
    }
    std::vector<double> data(volume);
    r.take(data.data(), volume * sizeof(double), "tensor data");
    tensors.emplace(std::move(name), Tensor(std::move(shape), std::move(data)));
  }

  params.for_each_tensor([&](std::string_view name, Tensor& dst) {
    auto it = tensors.find(name);
    if (it == tensors.end()) {
      throw ParseError("checkpoint misses tensor '" + std::string(name) + "'");
    }
    if (!it->second.same_shape(dst)) {
      throw ParseError("checkpoint tensor '" + std::string(name) + "' has shape " +
                       it->second.shape_str() + ", expected " + dst.shape_str());
    }
    dst = std::move(it->second);
    tensors.erase(it);
  });
  if (!tensors.empty()) {
    throw ParseError("checkpoint carries unexpected tensor '" + tensors.begin()->first + "'");
  }
  return {config, params};
}

}  // namespace mlstmfcn
