#include "neuroens/models.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "neuroens/error.hpp"

namespace neuroens {

using nlohmann::json;

namespace {

void check_build_args(const Shape& input, std::size_t num_classes, double width) {
  if (input.size() != 3 || input[0] == 0 || input[1] == 0 || input[2] == 0)
    fail(ErrorCode::IncompatibleInput, "input must be (H, W, C) with positive dims, got " + shape_string(input));
  if (num_classes == 0) fail(ErrorCode::InvalidArgument, "num_classes must be positive");
  if (!(width > 0.0 && width <= 1.0)) fail(ErrorCode::InvalidArgument, "width multiplier must lie in (0, 1]");
}

// Runs shape inference, reporting a collapse as an input incompatibility.
NetworkSpec validated(NetworkSpec spec) {
  try {
    infer_shapes(spec);
  } catch (const Error& e) {
    if (e.code() == ErrorCode::ShapeFlowBroken)
      fail(ErrorCode::IncompatibleInput, spec.name + " cannot take input " + shape_string(spec.input) + ": " + e.what());
    throw;
  }
  return spec;
}

class Builder {
 public:
  explicit Builder(NetworkSpec& spec) : spec_(spec) {}

  Builder& row(const char* name) {
    ++row_;
    name_ = name;
    return *this;
  }
  Builder& add(LayerSpec layer) {
    layer.row = row_;
    layer.row_name = name_;
    spec_.layers.push_back(std::move(layer));
    return *this;
  }
  Builder& untracked(LayerSpec layer) {
    spec_.layers.push_back(std::move(layer));
    return *this;
  }

 private:
  NetworkSpec& spec_;
  int row_ = 1;  // row 1 is the input
  std::string name_;
};

const LayerSpec kRelu = LayerSpec::activation(LayerKind::relu);

const char* padding_name(Padding p) { return p == Padding::same ? "same" : "valid"; }

Padding parse_padding(const std::string& s) {
  if (s == "same") return Padding::same;
  if (s == "valid") return Padding::valid;
  fail(ErrorCode::InvalidArgument, "unknown padding '" + s + "'");
}

LayerKind parse_kind(const std::string& s) {
  for (auto k : {LayerKind::conv2d, LayerKind::maxpool2d, LayerKind::relu, LayerKind::sigmoid, LayerKind::softmax,
                 LayerKind::dropout, LayerKind::flatten, LayerKind::dense})
    if (s == layer_kind_name(k)) return k;
  fail(ErrorCode::InvalidArgument, "unknown layer kind '" + s + "'");
}

json spec_json(const NetworkSpec& spec) {
  json layers = json::array();
  for (const auto& l : spec.layers) {
    json j{{"kind", layer_kind_name(l.kind)}};
    switch (l.kind) {
      case LayerKind::conv2d:
        j["out_channels"] = l.out_channels;
        j["kernel"] = {l.kernel_h, l.kernel_w};
        j["stride"] = l.stride;
        j["padding"] = padding_name(l.padding);
        break;
      case LayerKind::maxpool2d:
        j["pool"] = l.pool;
        j["stride"] = l.stride;
        break;
      case LayerKind::dropout: j["rate"] = l.rate; break;
      case LayerKind::dense: j["units"] = l.units; break;
      default: break;
    }
    if (l.row >= 0) {
      j["row"] = l.row;
      j["row_name"] = l.row_name;
    }
    layers.push_back(std::move(j));
  }
  return json{{"name", spec.name},
              {"input", spec.input},
              {"num_classes", spec.num_classes},
              {"width_multiplier", spec.width_multiplier},
              {"layers", std::move(layers)}};
}

NetworkSpec spec_from(const json& j) {
  NetworkSpec spec;
  spec.name = j.at("name").get<std::string>();
  spec.input = j.at("input").get<Shape>();
  spec.num_classes = j.at("num_classes").get<std::size_t>();
  spec.width_multiplier = j.at("width_multiplier").get<double>();
  for (const auto& lj : j.at("layers")) {
    LayerSpec l;
    l.kind = parse_kind(lj.at("kind").get<std::string>());
    switch (l.kind) {
      case LayerKind::conv2d: {
        l.out_channels = lj.at("out_channels").get<std::size_t>();
        auto k = lj.at("kernel").get<std::vector<std::size_t>>();
        if (k.size() != 2) fail(ErrorCode::InvalidArgument, "conv kernel must have two dims");
        l.kernel_h = k[0];
        l.kernel_w = k[1];
        l.stride = lj.at("stride").get<std::size_t>();
        l.padding = parse_padding(lj.at("padding").get<std::string>());
        break;
      }
      case LayerKind::maxpool2d:
        l.pool = lj.at("pool").get<std::size_t>();
        l.stride = lj.at("stride").get<std::size_t>();
        break;
      case LayerKind::dropout: l.rate = lj.at("rate").get<double>(); break;
      case LayerKind::dense: l.units = lj.at("units").get<std::size_t>(); break;
      default: break;
    }
    if (lj.contains("row")) {
      l.row = lj.at("row").get<int>();
      l.row_name = lj.at("row_name").get<std::string>();
    }
    spec.layers.push_back(std::move(l));
  }
  return spec;
}

std::string shape_cell(const Shape& s) {
  std::string out = "(None";
  for (auto d : s) out += ", " + std::to_string(d);
  return out + ")";
}

}  // namespace

std::size_t scaled_width(std::size_t channels, double width_multiplier) {
  auto c = static_cast<std::size_t>(std::ceil(static_cast<double>(channels) * width_multiplier - 1e-9));
  return std::max<std::size_t>(c, 1);
}

NetworkSpec build_custom_cnn(Shape input, std::size_t num_classes, double width, double dropout) {
  check_build_args(input, num_classes, width);
  NetworkSpec spec;
  spec.name = "custom_cnn";
  spec.input = input;
  spec.num_classes = num_classes;
  spec.width_multiplier = width;
  auto w = [&](std::size_t c) { return scaled_width(c, width); };
  Builder b(spec);
  b.row("Conv Layer").add(LayerSpec::conv(w(16), 3)).add(kRelu);
  b.row("Conv Layer").add(LayerSpec::conv(w(16), 3)).add(kRelu);
  b.row("Max pooling Layer").add(LayerSpec::maxpool());
  for (std::size_t c : {32, 64, 128}) b.row("Sequential Layer").add(LayerSpec::conv(w(c), 3)).add(kRelu).add(LayerSpec::maxpool());
  b.row("Dropout Layer").add(LayerSpec::dropout(dropout));
  b.row("Conv Layer").add(LayerSpec::conv(w(256), 3)).add(kRelu);
  b.row("Conv Layer").add(LayerSpec::conv(w(256), 3)).add(kRelu);
  b.row("Max pooling Layer").add(LayerSpec::maxpool());
  b.row("Dropout Layer").add(LayerSpec::dropout(dropout));
  b.row("Flatten Layer").add(LayerSpec::flatten());
  for (std::size_t u : {512, 128, 64, 32}) b.row("Sequential Layer").add(LayerSpec::dense(w(u))).add(kRelu);
  b.row("Dense Layer").add(LayerSpec::dense(num_classes)).add(LayerSpec::activation(LayerKind::softmax));
  return validated(std::move(spec));
}

NetworkSpec build_vgg16(Shape input, std::size_t num_classes, double width) {
  check_build_args(input, num_classes, width);
  NetworkSpec spec;
  spec.name = "vgg16";
  spec.input = input;
  spec.num_classes = num_classes;
  spec.width_multiplier = width;
  Builder b(spec);
  const std::size_t blocks[5][2] = {{2, 64}, {2, 128}, {3, 256}, {3, 512}, {3, 512}};
  for (const auto& blk : blocks) {
    for (std::size_t i = 0; i < blk[0]; ++i) b.untracked(LayerSpec::conv(scaled_width(blk[1], width), 3)).untracked(kRelu);
    b.untracked(LayerSpec::maxpool());
  }
  b.untracked(LayerSpec::flatten());
  for (int i = 0; i < 2; ++i) b.untracked(LayerSpec::dense(scaled_width(4096, width))).untracked(kRelu);
  b.untracked(LayerSpec::dense(num_classes)).untracked(LayerSpec::activation(LayerKind::sigmoid));
  return validated(std::move(spec));
}

NetworkSpec build_alexnet(Shape input, std::size_t num_classes, double width, double dropout) {
  check_build_args(input, num_classes, width);
  NetworkSpec spec;
  spec.name = "alexnet";
  spec.input = input;
  spec.num_classes = num_classes;
  spec.width_multiplier = width;
  auto w = [&](std::size_t c) { return scaled_width(c, width); };
  Builder b(spec);
  b.untracked(LayerSpec::conv(w(96), 11, 4, Padding::valid)).untracked(kRelu).untracked(LayerSpec::maxpool());
  b.untracked(LayerSpec::conv(w(256), 5)).untracked(kRelu).untracked(LayerSpec::maxpool());
  b.untracked(LayerSpec::conv(w(384), 3)).untracked(kRelu);
  b.untracked(LayerSpec::conv(w(384), 3)).untracked(kRelu);
  b.untracked(LayerSpec::conv(w(256), 3)).untracked(kRelu).untracked(LayerSpec::maxpool());
  b.untracked(LayerSpec::flatten());
  for (int i = 0; i < 2; ++i)
    b.untracked(LayerSpec::dense(w(4096))).untracked(kRelu).untracked(LayerSpec::dropout(dropout));
  b.untracked(LayerSpec::dense(num_classes)).untracked(LayerSpec::activation(LayerKind::sigmoid));
  return validated(std::move(spec));
}

NetworkSpec build_model(std::string_view name, Shape input, std::size_t num_classes, double width, double dropout) {
  if (name == "custom_cnn") return build_custom_cnn(std::move(input), num_classes, width, dropout);
  if (name == "vgg16") return build_vgg16(std::move(input), num_classes, width);
  if (name == "alexnet") return build_alexnet(std::move(input), num_classes, width, dropout);
  fail(ErrorCode::InvalidArgument, "unknown model '" + std::string(name) + "' (custom_cnn, vgg16, alexnet)");
}

std::vector<LayerTrace> infer_shapes(const NetworkSpec& spec) {
  std::vector<LayerTrace> trace;
  Shape in = spec.input;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    Shape out = layer_output_shape(spec.layers[i], in, i);
    trace.push_back({i, spec.layers[i].kind, in, out, spec.layers[i].row});
    in = std::move(out);
  }
  return trace;
}

std::vector<RowTrace> row_trace(const NetworkSpec& spec) {
  auto layers = infer_shapes(spec);
  std::vector<RowTrace> rows{{1, "Input Layer", spec.input, spec.input}};
  int last_row = -1;
  for (const auto& t : layers) {
    const auto& l = spec.layers[t.index];
    if (l.row >= 0 && l.row == last_row) {
      rows.back().out = t.out;
      continue;
    }
    rows.push_back({rows.back().row + 1, l.row >= 0 ? l.row_name : layer_kind_name(l.kind), t.in, t.out});
    last_row = l.row;
  }
  return rows;
}

std::string format_trace_table(const std::vector<RowTrace>& rows) {
  std::size_t wname = 5, win = 5;
  for (const auto& r : rows) {
    wname = std::max(wname, r.name.size());
    win = std::max(win, shape_cell(r.in).size());
  }
  std::ostringstream out;
  auto line = [&](const std::string& a, const std::string& b, const std::string& c, const std::string& d) {
    out << a << std::string(5 - std::min<std::size_t>(a.size(), 4), ' ') << b
        << std::string(wname + 2 - b.size(), ' ') << c << std::string(win + 2 - c.size(), ' ') << d << "\n";
  };
  line("row", "layer", "input", "output");
  for (const auto& r : rows) line(std::to_string(r.row), r.name, shape_cell(r.in), shape_cell(r.out));
  return out.str();
}

std::string format_trace_csv(const std::vector<RowTrace>& rows) {
  auto cell = [](const Shape& s) {
    std::string out;
    for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
    return out;
  };
  std::string out = "row,layer,input,output\n";
  for (const auto& r : rows) out += std::to_string(r.row) + "," + r.name + "," + cell(r.in) + "," + cell(r.out) + "\n";
  return out;
}

std::string network_spec_to_json(const NetworkSpec& spec) { return spec_json(spec).dump(); }

NetworkSpec network_spec_from_json(std::string_view text) {
  try {
    return spec_from(json::parse(text));
  } catch (const json::exception& e) {
    fail(ErrorCode::InvalidArgument, std::string("malformed network description: ") + e.what());
  }
}

void save_checkpoint(const Network<float>& network, const TrainingMetadata& metadata,
                     const std::filesystem::path& path) {
  json header{{"format_version", kCheckpointFormatVersion},
              {"architecture", spec_json(network.spec())},
              {"parameter_count", network.parameter_count()},
              {"metadata",
               {{"seed", metadata.seed},
                {"epochs", metadata.epochs},
                {"best_epoch", metadata.best_epoch},
                {"metrics", metadata.metrics}}}};
  std::string text = header.dump();
  auto params = network.flat_parameters();

  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::IoFailure, "cannot open " + tmp.string() + " for writing");
    out.write(kCheckpointMagic, 8);
    auto len = static_cast<std::uint32_t>(text.size());
    out.write(reinterpret_cast<const char*>(&len), 4);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    out.write(reinterpret_cast<const char*>(params.data()), static_cast<std::streamsize>(params.size() * sizeof(float)));
    if (!out) fail(ErrorCode::IoFailure, "write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) fail(ErrorCode::IoFailure, "cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) fail(ErrorCode::FileNotFound, "no checkpoint at " + path.string());
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoFailure, "cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
    fail(ErrorCode::VersionMismatch, path.string() + " is not a " + kCheckpointMagic + " checkpoint");
  std::uint32_t len = 0;
  std::memcpy(&len, bytes.data() + 8, 4);
  if (bytes.size() < 12 + static_cast<std::size_t>(len))
    fail(ErrorCode::PayloadLengthMismatch, "checkpoint header runs past the end of " + path.string());

  json header;
  try {
    header = json::parse(bytes.substr(12, len));
  } catch (const json::exception& e) {
    fail(ErrorCode::VersionMismatch, std::string("unreadable checkpoint header: ") + e.what());
  }
  if (header.value("format_version", -1) != kCheckpointFormatVersion)
    fail(ErrorCode::VersionMismatch, "unsupported checkpoint format version in " + path.string());

  Checkpoint ck;
  try {
    ck.network = Network<float>(spec_from(header.at("architecture")), 0);
    const auto& m = header.at("metadata");
    ck.metadata.seed = m.at("seed").get<std::uint64_t>();
    ck.metadata.epochs = m.at("epochs").get<std::size_t>();
    ck.metadata.best_epoch = m.at("best_epoch").get<int>();
    ck.metadata.metrics = m.at("metrics").get<std::map<std::string, double>>();
  } catch (const json::exception& e) {
    fail(ErrorCode::VersionMismatch, std::string("checkpoint header is missing fields: ") + e.what());
  }
  const std::size_t payload = bytes.size() - 12 - len;
  const std::size_t expected = ck.network.parameter_count();
  if (header.value("parameter_count", std::size_t{0}) != expected || payload != expected * sizeof(float))
    fail(ErrorCode::PayloadLengthMismatch, "checkpoint payload holds " + std::to_string(payload) + " bytes, expected " +
                                               std::to_string(expected * sizeof(float)));
  std::vector<float> params(expected);
  std::memcpy(params.data(), bytes.data() + 12 + len, payload);
  ck.network.set_flat_parameters(params);
  return ck;
}

}  // namespace neuroens
