#include <algorithm>
#include <cstring>
#include <fstream>

#include "doctest.h"
#include "neuroens/models.hpp"
#include "test_util.hpp"

using namespace neuroens;

namespace {

struct GoldenRow {
  int row;
  const char* name;
  Shape out;
};

std::size_t count_kind(const NetworkSpec& s, LayerKind k) {
  std::size_t n = 0;
  for (const auto& l : s.layers) n += l.kind == k;
  return n;
}

std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

}  // namespace

TEST_CASE("custom CNN row trace matches the published layer table") {
  const std::vector<GoldenRow> golden = {
      {1, "Input Layer", {176, 208, 3}},     {2, "Conv Layer", {176, 208, 16}},
      {3, "Conv Layer", {176, 208, 16}},     {4, "Max pooling Layer", {88, 104, 16}},
      {5, "Sequential Layer", {44, 52, 32}}, {6, "Sequential Layer", {22, 26, 64}},
      {7, "Sequential Layer", {11, 13, 128}}, {8, "Dropout Layer", {11, 13, 128}},
      {9, "Conv Layer", {11, 13, 256}},      {10, "Conv Layer", {11, 13, 256}},
      {11, "Max pooling Layer", {5, 6, 256}}, {12, "Dropout Layer", {5, 6, 256}},
      {13, "Flatten Layer", {7680}},         {14, "Sequential Layer", {512}},
      {15, "Sequential Layer", {128}},       {16, "Sequential Layer", {64}},
      {17, "Sequential Layer", {32}},        {18, "Dense Layer", {4}},
  };
  auto rows = row_trace(build_custom_cnn());
  REQUIRE(rows.size() == golden.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    CAPTURE(i);
    CHECK(rows[i].row == golden[i].row);
    CHECK(rows[i].name == golden[i].name);
    CHECK(rows[i].out == golden[i].out);
    if (i > 0) CHECK(rows[i].in == rows[i - 1].out);
  }
  CHECK(rows[0].in == Shape{176, 208, 3});
}

TEST_CASE("custom CNN head follows num_classes and the width multiplier") {
  auto two = build_custom_cnn({176, 208, 3}, 2);
  CHECK(row_trace(two).back().out == Shape{2});
  CHECK(two.layers.back().kind == LayerKind::softmax);

  auto small = build_custom_cnn({44, 52, 3}, 2, 0.125);
  auto rows = row_trace(small);
  CHECK(rows[1].out == Shape{44, 52, 2});
  // 44x52 -> pools at 22x26, 11x13, 5x6, 2x3, 1x1 ; 256/8 = 32 channels
  CHECK(rows[12].out == Shape{32});
  CHECK(rows[13].out == Shape{64});
  CHECK(rows[16].out == Shape{4});
  CHECK(rows[17].out == Shape{2});
}

TEST_CASE("scaled_width rounds up and never reaches zero") {
  CHECK(scaled_width(16, 0.125) == 2);
  CHECK(scaled_width(96, 0.125) == 12);
  CHECK(scaled_width(3, 0.125) == 1);
  CHECK(scaled_width(100, 0.3) == 30);
  CHECK(scaled_width(64, 1.0) == 64);
}

TEST_CASE("VGG16 structure") {
  auto s = build_vgg16({44, 52, 3}, 2, 0.125);
  CHECK(count_kind(s, LayerKind::conv2d) == 13);
  CHECK(count_kind(s, LayerKind::maxpool2d) == 5);
  CHECK(count_kind(s, LayerKind::dense) == 3);
  CHECK(count_kind(s, LayerKind::dropout) == 0);
  CHECK(s.layers.front().out_channels == 8);
  CHECK(s.layers.back().kind == LayerKind::sigmoid);
  auto trace = infer_shapes(s);
  CHECK(trace.back().out == Shape{2});
  std::vector<std::size_t> conv_channels;
  for (const auto& l : s.layers)
    if (l.kind == LayerKind::conv2d) conv_channels.push_back(l.out_channels);
  CHECK(conv_channels == std::vector<std::size_t>{8, 8, 16, 16, 32, 32, 32, 64, 64, 64, 64, 64, 64});
  // full width flattens 5x6x512 at 176x208
  auto full = infer_shapes(build_vgg16());
  for (const auto& t : full)
    if (t.kind == LayerKind::flatten) CHECK(t.in == Shape{5, 6, 512});
}

TEST_CASE("AlexNet structure") {
  auto s = build_alexnet();
  CHECK(count_kind(s, LayerKind::conv2d) == 5);
  CHECK(count_kind(s, LayerKind::dense) == 3);
  CHECK(count_kind(s, LayerKind::dropout) == 2);
  CHECK(s.layers[0].out_channels == 96);
  CHECK(s.layers[0].kernel_h == 11);
  CHECK(s.layers[0].stride == 4);
  CHECK(s.layers[0].padding == Padding::valid);
  auto trace = infer_shapes(s);
  // (176 - 11) / 4 + 1 = 42, (208 - 11) / 4 + 1 = 50
  CHECK(trace[0].out == Shape{42, 50, 96});
  CHECK(trace[3].out == Shape{21, 25, 256});
  CHECK(trace.back().out == Shape{2});
  CHECK(s.layers.back().kind == LayerKind::sigmoid);
}

TEST_CASE("builders reject inputs that collapse the shape flow") {
  CHECK(error_code_of([] { build_alexnet({8, 8, 3}); }) == ErrorCode::IncompatibleInput);
  CHECK(error_code_of([] { build_vgg16({16, 16, 3}); }) == ErrorCode::IncompatibleInput);
  CHECK(error_code_of([] { build_custom_cnn({176, 208}); }) == ErrorCode::IncompatibleInput);
  CHECK(error_code_of([] { build_custom_cnn({44, 52, 3}, 2, 0.0); }) == ErrorCode::InvalidArgument);
  CHECK(error_code_of([] { build_model("resnet", {44, 52, 3}, 2, 1.0); }) == ErrorCode::InvalidArgument);
  CHECK(build_model("vgg16", {44, 52, 3}, 2, 0.125) == build_vgg16({44, 52, 3}, 2, 0.125));
}

TEST_CASE("shape inference on hand-written specs") {
  NetworkSpec empty;
  empty.input = {4, 5, 3};
  CHECK(infer_shapes(empty).empty());
  auto rows = row_trace(empty);
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].out == Shape{4, 5, 3});

  NetworkSpec bad;
  bad.input = {4, 4, 1};
  bad.layers = {LayerSpec::flatten(), LayerSpec::conv(2, 3)};
  CHECK(error_code_of([&] { infer_shapes(bad); }) == ErrorCode::ShapeFlowBroken);
}

TEST_CASE("trace formatting") {
  auto rows = row_trace(build_custom_cnn());
  auto csv = format_trace_csv(rows);
  CHECK(csv.starts_with("row,layer,input,output\n1,Input Layer,176x208x3,176x208x3\n"));
  CHECK(csv.find("13,Flatten Layer,5x6x256,7680\n") != std::string::npos);
  auto table = format_trace_table(rows);
  CHECK(table.find("(None, 7680)") != std::string::npos);
  CHECK(std::count(table.begin(), table.end(), '\n') == 19);
}

TEST_CASE("network description JSON round trip") {
  for (const auto& spec : {build_custom_cnn({44, 52, 3}, 2, 0.125), build_vgg16({44, 52, 3}, 2, 0.125),
                           build_alexnet({176, 208, 3}, 2, 0.125)}) {
    CHECK(network_spec_from_json(network_spec_to_json(spec)) == spec);
  }
  CHECK(error_code_of([] { network_spec_from_json("{not json"); }) == ErrorCode::InvalidArgument);
  CHECK(error_code_of([] { network_spec_from_json(R"({"name":"x"})"); }) == ErrorCode::InvalidArgument);
}

TEST_CASE("checkpoint round trip is bit-exact") {
  TempDir dir;
  Network<float> net(build_custom_cnn({44, 52, 3}, 2, 0.125), 17);
  TrainingMetadata meta{99, 12, 7, {{"val_accuracy", 0.875}, {"loss", 0.3125}}};
  save_checkpoint(net, meta, dir / "m.ckpt");
  auto ck = load_checkpoint(dir / "m.ckpt");
  CHECK(ck.metadata == meta);
  CHECK(ck.network.spec() == net.spec());
  auto a = net.flat_parameters(), b = ck.network.flat_parameters();
  REQUIRE(a.size() == b.size());
  CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);

  auto bytes = read_bytes(dir / "m.ckpt");
  CHECK(bytes.substr(0, 8) == "NNCKPT01");
  std::uint32_t len = static_cast<unsigned char>(bytes[8]) | static_cast<unsigned char>(bytes[9]) << 8 |
                      static_cast<unsigned char>(bytes[10]) << 16 | static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[11])) << 24;
  CHECK(bytes.size() == 12 + len + a.size() * 4);
  float first;
  std::memcpy(&first, bytes.data() + 12 + len, 4);
  CHECK(first == a[0]);
  CHECK_FALSE(std::filesystem::exists(dir / "m.ckpt.tmp"));
}

TEST_CASE("checkpoint corruption is detected") {
  TempDir dir;
  Network<float> net(build_custom_cnn({44, 52, 3}, 2, 0.125), 3);
  save_checkpoint(net, {}, dir / "m.ckpt");
  auto bytes = read_bytes(dir / "m.ckpt");

  write_bytes(dir / "short.ckpt", bytes.substr(0, bytes.size() - 4));
  CHECK(error_code_of([&] { load_checkpoint(dir / "short.ckpt"); }) == ErrorCode::PayloadLengthMismatch);
  write_bytes(dir / "long.ckpt", bytes + "abcd");
  CHECK(error_code_of([&] { load_checkpoint(dir / "long.ckpt"); }) == ErrorCode::PayloadLengthMismatch);

  auto magic = bytes;
  magic[7] = '2';
  write_bytes(dir / "magic.ckpt", magic);
  CHECK(error_code_of([&] { load_checkpoint(dir / "magic.ckpt"); }) == ErrorCode::VersionMismatch);

  auto version = bytes;
  auto pos = version.find("\"format_version\":1");
  REQUIRE(pos != std::string::npos);
  version[pos + 17] = '9';
  write_bytes(dir / "version.ckpt", version);
  CHECK(error_code_of([&] { load_checkpoint(dir / "version.ckpt"); }) == ErrorCode::VersionMismatch);

  CHECK(error_code_of([&] { load_checkpoint(dir / "missing.ckpt"); }) == ErrorCode::FileNotFound);
}
