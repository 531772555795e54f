#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "neuroens/nn.hpp"

namespace neuroens {

inline constexpr double kDefaultDropout = 0.5;

// Channel count under a width multiplier: ceil(c * w), at least 1.
std::size_t scaled_width(std::size_t channels, double width_multiplier);

// Custom CNN: two conv16 layers and a pool, three conv+pool blocks (32, 64, 128),
// dropout, two conv256 layers and a pool, dropout, flatten, dense 512/128/64/32, softmax head.
NetworkSpec build_custom_cnn(Shape input = {176, 208, 3}, std::size_t num_classes = 4, double width_multiplier = 1.0,
                             double dropout = kDefaultDropout);

// 13 conv layers in blocks 2-2-3-3-3, a pool after each block, two dense layers of 4096, sigmoid head.
NetworkSpec build_vgg16(Shape input = {176, 208, 3}, std::size_t num_classes = 2, double width_multiplier = 1.0);

// conv96 11x11/4, conv256 5x5, conv384, conv384, conv256, dense 4096 x2 with dropout, sigmoid head.
NetworkSpec build_alexnet(Shape input = {176, 208, 3}, std::size_t num_classes = 2, double width_multiplier = 1.0,
                          double dropout = kDefaultDropout);

// name in {custom_cnn, vgg16, alexnet}; throws InvalidArgument for other names.
NetworkSpec build_model(std::string_view name, Shape input, std::size_t num_classes, double width_multiplier,
                        double dropout = kDefaultDropout);

struct LayerTrace {
  std::size_t index = 0;
  LayerKind kind = LayerKind::relu;
  Shape in, out;
  int row = -1;
};

// Throws ShapeFlowBroken naming the offending layer.
std::vector<LayerTrace> infer_shapes(const NetworkSpec& spec);

struct RowTrace {
  int row = 0;
  std::string name;
  Shape in, out;  // per sample, without the batch dimension
};

// Layers merged by their table row, preceded by the "Input Layer" row (row 1).
std::vector<RowTrace> row_trace(const NetworkSpec& spec);

std::string format_trace_table(const std::vector<RowTrace>& rows);
std::string format_trace_csv(const std::vector<RowTrace>& rows);

std::string network_spec_to_json(const NetworkSpec& spec);
NetworkSpec network_spec_from_json(std::string_view text);  // throws InvalidArgument

struct TrainingMetadata {
  std::uint64_t seed = 0;
  std::size_t epochs = 0;
  int best_epoch = -1;
  std::map<std::string, double> metrics;

  friend bool operator==(const TrainingMetadata&, const TrainingMetadata&) = default;
};

struct Checkpoint {
  Network<float> network;
  TrainingMetadata metadata;
};

inline constexpr char kCheckpointMagic[9] = "NNCKPT01";
inline constexpr int kCheckpointFormatVersion = 1;

// 8-byte magic, u32 LE header length, JSON header, raw LE float32 parameters in layer order.
void save_checkpoint(const Network<float>& network, const TrainingMetadata& metadata,
                     const std::filesystem::path& path);
// Throws VersionMismatch, PayloadLengthMismatch, FileNotFound, IoFailure.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace neuroens
