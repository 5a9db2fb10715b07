#pragma once

#include <string>

#include "ccs/model.hpp"

namespace ccs {

// Container layout: u32 little-endian manifest length, manifest JSON
// {schema_version, config, vocab, tensors:[{name, shape, offset}]}, then the
// raw little-endian float32 tensor data in manifest order.
void save_checkpoint(const std::string& path, const TinyModel& model);
TinyModel load_checkpoint(const std::string& path);

}  // namespace ccs
