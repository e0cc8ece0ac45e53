#pragma once

#include "vox/nn.h"

#include <filesystem>
#include <map>
#include <string>

VOX_BEGIN

// Checkpoint layout: `<stem>.manifest` lists "name f32 d0,d1,..." per line in
// blob order; `<stem>.bin` is the little-endian f32 concatenation.
void save_checkpoint(const ParamSet & params, const std::filesystem::path & stem);
// Loads into existing tensors; names, shapes and total byte length must match.
void load_checkpoint(ParamSet & params, const std::filesystem::path & stem);

// Reads every tensor of a checkpoint without a target model.
std::map<std::string, Tensor> read_checkpoint(const std::filesystem::path & stem);
void write_tensors(const std::map<std::string, Tensor> & tensors, const std::filesystem::path & stem);

VOX_END
