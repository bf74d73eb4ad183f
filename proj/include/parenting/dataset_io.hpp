#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "parenting/synth.hpp"

namespace parenting {

inline constexpr int kDatasetFormatVersion = 1;

/// One JSON object per line. The first line is a header naming the format,
/// version, set name and example count; every following line is one example.
void write_dataset(const std::filesystem::path& path, const std::string& name, const std::vector<ProbeExample>& set);
std::vector<ProbeExample> read_dataset(const std::filesystem::path& path);

/// Header with the generator dimensions, then one fact per line.
void write_facts(const std::filesystem::path& path, const FactBase& facts);
FactBase read_facts(const std::filesystem::path& path);

void write_alpha(const std::filesystem::path& path, const FactBase& facts, const AlphaMap& alpha);
AlphaMap read_alpha(const std::filesystem::path& path, const FactBase& facts);

void write_corpus(const std::filesystem::path& path, const std::vector<SupervisedSequence>& corpus);
std::vector<SupervisedSequence> read_corpus(const std::filesystem::path& path);

void write_split(const std::filesystem::path& path, const FactSplit& split);
FactSplit read_split(const std::filesystem::path& path);

}  // namespace parenting
