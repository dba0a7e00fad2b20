#pragma once

#include <string>

#include "p2l/flow.hpp"
#include "p2l/guidance.hpp"
#include "p2l/policy.hpp"

namespace p2l {

// Checkpoint layout: magic "P2L1", u64 little-endian manifest byte length,
// JSON manifest, then a contiguous little-endian float64 payload. The
// manifest records schema version, model kind, a config echo and the named
// arrays with byte offsets; flow manifests also pin the bound guidance
// checksum. Round-trips are bitwise.

void save_guidance(const GuidanceModel& model, const std::string& path);
GuidanceModel load_guidance(const std::string& path);

void save_policy(const PolicyModel& model, const std::string& path);
PolicyModel load_policy(const std::string& path);

void save_flow(const FlowModel& model, const std::string& path);
// Refuses (InvalidStateError) when the recorded guidance checksum does not
// match the guidance the flow is being rebound to.
FlowModel load_flow(const std::string& path, const GuidanceModel& guidance);

// FNV-1a 64 over a file's bytes, as a hex string (run-manifest checksums).
std::string file_checksum_hex(const std::string& path);

} // namespace p2l
