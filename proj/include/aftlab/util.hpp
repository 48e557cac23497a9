// Small shared utilities: deterministic seed derivation, content hashing,
// and an index-based parallel map that keeps results in input order.
#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace aftlab {

// SplitMix64 finalizer; used to derive independent RNG streams from a base
// seed plus a stream tag, so parallel consumers never share a stream.
std::uint64_t mix_seed(std::uint64_t base, std::uint64_t stream);
std::uint64_t mix_seed(std::uint64_t base, std::string_view tag, std::uint64_t index);

// FNV-1a over bytes; stable across platforms, used for config fingerprints.
std::uint64_t fnv1a(std::string_view bytes);

// SHA-1 of a git blob ("blob <len>\0" + content), hex-encoded. Matches
// `git hash-object` so dataset fingerprints can be cross-checked.
std::string git_blob_sha1(std::string_view content);
std::string sha1_hex(std::string_view bytes);

// Runs fn(i) for i in [0, n) on up to `threads` workers. fn must only touch
// its own slot of any shared output. threads <= 1 runs inline.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn);

// Hardware thread count with a sane floor.
int default_workers();

// 53-bit uniform in [0,1) drawn straight from the engine; standard-library
// distributions are implementation-defined, this is not.
double rng_uniform(std::mt19937_64& rng);
// Uniform integer in [lo, hi], inclusive.
int rng_int(std::mt19937_64& rng, int lo, int hi);

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view content);
bool file_exists(const std::string& path);

// Fixed-precision float formatting; all report files go through this so
// reruns are byte-identical.
std::string fmt_double(double v, int precision = 6);

}  // namespace aftlab
