#pragma once

#include <cstddef>
#include <functional>
#include <optional>

namespace cbvp {

/// Thread count from an explicit value, then CBVP_THREADS, then the hardware.
std::size_t resolve_threads(std::optional<std::size_t> requested = std::nullopt);

/// Runs body(i) for i in [0, n). Work is split into contiguous blocks so the
/// results written by index do not depend on the thread count. The first
/// exception thrown by any worker is rethrown.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& body);

} // namespace cbvp
