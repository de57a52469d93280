#pragma once

#include <functional>

namespace qesr {

// Runs fn(0..count-1), fanning out over `threads` workers when threads > 1.
// Work items must write only to their own slot so results never depend on
// the schedule. The first exception thrown by any item is rethrown.
void parallel_for(int count, int threads,
                  const std::function<void(int)>& fn);

}  // namespace qesr
