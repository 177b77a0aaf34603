#ifndef GCI_THREADS_HPP_
#define GCI_THREADS_HPP_

#include <cstddef>
#include <functional>

namespace gci {

/// Worker cap from the GCI_THREADS environment variable; defaults to 1 so
/// every run is sequential (and therefore byte-deterministic) unless the user
/// opts in. Values < 1 or unparsable fall back to 1.
std::size_t thread_budget();

/// Runs fn(i) for i in [0, n). With a budget of 1 this is a plain loop; with
/// more, indices are partitioned across std::thread workers. fn must write
/// only to its own index's slot (results are reduced sequentially by the
/// caller), which keeps outputs independent of the worker count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace gci

#endif  // GCI_THREADS_HPP_
