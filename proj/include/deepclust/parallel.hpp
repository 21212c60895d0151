#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

namespace deepclust {

/// Worker count: DEEPCLUST_THREADS if set and positive, else hardware concurrency.
inline std::size_t thread_count()
{
  if (char const *env = std::getenv("DEEPCLUST_THREADS"))
  {
    try
    {
      long const v = std::stol(env);
      if (v > 0)
      {
        return static_cast<std::size_t>(v);
      }
    }
    catch (std::exception const &)
    {
      // fall through to the hardware default
    }
  }
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

/**
 * Runs body(i) for i in [0, count).
 *
 * Work items are striped over worker threads. Callers keep results
 * deterministic by having each item write only its own output slot and by
 * reducing those slots in index order afterwards; the split into items must
 * not depend on the thread count.
 */
template <typename Body>
void parallel_for(std::size_t count, Body &&body)
{
  std::size_t const workers = std::min(thread_count(), count);
  if (workers <= 1)
  {
    for (std::size_t i = 0; i < count; ++i)
    {
      body(i);
    }
    return;
  }

  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread>        pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w)
  {
    pool.emplace_back([&, w] {
      try
      {
        for (std::size_t i = w; i < count; i += workers)
        {
          body(i);
        }
      }
      catch (...)
      {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto &t : pool)
  {
    t.join();
  }
  for (auto &e : errors)
  {
    if (e)
    {
      std::rethrow_exception(e);
    }
  }
}

}  // namespace deepclust
