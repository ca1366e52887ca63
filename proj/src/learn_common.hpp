#pragma once

// Shared batch-assembly helpers for the learners (internal).

#include <span>
#include <vector>

#include "modac/agent.hpp"
#include "modac/metalearn.hpp"

namespace modac::metalearn::detail {

struct RowRef {
  int chunk;
  int step;
};

// option rows grouped per option, each option's segments contiguous
struct OptionRows {
  std::vector<RowRef> rows;
  std::vector<int> option_offset;  // K+1 offsets into rows
  std::vector<std::vector<const ControlSegment*>> segs;
  int total = 0;
};

inline OptionRows collect_option_rows(std::span<const ControlSegment> segments,
                                      int num_options) {
  OptionRows out;
  out.segs.resize(static_cast<size_t>(num_options));
  for (const auto& seg : segments)
    if (seg.choice < num_options) out.segs[static_cast<size_t>(seg.choice)].push_back(&seg);
  out.option_offset.push_back(0);
  for (int k = 0; k < num_options; ++k) {
    for (const auto* seg : out.segs[static_cast<size_t>(k)])
      for (int t = 0; t < seg->len; ++t) out.rows.push_back({seg->chunk, seg->begin + t});
    out.option_offset.push_back(static_cast<int>(out.rows.size()));
  }
  out.total = static_cast<int>(out.rows.size());
  return out;
}

inline const agent::StepRecord& row_of(std::span<const agent::Chunk> chunks, const RowRef& r) {
  return chunks[static_cast<size_t>(r.chunk)].steps[static_cast<size_t>(r.step)];
}

inline nets::OptionView state_view(std::span<const agent::Chunk> chunks,
                                   std::span<const RowRef> rows) {
  std::vector<const env::GridLayout*> ls;
  std::vector<int> cells;
  ls.reserve(rows.size());
  cells.reserve(rows.size());
  for (const auto& r : rows) {
    const auto& rec = row_of(chunks, r);
    ls.push_back(rec.layout.get());
    cells.push_back(rec.state_cell);
  }
  return env::make_option_view(ls, cells);
}

inline nets::OptionView successor_view(std::span<const agent::Chunk> chunks,
                                       std::span<const RowRef> rows) {
  std::vector<const env::GridLayout*> ls;
  std::vector<int> cells;
  ls.reserve(rows.size());
  cells.reserve(rows.size());
  for (const auto& r : rows) {
    const auto& rec = row_of(chunks, r);
    ls.push_back(rec.layout.get());
    cells.push_back(rec.next_cell);
  }
  return env::make_option_view(ls, cells);
}

inline const agent::StepRecord& segment_last(std::span<const agent::Chunk> chunks,
                                             const ControlSegment& seg) {
  return chunks[static_cast<size_t>(seg.chunk)]
      .steps[static_cast<size_t>(seg.begin + seg.len - 1)];
}

inline std::vector<double> detach_values(const ad::Tensor& t) {
  return {t.data().begin(), t.data().end()};
}

// worker bootstrap values: option head value at each segment's end state,
// zero at episode ends, evaluated without recording
std::vector<double> worker_boot_values(const nets::ParamSet& theta,
                                       const nets::NetworkSpec& spec,
                                       std::span<const agent::Chunk> chunks,
                                       const OptionRows& rows);

}  // namespace modac::metalearn::detail
