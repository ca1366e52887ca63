#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "modac/agent.hpp"
#include "modac/metalearn.hpp"

using namespace modac;

namespace {

struct World {
  env::MultiTaskGrid grid;
  nets::NetworkSpec spec;
  metalearn::ParamBundle bundle;
  std::shared_ptr<agent::EpisodeSource> source;
};

World make_world(int K, std::uint64_t seed = 0) {
  World w;
  w.grid = env::four_rooms();
  w.spec.torso = nets::Torso::kMlp;
  w.spec.mlp_hidden = {16};
  w.spec.num_options = K;
  w.spec.num_actions = 4;
  metalearn::DriverConfig dc;
  dc.spec = w.spec;
  dc.seed = seed;
  w.bundle = metalearn::init_params(dc);
  w.source = std::make_shared<agent::FixedLayoutSource>(w.grid.layout, w.grid.train_tasks);
  return w;
}

agent::ActingNets acting(const World& w) {
  agent::ActingNets an;
  an.spec = &w.spec;
  an.manager = &w.bundle.manager;
  an.options = w.bundle.options ? &*w.bundle.options : nullptr;
  an.rewards = w.bundle.rewards ? &*w.bundle.rewards : nullptr;
  an.terminations = w.bundle.terminations ? &*w.bundle.terminations : nullptr;
  return an;
}

agent::Chunk make_chunk(const std::shared_ptr<const env::GridLayout>& layout,
                        const std::vector<std::tuple<int, bool, bool>>& rows) {
  // (choice, decision, ends_by_termination)
  agent::Chunk ch;
  int cell = layout->open_cells()[0];
  for (const auto& [choice, decision, term] : rows) {
    agent::StepRecord r;
    r.layout = layout;
    r.state_cell = cell;
    r.next_cell = cell;
    r.action = 0;
    r.choice = choice;
    r.decision = decision;
    r.ended_by_termination = term;
    r.beta_sample = term;
    r.beta_value = term ? 1.0 : 0.0;
    r.goal_cell = layout->open_cells()[1];
    ch.steps.push_back(std::move(r));
  }
  ch.boot_cell = cell;
  ch.boot_goal = layout->open_cells()[1];
  ch.boot_layout = layout;
  return ch;
}

}  // namespace

TEST_CASE("choice index decodes unambiguously") {
  agent::ChoiceIndex opt{1, 4};
  CHECK(opt.is_option());
  CHECK(opt.option_id() == 1);
  agent::ChoiceIndex prim{5, 4};
  CHECK_FALSE(prim.is_option());
  CHECK(prim.primitive_action() == 1);
  agent::ChoiceIndex flat0{0, 0};
  CHECK_FALSE(flat0.is_option());
  CHECK(flat0.primitive_action() == 0);
}

TEST_CASE("usage stats hand count") {
  auto layout = env::four_rooms().layout;
  // option0 for 3 steps, then two primitives: 3 decisions total
  auto ch = make_chunk(layout, {{0, true, false},
                                {0, false, false},
                                {0, false, true},
                                {4, true, true},
                                {5, true, true}});
  std::vector<agent::Chunk> chunks{ch};
  auto s = agent::option_usage_stats(chunks, 4, 4);
  CHECK(s.decisions == 3);
  CHECK(s.choice_freq[0] == doctest::Approx(1.0 / 3.0));
  CHECK(s.mean_option_length == doctest::Approx(3.0));
  CHECK(s.option_length_defined);
  CHECK(s.option_step_fraction == doctest::Approx(3.0 / 5.0));
}

TEST_CASE("all-primitive log reports undefined option length as zero with flag") {
  auto layout = env::four_rooms().layout;
  auto ch = make_chunk(layout, {{4, true, true}, {5, true, true}, {6, true, true}});
  std::vector<agent::Chunk> chunks{ch};
  auto s = agent::option_usage_stats(chunks, 4, 4);
  CHECK_FALSE(s.option_length_defined);
  CHECK(s.mean_option_length == 0.0);
  CHECK(s.option_step_fraction == 0.0);
}

TEST_CASE("call and return: one manager decision per invocation") {
  auto w = make_world(4, 3);
  agent::ActorPool pool(4, 20, 100, w.source, 3);
  auto chunks = pool.collect(12, acting(w));
  long decisions = 0, invocations = 0, primitive_steps = 0;
  for (const auto& ch : chunks)
    for (const auto& r : ch.steps) {
      if (r.decision) ++decisions;
      if (r.decision && r.choice < 4) ++invocations;
      if (r.choice >= 4) ++primitive_steps;
    }
  CHECK(decisions == invocations + primitive_steps);

  // fraction of steps under options equals sum of option lengths over total
  auto s = agent::option_usage_stats(chunks, 4, 4);
  long opt_steps = 0, total = 0;
  for (const auto& ch : chunks)
    for (const auto& r : ch.steps) {
      ++total;
      if (r.choice < 4) ++opt_steps;
    }
  CHECK(s.option_step_fraction ==
        doctest::Approx(static_cast<double>(opt_steps) / static_cast<double>(total)));
}

TEST_CASE("forced immediate termination makes every option one step long") {
  auto w = make_world(4, 7);
  // huge positive bias on every termination head: beta ~ 1
  for (auto& [name, t] : w.bundle.terminations->entries)
    if (name.find("beta") != std::string::npos && name.find(".b") != std::string::npos)
      for (auto& v : t.mutable_data()) v = 50.0;
  agent::ActorPool pool(2, 20, 100, w.source, 7);
  auto chunks = pool.collect(6, acting(w));
  for (const auto& ch : chunks)
    for (const auto& r : ch.steps) {
      CHECK(r.decision);  // control returns every step
      if (r.choice < 4) CHECK(r.beta_sample);
    }
  auto s = agent::option_usage_stats(chunks, 4, 4);
  if (s.option_length_defined) CHECK(s.mean_option_length == doctest::Approx(1.0));
}

TEST_CASE("with K=0 acting reduces to a flat rollout") {
  auto w = make_world(0, 9);
  CHECK_FALSE(w.bundle.options.has_value());
  agent::ActorPool pool(2, 20, 100, w.source, 9);
  auto chunks = pool.collect(4, acting(w));
  for (const auto& ch : chunks)
    for (const auto& r : ch.steps) {
      CHECK(r.choice >= 0);
      CHECK(r.choice < 4);  // all primitives
      CHECK(r.decision);
      CHECK(r.ended_by_termination);
    }
}

TEST_CASE("recorded option rewards and terminations replay exactly") {
  auto w = make_world(3, 13);
  agent::ActorPool pool(3, 16, 100, w.source, 13);
  auto chunks = pool.collect(9, acting(w));
  // replay happens on batch-of-one forwards; the batched acting pass may
  // differ in the last ulps from GEMM accumulation order
  ad::RecordPause pause;
  for (const auto& ch : chunks)
    for (const auto& r : ch.steps) {
      if (r.choice >= 3) continue;
      std::vector<int> cell{r.state_cell};
      auto view = env::make_option_view(*r.layout, cell);
      auto rewards = nets::option_reward_forward(*w.bundle.rewards, w.spec, view);
      CHECK(r.option_reward ==
            doctest::Approx(rewards[static_cast<size_t>(r.choice)]
                                .data()[static_cast<size_t>(r.action)])
                .epsilon(1e-12));
      std::vector<int> next{r.next_cell};
      auto nview = env::make_option_view(*r.layout, next);
      auto betas = nets::option_termination_forward(*w.bundle.terminations, w.spec, nview);
      CHECK(r.beta_value ==
            doctest::Approx(betas[static_cast<size_t>(r.choice)].data()[0]).epsilon(1e-12));
    }
}

TEST_CASE("beta sample one means a fresh decision or episode end follows") {
  auto w = make_world(2, 17);
  agent::ActorPool pool(2, 25, 60, w.source, 17);
  auto chunks = pool.collect(8, acting(w));
  for (const auto& ch : chunks)
    for (size_t i = 0; i + 1 < ch.steps.size(); ++i) {
      const auto& r = ch.steps[i];
      const auto& next = ch.steps[i + 1];
      if (r.choice == next.choice || r.episode_end) continue;
      // the active choice changed: the previous step must have released control
      CHECK((r.ended_by_termination || r.episode_end));
      CHECK(next.decision);
    }
}

TEST_CASE("actor pool is deterministic under a fixed seed") {
  auto collect_trace = [](std::uint64_t seed) {
    auto w = make_world(2, seed);
    agent::ActorPool pool(3, 10, 100, w.source, seed);
    auto chunks = pool.collect(6, acting(w));
    std::vector<double> trace;
    for (const auto& ch : chunks)
      for (const auto& r : ch.steps) {
        trace.push_back(r.state_cell);
        trace.push_back(r.action);
        trace.push_back(r.choice);
        trace.push_back(r.beta_value);
        trace.push_back(r.reward);
      }
    return trace;
  };
  CHECK(collect_trace(21) == collect_trace(21));
}

TEST_CASE("trajectory csv export") {
  auto w = make_world(2, 23);
  agent::ActorPool pool(1, 8, 100, w.source, 23);
  auto chunks = pool.collect(2, acting(w));
  const auto path =
      (std::filesystem::temp_directory_path() / "modac_traj_test.csv").string();
  agent::export_trajectory_csv(path, chunks);
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  CHECK(header == "step,x,y,action,reward,active_option");
  int rows = 0;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 16);
  std::filesystem::remove(path);
}

TEST_CASE("option maps carry one action per open cell and betas inside (0,1)") {
  auto w = make_world(4, 29);
  auto maps = agent::option_maps(w.spec, *w.bundle.options, &*w.bundle.terminations,
                                 *w.grid.layout);
  REQUIRE(maps.size() == 4);
  const auto open = w.grid.layout->open_cells();
  for (const auto& m : maps) {
    CHECK(m.cells.size() == open.size());
    CHECK(m.argmax_action.size() == open.size());
    for (int a : m.argmax_action) {
      CHECK(a >= 0);
      CHECK(a < 4);
    }
    for (double b : m.beta) {
      CHECK(b > 0.0);
      CHECK(b < 1.0);
    }
  }
}
