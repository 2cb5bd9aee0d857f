#include "resilsim/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <queue>
#include <sstream>
#include <stdexcept>
#include <string>

#include "resilsim/comm.hpp"

namespace resilsim {

int ChunkDag::add_vertex(const ChunkVertex& v) {
  vertices.push_back(v);
  return static_cast<int>(vertices.size()) - 1;
}

void ChunkDag::add_edge(int from, int to, double weight, EdgeKind kind) { edges.push_back({from, to, weight, kind}); }

std::size_t ChunkDag::count(EdgeKind kind) const {
  return static_cast<std::size_t>(
      std::count_if(edges.begin(), edges.end(), [kind](const DagEdge& e) { return e.kind == kind; }));
}

namespace {

std::string describe(const ChunkVertex& v) {
  std::ostringstream os;
  if (v.is_sync())
    os << "AR(stage " << v.stage << ")";
  else
    os << to_string(v.kind) << "(mb " << v.micro_batch << ", stage " << v.stage << ", replica " << v.replica << ")";
  return os.str();
}

std::string find_cycle(const ChunkDag& dag, const std::vector<int>& indeg) {
  const auto n = dag.vertices.size();
  std::vector<std::vector<int>> succ(n);
  for (const auto& e : dag.edges)
    if (indeg[static_cast<std::size_t>(e.from)] > 0 && indeg[static_cast<std::size_t>(e.to)] > 0)
      succ[static_cast<std::size_t>(e.from)].push_back(e.to);
  // Every remaining vertex has a remaining predecessor, so walking backwards
  // would also work; walk forward until a vertex repeats.
  std::vector<int> color(n, 0);
  std::vector<int> stack;
  std::function<bool(int)> dfs = [&](int u) {
    color[static_cast<std::size_t>(u)] = 1;
    stack.push_back(u);
    for (int v : succ[static_cast<std::size_t>(u)]) {
      if (color[static_cast<std::size_t>(v)] == 1) {
        stack.push_back(v);
        return true;
      }
      if (color[static_cast<std::size_t>(v)] == 0 && dfs(v)) return true;
    }
    color[static_cast<std::size_t>(u)] = 2;
    stack.pop_back();
    return false;
  };
  for (std::size_t u = 0; u < n; ++u) {
    if (indeg[u] > 0 && color[u] == 0 && dfs(static_cast<int>(u))) {
      const int repeat = stack.back();
      auto first = std::find(stack.begin(), stack.end(), repeat);
      std::ostringstream os;
      for (auto it = first; it != stack.end(); ++it) {
        if (it != first) os << " -> ";
        os << describe(dag.vertices[static_cast<std::size_t>(*it)]);
      }
      return os.str();
    }
  }
  return "unknown";
}

}  // namespace

CriticalPath critical_path(const ChunkDag& dag) {
  const auto n = dag.vertices.size();
  std::vector<std::vector<std::size_t>> out(n);
  std::vector<int> indeg(n, 0);
  for (std::size_t k = 0; k < dag.edges.size(); ++k) {
    const auto& e = dag.edges[k];
    out[static_cast<std::size_t>(e.from)].push_back(k);
    ++indeg[static_cast<std::size_t>(e.to)];
  }

  CriticalPath cp;
  cp.start.assign(n, 0.0);
  std::vector<std::size_t> ready;
  for (std::size_t v = 0; v < n; ++v)
    if (indeg[v] == 0) ready.push_back(v);

  std::size_t visited = 0;
  while (!ready.empty()) {
    const auto u = ready.back();
    ready.pop_back();
    ++visited;
    const double finish = cp.start[u] + dag.vertices[u].cost;
    cp.makespan = std::max(cp.makespan, finish);
    for (auto k : out[u]) {
      const auto& e = dag.edges[k];
      const auto v = static_cast<std::size_t>(e.to);
      cp.start[v] = std::max(cp.start[v], finish + e.weight);
      if (--indeg[v] == 0) ready.push_back(v);
    }
  }
  if (visited != n) throw std::runtime_error("cycle in chunk DAG: " + find_cycle(dag, indeg));
  return cp;
}

std::vector<std::pair<ChunkKind, int>> stage_order(Schedule schedule, int stage, int pp, int num_micro_batches) {
  if (stage < 0 || stage >= pp) throw std::invalid_argument("stage out of range");
  const int m = num_micro_batches;
  const int warmup = std::min(pp - stage - 1, m);
  std::vector<std::pair<ChunkKind, int>> order;
  auto backward = [&](int j) {
    if (schedule == Schedule::OneFOneB) {
      order.emplace_back(ChunkKind::BW, j);
    } else {
      order.emplace_back(ChunkKind::B, j);
      order.emplace_back(ChunkKind::W, j);
    }
  };
  for (int j = 0; j < warmup; ++j) order.emplace_back(ChunkKind::F, j);
  for (int k = 0; k < m - warmup; ++k) {
    order.emplace_back(ChunkKind::F, warmup + k);
    backward(k);
  }
  for (int j = m - warmup; j < m; ++j) backward(j);
  return order;
}

int PipelineInputs::total_micro_batches() const {
  int n = 0;
  for (const auto& r : micro_batches) n += static_cast<int>(r.size());
  return n;
}

namespace {

constexpr int kSlotF = 0;
constexpr int kSlotB = 1;  // B or merged BW
constexpr int kSlotW = 2;

struct Skeleton {
  ChunkDag dag;                                  // vertices + data edges (owner executors)
  std::vector<std::vector<int>> order;           // per group: vertex ids in schedule order
  std::vector<std::vector<std::vector<int>>> index;  // [group][slot][mb] -> vertex
  std::vector<int> sync;                         // per stage, -1 if absent
  std::vector<std::vector<int>> preds;           // data predecessors per vertex
};

std::size_t gidx(const PipelineInputs& in, int replica, int stage) {
  return static_cast<std::size_t>(replica * in.pp + stage);
}

double edge_weight(const PipelineInputs& in, const ChunkVertex& u, const ChunkVertex& v) {
  if (u.executor == v.executor && u.stage == v.stage) return 0.0;
  if (!in.p2p) return 0.0;
  return in.p2p({u.executor, u.stage}, {v.executor, v.stage});
}

int slot_of(ChunkKind k) {
  switch (k) {
    case ChunkKind::F: return kSlotF;
    case ChunkKind::W: return kSlotW;
    default: return kSlotB;
  }
}

bool is_last_backward(Schedule schedule, ChunkKind k) {
  return schedule == Schedule::OneFOneB ? k == ChunkKind::BW : k == ChunkKind::W;
}

Skeleton make_skeleton(const PipelineInputs& in) {
  if (in.total_micro_batches() == 0) throw std::invalid_argument("zero micro-batches");
  if (static_cast<int>(in.layer_partition.size()) != in.pp)
    throw std::invalid_argument("layer partition size does not match pp");
  if (static_cast<int>(in.micro_batches.size()) != in.dp)
    throw std::invalid_argument("micro-batch lists do not match dp");
  in.model.check();

  Skeleton sk;
  const auto groups = static_cast<std::size_t>(in.dp * in.pp);
  sk.order.resize(groups);
  sk.index.assign(groups, std::vector<std::vector<int>>(3));

  for (int d = 0; d < in.dp; ++d) {
    const int m = static_cast<int>(in.micro_batches[static_cast<std::size_t>(d)].size());
    for (int s = 0; s < in.pp; ++s) {
      auto& idx = sk.index[gidx(in, d, s)];
      for (auto& v : idx) v.assign(static_cast<std::size_t>(m), -1);
      for (auto [kind, j] : stage_order(in.schedule, s, in.pp, m)) {
        ChunkVertex v{kind, j, s, d, d, 0.0};
        const int id = sk.dag.add_vertex(v);
        idx[static_cast<std::size_t>(slot_of(kind))][static_cast<std::size_t>(j)] = id;
        sk.order[gidx(in, d, s)].push_back(id);
      }
    }
  }

  sk.preds.resize(sk.dag.vertices.size());
  auto data = [&](int u, int v) {
    sk.dag.add_edge(u, v, edge_weight(in, sk.dag.vertices[static_cast<std::size_t>(u)],
                                      sk.dag.vertices[static_cast<std::size_t>(v)]),
                    EdgeKind::Data);
    sk.preds[static_cast<std::size_t>(v)].push_back(u);
  };
  for (int d = 0; d < in.dp; ++d) {
    const int m = static_cast<int>(in.micro_batches[static_cast<std::size_t>(d)].size());
    auto at = [&](int s, int slot, int j) {
      return sk.index[gidx(in, d, s)][static_cast<std::size_t>(slot)][static_cast<std::size_t>(j)];
    };
    for (int j = 0; j < m; ++j) {
      for (int s = 1; s < in.pp; ++s) data(at(s - 1, kSlotF, j), at(s, kSlotF, j));
      data(at(in.pp - 1, kSlotF, j), at(in.pp - 1, kSlotB, j));
      for (int s = in.pp - 2; s >= 0; --s) data(at(s + 1, kSlotB, j), at(s, kSlotB, j));
      if (in.schedule == Schedule::ZBH)
        for (int s = 0; s < in.pp; ++s) data(at(s, kSlotB, j), at(s, kSlotW, j));
    }
  }

  sk.sync.assign(static_cast<std::size_t>(in.pp), -1);
  if (!in.sync_cost.empty()) {
    if (static_cast<int>(in.sync_cost.size()) != in.pp) throw std::invalid_argument("sync cost size must be pp");
    for (int s = 0; s < in.pp; ++s) {
      ChunkVertex v{ChunkKind::W, -1, s, -1, -1, in.sync_cost[static_cast<std::size_t>(s)]};
      sk.sync[static_cast<std::size_t>(s)] = sk.dag.add_vertex(v);
    }
    sk.preds.resize(sk.dag.vertices.size());
  }
  return sk;
}

double chunk_cost(const PipelineInputs& in, const ChunkVertex& v) {
  const auto& mb = in.micro_batches[static_cast<std::size_t>(v.replica)][static_cast<std::size_t>(v.micro_batch)];
  const double speed = in.speed({v.executor, v.stage});
  if (!(speed > 0.0))
    throw ExecutionError("stranded workload: stage " + std::to_string(v.stage) + " of replica " +
                         std::to_string(v.executor) + " has failed and its chunks were not migrated");
  return predict_chunk_time(mb, v.kind, in.model, in.layer_partition[static_cast<std::size_t>(v.stage)], speed);
}

}  // namespace

ChunkDag build_dag(const PipelineInputs& in) {
  Skeleton sk = make_skeleton(in);
  for (auto& v : sk.dag.vertices)
    if (!v.is_sync()) v.cost = chunk_cost(in, v);
  for (const auto& ord : sk.order)
    for (std::size_t k = 1; k < ord.size(); ++k) sk.dag.add_edge(ord[k - 1], ord[k], 0.0, EdgeKind::Resource);
  for (int s = 0; s < in.pp; ++s) {
    const int ar = sk.sync[static_cast<std::size_t>(s)];
    if (ar < 0) continue;
    for (int d = 0; d < in.dp; ++d) {
      const auto& ord = sk.order[gidx(in, d, s)];
      if (!ord.empty()) sk.dag.add_edge(ord.back(), ar, 0.0, EdgeKind::Resource);
    }
  }
  return std::move(sk.dag);
}

ExecutionResult execute(const PipelineInputs& in, std::span<const Migration> migrations, const ExecOptions& opts) {
  Skeleton sk = make_skeleton(in);
  auto& verts = sk.dag.vertices;
  const auto nv = verts.size();
  const auto groups = static_cast<std::size_t>(in.dp * in.pp);
  constexpr double kInf = std::numeric_limits<double>::infinity();

  std::vector<bool> started(nv, false), finished(nv, false), away(nv, false);
  std::vector<double> start(nv, 0.0), finish(nv, 0.0);
  std::vector<std::vector<int>> succ(nv);
  for (std::size_t v = 0; v < nv; ++v)
    for (int u : sk.preds[v]) succ[static_cast<std::size_t>(u)].push_back(static_cast<int>(v));

  struct Group {
    std::size_t cursor = 0;
    std::vector<int> inbox;  // migrated-in vertices, arrival order
    bool busy = false;
    double free_at = 0.0;
    int live = 0;
    int queued_forwards = 0;
    int last = -1;
  };
  std::vector<Group> grp(groups);

  ExecutionResult res;
  res.group_busy.assign(groups, 0.0);
  res.peak_live.assign(groups, 0);
  res.replica_finish.assign(static_cast<std::size_t>(in.dp), 0.0);
  ProgressTable table;
  table.delta = opts.delta;
  table.progress.assign(static_cast<std::size_t>(in.dp), std::vector<int>(static_cast<std::size_t>(in.pp), 0));

  std::vector<DagEdge> realized;

  auto failed = [&](std::size_t g) { return !(in.group_speed[g] > 0.0); };

  auto apply_migration = [&](const Migration& m) {
    if (m.source < 0 || m.source >= in.dp || m.executor < 0 || m.executor >= in.dp || m.stage < 0 ||
        m.stage >= in.pp)
      throw std::invalid_argument("migration references an unknown replica or stage");
    if (m.source == m.executor) throw std::invalid_argument("migration source equals executor");
    const auto src = gidx(in, m.source, m.stage);
    const auto dst = gidx(in, m.executor, m.stage);
    if (failed(dst)) throw ExecutionError("migration targets a failed stage group");
    const auto& f_idx = sk.index[src][kSlotF];
    if (m.micro_batch < 0 || m.micro_batch >= static_cast<int>(f_idx.size()))
      throw std::invalid_argument("migration references an unknown micro-batch");
    const int f = f_idx[static_cast<std::size_t>(m.micro_batch)];
    if (away[static_cast<std::size_t>(f)] || started[static_cast<std::size_t>(f)])
      throw std::invalid_argument("micro-batch stage already started or migrated");
    for (int slot : {kSlotF, kSlotB, kSlotW}) {
      const auto& list = sk.index[src][static_cast<std::size_t>(slot)];
      if (list.empty()) continue;
      const int v = list[static_cast<std::size_t>(m.micro_batch)];
      if (v < 0) continue;
      away[static_cast<std::size_t>(v)] = true;
      verts[static_cast<std::size_t>(v)].executor = m.executor;
      grp[dst].inbox.push_back(v);
    }
    ++grp[dst].queued_forwards;
    ++table.progress[static_cast<std::size_t>(m.source)][static_cast<std::size_t>(m.stage)];
    // owed until it runs, so a busy destination stops looking fastest
    --table.progress[static_cast<std::size_t>(m.executor)][static_cast<std::size_t>(m.stage)];
    res.migrations.push_back(m);
  };

  if (opts.memory_capacity > 0) {
    for (int d = 0; d < in.dp; ++d) {
      const int m = static_cast<int>(in.micro_batches[static_cast<std::size_t>(d)].size());
      if (std::min(in.pp, m) > opts.memory_capacity)
        throw std::invalid_argument("memory capacity " + std::to_string(opts.memory_capacity) +
                                    " is below the schedule's warm-up footprint " + std::to_string(std::min(in.pp, m)));
    }
  }

  for (const auto& m : migrations) apply_migration(m);

  if (!opts.planner) {
    for (std::size_t g = 0; g < groups; ++g) {
      if (!failed(g)) continue;
      for (int v : sk.order[g])
        if (!away[static_cast<std::size_t>(v)])
          throw ExecutionError("execution completeness violated: " + describe(verts[static_cast<std::size_t>(v)]) +
                               " left on a failed stage");
    }
  }

  auto ready_time = [&](int v) {
    double rt = 0.0;
    for (int u : sk.preds[static_cast<std::size_t>(v)]) {
      if (!finished[static_cast<std::size_t>(u)]) return kInf;
      rt = std::max(rt, finish[static_cast<std::size_t>(u)] +
                            edge_weight(in, verts[static_cast<std::size_t>(u)], verts[static_cast<std::size_t>(v)]));
    }
    return rt;
  };
  auto memory_ok = [&](std::size_t g, int v) {
    return verts[static_cast<std::size_t>(v)].kind != ChunkKind::F || opts.memory_capacity <= 0 ||
           grp[g].live + 1 <= opts.memory_capacity;
  };

  using Event = std::pair<double, int>;
  std::priority_queue<Event, std::vector<Event>, std::greater<>> events;

  auto dispatch = [&](double now, int trigger) {
    for (std::size_t g = 0; g < groups; ++g) {
      auto& G = grp[g];
      if (G.busy || failed(g)) continue;
      auto& ord = sk.order[g];
      while (G.cursor < ord.size() &&
             (away[static_cast<std::size_t>(ord[G.cursor])] || started[static_cast<std::size_t>(ord[G.cursor])]))
        ++G.cursor;
      int best = -1;
      double best_rt = kInf;
      if (G.cursor < ord.size()) {
        const int head = ord[G.cursor];
        const double rt = ready_time(head);
        if (rt < kInf && memory_ok(g, head)) {
          best = head;
          best_rt = rt;
        }
      }
      for (int v : G.inbox) {
        if (started[static_cast<std::size_t>(v)]) continue;
        const double rt = ready_time(v);
        if (rt < best_rt && memory_ok(g, v)) {
          best = v;
          best_rt = rt;
        }
      }
      if (best < 0) continue;

      const auto b = static_cast<std::size_t>(best);
      auto& vx = verts[b];
      double st = std::max(G.free_at, best_rt);
      if (now > st) {
        st = now;
        if (trigger >= 0) realized.push_back({trigger, best, 0.0, EdgeKind::Resource});
      }
      vx.cost = chunk_cost(in, vx);
      if (opts.noise) vx.cost *= opts.noise(vx);
      started[b] = true;
      start[b] = st;
      G.busy = true;
      if (G.last >= 0) realized.push_back({G.last, best, 0.0, EdgeKind::Resource});
      G.last = best;
      if (vx.kind == ChunkKind::F) {
        ++G.live;
        if (vx.executor != vx.replica) --G.queued_forwards;
        if (opts.memory_capacity > 0 && G.live > opts.memory_capacity)
          throw std::logic_error("memory capacity exceeded");
        res.peak_live[g] = std::max(res.peak_live[g], G.live);
      }
      res.group_busy[g] += vx.cost;
      events.emplace(st + vx.cost, best);
    }
  };

  auto make_view = [&]() {
    SlotView view;
    view.table = table;
    view.capacity = opts.memory_capacity;
    view.pending.resize(groups);
    view.projected_live.resize(groups);
    view.failed.resize(groups);
    for (std::size_t g = 0; g < groups; ++g) {
      view.failed[g] = failed(g);
      view.projected_live[g] = grp[g].live + grp[g].queued_forwards;
      for (int v : sk.order[g]) {
        const auto& vx = verts[static_cast<std::size_t>(v)];
        if (vx.kind == ChunkKind::F && !away[static_cast<std::size_t>(v)] && !started[static_cast<std::size_t>(v)])
          view.pending[g].push_back(vx.micro_batch);
      }
    }
    return view;
  };

  auto plan_slot = [&]() {
    if (!opts.planner) return;
    ++res.slots;
    for (const auto& m : opts.planner(make_view())) apply_migration(m);
  };

  std::vector<int> stage_remaining(static_cast<std::size_t>(in.pp), 0);
  for (const auto& v : verts)
    if (!v.is_sync()) ++stage_remaining[static_cast<std::size_t>(v.stage)];

  auto finish_vertex = [&](double t, int v) {
    const auto vi = static_cast<std::size_t>(v);
    finished[vi] = true;
    finish[vi] = t;
    const auto& vx = verts[vi];
    if (vx.is_sync()) return;
    const auto g = gidx(in, vx.executor, vx.stage);
    grp[g].busy = false;
    grp[g].free_at = t;
    res.replica_finish[static_cast<std::size_t>(vx.executor)] =
        std::max(res.replica_finish[static_cast<std::size_t>(vx.executor)], t);
    if (vx.kind == ChunkKind::F) ++table.progress[static_cast<std::size_t>(vx.executor)][static_cast<std::size_t>(vx.stage)];
    if (is_last_backward(in.schedule, vx.kind)) --grp[g].live;
    if (--stage_remaining[static_cast<std::size_t>(vx.stage)] == 0) {
      const int ar = sk.sync[static_cast<std::size_t>(vx.stage)];
      if (ar >= 0) {
        double st = 0.0;
        for (std::size_t h = 0; h < groups; ++h) {
          if (static_cast<int>(h) % in.pp != vx.stage || grp[h].last < 0) continue;
          realized.push_back({grp[h].last, ar, 0.0, EdgeKind::Resource});
          st = std::max(st, finish[static_cast<std::size_t>(grp[h].last)]);
        }
        started[static_cast<std::size_t>(ar)] = true;
        start[static_cast<std::size_t>(ar)] = st;
        events.emplace(st + verts[static_cast<std::size_t>(ar)].cost, ar);
      }
    }
  };

  plan_slot();
  dispatch(0.0, -1);
  std::size_t done = 0;
  for (;;) {
    // One slot per time instant: every completion at t is booked first.
    while (!events.empty()) {
      const double t = events.top().first;
      int trigger = -1;
      while (!events.empty() && events.top().first == t) {
        const int v = events.top().second;
        events.pop();
        finish_vertex(t, v);
        ++done;
        if (!verts[static_cast<std::size_t>(v)].is_sync()) trigger = v;
      }
      if (trigger >= 0) {
        plan_slot();
        dispatch(t, trigger);
      }
    }
    if (done == nv) break;
    // Stalled: give the planner one more slot before declaring the work stranded.
    const auto started_before = std::count(started.begin(), started.end(), true);
    if (opts.planner) {
      double last_t = 0.0;
      int last_v = -1;
      for (std::size_t v = 0; v < nv; ++v)
        if (finished[v] && finish[v] >= last_t) {
          last_t = finish[v];
          last_v = static_cast<int>(v);
        }
      plan_slot();
      dispatch(last_t, last_v);
    }
    if (std::count(started.begin(), started.end(), true) == started_before) {
      for (std::size_t v = 0; v < nv; ++v)
        if (!started[v])
          throw ExecutionError("stranded workload: " + describe(verts[v]) + " cannot be executed");
    }
  }

  // Realized DAG: data edges re-weighted for the final executors.
  ChunkDag out;
  out.vertices = verts;
  for (const auto& e : sk.dag.edges)
    out.add_edge(e.from, e.to,
                 edge_weight(in, verts[static_cast<std::size_t>(e.from)], verts[static_cast<std::size_t>(e.to)]),
                 EdgeKind::Data);
  for (const auto& e : realized) out.edges.push_back(e);
  auto cp = critical_path(out);
  res.dag = std::move(out);
  res.start = std::move(cp.start);
  res.makespan = cp.makespan;

  for (std::size_t v = 0; v < nv; ++v)
    if (!res.dag.vertices[v].is_sync() && res.dag.vertices[v].kind == ChunkKind::F)
      res.executions.push_back(finished[v] ? 1 : 0);
  return res;
}

}  // namespace resilsim
