#include "lmrank/rankgen.hpp"

#include <algorithm>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <thread>

#include "lmrank/error.hpp"

namespace lmrank {

std::string ContextSchema::label() const {
  std::string s = std::to_string(past) + "p";
  if (future > 0) s += "-" + std::to_string(future) + "f";
  return s;
}

OverflowMode parse_overflow_mode(std::string_view name) {
  if (name == "discard") return OverflowMode::discard;
  if (name == "cap") return OverflowMode::cap;
  throw Error(Errc::invalid_argument, "overflow mode must be discard or cap, got '" + std::string(name) + "'");
}

std::string_view overflow_mode_name(OverflowMode mode) {
  return mode == OverflowMode::discard ? "discard" : "cap";
}

void RankBuildConfig::validate() const {
  if (cutoff_q < 2) throw Error(Errc::invalid_argument, "cutoff_q must be >= 2");
  if (k_max < 1 || k_max > 0xFFFF) throw Error(Errc::invalid_argument, "k_max must be in [1, 65535]");
  if (jobs < 1) throw Error(Errc::invalid_argument, "jobs must be >= 1");
  for (std::size_t i = 0; i < schemas.size(); ++i) {
    if (schemas[i].past < 1) throw Error(Errc::invalid_argument, "schema past must be >= 1");
    if (i > 0 && !schema_before(schemas[i - 1], schemas[i]))
      throw Error(Errc::invalid_argument, "schemas must be strictly ordered by (past desc, future desc)");
  }
}

bool ContextTable::window_key(std::span<const TokenId> ids, std::size_t t, ContextSchema schema, Key& key) {
  if (t < schema.past || t + schema.future >= ids.size()) return false;
  key.clear();
  for (std::size_t j = t - schema.past; j < t; ++j) key.push_back(static_cast<char32_t>(ids[j]));
  for (std::size_t j = t + 1; j <= t + schema.future; ++j) key.push_back(static_cast<char32_t>(ids[j]));
  return true;
}

const BranchingSet* ContextTable::find(const Key& key) const {
  auto it = sets_.find(key);
  return it == sets_.end() ? nullptr : &it->second;
}

std::vector<ContextSchema> enumerate_schemas(std::uint32_t max_past, std::uint32_t max_future) {
  if (max_past == 0) throw Error(Errc::invalid_argument, "max_past must be >= 1 (unigrams use no context)");
  std::vector<ContextSchema> out;
  for (std::uint32_t p = max_past; p >= 1; --p)
    for (std::uint32_t f = max_future + 1; f-- > 0;) out.push_back({p, f});
  return out;
}

ContextTable collect_orders(const TokenStream& stream, ContextSchema schema, std::uint32_t cutoff_q,
                            OverflowMode overflow) {
  if (cutoff_q < 2) throw Error(Errc::invalid_argument, "cutoff_q must be >= 2");
  ContextTable table(schema);
  const std::size_t limit = cutoff_q - 1;
  ContextTable::Key key;
  for (std::size_t t = 0; t < stream.size(); ++t) {
    if (!ContextTable::window_key(stream.ids, t, schema, key)) continue;
    BranchingSet& set = table.slot(key);
    if (set.overflowed) continue;
    const TokenId word = stream.ids[t];
    if (std::find(set.members.begin(), set.members.end(), word) != set.members.end()) continue;
    if (set.members.size() < limit) {
      set.members.push_back(word);
    } else if (overflow == OverflowMode::discard) {
      set.overflowed = true;
      set.members.clear();
      set.members.shrink_to_fit();
    }
  }
  return table;
}

namespace {

void check_tables(std::span<const ContextTable> tables, std::span<const ContextSchema> schemas) {
  if (tables.size() != schemas.size())
    throw Error(Errc::invalid_argument, std::to_string(tables.size()) + " tables for " +
                                            std::to_string(schemas.size()) + " schemas");
  for (std::size_t i = 0; i < tables.size(); ++i)
    if (!(tables[i].schema() == schemas[i]))
      throw Error(Errc::invalid_argument, "table " + std::to_string(i) + " holds schema " +
                                              tables[i].schema().label() + ", expected " + schemas[i].label());
}

void merge_rows(const TokenStream& stream, std::span<const ContextTable> tables, RankGroundTruth& out,
                std::size_t begin, std::size_t end) {
  ContextTable::Key key;
  for (std::size_t t = begin; t < end; ++t) {
    out.push(t, stream.ids[t], 0);
    for (const ContextTable& table : tables) {
      if (out.length(t) >= out.k_max()) break;
      if (!ContextTable::window_key(stream.ids, t, table.schema(), key)) continue;
      const BranchingSet* set = table.find(key);
      if (set == nullptr || set->overflowed) continue;
      const auto group_start = static_cast<std::uint16_t>(out.length(t));
      for (TokenId w : set->members) {
        if (out.contains(t, w)) continue;
        if (!out.push(t, w, group_start)) break;
      }
    }
  }
}

template <typename Fn>
void run_workers(unsigned jobs, Fn&& fn) {
  if (jobs <= 1) {
    fn(0u);
    return;
  }
  std::vector<std::thread> workers;
  workers.reserve(jobs);
  for (unsigned w = 0; w < jobs; ++w) workers.emplace_back([&fn, w] { fn(w); });
  for (auto& th : workers) th.join();
}

}  // namespace

RankGroundTruth merge_orders(const TokenStream& stream, std::span<const ContextTable> tables,
                             std::span<const ContextSchema> schemas, std::size_t k_max) {
  check_tables(tables, schemas);
  RankGroundTruth out(stream.size(), k_max, stream.vocab_size);
  merge_rows(stream, tables, out, 0, stream.size());
  return out;
}

RankGroundTruth build_ranks(const TokenStream& stream, const RankBuildConfig& config) {
  config.validate();
  const unsigned jobs = config.jobs;

  // Phase 1: one scan per schema; workers take schemas round-robin.
  std::vector<ContextTable> tables;
  tables.reserve(config.schemas.size());
  for (const auto& s : config.schemas) tables.emplace_back(s);
  const auto scan_workers = static_cast<unsigned>(std::clamp<std::size_t>(tables.size(), 1, jobs));
  run_workers(scan_workers, [&](unsigned w) {
    for (std::size_t i = w; i < tables.size(); i += scan_workers)
      tables[i] = collect_orders(stream, config.schemas[i], config.cutoff_q, config.overflow);
  });

  // Phase 2: disjoint row ranges, schema order fixed within a row.
  RankGroundTruth out(stream.size(), config.k_max, stream.vocab_size);
  const std::size_t T = stream.size();
  const std::size_t chunk = (T + jobs - 1) / jobs;
  run_workers(jobs, [&](unsigned w) {
    const std::size_t begin = std::min(T, w * chunk);
    const std::size_t end = std::min(T, begin + chunk);
    merge_rows(stream, tables, out, begin, end);
  });
  return out;
}

RankGroundTruth brute_force_ranks(const TokenStream& stream, const RankBuildConfig& config) {
  config.validate();
  const std::size_t T = stream.size();
  if (T > kOracleMaxTokens)
    throw Error(Errc::oracle_too_large, std::to_string(T) + " tokens exceeds oracle bound " +
                                            std::to_string(kOracleMaxTokens));

  struct Entry {
    std::vector<TokenId> order;
    std::set<TokenId> seen;
    bool dead = false;
  };
  // (schema index, past words, future words) -> continuation set, all schemas in one map.
  using Key = std::tuple<std::size_t, std::vector<TokenId>, std::vector<TokenId>>;
  std::map<Key, Entry> dict;
  const auto& ids = stream.ids;

  auto context_of = [&](std::size_t t, const ContextSchema& s) -> std::optional<Key> {
    if (t < s.past || t + s.future + 1 > T) return std::nullopt;
    std::vector<TokenId> past(ids.begin() + static_cast<std::ptrdiff_t>(t - s.past),
                              ids.begin() + static_cast<std::ptrdiff_t>(t));
    std::vector<TokenId> future(ids.begin() + static_cast<std::ptrdiff_t>(t + 1),
                                ids.begin() + static_cast<std::ptrdiff_t>(t + 1 + s.future));
    return Key{0, std::move(past), std::move(future)};
  };

  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t si = 0; si < config.schemas.size(); ++si) {
      auto key = context_of(t, config.schemas[si]);
      if (!key) continue;
      std::get<0>(*key) = si;
      Entry& e = dict[*key];
      if (e.dead || e.seen.count(ids[t])) continue;
      if (e.seen.size() + 1 < config.cutoff_q) {
        e.seen.insert(ids[t]);
        e.order.push_back(ids[t]);
      } else if (config.overflow == OverflowMode::discard) {
        e.dead = true;
      }
    }
  }

  RankGroundTruth out(T, config.k_max, stream.vocab_size);
  for (std::size_t t = 0; t < T; ++t) {
    std::vector<TokenId> row{ids[t]};
    std::vector<std::uint16_t> groups{0};
    std::set<TokenId> present{ids[t]};
    for (std::size_t si = 0; si < config.schemas.size() && row.size() < config.k_max; ++si) {
      auto key = context_of(t, config.schemas[si]);
      if (!key) continue;
      std::get<0>(*key) = si;
      auto it = dict.find(*key);
      if (it == dict.end() || it->second.dead) continue;
      const auto start = static_cast<std::uint16_t>(row.size());
      for (TokenId w : it->second.order) {
        if (row.size() == config.k_max) break;
        if (present.insert(w).second) {
          row.push_back(w);
          groups.push_back(start);
        }
      }
    }
    for (std::size_t i = 0; i < row.size(); ++i) out.push(t, row[i], groups[i]);
  }
  return out;
}

namespace {

constexpr std::size_t kCellWidth = 12;

std::string fit_cell(const std::string& word) {
  if (word.size() <= kCellWidth) return word;
  return word.substr(0, kCellWidth - 1) + "~";
}

}  // namespace

std::string render_branching_set(const RankGroundTruth& ranks, const Vocabulary& vocab, std::size_t position,
                                 std::size_t context_width) {
  const std::size_t T = ranks.positions();
  if (position >= T)
    throw Error(Errc::invalid_argument, "position " + std::to_string(position) + " out of range (T=" +
                                            std::to_string(T) + ")");
  const std::size_t width = std::max<std::size_t>(1, context_width);
  const std::size_t first = position >= width / 2 ? position - width / 2 : 0;
  const std::size_t last = std::min(T, first + width);

  std::size_t depth = 1;
  for (std::size_t t = first; t < last; ++t) depth = std::max(depth, ranks.length(t));

  auto cell = [&](std::size_t t, std::size_t slot) -> std::string {
    if (slot >= ranks.length(t)) return "";
    const auto row = ranks.ranks(t);
    const auto grp = ranks.groups(t);
    std::string word = vocab.token(row[slot]);
    if (slot == 0) return fit_cell(word);
    const bool opens = grp[slot] == slot;
    const bool closes = slot + 1 >= ranks.length(t) || grp[slot + 1] != grp[slot];
    return (opens ? "{" : " ") + fit_cell(word) + (closes ? "}" : "");
  };

  std::ostringstream out;
  const int w = static_cast<int>(kCellWidth) + 3;
  out << std::left << std::setw(8) << "pos";
  for (std::size_t t = first; t < last; ++t) {
    std::string head = std::to_string(t);
    if (t == position) head = "[" + head + "]";
    out << "| " << std::setw(w) << head;
  }
  out << '\n';
  for (std::size_t slot = 0; slot < depth; ++slot) {
    out << std::setw(8) << ("rank " + std::to_string(slot + 1));
    for (std::size_t t = first; t < last; ++t) out << "| " << std::setw(w) << cell(t, slot);
    out << '\n';
    if (slot == 0) {
      out << std::string(8, '-');
      for (std::size_t t = first; t < last; ++t) out << "+-" << std::string(static_cast<std::size_t>(w), '-');
      out << '\n';
    }
  }
  return out.str();
}

}  // namespace lmrank
