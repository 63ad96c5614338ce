#include <algorithm>
#include <map>
#include <set>

#include "misuse/corpus.hpp"
#include "misuse/error.hpp"

namespace misuse {

namespace {

using Itemset = std::vector<ActionId>;  // sorted ascending

bool contains_all(const std::vector<ActionId>& transaction, const Itemset& items) {
  return std::includes(transaction.begin(), transaction.end(), items.begin(), items.end());
}

}  // namespace

std::vector<FrequentItemset> mine_frequent_actionsets(const SessionDataset& dataset,
                                                      double min_support) {
  if (!(min_support > 0.0 && min_support <= 1.0))
    throw InvalidArgument("min_support must lie in (0, 1]");
  std::vector<FrequentItemset> out;
  const std::size_t m = dataset.size();
  if (m == 0) return out;

  std::vector<std::vector<ActionId>> transactions;
  transactions.reserve(m);
  for (const auto& s : dataset.sessions()) {
    std::vector<ActionId> t = s.actions;
    std::sort(t.begin(), t.end());
    t.erase(std::unique(t.begin(), t.end()), t.end());
    transactions.push_back(std::move(t));
  }
  // An itemset is frequent when count / m >= min_support.
  const auto frequent = [&](std::size_t count) {
    return static_cast<double>(count) >= min_support * static_cast<double>(m) - 1e-9;
  };

  std::map<Itemset, std::size_t> level;
  {
    std::map<ActionId, std::size_t> singles;
    for (const auto& t : transactions)
      for (ActionId a : t) ++singles[a];
    for (auto [a, c] : singles)
      if (frequent(c)) level[{a}] = c;
  }

  while (!level.empty()) {
    for (const auto& [items, count] : level) {
      FrequentItemset f;
      for (ActionId a : items) f.actions.push_back(dataset.vocabulary().name(a));
      std::sort(f.actions.begin(), f.actions.end());
      f.count = count;
      f.support = static_cast<double>(count) / static_cast<double>(m);
      out.push_back(std::move(f));
    }

    // Join step: merge sets sharing all but their last element, then prune
    // candidates that have an infrequent subset.
    std::set<Itemset> candidates;
    for (auto a = level.begin(); a != level.end(); ++a) {
      for (auto b = std::next(a); b != level.end(); ++b) {
        const auto& x = a->first;
        const auto& y = b->first;
        if (!std::equal(x.begin(), x.end() - 1, y.begin(), y.end() - 1)) break;
        Itemset cand = x;
        cand.push_back(y.back());
        bool ok = true;
        for (std::size_t drop = 0; drop + 2 < cand.size() && ok; ++drop) {
          Itemset sub;
          for (std::size_t i = 0; i < cand.size(); ++i)
            if (i != drop) sub.push_back(cand[i]);
          ok = level.contains(sub);
        }
        if (ok) candidates.insert(std::move(cand));
      }
    }

    std::map<Itemset, std::size_t> next;
    for (const auto& cand : candidates) {
      std::size_t c = 0;
      for (const auto& t : transactions)
        if (contains_all(t, cand)) ++c;
      if (frequent(c)) next[cand] = c;
    }
    level = std::move(next);
  }

  std::sort(out.begin(), out.end(), [](const FrequentItemset& a, const FrequentItemset& b) {
    if (a.count != b.count) return a.count > b.count;
    return a.actions < b.actions;
  });
  return out;
}

}  // namespace misuse
