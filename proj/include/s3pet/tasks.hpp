#pragma once

#include <algorithm>
#include <numeric>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "s3pet/backbone.hpp"
#include "s3pet/rng.hpp"

namespace s3pet {

// Reserved token ids shared by every synthetic task.
inline constexpr int kPadToken = 0;
inline constexpr int kBosToken = 1;
inline constexpr int kSepToken = 2;
inline constexpr int kFirstContentToken = 3;

struct Example {
  TokenPair tokens;
  // One entry per decoder position; negative entries are not scored.
  std::vector<int> targets;
};

enum class TaskKind { kSequenceCopy, kParity, kKeyValueRecall };

inline std::string_view to_string(TaskKind k) {
  switch (k) {
    case TaskKind::kSequenceCopy: return "sequence-copy";
    case TaskKind::kParity: return "parity-classification";
    case TaskKind::kKeyValueRecall: return "key-value-recall";
  }
  return "?";
}

inline TaskKind parse_task_kind(std::string_view s) {
  for (auto k : {TaskKind::kSequenceCopy, TaskKind::kParity, TaskKind::kKeyValueRecall}) {
    if (to_string(k) == s) return k;
  }
  throw ConfigError("unknown task kind '" + std::string(s) +
                    "' (valid: sequence-copy, parity-classification, key-value-recall)");
}

struct SyntheticTask {
  TaskKind kind = TaskKind::kKeyValueRecall;
  int vocab_size = 64;
  int seq_len = 13;
  int train_size = 512;
  int val_size = 128;
  int test_size = 256;
  int label_space = 16;
  std::uint64_t seed = 1;

  bool operator==(const SyntheticTask&) const = default;

  // Number of distinct keys in key-value-recall.
  int num_keys() const { return std::min(vocab_size - kFirstContentToken - label_space, 2 * label_space); }
  // Positions whose bits are XOR-ed in parity-classification.
  static constexpr int kParityBits = 2;

  void validate() const {
    if (train_size < 2 || val_size < 1 || test_size < 1) throw ConfigError("task split sizes must be positive (train >= 2)");
    if (seq_len < 1) throw ConfigError("task seq_len must be positive");
    switch (kind) {
      case TaskKind::kParity:
        if (label_space != 2) throw ConfigError("parity-classification needs label_space = 2");
        if (seq_len < kParityBits) throw ConfigError("parity-classification needs seq_len >= 2");
        if (vocab_size < kFirstContentToken + 2) throw ConfigError("vocabulary too small for parity");
        break;
      case TaskKind::kSequenceCopy:
        if (label_space < 2 || label_space > vocab_size - kFirstContentToken) {
          throw ConfigError("sequence-copy label_space must be in [2, vocab_size - 3]");
        }
        break;
      case TaskKind::kKeyValueRecall:
        if (label_space < 2) throw ConfigError("key-value-recall needs label_space >= 2");
        if (seq_len < 3 || seq_len % 2 == 0) throw ConfigError("key-value-recall needs an odd seq_len >= 3");
        if (num_keys() < (seq_len - 1) / 2) {
          throw ConfigError("key-value-recall: vocabulary too small for " + std::to_string((seq_len - 1) / 2) +
                            " distinct keys plus " + std::to_string(label_space) + " values");
        }
        break;
    }
  }

  void check_backbone(const BackboneConfig& b) const {
    if (vocab_size > b.vocab_size) throw ConfigError("task vocabulary exceeds backbone vocabulary");
    if (seq_len > b.max_seq_len) throw ConfigError("task seq_len exceeds backbone max_seq_len");
  }
};

inline void to_json(nlohmann::json& j, const SyntheticTask& t) {
  j = nlohmann::json{{"kind", std::string(to_string(t.kind))},
                     {"vocab_size", t.vocab_size},
                     {"seq_len", t.seq_len},
                     {"train_size", t.train_size},
                     {"val_size", t.val_size},
                     {"test_size", t.test_size},
                     {"label_space", t.label_space},
                     {"seed", t.seed}};
}

struct DataSplit {
  std::vector<Example> train;
  std::vector<Example> delta;  // first half of train, for the inner level
  std::vector<Example> alpha;  // second half of train, for the outer level
  std::vector<Example> val;
  std::vector<Example> test;
};

namespace detail {

// Positions XOR-ed by the parity task, fixed by the task seed.
inline std::vector<int> parity_positions(const SyntheticTask& task) {
  Rng rng(task.seed, "parity-positions");
  std::vector<int> pos(static_cast<std::size_t>(task.seq_len));
  std::iota(pos.begin(), pos.end(), 0);
  std::shuffle(pos.begin(), pos.end(), rng.engine());
  pos.resize(SyntheticTask::kParityBits);
  std::sort(pos.begin(), pos.end());
  return pos;
}

// Value token assigned to each key token, fixed by the task seed.
inline std::vector<int> key_value_table(const SyntheticTask& task) {
  Rng rng(task.seed, "kv-table");
  std::vector<int> table(static_cast<std::size_t>(task.num_keys()));
  for (int& v : table) v = kFirstContentToken + rng.uniform_int(0, task.label_space - 1);
  return table;
}

inline Example make_example(const SyntheticTask& task, Rng& rng, const std::vector<int>& parity_pos,
                            const std::vector<int>& kv_table) {
  Example ex;
  const auto n = static_cast<std::size_t>(task.seq_len);
  switch (task.kind) {
    case TaskKind::kSequenceCopy: {
      ex.tokens.encoder.resize(n);
      for (int& t : ex.tokens.encoder) t = kFirstContentToken + rng.uniform_int(0, task.label_space - 1);
      ex.tokens.decoder.push_back(kBosToken);
      for (std::size_t i = 0; i + 1 < n; ++i) ex.tokens.decoder.push_back(ex.tokens.encoder[i]);
      ex.targets = ex.tokens.encoder;
      break;
    }
    case TaskKind::kParity: {
      ex.tokens.encoder.resize(n);
      for (int& t : ex.tokens.encoder) t = kFirstContentToken + rng.uniform_int(0, 1);
      int bit = 0;
      for (int p : parity_pos) bit ^= ex.tokens.encoder[static_cast<std::size_t>(p)] - kFirstContentToken;
      ex.tokens.decoder = {kBosToken};
      ex.targets = {kFirstContentToken + bit};
      break;
    }
    case TaskKind::kKeyValueRecall: {
      const int pairs = (task.seq_len - 1) / 2;
      const int key_base = kFirstContentToken + task.label_space;
      std::vector<int> keys(kv_table.size());
      std::iota(keys.begin(), keys.end(), 0);
      std::shuffle(keys.begin(), keys.end(), rng.engine());
      keys.resize(static_cast<std::size_t>(pairs));
      for (int k : keys) {
        ex.tokens.encoder.push_back(key_base + k);
        ex.tokens.encoder.push_back(kv_table[static_cast<std::size_t>(k)]);
      }
      const int query = keys[static_cast<std::size_t>(rng.uniform_int(0, pairs - 1))];
      ex.tokens.encoder.push_back(key_base + query);
      ex.tokens.decoder = {key_base + query};
      ex.targets = {kv_table[static_cast<std::size_t>(query)]};
      break;
    }
  }
  return ex;
}

}  // namespace detail

// Label of a parity example recomputed from its tokens; exposed for checks.
inline std::vector<int> parity_positions(const SyntheticTask& task) { return detail::parity_positions(task); }
inline std::vector<int> key_value_table(const SyntheticTask& task) { return detail::key_value_table(task); }

// Draws distinct examples, then splits them into train/val/test. Train is
// further halved into the inner (delta) and outer (alpha) search splits.
inline DataSplit generate_task(const SyntheticTask& task) {
  task.validate();
  const std::vector<int> parity_pos =
      task.kind == TaskKind::kParity ? detail::parity_positions(task) : std::vector<int>{};
  const std::vector<int> kv_table =
      task.kind == TaskKind::kKeyValueRecall ? detail::key_value_table(task) : std::vector<int>{};
  const std::size_t total = static_cast<std::size_t>(task.train_size + task.val_size + task.test_size);
  Rng rng(task.seed, "task-examples");
  std::set<std::pair<std::vector<int>, std::vector<int>>> seen;
  std::vector<Example> pool;
  pool.reserve(total);
  std::size_t attempts = 0;
  while (pool.size() < total) {
    if (++attempts > 50 * total + 1000) {
      throw ConfigError("task space too small for " + std::to_string(total) + " distinct examples");
    }
    Example ex = detail::make_example(task, rng, parity_pos, kv_table);
    if (seen.emplace(ex.tokens.encoder, ex.tokens.decoder).second) pool.push_back(std::move(ex));
  }
  DataSplit split;
  auto take = [&](std::size_t from, int n) {
    return std::vector<Example>(pool.begin() + static_cast<std::ptrdiff_t>(from),
                                pool.begin() + static_cast<std::ptrdiff_t>(from + static_cast<std::size_t>(n)));
  };
  split.train = take(0, task.train_size);
  split.val = take(static_cast<std::size_t>(task.train_size), task.val_size);
  split.test = take(static_cast<std::size_t>(task.train_size + task.val_size), task.test_size);
  const std::size_t half = split.train.size() / 2;
  split.delta.assign(split.train.begin(), split.train.begin() + static_cast<std::ptrdiff_t>(half));
  split.alpha.assign(split.train.begin() + static_cast<std::ptrdiff_t>(half), split.train.end());
  return split;
}

// Endless shuffled pass over a dataset; reshuffles at each epoch boundary.
class BatchStream {
 public:
  BatchStream(const std::vector<Example>& data, std::size_t batch_size, std::uint64_t seed,
              std::string_view name)
      : data_(&data), batch_size_(std::max<std::size_t>(1, std::min(batch_size, data.size()))),
        rng_(seed, name) {
    if (data.empty()) throw ConfigError("batch stream over an empty dataset");
    order_.resize(data.size());
    std::iota(order_.begin(), order_.end(), 0);
    std::shuffle(order_.begin(), order_.end(), rng_.engine());
  }

  std::vector<const Example*> next() {
    std::vector<const Example*> batch;
    batch.reserve(batch_size_);
    while (batch.size() < batch_size_) {
      if (pos_ == order_.size()) {
        std::shuffle(order_.begin(), order_.end(), rng_.engine());
        pos_ = 0;
      }
      batch.push_back(&(*data_)[order_[pos_++]]);
    }
    return batch;
  }

 private:
  const std::vector<Example>* data_;
  std::size_t batch_size_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

}  // namespace s3pet
