#include <numeric>
#include <sstream>
#include <stdexcept>

#include "ciseg/data.hpp"
#include "ciseg/rng.hpp"

namespace ciseg {

std::vector<int> Protocol::classes_through(int step) const {
  std::vector<int> out;
  for (int s = 0; s <= step && s < steps; ++s)
    out.insert(out.end(), step_classes[size_t(s)].begin(), step_classes[size_t(s)].end());
  return out;
}

int Protocol::total_classes() const {
  int n = 0;
  for (const auto& s : step_classes) n += int(s.size());
  return n;
}

namespace {

std::vector<int> parse_step_sizes(const std::string& name) {
  // "B-I (k steps)" or explicit "a-b-c"; a trailing "-0" collapses to a
  // single base step
  std::vector<int> sizes;
  size_t paren = name.find('(');
  std::string head = paren == std::string::npos ? name : name.substr(0, paren);
  std::istringstream hs(head);
  std::vector<long> nums;
  std::string tok;
  while (std::getline(hs, tok, '-')) {
    size_t a = tok.find_first_not_of(" \t");
    size_t b = tok.find_last_not_of(" \t");
    if (a == std::string::npos) throw std::invalid_argument("build_protocol: malformed name '" + name + "'");
    tok = tok.substr(a, b - a + 1);
    try {
      size_t pos = 0;
      long v = std::stol(tok, &pos);
      if (pos != tok.size() || v < 0) throw std::invalid_argument("");
      nums.push_back(v);
    } catch (...) {
      throw std::invalid_argument("build_protocol: malformed name '" + name + "'");
    }
  }
  if (nums.empty()) throw std::invalid_argument("build_protocol: malformed name '" + name + "'");

  if (paren != std::string::npos) {
    if (nums.size() != 2)
      throw std::invalid_argument("build_protocol: expected B-I before step count in '" + name + "'");
    std::string rest = name.substr(paren + 1);
    std::istringstream rs(rest);
    int k = 0;
    std::string word;
    if (!(rs >> k) || k < 1 || !(rs >> word) || word.rfind("step", 0) != 0)
      throw std::invalid_argument("build_protocol: malformed step count in '" + name + "'");
    if (k > 1 && nums[1] < 1)
      throw std::invalid_argument("build_protocol: increment must be positive for multi-step '" +
                                  name + "'");
    sizes.push_back(int(nums[0]));
    for (int s = 1; s < k; ++s) sizes.push_back(int(nums[1]));
  } else {
    for (long v : nums) sizes.push_back(int(v));
    // "10-0" style: single step of the base size
    while (sizes.size() > 1 && sizes.back() == 0) sizes.pop_back();
    for (size_t i = 0; i < sizes.size(); ++i)
      if (sizes[i] < 1) throw std::invalid_argument("build_protocol: zero-size step in '" + name + "'");
  }
  return sizes;
}

}  // namespace

Protocol build_protocol(const std::string& name, Setting setting, uint64_t class_order_seed,
                        int vocabulary) {
  std::vector<int> sizes = parse_step_sizes(name);
  int total = std::accumulate(sizes.begin(), sizes.end(), 0);
  if (total > vocabulary)
    throw std::invalid_argument("build_protocol: vocabulary overflow (" + std::to_string(total) +
                                " classes requested, " + std::to_string(vocabulary) +
                                " available)");

  Protocol p;
  p.name = name;
  p.base_classes = sizes[0];
  p.increment = sizes.size() > 1 ? sizes[1] : 0;
  p.steps = int(sizes.size());
  p.setting = setting;
  p.class_order_seed = class_order_seed;

  p.class_order.resize(size_t(vocabulary));
  std::iota(p.class_order.begin(), p.class_order.end(), 0);
  SplitMix64 rng(mix_seed(class_order_seed, 0x0DE2ull));
  for (int i = vocabulary - 1; i > 0; --i) {
    int j = int(rng.next_below(uint64_t(i + 1)));
    std::swap(p.class_order[size_t(i)], p.class_order[size_t(j)]);
  }

  int off = 0;
  for (int sz : sizes) {
    p.step_classes.emplace_back(p.class_order.begin() + off, p.class_order.begin() + off + sz);
    off += sz;
  }
  return p;
}

}  // namespace ciseg
